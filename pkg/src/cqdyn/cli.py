"""Command-line front end.

Exit codes: 0 success or valid, 1 configuration error, 2 invalid couplings
(or a refused run), 3 trade-off boundary, 4 aborted integration.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, ConfigError, build_model, config_from_text, load_config, sweep_values
from .config import MOMENT_DEFAULTS, RUN_DEFAULTS, SWEEP_DEFAULTS
from .generator_jump import JumpKernel, cp_check_kernel
from .hybrid_state import HybridState
from .integrator import StabilityError, evolve, make_evolver
from .moments import ProbeConditionError, estimate_cq_moments
from .scenarios import SCENARIOS, make_generator
from .validity import BOUNDARY, INVALID, VALID, _fmt, _jsonable, check_tradeoff, pawula_scan

EXIT_OK, EXIT_CONFIG, EXIT_INVALID, EXIT_BOUNDARY, EXIT_ABORT = 0, 1, 2, 3, 4
VERDICT_EXIT = {VALID: EXIT_OK, INVALID: EXIT_INVALID, BOUNDARY: EXIT_BOUNDARY}

PLOT_STUB = '''"""Plot the diagnostics written by cqdyn (requires matplotlib)."""
import csv
import sys

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "diagnostics.csv"
with open(path, newline="", encoding="utf-8") as fh:
    rows = list(csv.DictReader(fh))
t = [float(r["t"]) for r in rows]
fig, axes = plt.subplots(3, 1, sharex=True, figsize=(6, 7))
for ax, col in zip(axes, ("trace_err", "min_eig", "purity")):
    ax.plot(t, [float(r[col]) for r in rows])
    ax.set_ylabel(col)
axes[-1].set_xlabel("t")
fig.tight_layout()
fig.savefig(path.rsplit(".", 1)[0] + ".png", dpi=150)
'''


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cqdyn", description="Classical-quantum Markovian dynamics")
    ap.add_argument("--version", action="version", version=f"cqdyn {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--config", help="YAML configuration file")
    src.add_argument("--scenario", help="bundled scenario name (instead of --config)")
    common.add_argument("--out-dir", default="cqdyn-out", help="output directory (default: %(default)s)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--allow-invalid", action="store_true", help="run couplings that fail the validity check")
    common.add_argument("--snapshot-stride", type=int, help="keep every k-th state")
    common.add_argument("--max-steps", type=int, help="hard cap on integration steps")
    for name, helptext in (("check", "certify the couplings"), ("evolve", "integrate and write diagnostics"),
                           ("moments", "estimate Kramers-Moyal coefficients"),
                           ("sweep", "repeat check and evolve over a parameter grid")):
        sub.add_parser(name, parents=[common], help=helptext)
    sub.add_parser("scenarios", help="list bundled scenarios")
    return ap


# --- helpers ----------------------------------------------------------------

def _load(args) -> Config:
    if args.config:
        cfg = load_config(args.config)
    elif args.scenario:
        cfg = config_from_text(f"scenario: {args.scenario}\n", "<--scenario>")
    else:
        raise ConfigError("one of --config or --scenario is required")
    if args.seed is not None:
        cfg.data["seed"] = int(args.seed)
    run = cfg.data.setdefault("run", {}) or {}
    cfg.data["run"] = run
    if args.snapshot_stride is not None:
        run["snapshot_stride"] = int(args.snapshot_stride)
    if args.max_steps is not None:
        run["max_steps"] = int(args.max_steps)
    cfg.resolved()
    return cfg


def _out(args) -> Path:
    p = Path(args.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def certify(model) -> tuple[str, dict]:
    """``(verdict, fields)`` for a coupling set or a jump kernel."""
    if isinstance(model, JumpKernel):
        kc = cp_check_kernel(model)
        d = asdict(kc)
        d["worst_pair"] = list(kc.worst_pair) if kc.worst_pair else []
        verdict = VALID if kc.valid else INVALID
        d["verdict"] = verdict
        return verdict, d
    c = check_tradeoff(model)
    return c.verdict, c.as_dict()


def write_certificate(fields: dict, stem: Path) -> None:
    lines = []
    for k, v in fields.items():
        if isinstance(v, dict):
            lines += [f"{k}.{dk}={_fmt(dv)}" for dk, dv in v.items()]
        else:
            lines.append(f"{k}={_fmt(v)}")
    _write(stem.with_suffix(".txt"), "\n".join(lines) + "\n")
    _write(stem.with_suffix(".json"), json.dumps(_jsonable(fields), indent=2, sort_keys=True) + "\n")


def _run_settings(cfg: Config, default_duration) -> dict:
    run = cfg.section("run", RUN_DEFAULTS)
    T = run["duration"] if run["duration"] is not None else default_duration
    if T is None:
        cfg.fail("missing required field 'duration' in 'run'", "run")
    run["duration"] = float(T)
    cfg.data["run"]["duration"] = float(T)
    return run


def _evolve(model, state, run: dict, keep_snapshots: bool = True):
    gen = make_generator(model, state)
    return evolve(state, gen, run["duration"], run["dt"], snapshot_stride=int(run["snapshot_stride"]),
                  diag_stride=int(run["diag_stride"]), min_eig_stride=int(run["min_eig_stride"]),
                  max_steps=run["max_steps"], stop_below=run["stop_below"], keep_snapshots=keep_snapshots)


def _write_snapshots(traj, out: Path) -> list[Path]:
    d = out / "snapshots"
    d.mkdir(exist_ok=True)
    for old in d.glob("snap_*"):
        old.unlink()
    paths = []
    dt = traj.dt
    for s in traj.snapshots:
        k = int(round((s.time - traj.snapshots[0].time) / dt)) if dt else 0
        if isinstance(s, HybridState):
            p = d / f"snap_{k:08d}.cqs"
            s.save(p)
        else:
            p = d / f"snap_{k:08d}.npy"
            np.save(p, s.rho)
        paths.append(p)
    return paths


# --- commands ---------------------------------------------------------------

def cmd_check(args) -> int:
    cfg = _load(args)
    out = _out(args)
    model, _state, _declared, _T = build_model(cfg)
    verdict, fields = certify(model)
    write_certificate(fields, out / "certificate")
    _write(out / "config.resolved.yaml", cfg.dump())
    margin = fields.get("schur_margin", fields.get("margin"))
    print(f"verdict={verdict} margin={_fmt(float(margin))}")
    return VERDICT_EXIT[verdict]


def cmd_evolve(args) -> int:
    cfg = _load(args)
    out = _out(args)
    model, state, _declared, T = build_model(cfg)
    run = _run_settings(cfg, T)
    verdict, fields = certify(model)
    write_certificate(fields, out / "certificate")
    _write(out / "config.resolved.yaml", cfg.dump())
    if verdict == INVALID and not args.allow_invalid:
        print("refusing to evolve invalid couplings (use --allow-invalid)", file=sys.stderr)
        return EXIT_INVALID
    try:
        traj = _evolve(model, state, run)
    except StabilityError as e:
        cfg.fail(str(e), "run", "dt")
    traj.log.write_csv(out / "diagnostics.csv")
    _write_snapshots(traj, out)
    if isinstance(traj.final, HybridState):
        traj.final.write_marginal_csv(out / "final_marginal.csv")
    _write(out / "plot_diagnostics.py", PLOT_STUB)
    for w in traj.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if traj.aborted:
        print(f"aborted: {traj.abort_reason}", file=sys.stderr)
        return EXIT_ABORT
    last = traj.log.rows[-1]
    print(f"steps={traj.steps} dt={_fmt(traj.dt)} t={_fmt(last[0])} trace_err={_fmt(last[1])}")
    return EXIT_OK


def cmd_moments(args) -> int:
    cfg = _load(args)
    out = _out(args)
    model, state, _declared, _T = build_model(cfg)
    if isinstance(model, JumpKernel):
        cfg.fail("moment estimation needs a continuous model")
    verdict, fields = certify(model)
    write_certificate(fields, out / "certificate")
    _write(out / "config.resolved.yaml", cfg.dump())
    if verdict == INVALID and not args.allow_invalid:
        print("refusing to estimate moments of invalid couplings (use --allow-invalid)", file=sys.stderr)
        return EXIT_INVALID
    mo = cfg.section("moments", MOMENT_DEFAULTS)
    point = state.moments()[0] if mo["point"] is None else mo["point"]
    if len(point) != state.grid.ndim:
        cfg.fail(f"moment point needs {state.grid.ndim} coordinates", "moments", "point")
    ev = make_evolver(make_generator(model, state))
    try:
        res = estimate_cq_moments(ev, state.grid, point, float(mo["dt"]), model.lindblads,
                                  max_order=int(mo["max_order"]), richardson=bool(mo["richardson"]),
                                  probe_levels=min(int(mo["probe_levels"]), model.n_q),
                                  width_extrapolation=bool(mo["width_extrapolation"]))
    except (ProbeConditionError, ValueError) as e:
        cfg.fail(str(e), "moments")
    res.table.write_csv(out / "moments.csv")
    rep = pawula_scan(res.table)
    lines = [f"classification={rep.classification}", f"checked={rep.checked}",
             f"violations={len(rep.violations)}", f"fit_residual={_fmt(res.residual)}",
             f"condition={_fmt(res.condition)}"]
    lines += [f"violation={_fmt(list(map(str, asdict(v).values())))}" for v in rep.violations]
    _write(out / "pawula.txt", "\n".join(lines) + "\n")
    print(f"classification={rep.classification} violations={len(rep.violations)}")
    return EXIT_OK


def _sweep_point(job):
    text, source, param, value, flags = job
    cfg = config_from_text(text, source)
    run_over = {k: v for k, v in flags.items() if v is not None}
    cfg.data.setdefault("run", {})
    cfg.data["run"] = {**(cfg.data["run"] or {}), **run_over}
    sw = cfg.section("sweep", SWEEP_DEFAULTS)
    model, state, _d, T = build_model(cfg, {param: value})
    verdict, fields = certify(model)
    margin = float(fields.get("schur_margin", fields.get("margin")))
    final_me, t_neg = math.nan, math.inf
    if sw["evolve"]:
        traj = _evolve(model, state, _run_settings(cfg, T), keep_snapshots=False)
        me = traj.log.column("min_eig")
        t = traj.log.column("t")
        ok = ~np.isnan(me)
        if ok.any():
            final_me = float(me[ok][-1])
            neg = np.flatnonzero(ok & (me < -float(sw["negativity_threshold"])))
            if neg.size:
                t_neg = float(t[neg[0]])
    return [value, margin, verdict, final_me, t_neg]


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("CQDYN_THREADS")
    limit = os.cpu_count() or 1
    if cap:
        try:
            limit = max(1, int(cap))
        except ValueError:
            raise ConfigError(f"CQDYN_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(limit, n_jobs))


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = _out(args)
    if "sweep" not in cfg.data:
        cfg.fail("missing required field 'sweep'")
    sw = cfg.section("sweep", SWEEP_DEFAULTS)
    values = sweep_values(cfg)
    param = str(sw["parameter"])
    build_model(cfg, {param: values[0]})   # surface config errors before forking
    text = cfg.dump()
    flags = {"snapshot_stride": args.snapshot_stride, "max_steps": args.max_steps}
    jobs = [(text, cfg.source, param, v, flags) for v in values]
    nw = worker_count(len(jobs))
    if nw == 1:
        rows = [_sweep_point(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=nw) as ex:
            rows = list(ex.map(_sweep_point, jobs))
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([param, "schur_margin", "verdict", "final_min_eig", "time_to_negativity"])
        for r in rows:
            w.writerow([_fmt(float(r[0])), _fmt(r[1]), r[2], _fmt(r[3]), _fmt(r[4])])
    _write(out / "config.resolved.yaml", text)
    print(f"points={len(rows)} file={out / 'sweep.csv'}")
    return EXIT_OK


def cmd_scenarios(args) -> int:
    for name in sorted(SCENARIOS):
        s = SCENARIOS[name]
        print(f"{name:28s} {s.kind:10s} {s.declared:9s} {s.description}")
    return EXIT_OK


COMMANDS = {"check": cmd_check, "evolve": cmd_evolve, "moments": cmd_moments, "sweep": cmd_sweep,
            "scenarios": cmd_scenarios}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
