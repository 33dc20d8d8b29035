"""YAML run configuration with line-anchored schema errors.

A configuration either names a bundled scenario and overrides some of its
parameters, or spells out a continuous model explicitly::

    scenario: oscillator-pair
    params: {D2: 0.5}
    run: {duration: 12.566370614359172}

    model:
      grid: {bounds: [[-8, 8]], points: 256, boundary: periodic}
      n_q: 1
      lindblads: []
      D0: []
      D1: [[]]
      drift: {matrix: [[-0.5]]}
      D2: [[0.5]]
      initial: {center: [0.0], width: 0.5}

Operators are written as a name (``position``, ``momentum``, ``number``,
``destroy``, ``identity``, ``sigma_x``, ``sigma_y``, ``sigma_z``,
``oscillator``), a mapping ``{name: ..., scale: s}``, or a nested list of
numbers; complex entries may be strings such as ``"1+2j"``.
"""
from __future__ import annotations

import copy
import inspect
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import quantum_algebra as qa
from . import scenarios
from .generator_continuous import CouplingError, CouplingSet
from .generator_jump import KernelError
from .hybrid_state import make_gaussian_product
from .phase_space import PhaseGrid

RUN_DEFAULTS = {"duration": None, "dt": None, "snapshot_stride": 100, "diag_stride": 1,
                "min_eig_stride": 1, "stop_below": None, "max_steps": None}
MOMENT_DEFAULTS = {"point": None, "dt": 0.02, "max_order": 2, "probe_levels": 4, "richardson": True,
                   "width_extrapolation": False}
SWEEP_DEFAULTS = {"parameter": "tradeoff_ratio", "values": None, "evolve": True,
                  "negativity_threshold": 1e-3}
MODEL_REQUIRED = ("grid", "n_q", "lindblads", "D0", "D1", "drift", "D2")
TOP_KEYS = {"scenario", "params", "model", "run", "moments", "sweep", "seed"}


class ConfigError(ValueError):
    """Configuration cannot be parsed or fails schema validation."""


# --- YAML with line numbers -------------------------------------------------

def _construct(node, path: tuple, lines: dict):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = yaml.safe_load(yaml.serialize(k)) if not isinstance(k, yaml.ScalarNode) else k.value
            if key in out:
                raise ConfigError(f"line {k.start_mark.line + 1}: duplicate key {key!r}")
            out[key] = _construct(v, path + (key,), lines)
            lines[path + (key,)] = k.start_mark.line + 1
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_construct(v, path + (i,), lines) for i, v in enumerate(node.value)]
    return yaml.SafeLoader(yaml.serialize(node)).get_single_data()


def load_yaml(text: str) -> tuple[dict, dict]:
    """Parse YAML text into ``(data, lines)`` with ``lines[path]`` the 1-based line."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigError(f"{where}invalid YAML ({getattr(e, 'problem', e)})") from None
    if node is None:
        raise ConfigError("line 1: configuration is empty")
    lines: dict = {}
    data = _construct(node, (), lines)
    if not isinstance(data, dict):
        raise ConfigError("line 1: configuration must be a mapping")
    return data, lines


# --- resolved configuration -------------------------------------------------

@dataclass
class Config:
    data: dict
    lines: dict
    source: str = "<config>"

    def where(self, *path) -> str:
        for k in range(len(path), -1, -1):
            if tuple(path[:k]) in self.lines:
                return f"{self.source}: line {self.lines[tuple(path[:k])]}"
        return self.source

    def fail(self, msg: str, *path):
        raise ConfigError(f"{self.where(*path)}: {msg}")

    @property
    def seed(self) -> int:
        return int(self.data.get("seed", 0))

    def section(self, name: str, defaults: dict) -> dict:
        sec = self.data.get(name) or {}
        if not isinstance(sec, dict):
            self.fail(f"'{name}' must be a mapping", name)
        unknown = sorted(set(sec) - set(defaults))
        if unknown:
            self.fail(f"unknown field '{unknown[0]}' in '{name}'", name, unknown[0])
        return {**defaults, **sec}

    def resolved(self) -> dict:
        out = copy.deepcopy(self.data)
        out["seed"] = self.seed
        out["run"] = self.section("run", RUN_DEFAULTS)
        if "moments" in self.data:
            out["moments"] = self.section("moments", MOMENT_DEFAULTS)
        if "sweep" in self.data:
            out["sweep"] = self.section("sweep", SWEEP_DEFAULTS)
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.resolved(), sort_keys=True, default_flow_style=None, width=100)


def load_config(path: str | Path) -> Config:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{p}: cannot read ({e.strerror})") from None
    data, lines = load_yaml(text)
    cfg = Config(data, lines, str(p))
    validate(cfg)
    return cfg


def config_from_text(text: str, source: str = "<config>") -> Config:
    data, lines = load_yaml(text)
    cfg = Config(data, lines, source)
    validate(cfg)
    return cfg


def validate(cfg: Config) -> None:
    d = cfg.data
    unknown = sorted(set(d) - TOP_KEYS)
    if unknown:
        cfg.fail(f"unknown top-level field '{unknown[0]}'", unknown[0])
    if ("scenario" in d) == ("model" in d):
        cfg.fail("exactly one of 'scenario' or 'model' is required")
    if "scenario" in d:
        if d["scenario"] not in scenarios.SCENARIOS:
            cfg.fail(f"unknown scenario {d['scenario']!r}; known: {', '.join(sorted(scenarios.SCENARIOS))}",
                     "scenario")
        params = d.get("params") or {}
        if not isinstance(params, dict):
            cfg.fail("'params' must be a mapping", "params")
    else:
        if "params" in d:
            cfg.fail("'params' only applies to scenarios", "params")
        m = d["model"]
        if not isinstance(m, dict):
            cfg.fail("'model' must be a mapping", "model")
        for key in MODEL_REQUIRED:
            if key not in m:
                cfg.fail(f"missing required field '{key}' in 'model'", "model")
    cfg.resolved()
    if "sweep" in d:
        sw = cfg.section("sweep", SWEEP_DEFAULTS)
        if sw["values"] is None:
            cfg.fail("missing required field 'values' in 'sweep'", "sweep")
        sweep_values(cfg)


def sweep_values(cfg: Config) -> list[float]:
    v = cfg.section("sweep", SWEEP_DEFAULTS)["values"]
    if isinstance(v, dict):
        try:
            return [float(x) for x in np.linspace(float(v["start"]), float(v["stop"]), int(v["num"]))]
        except (KeyError, TypeError, ValueError):
            cfg.fail("sweep values must be a list or {start, stop, num}", "sweep", "values")
    if not isinstance(v, list) or not v:
        cfg.fail("sweep values must be a non-empty list", "sweep", "values")
    try:
        return [float(x) for x in v]
    except (TypeError, ValueError):
        cfg.fail("sweep values must be numbers", "sweep", "values")


# --- model construction -----------------------------------------------------

_NAMED = {
    "position": qa.position, "momentum": qa.momentum, "number": qa.number, "destroy": qa.destroy,
    "identity": lambda n: np.eye(n, dtype=complex),
    "oscillator": lambda n: qa.oscillator_hamiltonian(n, 1.0),
}
_PAULI = {"sigma_x": 0, "sigma_y": 1, "sigma_z": 2}


def _number(x, cfg, path):
    try:
        return complex(str(x).replace(" ", "")) if isinstance(x, str) else complex(x)
    except (TypeError, ValueError):
        cfg.fail(f"{x!r} is not a number", *path)


def _array(x, cfg, path, shape=None, real=False):
    def conv(v, p):
        if isinstance(v, list):
            return [conv(e, p + (i,)) for i, e in enumerate(v)]
        return _number(v, cfg, p)
    a = np.array(conv(x, path), dtype=complex)
    if real:
        if np.any(a.imag != 0):
            cfg.fail("entries must be real", *path)
        a = a.real
    if shape is not None and a.shape != shape:
        if a.size == 0 and math.prod(shape) == 0:
            return a.reshape(shape)
        cfg.fail(f"expected shape {shape}, got {a.shape}", *path)
    return a


def _operator(spec, n, cfg, path) -> np.ndarray:
    scale = 1.0
    if isinstance(spec, dict):
        if "name" not in spec:
            cfg.fail("operator mapping needs a 'name'", *path)
        scale = _number(spec.get("scale", 1.0), cfg, path + ("scale",))
        spec = spec["name"]
    if isinstance(spec, str):
        if spec in _NAMED:
            return scale * _NAMED[spec](n)
        if spec in _PAULI:
            if n != 2:
                cfg.fail(f"{spec} needs n_q = 2, got {n}", *path)
            return scale * qa.pauli_basis()[_PAULI[spec]]
        cfg.fail(f"unknown operator {spec!r}", *path)
    return scale * _array(spec, cfg, path, (n, n))


def _quantum_state(spec, n, cfg, path, rng) -> np.ndarray:
    if spec is None:
        return qa.projector(qa.ket(n, 0))
    if isinstance(spec, dict) and len(spec) == 1:
        (k, v), = spec.items()
        if k == "ket":
            return qa.projector(qa.ket(n, int(v)))
        if k == "coherent":
            return qa.projector(qa.coherent_state(n, _number(v, cfg, path + (k,))))
        if k == "vector":
            psi = _array(v, cfg, path + (k,), (n,))
            return qa.projector(psi / np.linalg.norm(psi))
        if k == "matrix":
            return _array(v, cfg, path + (k,), (n, n))
        if k == "random":
            return qa.random_density(n, rng, None if v in (None, "full") else int(v))
    cfg.fail("initial state must be one of {ket: k}, {coherent: a}, {vector: [...]}, "
             "{matrix: [[...]]}, {random: rank}", *path)


def build_model(cfg: Config, overrides: dict | None = None):
    """``(model, state, declared_verdict_or_None, duration_default)``."""
    d = cfg.data
    rng = np.random.default_rng(cfg.seed)
    try:
        if "scenario" in d:
            sc = scenarios.get(d["scenario"])
            params = {**(d.get("params") or {}), **(overrides or {})}
            params = _scenario_params(sc, params, cfg)
            model, state = sc.instantiate(**params)
            declared = sc.declared if not params else None
            return model, state, declared, sc.duration
        return (*_explicit_model(cfg, overrides or {}, rng), None, None)
    except (CouplingError, KernelError, scenarios.ScenarioError) as e:
        path = ("params",) if "scenario" in d else ("model",)
        cfg.fail(str(e), *path)


def _scenario_params(sc, params: dict, cfg: Config) -> dict:
    allowed = set(inspect.signature(sc.build).parameters)
    out = {}
    for k, v in params.items():
        if k == "tradeoff_ratio":
            if sc.build is not scenarios.oscillator_pair:
                cfg.fail("'tradeoff_ratio' only applies to oscillator scenarios", "params", k)
            base = {**sc.params, **params}
            out["D2"] = float(v) * scenarios.tradeoff_boundary(base.get("D1", 1.0), base.get("lam", 1.0))
            continue
        if k not in allowed:
            cfg.fail(f"unknown parameter '{k}' for scenario {sc.name!r}", "params", k)
        if k in ("grid", "lindblads", "hamiltonian", "sigma", "psi"):
            cfg.fail(f"parameter '{k}' cannot be set from a configuration", "params", k)
        out[k] = v
    return out


def _grid(spec, cfg) -> PhaseGrid:
    path = ("model", "grid")
    if not isinstance(spec, dict) or "bounds" not in spec or "points" not in spec:
        cfg.fail("grid needs 'bounds' and 'points'", *path)
    try:
        bounds = [tuple(float(x) for x in b) for b in spec["bounds"]]
        pts = spec["points"]
        return PhaseGrid.box(bounds, pts if isinstance(pts, int) else [int(x) for x in pts],
                             spec.get("boundary", "periodic"))
    except (TypeError, ValueError) as e:
        cfg.fail(f"bad grid: {e}", *path)


def _explicit_model(cfg: Config, overrides: dict, rng):
    m = {**cfg.data["model"], **overrides}
    P = ("model",)
    grid = _grid(m["grid"], cfg)
    dim = grid.ndim
    n = int(m["n_q"])
    Ls = m["lindblads"] or []
    if not isinstance(Ls, list):
        cfg.fail("'lindblads' must be a list of operators", *P, "lindblads")
    L = np.array([_operator(s, n, cfg, P + ("lindblads", i)) for i, s in enumerate(Ls)]).reshape(-1, n, n)
    p = L.shape[0]
    H = _operator(m.get("hamiltonian", np.zeros((n, n)).tolist()), n, cfg, P + ("hamiltonian",))
    D0 = _array(m["D0"], cfg, P + ("D0",), (p, p))
    D1 = _array(m["D1"], cfg, P + ("D1",), (dim, p))
    D2 = _array(m["D2"], cfg, P + ("D2",), (dim, dim), real=True)
    coords = grid.mesh()
    dr = m["drift"]
    if isinstance(dr, dict):
        unknown = sorted(set(dr) - {"matrix", "offset"})
        if unknown:
            cfg.fail(f"unknown field '{unknown[0]}' in drift", *P, "drift", unknown[0])
        A = _array(dr.get("matrix", np.zeros((dim, dim)).tolist()), cfg, P + ("drift", "matrix"), (dim, dim), True)
        b = _array(dr.get("offset", [0.0] * dim), cfg, P + ("drift", "offset"), (dim,), True)
        drift = np.stack(coords, axis=-1) @ A.T + b
    else:
        drift = _array(dr, cfg, P + ("drift",), (dim,), True)
    terms = []
    for i, t in enumerate(m.get("coupling_terms") or []):
        tp = P + ("coupling_terms", i)
        if not isinstance(t, dict) or "axis" not in t or "operator" not in t:
            cfg.fail("coupling terms need 'axis' and 'operator'", *tp)
        ax = int(t["axis"])
        if not 0 <= ax < dim:
            cfg.fail(f"axis {ax} out of range", *tp, "axis")
        terms.append((float(t.get("scale", 1.0)) * coords[ax], _operator(t["operator"], n, cfg, tp + ("operator",))))
    c = CouplingSet(L, H, D0, D1, drift, D2, friction=float(m.get("friction", 0.0)),
                    friction_axes=tuple(m.get("friction_axes", ())), hamiltonian_terms=tuple(terms))
    init = m.get("initial") or {}
    center = init.get("center", [0.0] * dim)
    sigma = _quantum_state(init.get("state"), n, cfg, P + ("initial", "state"), rng)
    try:
        s = make_gaussian_product(grid, center, init.get("width"), sigma)
    except ValueError as e:
        cfg.fail(str(e), *P, "initial")
    return c, s
