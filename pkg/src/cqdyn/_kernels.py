"""Compiled inner loops for the continuous generator and the RK4 stages.

States are held as real/imaginary planes, ``x[0] = Re rho``, ``x[1] = Im rho``,
each of shape ``(G, n, n)``. The generator kernel evaluates everything
that is elementwise in the working basis (local factors, fluxes,
diffusion) for Hermitian input, filling the upper triangle of each block
and mirroring it.
"""
from __future__ import annotations

import numpy as np
from numba import njit

# no 'nnan'/'ninf': the integrator relies on NaN propagation to abort
_FAST = {"nsz", "arcp", "contract", "reassoc"}


@njit(cache=True, fastmath=_FAST, inline="always")
def _cmul_acc(ar, ai, c, pr, pi, xr, xi, kind, nn):
    """a += c * (pr + i pi) o (xr + i xi)."""
    if kind == 0:
        for t in range(nn):
            q = c * pr[t]
            ar[t] += q * xr[t]
            ai[t] += q * xi[t]
    elif kind == 1:
        for t in range(nn):
            q = c * pi[t]
            ar[t] -= q * xi[t]
            ai[t] += q * xr[t]
    else:
        for t in range(nn):
            qr = c * pr[t]
            qi = c * pi[t]
            ar[t] += qr * xr[t] - qi * xi[t]
            ai[t] += qr * xi[t] + qi * xr[t]


@njit(cache=True, fastmath=_FAST)
def cq_rhs(x, out, ecoef, epsi, ekind, vel, hasv, nf, fcoef, fphi, fkind, fidx, fw, bdense, hasb,
           hasdiff, dcoef, sidx, sw, periodic, mpairs, mcoef, ydr, ydi, hasy, shape, strides,
           stage, base, acc, acc_c, acc_init, nxt, nxt_c, has_nxt):
    """Elementwise part of the generator on real/imaginary planes.

    ``out[g] = (sum_r ecoef[r, g] epsi[r]) o rho[g]
               - sum_i d_i (vel[i] rho + (sum_r fcoef[i, r] fphi[i, r]) o rho + B_i)
               + sum_i d_i^2 (dcoef[i] rho) + 2 sum_(i<j) d_i d_j (mcoef rho)
               + Y + Y^dag``

    ``epsi``/``fphi`` are complex factors stored as trailing (re, im) planes
    of shape ``(..., 2, n, n)``; ``ekind``/``fkind`` mark each factor as
    real (0), imaginary (1) or general (2) so the cheaper loops can be used.

    With ``stage`` set the result is not stored; instead the RK stage
    update ``acc (=|+=) [base +] acc_c * out`` and ``nxt = base + nxt_c * out``
    is applied in place. The return value is ``sum |acc|`` (a finiteness
    probe) in stage mode and 0 otherwise.
    """
    G = x.shape[1]
    n = x.shape[2]
    nn = n * n
    xr = x[0].reshape(G, nn)
    xi = x[1].reshape(G, nn)
    outr = out[0].reshape(-1, nn)
    outi = out[1].reshape(-1, nn)
    baser = base[0].reshape(-1, nn)
    basei = base[1].reshape(-1, nn)
    accr = acc[0].reshape(-1, nn)
    acci = acc[1].reshape(-1, nn)
    nxtr = nxt[0].reshape(-1, nn)
    nxti = nxt[1].reshape(-1, nn)
    probe = 0.0
    d = shape.shape[0]
    ne = ecoef.shape[0]
    npair = mpairs.shape[0]
    ep = epsi.reshape(epsi.shape[0], 2, nn)
    fp = fphi.reshape(fphi.shape[0], fphi.shape[1], 2, nn)
    k = np.empty(d, dtype=np.int64)
    ar = np.empty(nn)
    ai = np.empty(nn)
    for g in range(G):
        for i in range(d):
            k[i] = (g // strides[i]) % shape[i]
        # local factor, plus the centre diffusion weight on periodic grids
        cc = 0.0
        if periodic:
            for i in range(d):
                if hasdiff[i]:
                    cc += sw[i, k[i], 1] * dcoef[i, g]
        for t in range(nn):
            ar[t] = cc * xr[g, t]
            ai[t] = cc * xi[g, t]
        for r in range(ne):
            e = ecoef[r, g]
            if e == 0.0:
                continue
            _cmul_acc(ar, ai, e, ep[r, 0], ep[r, 1], xr[g], xi[g], ekind[r], nn)
        # first-derivative neighbours (diffusion shares them on periodic grids)
        for i in range(d):
            m = nf[i]
            merge = periodic and hasdiff[i]
            if m == 0 and not hasb[i] and not merge and not hasv[i]:
                continue
            ki = k[i]
            for s in range(3):
                w = fw[i, ki, s]
                if w == 0.0:
                    continue
                gn = g + (fidx[i, ki, s] - ki) * strides[i]
                cs = -w * vel[i, gn]
                if merge:
                    cs += sw[i, ki, s] * dcoef[i, gn]
                if cs != 0.0:
                    for t in range(nn):
                        ar[t] += cs * xr[gn, t]
                        ai[t] += cs * xi[gn, t]
                for r in range(m):
                    c = -w * fcoef[i, r, gn]
                    if c == 0.0:
                        continue
                    _cmul_acc(ar, ai, c, fp[i, r, 0], fp[i, r, 1], xr[gn], xi[gn], fkind[i, r], nn)
                if hasb[i]:
                    br = bdense[i, 0, gn].reshape(nn)
                    bi = bdense[i, 1, gn].reshape(nn)
                    for t in range(nn):
                        ar[t] -= w * br[t]
                        ai[t] -= w * bi[t]
        # pure diffusion with one-sided closures (absorbing grids)
        if not periodic:
            for i in range(d):
                if not hasdiff[i]:
                    continue
                ki = k[i]
                for s in range(4):
                    w = sw[i, ki, s]
                    if w == 0.0:
                        continue
                    gn = g + (sidx[i, ki, s] - ki) * strides[i]
                    c = w * dcoef[i, gn]
                    if c == 0.0:
                        continue
                    for t in range(nn):
                        ar[t] += c * xr[gn, t]
                        ai[t] += c * xi[gn, t]
        # mixed diffusion 2 d_i d_j (D_ij rho), composed first differences
        for q in range(npair):
            i = mpairs[q, 0]
            j = mpairs[q, 1]
            ki = k[i]
            for s in range(3):
                wi = fw[i, ki, s]
                if wi == 0.0:
                    continue
                gi = g + (fidx[i, ki, s] - ki) * strides[i]
                kj = (gi // strides[j]) % shape[j]
                for s2 in range(3):
                    wj = fw[j, kj, s2]
                    if wj == 0.0:
                        continue
                    gn = gi + (fidx[j, kj, s2] - kj) * strides[j]
                    c = 2.0 * wi * wj * mcoef[q, gn]
                    if c == 0.0:
                        continue
                    for t in range(nn):
                        ar[t] += c * xr[gn, t]
                        ai[t] += c * xi[gn, t]
        if hasy:
            yr = ydr[g]
            yi = ydi[g]
            for a in range(n):
                for b in range(n):
                    ar[a * n + b] += yr[a, b] + yr[b, a]
                    ai[a * n + b] += yi[a, b] - yi[b, a]
        for a in range(n):
            ai[a * n + a] = 0.0
        if not stage:
            for t in range(nn):
                outr[g, t] = ar[t]
                outi[g, t] = ai[t]
            continue
        br = baser[g]
        bi = basei[g]
        cr = accr[g]
        ci = acci[g]
        if acc_init:
            for t in range(nn):
                cr[t] = br[t] + acc_c * ar[t]
                ci[t] = bi[t] + acc_c * ai[t]
        else:
            for t in range(nn):
                cr[t] += acc_c * ar[t]
                ci[t] += acc_c * ai[t]
        if has_nxt:
            qr = nxtr[g]
            qi = nxti[g]
            for t in range(nn):
                qr[t] = br[t] + nxt_c * ar[t]
                qi[t] = bi[t] + nxt_c * ai[t]
        else:
            for t in range(nn):
                probe += abs(cr[t]) + abs(ci[t])
    return probe


@njit(cache=True)
def axpy_into(out, y, c, x):
    """out = y + c x (flat arrays)."""
    for i in range(out.shape[0]):
        out[i] = y[i] + c * x[i]


@njit(cache=True)
def rk4_finish_into(out, y, dt, k1, k2, k3, k4):
    """out = y + dt/6 (k1 + 2 k2 + 2 k3 + k4); returns the sum of out as a finiteness probe."""
    s = dt / 6.0
    tot = 0.0
    for i in range(y.shape[0]):
        v = y[i] + s * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i])
        out[i] = v
        tot += abs(v)
    return tot
