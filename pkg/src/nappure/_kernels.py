"""Inner loops for correlation and bilinear warping, with their VJPs.

Two interchangeable implementations live here: numba ``@njit`` kernels and a
vectorised numpy path.  ``NAPPURE_BACKEND=numpy`` forces the numpy path;
otherwise numba is used when it imports.  Both work on batches:

* ``x``: ``(N, C, H, W)``
* correlation kernels: ``(N, k, k)``
* flow fields: ``(N, 2, H, W)``, row offsets then column offsets

Flow source coordinates are clamped to the image.  At an exactly integer
source coordinate the derivative is the mean of the two one-sided
derivatives (zero beyond the border); outside the image it is zero.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


def _want_numba() -> bool:
    return numba is not None and os.environ.get("NAPPURE_BACKEND", "numba").lower() != "numpy"


BACKEND = "numba" if _want_numba() else "numpy"


# numpy path -----------------------------------------------------------------


def _pad_edge(x: np.ndarray, r: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")


def _fold_edge(gp: np.ndarray, r: int) -> np.ndarray:
    """Adjoint of :func:`_pad_edge`."""
    if r == 0:
        return gp.copy()
    h = gp.shape[2] - 2 * r
    w = gp.shape[3] - 2 * r
    rows = gp[:, :, r : r + h, :].copy()
    rows[:, :, 0, :] += gp[:, :, :r, :].sum(axis=2)
    rows[:, :, h - 1, :] += gp[:, :, r + h :, :].sum(axis=2)
    out = rows[:, :, :, r : r + w].copy()
    out[:, :, :, 0] += rows[:, :, :, :r].sum(axis=3)
    out[:, :, :, w - 1] += rows[:, :, :, r + w :].sum(axis=3)
    return out


def _corr_np(x, kern):
    n, c, h, w = x.shape
    k = kern.shape[1]
    r = k // 2
    xp = _pad_edge(x, r)
    out = np.zeros_like(x)
    for u in range(k):
        for v in range(k):
            out += kern[:, u, v, None, None, None] * xp[:, :, u : u + h, v : v + w]
    return out


def _corr_vjp_np(x, kern, g):
    n, c, h, w = x.shape
    k = kern.shape[1]
    r = k // 2
    xp = _pad_edge(x, r)
    gxp = np.zeros_like(xp)
    gk = np.empty_like(kern)
    for u in range(k):
        for v in range(k):
            gxp[:, :, u : u + h, v : v + w] += kern[:, u, v, None, None, None] * g
            gk[:, u, v] = np.einsum("nchw,nchw->n", g, xp[:, :, u : u + h, v : v + w])
    return _fold_edge(gxp, r), gk


def _axis_coords(base, off, size):
    """Value corners and derivative stencil along one axis.

    Returns ``(lo, hi, frac, da, db, scale)``: the value interpolates between
    ``lo`` and ``hi`` with weight ``frac`` on ``hi``; the derivative w.r.t. the
    offset is ``scale * (v[db] - v[da])``.
    """
    src = base + off
    pos = np.clip(src, 0.0, size - 1.0)
    lo = np.minimum(np.floor(pos), max(size - 2, 0)).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    frac = pos - lo
    if size == 1:
        frac = np.zeros_like(pos)
    inside = (src >= 0.0) & (src <= size - 1.0)
    is_int = inside & (src == np.floor(src))
    fl = np.floor(src).astype(np.int64)
    da = np.where(is_int, np.maximum(fl - 1, 0), lo)
    db = np.where(is_int, np.minimum(fl + 1, size - 1), hi)
    scale = np.where(is_int, 0.5, np.where(inside, 1.0, 0.0))
    if size == 1:
        scale = np.zeros_like(pos)
    return lo, hi, frac, da, db, scale


def _flow_setup(x, flow):
    n, c, h, w = x.shape
    jj = np.arange(h, dtype=np.float64)[None, :, None]
    kk = np.arange(w, dtype=np.float64)[None, None, :]
    rows = _axis_coords(jj, flow[:, 0], h)
    cols = _axis_coords(kk, flow[:, 1], w)
    return rows, cols


def _gather(xf, r, cidx, w):
    # xf: (N, C, H*W); r, cidx: (N, H, W) integer
    n, c, _ = xf.shape
    idx = (r * w + cidx).reshape(n, 1, -1)
    return np.take_along_axis(xf, np.broadcast_to(idx, (n, c, idx.shape[2])), axis=2).reshape(
        n, c, r.shape[1], r.shape[2]
    )


def _warp_np(x, flow):
    n, c, h, w = x.shape
    (r0, r1, fr, *_), (c0, c1, fc, *_) = _flow_setup(x, flow)
    xf = x.reshape(n, c, h * w)
    fr = fr[:, None]
    fc = fc[:, None]
    return (
        (1 - fr) * (1 - fc) * _gather(xf, r0, c0, w)
        + fr * (1 - fc) * _gather(xf, r1, c0, w)
        + (1 - fr) * fc * _gather(xf, r0, c1, w)
        + fr * fc * _gather(xf, r1, c1, w)
    )


def _warp_vjp_np(x, flow, g):
    n, c, h, w = x.shape
    (r0, r1, fr, ra, rb, rs), (c0, c1, fc, ca, cb, cs) = _flow_setup(x, flow)
    xf = x.reshape(n, c, h * w)
    frb = fr[:, None]
    fcb = fc[:, None]

    def row_interp(rr):
        return (1 - fcb) * _gather(xf, rr, c0, w) + fcb * _gather(xf, rr, c1, w)

    def col_interp(cc):
        return (1 - frb) * _gather(xf, r0, cc, w) + frb * _gather(xf, r1, cc, w)

    d_row = rs[:, None] * (row_interp(rb) - row_interp(ra))
    d_col = cs[:, None] * (col_interp(cb) - col_interp(ca))
    gflow = np.stack([(g * d_row).sum(axis=1), (g * d_col).sum(axis=1)], axis=1)

    base = (np.arange(n)[:, None] * c + np.arange(c)[None, :])[:, :, None] * (h * w)
    gx = np.zeros(n * c * h * w)
    for rr, cc, wt in (
        (r0, c0, (1 - fr) * (1 - fc)),
        (r1, c0, fr * (1 - fc)),
        (r0, c1, (1 - fr) * fc),
        (r1, c1, fr * fc),
    ):
        idx = base + (rr * w + cc).reshape(n, 1, -1)
        vals = g.reshape(n, c, -1) * wt.reshape(n, 1, -1)
        gx += np.bincount(idx.ravel(), weights=vals.ravel(), minlength=gx.size)
    return gx.reshape(x.shape), gflow


# numba path -----------------------------------------------------------------

if numba is not None:
    njit = numba.njit(cache=True, fastmath=False)

    @njit
    def _clampi(i, hi):
        if i < 0:
            return 0
        if i > hi:
            return hi
        return i

    @njit
    def _corr_nb(x, kern):
        n, c, h, w = x.shape
        k = kern.shape[1]
        r = k // 2
        out = np.zeros_like(x)
        for b in range(n):
            for ch in range(c):
                for i in range(h):
                    for j in range(w):
                        acc = 0.0
                        for u in range(k):
                            ii = _clampi(i + u - r, h - 1)
                            for v in range(k):
                                jj = _clampi(j + v - r, w - 1)
                                acc += kern[b, u, v] * x[b, ch, ii, jj]
                        out[b, ch, i, j] = acc
        return out

    @njit
    def _corr_vjp_nb(x, kern, g):
        n, c, h, w = x.shape
        k = kern.shape[1]
        r = k // 2
        gx = np.zeros_like(x)
        gk = np.zeros_like(kern)
        for b in range(n):
            for ch in range(c):
                for i in range(h):
                    for j in range(w):
                        gij = g[b, ch, i, j]
                        for u in range(k):
                            ii = _clampi(i + u - r, h - 1)
                            for v in range(k):
                                jj = _clampi(j + v - r, w - 1)
                                gx[b, ch, ii, jj] += kern[b, u, v] * gij
                                gk[b, u, v] += gij * x[b, ch, ii, jj]
        return gx, gk

    @njit
    def _axis_nb(base, off, size):
        src = base + off
        pos = min(max(src, 0.0), size - 1.0)
        lo = int(np.floor(pos))
        if lo > size - 2:
            lo = max(size - 2, 0)
        hi = min(lo + 1, size - 1)
        frac = pos - lo if size > 1 else 0.0
        inside = src >= 0.0 and src <= size - 1.0
        if size == 1 or not inside:
            return lo, hi, frac, lo, hi, 0.0
        fl = int(np.floor(src))
        if src == fl:
            return lo, hi, frac, max(fl - 1, 0), min(fl + 1, size - 1), 0.5
        return lo, hi, frac, lo, hi, 1.0

    @njit
    def _warp_nb(x, flow):
        n, c, h, w = x.shape
        out = np.empty_like(x)
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    r0, r1, fr, _, _, _ = _axis_nb(float(i), flow[b, 0, i, j], h)
                    c0, c1, fc, _, _, _ = _axis_nb(float(j), flow[b, 1, i, j], w)
                    for ch in range(c):
                        out[b, ch, i, j] = (
                            (1 - fr) * (1 - fc) * x[b, ch, r0, c0]
                            + fr * (1 - fc) * x[b, ch, r1, c0]
                            + (1 - fr) * fc * x[b, ch, r0, c1]
                            + fr * fc * x[b, ch, r1, c1]
                        )
        return out

    @njit
    def _warp_vjp_nb(x, flow, g):
        n, c, h, w = x.shape
        gx = np.zeros_like(x)
        gflow = np.zeros_like(flow)
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    r0, r1, fr, ra, rb, rs = _axis_nb(float(i), flow[b, 0, i, j], h)
                    c0, c1, fc, ca, cb, cs = _axis_nb(float(j), flow[b, 1, i, j], w)
                    w00 = (1 - fr) * (1 - fc)
                    w10 = fr * (1 - fc)
                    w01 = (1 - fr) * fc
                    w11 = fr * fc
                    grow = 0.0
                    gcol = 0.0
                    for ch in range(c):
                        gv = g[b, ch, i, j]
                        gx[b, ch, r0, c0] += w00 * gv
                        gx[b, ch, r1, c0] += w10 * gv
                        gx[b, ch, r0, c1] += w01 * gv
                        gx[b, ch, r1, c1] += w11 * gv
                        if rs != 0.0:
                            vb = (1 - fc) * x[b, ch, rb, c0] + fc * x[b, ch, rb, c1]
                            va = (1 - fc) * x[b, ch, ra, c0] + fc * x[b, ch, ra, c1]
                            grow += gv * rs * (vb - va)
                        if cs != 0.0:
                            vb = (1 - fr) * x[b, ch, r0, cb] + fr * x[b, ch, r1, cb]
                            va = (1 - fr) * x[b, ch, r0, ca] + fr * x[b, ch, r1, ca]
                            gcol += gv * cs * (vb - va)
                    gflow[b, 0, i, j] = grow
                    gflow[b, 1, i, j] = gcol
        return gx, gflow


_IMPLS = {
    "numpy": (_corr_np, _corr_vjp_np, _warp_np, _warp_vjp_np),
}
if numba is not None:
    _IMPLS["numba"] = (_corr_nb, _corr_vjp_nb, _warp_nb, _warp_vjp_nb)


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def correlate(x, kern, backend=None):
    return _IMPLS[backend or BACKEND][0](_c(x), _c(kern))


def correlate_vjp(x, kern, g, backend=None):
    return _IMPLS[backend or BACKEND][1](_c(x), _c(kern), _c(g))


def warp(x, flow, backend=None):
    return _IMPLS[backend or BACKEND][2](_c(x), _c(flow))


def warp_vjp(x, flow, g, backend=None):
    return _IMPLS[backend or BACKEND][3](_c(x), _c(flow), _c(g))


def available_backends() -> list[str]:
    return sorted(_IMPLS)
