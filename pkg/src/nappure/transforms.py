"""Transformation families f(x, eps) with exact VJPs.

Perturbation parameters are flat float vectors whose layout is fixed by the
:class:`TransformSpec` and the image shape ``(C, H, W)``:

========== ===================================================
additive   C*H*W offsets
conv       k*k correlation kernel, row-major
patch      C*H*W pattern, then a, b, s
flow       H*W row offsets, then H*W column offsets
composite  n mixing weights, then each child's vector in order
========== ===================================================

Every function accepts a single image ``(C, H, W)`` with a 1-D parameter
vector, or a batch ``(N, C, H, W)`` with an ``(N, P)`` parameter matrix.

Patch geometry has two readings.  In hard mode (the attack side) ``a, b``
are the top-left corner and ``s`` an integer side length.  In soft mode (the
defense side) ``a, b`` are the mask centre in pixel units, so a hard patch
with corner ``(a, b)`` and side ``s`` corresponds to a soft centre of
``(a + s/2, b + s/2)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from nappure import _kernels

KINDS = ("additive", "conv", "patch", "flow", "composite")


class TransformError(ValueError):
    pass


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    kernel_size: int = 3
    s_max: float | None = None
    tau: float = 0.5
    smooth_kernel: int | None = None
    smooth_std: float | None = None
    children: tuple["TransformSpec", ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TransformError(f"unknown transform kind {self.kind!r}")
        if self.kind == "conv" and (self.kernel_size < 1 or self.kernel_size % 2 == 0):
            raise TransformError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.kind == "patch":
            if self.tau <= 0:
                raise TransformError("tau must be positive")
            if self.s_max is not None and self.s_max < 0:
                raise TransformError("s_max must be non-negative")
        if self.kind == "flow" and self.smooth_kernel is not None:
            if self.smooth_kernel % 2 == 0 or self.smooth_kernel < 1:
                raise TransformError("smooth_kernel must be odd")
            if not self.smooth_std or self.smooth_std <= 0:
                raise TransformError("smooth_std must be positive when smoothing is on")
        if self.kind == "composite":
            if not self.children:
                raise TransformError("composite needs at least one child")
            if any(c.kind == "composite" for c in self.children):
                raise TransformError("composite children cannot be composite")
        elif self.children:
            raise TransformError(f"{self.kind} takes no children")

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "conv":
            d["kernel_size"] = self.kernel_size
        elif self.kind == "patch":
            if self.s_max is not None:
                d["s_max"] = self.s_max
            d["tau"] = self.tau
        elif self.kind == "flow" and self.smooth_kernel is not None:
            d["smooth_kernel"] = self.smooth_kernel
            d["smooth_std"] = self.smooth_std
        elif self.kind == "composite":
            d["children"] = [c.to_dict() for c in self.children]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        d = dict(d)
        children = tuple(cls.from_dict(c) for c in d.pop("children", ()))
        known = {"kind", "kernel_size", "s_max", "tau", "smooth_kernel", "smooth_std"}
        extra = set(d) - known
        if extra:
            raise TransformError(f"unknown TransformSpec fields {sorted(extra)}")
        return cls(children=children, **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TransformSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Box:
    """Attack constraint set.

    ``kind="linf"``: an l-inf ball of ``radius`` around the family's reference
    point (zero for additive/flow, the uniform kernel for conv).
    ``kind="patch"``: fixed corner ``(a, b)`` and side ``s``; the pattern is
    clipped to [0, 1].  ``kind="composite"``: one child box per child spec,
    mixing weights pinned to ``weight``.
    """

    kind: str = "linf"
    radius: float = 0.0
    a: int = 0
    b: int = 0
    s: int = 0
    weight: float = 1.0
    children: tuple["Box", ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        if self.kind == "linf":
            return {"kind": "linf", "radius": self.radius}
        if self.kind == "patch":
            return {"kind": "patch", "a": self.a, "b": self.b, "s": self.s}
        return {"kind": "composite", "weight": self.weight, "children": [c.to_dict() for c in self.children]}

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        d = dict(d)
        children = tuple(cls.from_dict(c) for c in d.pop("children", ()))
        return cls(children=children, **d)


# batching helpers -------------------------------------------------------------


def _batch(x, eps):
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.ndim == 3:
        if eps.ndim != 1:
            raise TransformError("single image needs a 1-D parameter vector")
        return x[None], eps[None], True
    if x.ndim != 4 or eps.ndim != 2 or eps.shape[0] != x.shape[0]:
        raise TransformError(f"batch shapes disagree: x {x.shape}, eps {eps.shape}")
    return x, eps, False


def param_size(spec: TransformSpec, shape) -> int:
    c, h, w = shape
    if spec.kind == "additive":
        return c * h * w
    if spec.kind == "conv":
        return spec.kernel_size**2
    if spec.kind == "patch":
        return c * h * w + 3
    if spec.kind == "flow":
        return 2 * h * w
    return len(spec.children) + sum(param_size(ch, shape) for ch in spec.children)


def child_slices(spec: TransformSpec, shape) -> list[slice]:
    n = len(spec.children)
    out = []
    start = n
    for ch in spec.children:
        size = param_size(ch, shape)
        out.append(slice(start, start + size))
        start += size
    return out


def s_max_for(spec: TransformSpec, shape) -> float:
    lim = float(min(shape[1], shape[2]))
    return lim if spec.s_max is None else float(spec.s_max)


def _check(spec: TransformSpec, shape, eps):
    if spec.kind == "patch" and s_max_for(spec, shape) > min(shape[1], shape[2]):
        raise TransformError(f"s_max {spec.s_max} exceeds image size {shape[1:]}")
    if spec.kind == "composite":
        for ch in spec.children:
            _check(ch, shape, None)
    if eps is not None and eps.shape[-1] != param_size(spec, shape):
        raise TransformError(
            f"{spec.kind} params for image {tuple(shape)} need length {param_size(spec, shape)}, "
            f"got {eps.shape[-1]}"
        )


# identity ---------------------------------------------------------------------


def _identity(spec, x_adv):
    n, c, h, w = x_adv.shape
    if spec.kind in ("additive", "flow"):
        return np.zeros((n, param_size(spec, x_adv.shape[1:])))
    if spec.kind == "conv":
        k = spec.kernel_size
        e = np.zeros((n, k * k))
        e[:, (k * k) // 2] = 1.0
        return e
    if spec.kind == "patch":
        tail = np.tile([h / 2.0, w / 2.0, 0.0], (n, 1))
        return np.concatenate([x_adv.reshape(n, -1), tail], axis=1)
    parts = [np.zeros((n, len(spec.children)))]
    parts += [_identity(ch, x_adv) for ch in spec.children]
    return np.concatenate(parts, axis=1)


def identity_params(spec: TransformSpec, x_adv) -> np.ndarray:
    """Parameters at which ``apply`` is the identity (patch: on ``x_adv`` itself)."""
    x4 = np.asarray(x_adv, dtype=np.float64)
    single = x4.ndim == 3
    if single:
        x4 = x4[None]
    _check(spec, x4.shape[1:], None)
    e = _identity(spec, x4)
    return e[0] if single else e


# patch masks ------------------------------------------------------------------


def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def soft_mask(a, b, s, tau, h, w, with_grads=False):
    """Separable logistic mask of shape (N, H, W) centred at (a, b)."""
    a = np.asarray(a, dtype=np.float64)[:, None]
    b = np.asarray(b, dtype=np.float64)[:, None]
    s = np.asarray(s, dtype=np.float64)[:, None]
    dj = np.arange(h) + 0.5 - a
    dk = np.arange(w) + 0.5 - b
    pa = _sig((s / 2 - np.abs(dj)) / tau)
    pb = _sig((s / 2 - np.abs(dk)) / tau)
    m = pa[:, :, None] * pb[:, None, :]
    if not with_grads:
        return m
    qa = pa * (1 - pa) / tau
    qb = pb * (1 - pb) / tau
    # d|d|/da = -sign(d); sign(0) = 0 picks the zero subgradient
    dpa_da = qa * np.sign(dj)
    dpb_db = qb * np.sign(dk)
    dpa_ds = 0.5 * qa
    dpb_ds = 0.5 * qb
    return m, (pa, pb, dpa_da, dpb_db, dpa_ds, dpb_ds)


def hard_mask(a, b, s, h, w):
    a = np.asarray(a, dtype=np.float64)[:, None]
    b = np.asarray(b, dtype=np.float64)[:, None]
    s = np.asarray(s, dtype=np.float64)[:, None]
    j = np.arange(h)
    k = np.arange(w)
    rows = (a <= j) & (j < a + s)
    cols = (b <= k) & (k < b + s)
    return (rows[:, :, None] & cols[:, None, :]).astype(np.float64)


def _patch_parts(e, shape):
    c, h, w = shape
    d = c * h * w
    return e[:, :d].reshape(-1, c, h, w), e[:, d], e[:, d + 1], e[:, d + 2]


# forward ----------------------------------------------------------------------


def _conv_kernel(spec, e):
    k = spec.kernel_size
    return e.reshape(-1, k, k)


def _apply(spec, x, e, hard):
    n, c, h, w = x.shape
    if spec.kind == "additive":
        return x + e.reshape(x.shape)
    if spec.kind == "conv":
        return _kernels.correlate(x, _conv_kernel(spec, e))
    if spec.kind == "flow":
        return _kernels.warp(x, e.reshape(n, 2, h, w))
    if spec.kind == "patch":
        p, a, b, s = _patch_parts(e, (c, h, w))
        m = hard_mask(a, b, s, h, w) if hard else soft_mask(a, b, s, spec.tau, h, w)
        return x + m[:, None] * (p - x)
    wts = e[:, : len(spec.children)]
    z = x
    for i, (ch, sl) in enumerate(zip(spec.children, child_slices(spec, (c, h, w)))):
        wi = wts[:, i, None, None, None]
        z = wi * _apply(ch, z, e[:, sl], hard) + (1 - wi) * z
    return z


def apply(spec: TransformSpec, x, eps, hard: bool = False) -> np.ndarray:
    """Evaluate the transformation.  ``hard`` selects the binary patch mask."""
    x4, e2, single = _batch(x, eps)
    _check(spec, x4.shape[1:], e2)
    y = _apply(spec, x4, e2, hard)
    return y[0] if single else y


# reverse ----------------------------------------------------------------------


def _vjp(spec, x, e, g, hard):
    n, c, h, w = x.shape
    if spec.kind == "additive":
        return g.copy(), g.reshape(n, -1).copy()
    if spec.kind == "conv":
        gx, gk = _kernels.correlate_vjp(x, _conv_kernel(spec, e), g)
        return gx, gk.reshape(n, -1)
    if spec.kind == "flow":
        gx, gf = _kernels.warp_vjp(x, e.reshape(n, 2, h, w), g)
        return gx, gf.reshape(n, -1)
    if spec.kind == "patch":
        p, a, b, s = _patch_parts(e, (c, h, w))
        if hard:
            m = hard_mask(a, b, s, h, w)[:, None]
            gtail = np.zeros((n, 3))
        else:
            m2, (pa, pb, dpa_da, dpb_db, dpa_ds, dpb_ds) = soft_mask(a, b, s, spec.tau, h, w, True)
            m = m2[:, None]
            gm = (g * (p - x)).sum(axis=1)  # (N, H, W)
            # m = pa_j * pb_k
            ga = np.einsum("nhw,nh,nw->n", gm, dpa_da, pb)
            gb = np.einsum("nhw,nh,nw->n", gm, pa, dpb_db)
            gs = np.einsum("nhw,nh,nw->n", gm, dpa_ds, pb) + np.einsum("nhw,nh,nw->n", gm, pa, dpb_ds)
            gtail = np.stack([ga, gb, gs], axis=1)
        gx = g * (1 - m)
        gp = g * m
        return gx, np.concatenate([gp.reshape(n, -1), gtail], axis=1)

    k = len(spec.children)
    wts = e[:, :k]
    slices = child_slices(spec, (c, h, w))
    zs = [x]
    fs = []
    for i, (ch, sl) in enumerate(zip(spec.children, slices)):
        fz = _apply(ch, zs[-1], e[:, sl], hard)
        fs.append(fz)
        wi = wts[:, i, None, None, None]
        zs.append(wi * fz + (1 - wi) * zs[-1])
    ge = np.zeros_like(e)
    gz = g
    for i in reversed(range(k)):
        ch, sl = spec.children[i], slices[i]
        wi = wts[:, i, None, None, None]
        ge[:, i] = (gz * (fs[i] - zs[i])).reshape(n, -1).sum(axis=1)
        gxc, gec = _vjp(ch, zs[i], e[:, sl], wi * gz, hard)
        ge[:, sl] = gec
        gz = gxc + (1 - wi) * gz
    return gz, ge


def apply_vjp(spec: TransformSpec, x, eps, cotangent):
    """Return ``(grad_x, grad_eps)``: the cotangent pulled back through ``apply``.

    Only the soft patch mask is differentiable; this is the defense-side
    path and always uses it.
    """
    x4, e2, single = _batch(x, eps)
    _check(spec, x4.shape[1:], e2)
    g = np.asarray(cotangent, dtype=np.float64)
    g = g[None] if single else g
    if g.shape != x4.shape:
        raise TransformError(f"cotangent shape {g.shape} != output shape {x4.shape}")
    gx, ge = _vjp(spec, x4, e2, g, hard=False)
    return (gx[0], ge[0]) if single else (gx, ge)


def hard_vjp(spec: TransformSpec, x, eps, cotangent):
    """Like :func:`apply_vjp` through the hard patch mask.

    The mask is piecewise constant in ``(a, b, s)`` so their gradients are
    reported as zero; only the pattern receives gradient.  Attack use only.
    """
    x4, e2, single = _batch(x, eps)
    g = np.asarray(cotangent, dtype=np.float64)
    g = g[None] if single else g
    gx, ge = _vjp(spec, x4, e2, g, hard=True)
    return (gx[0], ge[0]) if single else (gx, ge)


# potentials -------------------------------------------------------------------


def _conv_identity(spec):
    k = spec.kernel_size
    e = np.zeros(k * k)
    e[(k * k) // 2] = 1.0
    return e


def _potential(spec, e, shape):
    if spec.kind in ("additive", "flow"):
        return (e * e).sum(axis=1)
    if spec.kind == "conv":
        d = e - _conv_identity(spec)
        return (d * d).sum(axis=1)
    if spec.kind == "patch":
        return np.abs(e[:, -1])
    k = len(spec.children)
    total = (e[:, :k] ** 2).sum(axis=1)
    for ch, sl in zip(spec.children, child_slices(spec, shape)):
        total = total + _potential(ch, e[:, sl], shape)
    return total


def _potential_grad(spec, e, shape):
    if spec.kind in ("additive", "flow"):
        return 2 * e
    if spec.kind == "conv":
        return 2 * (e - _conv_identity(spec))
    if spec.kind == "patch":
        g = np.zeros_like(e)
        g[:, -1] = np.sign(e[:, -1])
        return g
    k = len(spec.children)
    g = np.zeros_like(e)
    g[:, :k] = 2 * e[:, :k]
    for ch, sl in zip(spec.children, child_slices(spec, shape)):
        g[:, sl] = _potential_grad(ch, e[:, sl], shape)
    return g


def _shape_arg(spec, shape):
    if shape is None and spec.kind == "composite":
        raise TransformError("composite potentials need the image shape")
    return None if shape is None else tuple(shape)


def potential(spec: TransformSpec, eps, shape=None):
    """Energy of the perturbation prior; zero at the identity element.

    ``shape`` (the image shape) is required for composite specs.
    """
    e = np.asarray(eps, dtype=np.float64)
    single = e.ndim == 1
    shape = _shape_arg(spec, shape)
    out = _potential(spec, e[None] if single else e, shape)
    return float(out[0]) if single else out


def potential_grad(spec: TransformSpec, eps, shape=None):
    e = np.asarray(eps, dtype=np.float64)
    single = e.ndim == 1
    shape = _shape_arg(spec, shape)
    out = _potential_grad(spec, e[None] if single else e, shape)
    return out[0] if single else out


# constraints ------------------------------------------------------------------


def _reference(spec, box, x):
    n, c, h, w = x.shape
    if spec.kind in ("additive", "flow"):
        return np.zeros((n, param_size(spec, (c, h, w))))
    if spec.kind == "conv":
        k = spec.kernel_size
        return np.full((n, k * k), 1.0 / (k * k))
    if spec.kind == "patch":
        tail = np.tile([float(box.a), float(box.b), float(box.s)], (n, 1))
        return np.concatenate([np.full((n, c * h * w), 0.5), tail], axis=1)
    parts = [np.full((n, len(spec.children)), box.weight)]
    parts += [_reference(ch, bx, x) for ch, bx in zip(spec.children, box.children)]
    return np.concatenate(parts, axis=1)


def _box_matches(spec, box):
    if spec.kind == "patch":
        return box.kind == "patch"
    if spec.kind == "composite":
        return (
            box.kind == "composite"
            and len(box.children) == len(spec.children)
            and all(_box_matches(s, b) for s, b in zip(spec.children, box.children))
        )
    return box.kind == "linf"


def reference_params(spec: TransformSpec, box: Box, x) -> np.ndarray:
    """Centre of the attack constraint set (the attack's starting point)."""
    if not _box_matches(spec, box):
        raise TransformError(f"box {box.kind!r} does not fit a {spec.kind!r} transform")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    r = _reference(spec, box, x[None] if single else x)
    return r[0] if single else r


def _project(spec, box, e, shape):
    if spec.kind in ("additive", "flow", "conv"):
        ref = 1.0 / spec.kernel_size**2 if spec.kind == "conv" else 0.0
        return np.clip(e, ref - box.radius, ref + box.radius)
    if spec.kind == "patch":
        out = e.copy()
        out[:, :-3] = np.clip(out[:, :-3], 0.0, 1.0)
        out[:, -3:] = [float(box.a), float(box.b), float(box.s)]
        return out
    out = e.copy()
    out[:, : len(spec.children)] = box.weight
    for ch, bx, sl in zip(spec.children, box.children, child_slices(spec, shape)):
        out[:, sl] = _project(ch, bx, e[:, sl], shape)
    return out


def project_constraints(spec: TransformSpec, eps, box: Box, shape=None) -> np.ndarray:
    """Project attack parameters onto the constraint set ``box``."""
    if not _box_matches(spec, box):
        raise TransformError(f"box {box.kind!r} does not fit a {spec.kind!r} transform")
    if spec.kind == "composite" and shape is None:
        raise TransformError("composite projection needs the image shape")
    e = np.asarray(eps, dtype=np.float64)
    single = e.ndim == 1
    out = _project(spec, box, e[None] if single else e, shape)
    return out[0] if single else out


def clamp_domain(spec: TransformSpec, e: np.ndarray, shape) -> np.ndarray:
    """Keep defense-side parameters in their domain (in place on a copy).

    Patch: pattern in [0, 1], centre inside the image, size in [0, s_max].
    Composite: weights in [0, 1].  Other families are unconstrained.
    """
    if spec.kind == "patch":
        _, h, w = shape
        e = e.copy()
        e[:, :-3] = np.clip(e[:, :-3], 0.0, 1.0)
        e[:, -3] = np.clip(e[:, -3], 0.0, h)
        e[:, -2] = np.clip(e[:, -2], 0.0, w)
        e[:, -1] = np.clip(e[:, -1], 0.0, s_max_for(spec, shape))
        return e
    if spec.kind == "composite":
        e = e.copy()
        k = len(spec.children)
        e[:, :k] = np.clip(e[:, :k], 0.0, 1.0)
        for ch, sl in zip(spec.children, child_slices(spec, shape)):
            e[:, sl] = clamp_domain(ch, e[:, sl], shape)
        return e
    return e


# flow smoothing ---------------------------------------------------------------


def gaussian_kernel(kernel_size: int, stddev: float) -> np.ndarray:
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise TransformError(f"kernel_size must be odd, got {kernel_size}")
    if stddev <= 0:
        raise TransformError("stddev must be positive")
    r = kernel_size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2 * stddev**2))
    return k / k.sum()


def _flow_planes(flow, shape):
    h, w = shape[-2:]
    f = np.asarray(flow, dtype=np.float64)
    single = f.ndim == 1
    f2 = f[None] if single else f
    if f2.shape[1] != 2 * h * w:
        raise TransformError(f"flow length {f2.shape[1]} != 2*{h}*{w}")
    return f2.reshape(-1, 2, h, w), single


def gaussian_smooth_flow(flow, kernel_size: int, stddev: float, shape) -> np.ndarray:
    """Smooth both offset planes with a normalised Gaussian (replicate padding).

    ``shape`` is ``(H, W)`` or ``(C, H, W)``.
    """
    kern = gaussian_kernel(kernel_size, stddev)
    planes, single = _flow_planes(flow, shape)
    n = planes.shape[0]
    out = _kernels.correlate(planes, np.broadcast_to(kern, (n,) + kern.shape)).reshape(n, -1)
    return out[0] if single else out


def gaussian_smooth_flow_vjp(flow, kernel_size: int, stddev: float, shape, cotangent) -> np.ndarray:
    """Exact adjoint of :func:`gaussian_smooth_flow` applied to ``cotangent``."""
    kern = gaussian_kernel(kernel_size, stddev)
    planes, single = _flow_planes(flow, shape)
    gplanes, _ = _flow_planes(cotangent, shape)
    n = planes.shape[0]
    gx, _ = _kernels.correlate_vjp(planes, np.broadcast_to(kern, (n,) + kern.shape), gplanes)
    gx = gx.reshape(n, -1)
    return gx[0] if single else gx
