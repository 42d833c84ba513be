"""Independent reference implementations used by the tests.

Written as plain loops over the definitions, sharing no code with the package.
"""

import math

import numpy as np


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


def fd_grad(f, x, h=1e-4):
    """Central differences of scalar ``f`` at ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def correlate(x, kern):
    """x (C, H, W), kern (k, k); replicate padding, no kernel flip."""
    c, h, w = x.shape
    k = kern.shape[0]
    r = k // 2
    out = np.zeros_like(x, dtype=np.float64)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for di in range(k):
                    for dj in range(k):
                        ii = min(max(i + di - r, 0), h - 1)
                        jj = min(max(j + dj - r, 0), w - 1)
                        acc += kern[di, dj] * x[ch, ii, jj]
                out[ch, i, j] = acc
    return out


def warp(x, flow):
    """x (C, H, W), flow (2, H, W); bilinear sampling at clamped (i + dr, j + dc)."""
    c, h, w = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            r = min(max(i + flow[0, i, j], 0.0), h - 1.0)
            q = min(max(j + flow[1, i, j], 0.0), w - 1.0)
            r0, q0 = int(math.floor(r)), int(math.floor(q))
            r1, q1 = min(r0 + 1, h - 1), min(q0 + 1, w - 1)
            fr, fq = r - r0, q - q0
            for ch in range(c):
                out[ch, i, j] = (
                    (1 - fr) * (1 - fq) * x[ch, r0, q0]
                    + fr * (1 - fq) * x[ch, r1, q0]
                    + (1 - fr) * fq * x[ch, r0, q1]
                    + fr * fq * x[ch, r1, q1]
                )
    return out


def posterior_mean_mc(weights, means, s, y, sigma, n, rng):
    """Self-normalised importance sampling of E[x | x + sigma n = y], proposal = prior.

    Returns ``(estimate, standard_error)`` per coordinate.
    """
    weights = np.asarray(weights)
    means = np.asarray(means)
    comp = rng.choice(len(weights), size=n, p=weights)
    xs = means[comp] + s * rng.standard_normal((n, means.shape[1]))
    logw = -((xs - y) ** 2).sum(axis=1) / (2 * sigma**2)
    wt = np.exp(logw - logw.max())
    wt /= wt.sum()
    est = wt @ xs
    se = np.sqrt((wt[:, None] ** 2 * (xs - est) ** 2).sum(axis=0))
    return est, se


def gaussian_posterior_mean(mu, s, y, sigma):
    return (s**2 * y + sigma**2 * mu) / (s**2 + sigma**2)


def adam(param, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Hand-stepped Adam over a list of gradients."""
    p = np.array(param, dtype=np.float64)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        p = p - lr * mh / (np.sqrt(vh) + eps)
    return p
