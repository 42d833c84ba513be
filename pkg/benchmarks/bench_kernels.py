"""Time the numba and numpy backends of the correlation and warp kernels.

    python benchmarks/bench_kernels.py [--batch 256] [--size 8] [--repeat 20]

Also times a short batched purification under each backend (the backend is
switched through ``NAPPURE_BACKEND`` in a subprocess, since it is read at
import time).
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from nappure import _kernels


def best_of(fn, repeat):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


PURIFY_SNIPPET = """
import time, numpy as np
from nappure import GmmPrior, PurifyConfig, TransformSpec, nappure_purify
from nappure._kernels import BACKEND
rng = np.random.default_rng(0)
n, size = {n}, {size}
prior = GmmPrior(np.full(3, 1 / 3), rng.uniform(0, 1, (3, size * size)), 0.05)
x = rng.uniform(0, 1, (n, 1, size, size))
for kind in ("conv", "flow"):
    cfg = PurifyConfig(iterations=5)
    nappure_purify(x[:2], TransformSpec(kind), prior, cfg)
    t0 = time.perf_counter()
    nappure_purify(x, TransformSpec(kind), prior, PurifyConfig(iterations={iters}))
    print(f"{{BACKEND:6s}} purify {{kind:5s}} {{time.perf_counter() - t0:8.3f}} s")
"""


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--size", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--iters", type=int, default=100)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n, s = args.batch, args.size
    x = rng.uniform(0, 1, (n, 1, s, s))
    kern = rng.uniform(0, 0.2, (n, 3, 3))
    flow = rng.uniform(-1.5, 1.5, (n, 2, s, s))
    g = rng.standard_normal((n, 1, s, s))

    cases = {
        "correlate": lambda b: _kernels.correlate(x, kern, backend=b),
        "correlate_vjp": lambda b: _kernels.correlate_vjp(x, kern, g, backend=b),
        "warp": lambda b: _kernels.warp(x, flow, backend=b),
        "warp_vjp": lambda b: _kernels.warp_vjp(x, flow, g, backend=b),
    }
    backends = _kernels.available_backends()
    print(f"batch {n} x 1 x {s} x {s}; best of {args.repeat}")
    print(f"{'kernel':15s}" + "".join(f"{b:>12s}" for b in backends) + "   speedup")
    for name, fn in cases.items():
        t = {b: best_of(lambda: fn(b), args.repeat) for b in backends}
        row = f"{name:15s}" + "".join(f"{t[b] * 1e3:10.3f}ms" for b in backends)
        if "numba" in t:
            row += f"   {t['numpy'] / t['numba']:6.1f}x"
        print(row)

    sys.stdout.flush()
    snippet = PURIFY_SNIPPET.format(n=n, size=s, iters=args.iters)
    for b in backends:
        env = dict(os.environ, NAPPURE_BACKEND=b)
        subprocess.run([sys.executable, "-c", snippet], env=env, check=True)


if __name__ == "__main__":
    main()
