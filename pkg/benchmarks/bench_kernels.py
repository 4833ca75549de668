"""Compare the numba and pure-numpy kernel backends.

Each backend runs in its own interpreter because the choice is made at
import time from ``DARC_DISABLE_NUMBA``. Usage::

    python3 benchmarks/bench_kernels.py [--dims 32] [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, timeit
import numpy as np
from darc import kernels
from darc.loss import LossConfig, subject_loss_and_grad
from darc.transform import exp_velocity, warp_volume

n, repeat = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)
dims = (n, n, n)
field = rng.random((3,) + dims)
I, A = rng.random(dims), rng.random(dims)
v = 0.5 * rng.standard_normal((3,) + dims)
coords = np.stack(np.meshgrid(*(np.arange(d, dtype=float) for d in dims), indexing="ij")).reshape(3, -1)
coords = coords + rng.uniform(-1, 1, coords.shape)
G = rng.standard_normal((3, coords.shape[1]))
cases = {
    "trilinear": lambda: kernels.trilinear(field, coords),
    "trilinear_adjoint": lambda: kernels.trilinear_adjoint(field, coords, G),
    "warp_volume": lambda: warp_volume(I, v),
    "exp_velocity": lambda: exp_velocity(v),
    "loss_and_grad_mse": lambda: subject_loss_and_grad(I, A, v, LossConfig("mse")),
}
out = {"backend": kernels.BACKEND}
for name, fn in cases.items():
    fn()  # warm-up (jit compile / caches)
    out[name] = min(timeit.repeat(fn, number=1, repeat=repeat))
print(json.dumps(out))
"""


def run(backend, dims, repeat):
    env = dict(os.environ)
    env.pop("DARC_DISABLE_NUMBA", None)
    if backend == "numpy":
        env["DARC_DISABLE_NUMBA"] = "1"
    res = subprocess.run([sys.executable, "-c", WORKER, str(dims), str(repeat)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    fast, slow = run("numba", args.dims, args.repeat), run("numpy", args.dims, args.repeat)
    if fast["backend"] != "numba" or slow["backend"] != "numpy":
        sys.exit(f"backend selection failed: {fast['backend']}, {slow['backend']}")
    print(f"grid {args.dims}^3, best of {args.repeat} (ms)")
    print(f"{'kernel':20s} {'numba':>9s} {'numpy':>9s} {'speedup':>8s}")
    for name in fast:
        if name == "backend":
            continue
        print(f"{name:20s} {1e3 * fast[name]:9.2f} {1e3 * slow[name]:9.2f} {slow[name] / fast[name]:7.1f}x")


if __name__ == "__main__":
    main()
