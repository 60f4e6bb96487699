"""Compare the numba-compiled kernels with the pure-numpy fallback.

Each backend runs in its own interpreter because the choice is made at
import time from ``METALAND_NUMBA``.

    python3 benchmarks/bench_kernels.py [--repeat 200]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

WORKER = r"""
import json, sys, timeit
import numpy as np
from metaland import algorithms, kernels, models, tasks
repeat = int(sys.argv[1])
spec = models.PROFILES["desk"]
pool = tasks.build_pool(tasks.TaskDistributionConfig())
ep = tasks.sample_task(pool, "train", 5, 1, 15, (0, 0))
p = models.init_params(spec, 0)
v = np.random.default_rng(0).standard_normal(spec.n_params)
sx, sy = ep.support
tx, ty = ep.target
batch = [tasks.sample_task(pool, "train", 5, 1, 15, (0, 0, 0, i)) for i in range(4)]
hp = algorithms.HyperParams()
cases = {
    "logits (75x20)": lambda: kernels.logits(p, spec.dims, tx),
    "loss_grad (75x20)": lambda: kernels.loss_grad(p, spec.dims, tx, ty),
    "hvp (5x20)": lambda: kernels.hvp(p, spec.dims, sx, sy, v),
    "meta-gradient (n=4, T=5)": lambda: algorithms.maml_meta_gradient(spec, p, batch, hp),
}
out = {}
for name, fn in cases.items():
    fn()  # compile / warm up
    n = max(1, repeat // 20) if name.startswith("meta") else repeat
    best = min(timeit.repeat(fn, number=n, repeat=3)) / n
    out[name] = best
print(json.dumps({"numba": kernels.USE_NUMBA, "timings": out}))
"""


def run_backend(flag: str, repeat: int) -> dict:
    env = dict(os.environ, METALAND_NUMBA=flag)
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, capture_output=True,
                         text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    t0 = timeit.default_timer()
    fast = run_backend("1", args.repeat)
    slow = run_backend("0", args.repeat)
    if not fast["numba"]:
        print("numba is not installed; both columns use numpy")
    print(f"{'kernel':28s} {'numba (us)':>12s} {'numpy (us)':>12s} {'speedup':>8s}")
    for name, t_fast in fast["timings"].items():
        t_slow = slow["timings"][name]
        print(f"{name:28s} {t_fast * 1e6:12.1f} {t_slow * 1e6:12.1f} {t_slow / t_fast:8.2f}")
    print(f"total wall time {timeit.default_timer() - t0:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
