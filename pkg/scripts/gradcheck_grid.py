"""Finite-difference gradient check over the whole FCN hyperparameter grid.

Usage: python scripts/gradcheck_grid.py [--params 200] [--zero-input]
"""
import argparse
import itertools
import time

import numpy as np

from poredet.fcn import PATCH_SIZES, PORE_RADII, FcnConfig, build_model
from poredet.nn import grad_check


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--params", type=int, default=200, help="parameters sampled per config")
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--zero-input", action="store_true", help="check on an all-zero batch")
    ap.add_argument("--tol", type=float, default=1e-5)
    args = ap.parse_args()

    t0 = time.perf_counter()
    worst, failed = 0.0, 0
    print(f"{'patch':>5} {'r':>2} {'pool':>5} {'res':>5} {'max rel err':>12} {'corrupted':>10} {'s':>6}")
    for patch, r, pool, res in itertools.product(PATCH_SIZES, PORE_RADII, (False, True), (False, True)):
        cfg = FcnConfig(patch_size=patch, pore_radius=r, use_pooling=pool, use_residual=res, seed=patch * 7 + r)
        model = build_model(cfg, dtype=np.float64)
        rng = np.random.default_rng(patch * 100 + r * 10 + pool * 2 + res)
        x = rng.random((args.batch, 1, patch, patch))
        if args.zero_input:
            x[:] = 0.0
        target = rng.random((args.batch, 1, 1, 1))
        t = time.perf_counter()
        err = grad_check(model, x, target, max_params=args.params, rng=rng)
        bad = grad_check(model, x, target, max_params=10, rng=rng, corrupt=1.1)
        ok = err < args.tol and bad > 1e-2
        failed += not ok
        worst = max(worst, err)
        print(f"{patch:>5} {r:>2} {str(pool):>5} {str(res):>5} {err:12.2e} {bad:10.3f} {time.perf_counter() - t:6.1f}"
              + ("" if ok else "  FAIL"))
    print(f"worst {worst:.2e}; {failed} failing configs; {time.perf_counter() - t0:.0f} s total")
    return 1 if failed else 0


if __name__ == "__main__":
    raise SystemExit(main())
