"""Numba vs. numpy timings for the hot kernels in ``trireweight.kernels``.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
The first numba call (compilation) is excluded from the timings.
"""
import argparse
import timeit

import numpy as np

from trireweight import kernels


def cases(rng):
    originals = rng.normal(size=(200, 16)) * 3
    origin = rng.integers(200, size=5000)
    gen = originals[origin] + rng.normal(scale=0.5, size=(5000, 16))
    pos, neg = rng.random(3500), rng.random(1500)
    probs = rng.dirichlet(np.ones(5), size=100_000)
    return {
        "nearest_is_origin (5000 x 200)": (
            lambda: kernels.nearest_is_origin_numpy(gen, origin, originals),
            lambda: kernels.nearest_is_origin_numba(gen, origin, originals)),
        "ranking_quality (3500 x 1500)": (
            lambda: kernels.ranking_quality_numpy(pos, neg),
            lambda: kernels.ranking_quality_numba(pos, neg)),
        "floored_ce_all_labels (1e5 x 5)": (
            lambda: kernels.floored_ce_all_labels_numpy(probs, 1e-6),
            lambda: kernels._floored_ce_all_labels_nb(probs, 1e-6)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, (np_fn, nb_fn) in cases(np.random.default_rng(0)).items():
        a, b = np_fn(), nb_fn()  # warm-up, includes jit compilation
        assert np.allclose(a, b), name
        t_np = min(timeit.repeat(np_fn, number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(nb_fn, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:34s} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
