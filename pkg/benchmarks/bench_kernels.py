"""Times the compiled kernels against the numpy fallback on a toy-policy batch.

Usage: python benchmarks/bench_kernels.py [--states N] [--repeat R]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from sparsevid import _kernels_py, kernels


def make_batch(states: int, actions: int = 9, dim: int = 8, seed: int = 0):
    rng = np.random.default_rng(seed)
    phi = rng.normal(size=(states, actions, dim))
    mask = rng.random((states, actions)) < 0.8
    mask[:, 0] = True
    theta = rng.normal(size=dim)
    old_logp = _kernels_py.policy_logp(phi, mask, theta + rng.normal(0, 0.05, size=dim))
    acts = np.array([rng.choice(np.flatnonzero(m)) for m in mask])
    adv = rng.normal(size=states)
    weight = np.full(states, 1.0 / states)
    return phi, mask, acts, theta, old_logp, adv, weight


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--states", type=int, default=4096)
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)

    phi, mask, acts, theta, old_logp, adv, weight = make_batch(args.states)
    rewards = np.random.default_rng(1).normal(size=64)
    impls = {"numpy": _kernels_py}
    if kernels.BACKEND == "compiled":
        impls["compiled"] = kernels
    else:
        print("compiled kernels unavailable; timing the numpy fallback only")

    cases = {
        "policy_logp": lambda m: m.policy_logp(phi, mask, theta),
        "surrogate_grad": lambda m: m.surrogate_grad(phi, mask, acts, theta, old_logp, adv,
                                                     weight, 0.2, 0.001),
        "discounted_return": lambda m: m.discounted_return(rewards, 0.99),
    }
    print(f"{'kernel':<18} {'impl':<9} {'ms/call':>9}")
    for name, fn in cases.items():
        timings = {}
        for label, impl in impls.items():
            fn(impl)
            timings[label] = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<18} {label:<9} {timings[label]:>9.3f}")
        if len(timings) == 2:
            print(f"{name:<18} {'speedup':<9} {timings['numpy'] / timings['compiled']:>8.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
