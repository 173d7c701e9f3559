"""Compare the compiled and numpy kernel backends.

Usage::

    python benchmarks/bench_kernels.py [--situations 8000] [--repeat 20]

Times the batched MNL and NL log-probability + gradient kernels and one full
marginal log-likelihood evaluation per backend, and reports the speedup.
"""

import argparse
import time

import numpy as np

from lccmkit import _backend
from lccmkit.lccm import marginal_loglik_and_gradient
from lccmkit.synthgen import generate, recovery_scenario


def batch(rng, S, J=4, D=5):
    X = np.ascontiguousarray(rng.normal(size=(S, J, D)))
    avail = np.ones((S, J), dtype=np.uint8)
    avail[rng.random((S, J)) < 0.15] = 0
    avail[:, 0] = 1
    chosen = np.zeros(S, dtype=np.intp)
    for s in range(S):
        chosen[s] = rng.choice(np.flatnonzero(avail[s]))
    return X, avail, chosen, rng.normal(size=D)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--situations", type=int, default=8000)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    impls = _backend.implementations()
    rng = np.random.default_rng(0)
    X, avail, chosen, beta = batch(rng, args.situations)
    nest_of = np.array([0, 0, 1, 1], dtype=np.intp)
    lambdas = np.array([0.6, 0.85])

    cases = {
        "mnl_batch": lambda impl: _backend.mnl_batch(X, avail, chosen, beta, impl=impl),
        "nl_batch": lambda impl: _backend.nl_batch(X, avail, chosen, nest_of, lambdas, beta, impl=impl),
    }
    rows = []
    for name, fn in cases.items():
        rows.append((name, {k: best_of(lambda: fn(m), args.repeat) for k, m in impls.items()}))

    # end-to-end: one likelihood+gradient evaluation on a recovery panel
    g = recovery_scenario("NL", n_respondents=1000, n_situations=8, seed=0)
    ds = generate(g).choices
    timings = {}
    for k, m in impls.items():
        saved = _backend._impl
        _backend._impl = m
        try:
            timings[k] = best_of(lambda: marginal_loglik_and_gradient(ds, g.true_params, g.spec), max(3, args.repeat // 4))
        finally:
            _backend._impl = saved
    rows.append(("NL marginal loglik+grad (N=1000, T=8)", timings))

    print(f"selected backend: {_backend.BACKEND}")
    print(f"{'case':40s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, t in rows:
        py, cy = t.get("python"), t.get("cython")
        speed = f"{py / cy:8.1f}" if cy else "     n/a"
        cy_s = f"{1e3 * cy:10.2f}" if cy else "       n/a"
        print(f"{name:40s} {1e3 * py:10.2f} {cy_s} {speed}")


if __name__ == "__main__":
    main()
