"""Time each kernel under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

The first numba call compiles (or loads the on-disk cache); it is timed
separately and excluded from the steady-state figures.
"""

import argparse
import json
import time

import numpy as np

from heki.kernels import AVAILABLE_BACKENDS, get_kernel


def cases(rng):
    n, m = 200, 400
    sub = np.full(n - 1, -1.0)
    diag = np.full(n, 2.5)
    J, K, I = 50, 16, 50
    u = rng.standard_normal((J, I))
    A = rng.standard_normal((K, I))
    return {
        "thomas_solve": (sub, diag, sub.copy(), rng.standard_normal((m, n))),
        "cross_covariance": (u, rng.standard_normal((J, K))),
        "gaussian_taper": (500, 10.0),
        "linear_flow": (u, A, np.eye(K), rng.standard_normal(K), np.eye(I), 0.1, np.ones((I, I)), 1e-4, 200),
    }


def bench(repeat=5, seed=0):
    rows = []
    for name, args in cases(np.random.default_rng(seed)).items():
        outs = {}
        for backend in AVAILABLE_BACKENDS:
            fn = get_kernel(name, backend)
            t0 = time.perf_counter()
            outs[backend] = fn(*args)
            first = time.perf_counter() - t0
            times = []
            for _ in range(repeat):
                t0 = time.perf_counter()
                fn(*args)
                times.append(time.perf_counter() - t0)
            rows.append({"kernel": name, "backend": backend, "first_call_s": first, "best_s": min(times)})
        ref = outs["numpy"]
        for backend, out in outs.items():
            a = np.concatenate([np.ravel(x) for x in (out if isinstance(out, tuple) else (out,))])
            b = np.concatenate([np.ravel(x) for x in (ref if isinstance(ref, tuple) else (ref,))])
            gap = float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))
            for r in rows:
                if r["kernel"] == name and r["backend"] == backend:
                    r["max_rel_gap_vs_numpy"] = gap
    return rows


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", default=None)
    args = p.parse_args()
    rows = bench(args.repeat)
    print(f"{'kernel':18s} {'backend':8s} {'first call':>12s} {'best':>12s} {'gap vs numpy':>13s}")
    for r in rows:
        print(
            f"{r['kernel']:18s} {r['backend']:8s} {r['first_call_s'] * 1e3:10.2f}ms "
            f"{r['best_s'] * 1e3:10.3f}ms {r['max_rel_gap_vs_numpy']:13.1e}"
        )
    for name in dict.fromkeys(r["kernel"] for r in rows):
        by = {r["backend"]: r["best_s"] for r in rows if r["kernel"] == name}
        if "numba" in by:
            print(f"speedup {name}: {by['numpy'] / by['numba']:.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
