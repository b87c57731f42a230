#!/usr/bin/env python3
"""Benchmark the compiled Bellman backup against the numpy fallback.

Builds synthetic dense and sparse kernels at a few sizes and times full
sweeps under each backend. Run from the repository root:

    python benchmarks/backend_bench.py [--sweeps N]
"""

import argparse
import time

import numpy as np

from sgsynth._kernels import available_backends, set_backend
from sgsynth.synthesis import ProductGeometry, _bellman_step, initial_values


def dense_geometry(rng, S, U, W, Q):
    kernel = rng.random((S * U * W, S))
    kernel /= kernel.sum(axis=1, keepdims=True)
    cand = np.zeros((S, Q, Q), dtype=bool)
    cand[:, np.arange(Q), np.arange(Q)] = True
    extra = rng.integers(0, Q, size=S)
    cand[np.arange(S), 0, extra] = True
    accepting = np.zeros(Q, dtype=bool)
    accepting[-1] = True
    return ProductGeometry(n_states=S, n_u=U, n_w=W, accepting=accepting,
                           cand_mask=cand, t_matrix=kernel)


def sparse_geometry(rng, S, U, W, Q, nnz_per_row=24):
    rows = S * U * W
    indices = []
    data = []
    for _ in range(rows):
        cols = np.sort(rng.choice(S, size=min(nnz_per_row, S), replace=False))
        vals = rng.random(cols.shape[0])
        vals /= vals.sum()
        indices.append(cols)
        data.append(vals)
    geo = dense_geometry(rng, S, U, W, Q)
    geo.t_matrix = None
    geo.indices = np.concatenate(indices).astype(np.int64)
    geo.data = np.concatenate(data)
    geo.indptr = (np.arange(rows + 1) * min(nnz_per_row, S)).astype(np.int64)
    geo.truncated = np.zeros(rows)
    return geo


def time_sweeps(geo, sweeps):
    v = initial_values(geo)
    t0 = time.perf_counter()
    for _ in range(sweeps):
        v, _, _ = _bellman_step(geo, 0.01, "violation", v)
    return time.perf_counter() - t0, v


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--sweeps", type=int, default=20)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    cases = [
        ("dense  101x50x10 (running-example scale)", dense_geometry(rng, 101, 50, 10, 4)),
        ("dense  301x20x8", dense_geometry(rng, 301, 20, 8, 3)),
        ("sparse 561x13x12 (quadrotor desk scale)", sparse_geometry(rng, 561, 13, 12, 2)),
        ("sparse 2001x13x12", sparse_geometry(rng, 2001, 13, 12, 2)),
    ]
    backends = available_backends()
    print(f"backends available: {', '.join(backends)}; {args.sweeps} sweeps per case\n")
    header = f"{'case':45s}" + "".join(f"{b:>12s}" for b in backends) + f"{'speedup':>10s}"
    print(header)
    print("-" * len(header))
    for name, geo in cases:
        times = {}
        ref = None
        for backend in backends:
            set_backend(backend)
            dt, v = time_sweeps(geo, args.sweeps)
            times[backend] = dt
            if ref is None:
                ref = v
            else:
                err = np.max(np.abs(v - ref))
                assert err < 1e-10, f"backend disagreement {err:.2e}"
        set_backend(None)
        speed = times.get("numpy", np.nan) / times.get("compiled", np.nan) if len(backends) > 1 else float("nan")
        row = f"{name:45s}" + "".join(f"{times[b]:11.3f}s" for b in backends)
        if len(backends) > 1:
            row += f"{speed:9.2f}x"
        print(row)
    if len(backends) == 1:
        print("\ncompiled extension not built; showing numpy fallback only")


if __name__ == "__main__":
    main()
