"""Benchmark the compiled filtering kernel against the NumPy fallback.

Runs the forward filter and backward smoother on a simulated panel with both
backends, reports median wall time per pass and the speedup, and checks that
the two implementations agree numerically.

Usage::

    python3 benchmarks/bench_filter.py [--n-series 6] [--n-factors 2]
                                       [--n-obs 2000] [--repeats 20]
"""
import argparse
import statistics
import time

import numpy as np

from mlss import _filter_py
from mlss.models import demo_spec, simulate_mlss

try:
    from mlss import _filter_cy
except ImportError:  # extension not built
    _filter_cy = None


def _time_backend(mod, spec, y, repeats):
    args = (spec.lambda_tilde, spec.phi_tilde, spec.q_tilde,
            spec.r_diag.copy(), spec.a, spec.sigma0, y)
    out = mod.filter_pass(*args)
    gain_last = np.ascontiguousarray(out[4][-1])
    filter_times, smoother_times = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = mod.filter_pass(*args)
        t1 = time.perf_counter()
        mod.smoother_pass(spec.lambda_tilde, spec.phi_tilde, gain_last,
                          out[1], out[2], out[3])
        t2 = time.perf_counter()
        filter_times.append(t1 - t0)
        smoother_times.append(t2 - t1)
    return (statistics.median(filter_times),
            statistics.median(smoother_times), out[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n-series", type=int, default=6)
    parser.add_argument("--n-factors", type=int, default=2)
    parser.add_argument("--n-obs", type=int, default=2000)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    spec = demo_spec(args.n_series, args.n_factors)
    panel, _ = simulate_mlss(spec, args.n_obs, seed=0)
    y = panel.values

    print(f"panel: {args.n_series} series x {args.n_obs} obs, "
          f"{args.n_factors} common factors, state dim {spec.dim_state}; "
          f"median of {args.repeats} runs\n")
    print(f"{'backend':<8} {'filter':>12} {'smoother':>12} {'total':>12}")

    py_f, py_s, py_ll = _time_backend(_filter_py, spec, y, args.repeats)
    rows = [("python", py_f, py_s)]
    if _filter_cy is not None:
        cy_f, cy_s, cy_ll = _time_backend(_filter_cy, spec, y, args.repeats)
        rows.insert(0, ("cython", cy_f, cy_s))
    for name, tf, ts in rows:
        print(f"{name:<8} {tf * 1e3:>10.2f}ms {ts * 1e3:>10.2f}ms "
              f"{(tf + ts) * 1e3:>10.2f}ms")

    if _filter_cy is not None:
        speedup = (py_f + py_s) / (cy_f + cy_s)
        print(f"\nspeedup: {speedup:.1f}x")
        print(f"loglik agreement: |diff| = {abs(py_ll - cy_ll):.3e}")
        if abs(py_ll - cy_ll) > 1e-6 * max(1.0, abs(py_ll)):
            raise SystemExit("backends disagree")
    else:
        print("\ncompiled extension not available; ran fallback only")


if __name__ == "__main__":
    main()
