"""Benchmark the compiled conv kernels against the numpy fallback on the
default desk-CNN layer shapes, checking agreement along the way."""

from __future__ import annotations

import time

import numpy as np

from ._kernels import pykernels

try:
    from ._kernels import _convext
except ImportError:
    _convext = None


def _best_time(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def run_benchmark(batch=128, repeat=5, image=28):
    """Returns rows of timing results; prints a table."""
    shapes = [
        (batch, 1, image, image, 8, 3, 1),
        (batch, 8, image - 2, image - 2, 16, 3, 2),
    ]
    rows = []
    rng = np.random.default_rng(0)
    print(f"{'shape':34s} {'kernel':12s} {'python':>10s} {'compiled':>10s} {'speedup':>8s}")
    for (n, c, h, w, f, k, s) in shapes:
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((f, c, k, k))
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        gy = rng.standard_normal((n, f, ho, wo))
        cases = [
            ("conv_fwd", "conv_fwd", (x, wt, s)),
            ("conv_bwd_input", "conv_bwd_input", (gy, wt, s, h, w)),
            ("conv_bwd_weight", "conv_bwd_weight", (gy, x, s, k, k)),
        ]
        label = f"n={n} c={c} {h}x{w} f={f} k={k} s={s}"
        for name, attr, args in cases:
            tp = _best_time(getattr(pykernels, attr), args, repeat)
            if _convext is not None:
                ref = getattr(pykernels, attr)(*args)
                got = getattr(_convext, attr)(*args)
                if not np.allclose(ref, got, rtol=1e-10, atol=1e-12):
                    raise AssertionError(f"{name}: backends disagree")
                tc = _best_time(getattr(_convext, attr), args, repeat)
                speed = tp / tc
            else:
                tc, speed = float("nan"), float("nan")
            rows.append({"shape": label, "kernel": name, "python_s": tp,
                         "compiled_s": tc, "speedup": speed})
            print(f"{label:34s} {name:12s} {tp*1e3:9.2f}ms {tc*1e3:9.2f}ms "
                  f"{speed:7.2f}x")
    if _convext is None:
        print("compiled extension not built; showing fallback only")
    return rows
