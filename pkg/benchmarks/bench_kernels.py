"""Time the numba kernels against their pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes follow the desk model: fusion conv2d over a batch of 16 utterances
(8 channels, 40 frames, 32 dims), the depthwise conv of the conformer conv
module, and edit distance on SOT-length token sequences.
"""

import argparse
import timeit

import numpy as np

from mfcca import _kernels as K


def cases(rng):
    x = rng.standard_normal((16, 8, 40, 32))
    w = rng.standard_normal((4, 8, 3, 3))
    b = rng.standard_normal(4)
    g = rng.standard_normal((16, 4, 40, 32))
    dx = rng.standard_normal((128, 40, 32))
    dw = rng.standard_normal((32, 7))
    db = rng.standard_normal(32)
    dg = rng.standard_normal((128, 40, 32))
    ea = rng.integers(0, 24, 60)
    eb = rng.integers(0, 24, 55)
    return {
        "conv2d forward": (K._conv2d_fwd_loops, K._conv2d_fwd_numpy, (x, w, b)),
        "conv2d backward": (K._conv2d_bwd_loops, K._conv2d_bwd_numpy, (x, w, g)),
        "dwconv forward": (K._dwconv_fwd_loops, K._dwconv_fwd_numpy, (dx, dw, db)),
        "dwconv backward": (K._dwconv_bwd_loops, K._dwconv_bwd_numpy, (dx, dw, dg)),
        "edit distance": (K._edit_distance_loops, K._edit_distance_numpy, (ea, eb)),
    }


def _max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(u) - np.asarray(v)))) for u, v in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba unavailable or disabled; only the numpy path would run")
        return 1
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}{'max diff':>11}")
    for name, (fast, slow, inputs) in cases(np.random.default_rng(0)).items():
        diff = _max_diff(fast(*inputs), slow(*inputs))  # also triggers compilation
        t_fast = min(timeit.repeat(lambda: fast(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_slow = min(timeit.repeat(lambda: slow(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<18}{t_fast:>10.3f}{t_slow:>10.3f}{t_slow / t_fast:>8.1f}x{diff:>11.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
