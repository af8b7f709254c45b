"""Time the compiled kernels against the pure-Python fallback.

Run ``python3 benchmarks/bench_kernels.py [--repeat N]``. Each kernel is
called with identical inputs on both backends; outputs are checked for
agreement before timings are reported.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from dsrlab import _pykernels
from dsrlab.measure import MLS_TAPS

try:
    from dsrlab import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(rng):
    x = rng.standard_normal(4000)
    h = rng.standard_normal(300)
    s = rng.standard_normal(4000)
    y = rng.standard_normal(4000)
    taps = np.asarray(MLS_TAPS[14], dtype=np.int64)
    room = np.array([6.0, 5.0, 3.0])
    src = np.array([2.0, 2.0, 1.5])
    mic = np.array([4.0, 3.0, 1.2])
    refl = np.full(6, 0.8)
    return {
        "direct_convolve 4000x300": lambda k: k.direct_convolve(x, h),
        "direct_xcorr 4000, lag 200": lambda k: k.direct_xcorr(s, y, 200),
        "lfsr_bits order 14": lambda k: k.lfsr_bits(14, taps, 2**14 - 1),
        "lfsr_period order 14": lambda k: k.lfsr_period(14, taps),
        "image_taps order 8": lambda k: k.image_taps(room, src, mic, refl, 343.0, 16000.0, 8,
                                                     0.0, 0.0, 3.0, 1.0, 0.01, 0, 0.0, 0.0, 4000),
    }


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3, help="timing repetitions (best is kept)")
    args = parser.parse_args(argv)
    if _ckernels is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30}{'python [ms]':>14}{'cython [ms]':>14}{'speed-up':>10}")
    for name, call in cases(rng).items():
        ref, fast = call(_pykernels), call(_ckernels)
        if not np.allclose(np.asarray(ref, dtype=float), np.asarray(fast, dtype=float), rtol=1e-9, atol=1e-12):
            raise SystemExit(f"{name}: backends disagree")
        times = []
        for mod in (_pykernels, _ckernels):
            timer = timeit.Timer(lambda m=mod: call(m))
            number, _ = timer.autorange()
            times.append(min(timer.repeat(args.repeat, number)) / number * 1e3)
        print(f"{name:<30}{times[0]:>14.3f}{times[1]:>14.3f}{times[0] / times[1]:>9.1f}x")


if __name__ == "__main__":
    main()
