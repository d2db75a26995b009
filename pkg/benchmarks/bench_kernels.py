"""Compare the numba kernels with their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 50] [--json out.json]

Both paths are imported from the same module, so the comparison does not
depend on METAWRAPPER_PURE_NUMPY.  Outputs are checked for equality first.
"""

import argparse
import json
import time

import numpy as np

from metawrapper import _kernels as k


def _time(fn, repeat):
    fn()  # compile / warm caches
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(samples))


def cases(rng):
    values = rng.normal(size=(2560, 16))
    idx = rng.integers(0, 3000, size=2560)
    scores = np.round(rng.random(10000), 3)  # plenty of ties
    sizes = rng.integers(0, 40, size=10000)
    uniforms = rng.random((10000, 20))
    yield ("scatter_add_rows", lambda: k.scatter_add_rows_numpy(values, idx, 3000),
           lambda: k._scatter_add_rows_jit(values, idx, 3000))
    yield ("average_ranks", lambda: k.average_ranks_numpy(scores),
           lambda: k._average_ranks_jit(scores, np.argsort(scores, kind="mergesort")))
    yield ("sample_without_replacement", lambda: k.sample_without_replacement_numpy(sizes, 20, uniforms),
           lambda: k._sample_without_replacement_jit(sizes, 20, uniforms))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)
    if not k.HAVE_NUMBA:
        raise SystemExit("numba is unavailable (or METAWRAPPER_PURE_NUMPY is set); nothing to compare")
    rng = np.random.default_rng(0)
    results = {}
    for name, numpy_fn, jit_fn in cases(rng):
        if not np.array_equal(numpy_fn(), jit_fn()):
            raise SystemExit(f"{name}: numba and numpy outputs differ")
        t_np, t_jit = _time(numpy_fn, args.repeat), _time(jit_fn, args.repeat)
        results[name] = {"numpy_ms": t_np, "numba_ms": t_jit, "speedup": t_np / t_jit}
        print(f"{name:28s} numpy {t_np:8.3f} ms   numba {t_jit:8.3f} ms   x{t_np / t_jit:6.1f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
