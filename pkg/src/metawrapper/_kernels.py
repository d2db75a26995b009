"""Hot inner loops, compiled with numba when available.

Set ``METAWRAPPER_PURE_NUMPY=1`` to force the pure-numpy implementations
(useful for debugging and for the kernel benchmark).  Both paths produce
bit-identical results on the same inputs.
"""

import os

import numpy as np

PURE_NUMPY = os.environ.get("METAWRAPPER_PURE_NUMPY", "").lower() in ("1", "true", "yes")

try:
    if PURE_NUMPY:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# pure numpy reference paths

def scatter_add_rows_numpy(values, idx, n_rows):
    out = np.zeros((n_rows, values.shape[1]), dtype=np.float64)
    np.add.at(out, idx, values)
    return out


def average_ranks_numpy(x):
    """1-based ranks of ``x`` in ascending order; ties share their mean rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # boundaries of runs of equal values
    new_run = np.empty(len(xs), dtype=bool)
    if len(xs):
        new_run[0] = True
        new_run[1:] = xs[1:] != xs[:-1]
    starts = np.flatnonzero(new_run)
    ends = np.append(starts[1:], len(xs))
    run_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(xs), dtype=np.float64)
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def sample_without_replacement_numpy(pool_sizes, k, uniforms):
    """Partial Fisher-Yates positions for each row, driven by given uniforms.

    ``uniforms`` has shape (n_rows, k).  Returns (n_rows, k) int64 positions
    into each row's pool; entries past the pool size are -1.
    """
    n = len(pool_sizes)
    out = np.full((n, k), -1, dtype=np.int64)
    for r in range(n):
        size = int(pool_sizes[r])
        perm = np.arange(size)
        for j in range(min(k, size)):
            pick = j + int(uniforms[r, j] * (size - j))
            perm[j], perm[pick] = perm[pick], perm[j]
            out[r, j] = perm[j]
    return out


# ---------------------------------------------------------------------------
# numba paths

if HAVE_NUMBA:

    @njit(cache=True)
    def _scatter_add_rows_jit(values, idx, n_rows):
        out = np.zeros((n_rows, values.shape[1]), dtype=np.float64)
        for i in range(idx.shape[0]):
            r = idx[i]
            for j in range(values.shape[1]):
                out[r, j] += values[i, j]
        return out

    @njit(cache=True)
    def _average_ranks_jit(x, order):
        n = x.shape[0]
        ranks = np.empty(n, dtype=np.float64)
        i = 0
        while i < n:
            j = i
            while j + 1 < n and x[order[j + 1]] == x[order[i]]:
                j += 1
            r = (i + j + 2) / 2.0
            for t in range(i, j + 1):
                ranks[order[t]] = r
            i = j + 1
        return ranks

    @njit(cache=True)
    def _sample_without_replacement_jit(pool_sizes, k, uniforms):
        n = pool_sizes.shape[0]
        out = np.full((n, k), -1, dtype=np.int64)
        for r in range(n):
            size = pool_sizes[r]
            perm = np.arange(size)
            for j in range(min(k, size)):
                pick = j + int(uniforms[r, j] * (size - j))
                tmp = perm[j]
                perm[j] = perm[pick]
                perm[pick] = tmp
                out[r, j] = perm[j]
        return out


def scatter_add_rows(values, idx, n_rows):
    """Sum rows of ``values`` (n, d) into an (n_rows, d) array at ``idx``."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if HAVE_NUMBA:
        return _scatter_add_rows_jit(values, idx, n_rows)
    return scatter_add_rows_numpy(values, idx, n_rows)


def average_ranks(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if HAVE_NUMBA:
        return _average_ranks_jit(x, np.argsort(x, kind="mergesort"))
    return average_ranks_numpy(x)


def sample_without_replacement(pool_sizes, k, uniforms):
    pool_sizes = np.ascontiguousarray(pool_sizes, dtype=np.int64)
    uniforms = np.ascontiguousarray(uniforms, dtype=np.float64)
    if HAVE_NUMBA:
        return _sample_without_replacement_jit(pool_sizes, k, uniforms)
    return sample_without_replacement_numpy(pool_sizes, k, uniforms)
