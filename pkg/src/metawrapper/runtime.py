"""Process-level tuning applied by the command-line entry point.

Training allocates many short-lived arrays of a few megabytes.  glibc
serves those from fresh ``mmap`` regions by default, so every temporary
costs a round of page faults; raising the mmap and trim thresholds keeps
them on the heap for reuse.  This changes allocator policy for the whole
process, so library code never calls it implicitly.
"""

import ctypes
import ctypes.util
import logging

log = logging.getLogger(__name__)

M_TRIM_THRESHOLD = -1
M_MMAP_THRESHOLD = -3
THRESHOLD = 256 * 1024 * 1024

_applied = None


def keep_large_allocations(threshold=THRESHOLD):
    """Raise glibc's mmap/trim thresholds; returns False where unsupported."""
    global _applied
    if _applied is not None:
        return _applied
    _applied = False
    name = ctypes.util.find_library("c")
    if name is None:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    mallopt.argtypes = [ctypes.c_int, ctypes.c_int]
    ok = bool(mallopt(M_MMAP_THRESHOLD, threshold)) and bool(mallopt(M_TRIM_THRESHOLD, threshold))
    log.debug("allocator thresholds %s", "raised" if ok else "unchanged")
    _applied = ok
    return ok
