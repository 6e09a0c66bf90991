"""Allocator tuning for the many short-lived arrays of small matrix products."""
from __future__ import annotations

import ctypes
import ctypes.util
import os
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_done = False


def tune_allocator(threshold: int = 64 << 20) -> bool:
    """Keep freed buffers in the heap instead of unmapping them.

    Training allocates activation arrays of a few hundred kilobytes per
    step; with glibc's default thresholds each one is a fresh ``mmap`` and
    the page faults cost more than the arithmetic. Returns whether the
    settings were applied. Set ``DTFL_NO_MALLOC_TUNING`` to skip.
    """
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux") or os.environ.get("DTFL_NO_MALLOC_TUNING"):
        return False
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, threshold) and libc.mallopt(_M_TRIM_THRESHOLD, 2 * threshold)
    except (OSError, AttributeError):
        return False
    _done = bool(ok)
    return _done
