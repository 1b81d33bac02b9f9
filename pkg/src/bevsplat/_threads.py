"""Worker-count plumbing for the numba-parallel kernels.

Outputs are bitwise-independent of the thread count by construction
(parallel loops write disjoint slots or fixed-chunk buffers reduced in a
fixed order), so clamping an over-subscribed request is safe.
"""

from __future__ import annotations

import os

import numba

ENV_VAR = "BEVSPLAT_THREADS"


def max_threads() -> int:
    return numba.config.NUMBA_NUM_THREADS


def resolve_threads(requested: int | None = None) -> int:
    """Pick a worker count: explicit argument, else $BEVSPLAT_THREADS, else all."""
    if requested is None:
        env = os.environ.get(ENV_VAR)
        if env is not None:
            requested = int(env)
    if requested is None:
        return max_threads()
    if requested < 1:
        raise ValueError(f"thread count must be >= 1, got {requested}")
    return min(requested, max_threads())


def set_threads(requested: int | None = None) -> int:
    """Apply a worker count to the kernel runtime; returns the effective count."""
    n = resolve_threads(requested)
    numba.set_num_threads(n)
    return n
