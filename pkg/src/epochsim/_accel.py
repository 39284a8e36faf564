"""Hot page-table kernels with a numba path and a pure-numpy fallback.

Set ``EPOCHSIM_NO_NUMBA=1`` to force the numpy path (also used when numba
is not importable). Both paths must agree bit-for-bit.
"""

from __future__ import annotations

import os

import numpy as np

GROUPS_PER_LEAF = 16  # 1024 leaf entries / 64 pages per shared counter


def _want_numba() -> bool:
    if os.environ.get("EPOCHSIM_NO_NUMBA", "").lower() in ("1", "true", "yes"):
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


USE_NUMBA = _want_numba()


# --- numpy reference path ----------------------------------------------------

def next_set_np(flags: np.ndarray, start: int) -> int:
    if start >= flags.shape[0]:
        return -1
    hits = np.flatnonzero(flags[start:])
    return int(hits[0]) + start if hits.size else -1


def predictor_sweep_np(valid, spec, private, shared, priv_bit, shared_bit, out):
    """One predictor visit of a leaf node.

    Candidates are live (valid, not yet speculated) pages whose private
    counter and group counter are both zero. The check happens before the
    cyclic clear so a page idle for a full decay cycle is picked next time.
    """
    live = (valid != 0) & (spec == 0)
    groups = np.repeat(shared, 64)
    cand = np.flatnonzero(live & (private == 0) & (groups == 0))
    out[: cand.size] = cand
    private[live] &= np.uint8(~(1 << priv_bit) & 0xFF)
    touched = np.unique(np.flatnonzero(live) // 64)
    shared[touched] &= np.uint8(~(1 << shared_bit) & 0xFF)
    return cand.size


# --- numba path --------------------------------------------------------------

if USE_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _next_set_nb(flags, start):
        for i in range(start, flags.shape[0]):
            if flags[i] != 0:
                return i
        return -1

    @njit(cache=True)
    def _predictor_sweep_nb(valid, spec, private, shared, priv_bit, shared_bit, out):
        n = 0
        pmask = np.uint8(~(1 << priv_bit) & 0xFF)
        smask = np.uint8(~(1 << shared_bit) & 0xFF)
        touched = np.zeros(shared.shape[0], dtype=np.uint8)
        for i in range(valid.shape[0]):
            if valid[i] == 0 or spec[i] != 0:
                continue
            g = i // 64
            if private[i] == 0 and shared[g] == 0:
                out[n] = i
                n += 1
            private[i] &= pmask
            touched[g] = 1
        for g in range(shared.shape[0]):
            if touched[g]:
                shared[g] &= smask
        return n

    def next_set(flags: np.ndarray, start: int) -> int:
        return int(_next_set_nb(flags, start))

    def predictor_sweep(valid, spec, private, shared, priv_bit, shared_bit, out):
        return int(_predictor_sweep_nb(valid, spec, private, shared,
                                       priv_bit, shared_bit, out))
else:
    next_set = next_set_np
    predictor_sweep = predictor_sweep_np


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
