import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from epochsim import _accel

leaf = arrays(np.uint8, 1024, elements=st.integers(0, 1))
priv = arrays(np.uint8, 1024, elements=st.integers(0, 3))
groups = arrays(np.uint8, 16, elements=st.integers(0, 7))


@settings(max_examples=100, deadline=None)
@given(leaf, st.integers(0, 1100))
def test_next_set_matches_reference(flags, start):
    assert _accel.next_set(flags, start) == _accel.next_set_np(flags, start)
    expect = next((i for i in range(start, 1024) if flags[i]), -1)
    assert _accel.next_set_np(flags, start) == expect


@settings(max_examples=100, deadline=None)
@given(leaf, leaf, priv, groups, st.integers(0, 1), st.integers(0, 2))
def test_predictor_sweep_matches_reference(valid, spec, private, shared, pbit, sbit):
    spec = spec & valid
    outs = []
    for fn in (_accel.predictor_sweep_np, _accel.predictor_sweep):
        p, s = private.copy(), shared.copy()
        out = np.empty(1024, dtype=np.int64)
        n = fn(valid, spec, p, s, pbit, sbit, out)
        outs.append((list(out[:n]), p, s))
    (a, pa, sa), (b, pb, sb) = outs
    assert a == b and (pa == pb).all() and (sa == sb).all()
    # plain loop reference
    live = [i for i in range(1024) if valid[i] and not spec[i]]
    want = [i for i in live if private[i] == 0 and shared[i // 64] == 0]
    assert a == want
    for i in live:
        assert pa[i] == int(private[i]) & ~(1 << pbit) & 0xFF
    touched = {i // 64 for i in live}
    for g in range(16):
        exp = int(shared[g]) & ~(1 << sbit) & 0xFF if g in touched else shared[g]
        assert sa[g] == exp


def test_backend_name():
    assert _accel.backend() in ("numba", "numpy")
