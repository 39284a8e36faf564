import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epochsim import _accel
from epochsim.config import InfeasibleCL
from epochsim.dram import (DramPageTable, LocalityPredictor, MemoryController,
                           TableExhausted, WalkCursor, compute_page_budget, cyclic_clear,
                           tune_rate)

from conftest import small_config


def test_first_insert_allocates_full_path():
    t = DramPageTable(0)
    leaf, idx, inner_new, first = t.insert(5)
    assert (idx, inner_new, first) == (5, 3, True)
    assert len(t.nodes) == 4
    _, _, inner_new, first = t.insert(5)
    assert (inner_new, first) == (0, False)
    assert t.valid_count == 1 and t.live == 1


def test_spec_marks_track_live_count():
    t = DramPageTable(0)
    for p in (1, 2, 3):
        t.insert(p)
    t.mark_spec(2)
    assert t.live == 2 and t.valid_count == 3 and t.is_spec(2)
    t.unmark_spec(2)
    assert t.live == 3
    t.mark_spec(3)
    t.clear(3)
    assert t.live == 2 and t.valid_count == 2 and not t.is_valid(3)
    t.clear(3)  # clearing twice is harmless
    assert t.valid_count == 2


def test_table_node_limit():
    t = DramPageTable(0, node_limit=4)
    t.insert(0)
    with pytest.raises(TableExhausted):
        t.insert(1 << 10)


def test_walker_order_and_parent_advance():
    t = DramPageTable(0)
    for p in (1029, 6, 5):
        t.insert(p)
    w = WalkCursor(t)
    assert w.next_page() == 5
    assert w.next_page() == 6
    assert w.parent_advances == 0
    assert w.next_page() == 1029
    assert w.parent_advances == 1
    assert w.next_page() is None and w.done


def test_walker_node_cache_hits():
    t = DramPageTable(0)
    for p in (5, 1029):
        t.insert(p)
    w = WalkCursor(t, cache_entries=3)
    while w.next_page() is not None:
        pass
    # root and the two inner nodes on the shared path, read once each
    assert w.dram_reads == 3 and w.leaf_reads == 2
    again = WalkCursor(t, cache=w.cache, cache_entries=3)
    while again.next_page() is not None:
        pass
    assert again.dram_reads == 0


def test_walker_without_cache_rereads():
    t = DramPageTable(0)
    t.insert(1 << 20)
    t.insert(2 << 20)
    w = WalkCursor(t, cache_entries=0)
    while w.next_page() is not None:
        pass
    assert w.dram_reads == 4  # root, shared level-1 node, two level-2 nodes


def test_empty_table_walk_done():
    assert WalkCursor(DramPageTable(0)).next_page() is None


@settings(max_examples=60, deadline=None)
@given(st.sets(st.integers(0, (1 << 40) - 1), max_size=60))
def test_walker_yields_sorted_valid_set(pages):
    t = DramPageTable(0)
    for p in pages:
        t.insert(p)
    w = WalkCursor(t)
    out = []
    while (p := w.next_page()) is not None:
        out.append(p)
    assert out == sorted(pages) == t.pages()


def test_cyclic_clear():
    assert cyclic_clear(0b11, 0) == 0b10
    assert cyclic_clear(0b11, 1) == 0b01
    assert cyclic_clear(0b101, 1) == 0b101
    assert cyclic_clear(7, 2) == 3


def test_tune_rate_examples():
    assert tune_rate(16000, 12000) == (0.25, 65920, False)
    assert tune_rate(16000, 0) == (1.0, 262144, False)
    assert tune_rate(16000, 16000)[1] == 512
    assert tune_rate(16000, 20000)[:2] == (0.0, 512)
    assert tune_rate(0, 10) == (0.0, 512, True)


@given(st.integers(1, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_tune_rate_monotone_in_pages(n, m1, m2):
    lo, hi = sorted((m1, m2))
    assert tune_rate(n, lo)[1] >= tune_rate(n, hi)[1]
    assert 512 <= tune_rate(n, lo)[1] <= 262144


def test_compute_page_budget():
    assert compute_page_budget(0.005, 3.2e9, 1000) == 16000
    assert compute_page_budget(0.005, 3.2e9, 1000, floor_cycles=16_000_000 - 1000) == 1
    with pytest.raises(InfeasibleCL):
        compute_page_budget(0.005, 3.2e9, 1000, floor_cycles=16_000_000)
    with pytest.raises(ValueError):
        compute_page_budget(0.005, 3.2e9, 0)


def test_counters_saturate():
    t = DramPageTable(0)
    pred = LocalityPredictor()
    leaf, idx, _, _ = t.insert(70)
    for _ in range(20):
        pred.on_write(leaf, idx)
    assert leaf.private[idx] == 3
    assert pred.shared_value(70) == 7


def test_predictor_picks_only_cold_pages():
    t = DramPageTable(0)
    pred = LocalityPredictor()
    for p in (0, 64, 200):
        t.insert(p)
    leaf, idx = t.lookup(64)
    pred.on_write(leaf, idx)
    # 0 and 200 have cold private counters, but page 0 shares a group with nothing hot
    picked = pred.activate(t)
    assert picked == [0, 200]


def test_predictor_decay_makes_page_cold():
    t = DramPageTable(0)
    pred = LocalityPredictor()
    leaf, idx, _, _ = t.insert(5)
    pred.on_write(leaf, idx)  # private=1, group=1
    rounds = 0
    while not pred.activate(t):
        rounds += 1
        assert rounds < 10
    assert rounds >= 1


def test_speculated_pages_skipped_by_predictor():
    t = DramPageTable(0)
    pred = LocalityPredictor()
    t.insert(3)
    t.mark_spec(3)
    assert pred.activate(t) == []


class FakeNvm:
    def __init__(self):
        self.pages = []
        self.lines = []

    def write_page(self, page, data, epoch, cycle, kind="", on_done=None):
        self.pages.append((page, epoch, kind))
        self.callbacks = getattr(self, "callbacks", []) + [on_done]

    def enqueue_line(self, line, value, epoch, cycle):
        self.lines.append((line, value, epoch))
        return True


def _mc(**kw):
    cfg = small_config(**kw)
    nvm = FakeNvm()
    events = []
    mc = MemoryController(cfg, cfg.memory_node, nvm, lambda m, c: None,
                          lambda e, c: events.append((e, c)), lambda c: None)
    return mc, nvm, events


def test_write_during_checkpoint_persists_old_avatar_first():
    mc, nvm, _ = _mc(predictor="off")
    mc.write_line(8, 111, 0, 10)  # page 2 in epoch 0
    mc.on_token(20)
    mc.write_line(8, 222, 1, 30)  # epoch 1 writes the same page
    assert nvm.pages == [(2, 0, "urgent")]
    assert not mc.persisting.is_valid(2)
    assert mc.current.is_valid(2)


def test_pre_snapshot_line_goes_to_scheduler():
    mc, nvm, _ = _mc(predictor="off")
    mc.on_token(0)
    mc.write_line(12, 5, 0, 1)
    assert nvm.lines == [(12, 5, 0)]
    assert not mc.current.is_valid(3)


def test_stale_snapshot_outside_checkpoint_rejected():
    mc, _, _ = _mc(predictor="off")
    with pytest.raises(AssertionError):
        mc.write_line(4, 1, 1, 0)


def test_always_predictor_speculates_every_write():
    mc, nvm, _ = _mc(predictor="always")
    mc.write_line(4, 1, 0, 0)
    assert nvm.pages == [(1, 0, "spec")]
    mc.write_line(5, 2, 0, 1)  # same page again: a misprediction, persisted again
    assert nvm.pages == [(1, 0, "spec")] * 2
    assert mc.epoch_stats[0]["mispredictions"] == 1


def test_walk_persists_live_pages_and_skips_spec():
    mc, nvm, events = _mc(predictor="off")
    for line in (0, 4, 8, 12):
        mc.write_line(line, 1, 0, 0)
    mc.current.mark_spec(1)
    mc.on_token(100)
    mc.start_walk(100, 1000)
    cycle = 100
    while mc.walker is not None:
        cycle = max(cycle, mc.walk_next)
        mc._walk_step(cycle)
    assert [p for p, _, k in nvm.pages if k == "walk"] == [0, 2, 3]
    assert mc.stats["walk_skipped_spec"] == 1
    assert events[-1][0] == "walk_done"
    assert mc.persisting.valid_count == 0


def test_walk_paced_over_live_pages():
    mc, nvm, _ = _mc(predictor="off", walk_step_max=10**6)
    for p in range(4):
        mc.write_line(4 * p, 1, 0, 0)
    mc.on_token(0)
    mc.start_walk(0, 1000)
    mc._walk_step(0)
    assert mc.walk_next == 1000 // 4  # three left plus the final gap


def test_scrub_request_nak_for_spec_page():
    mc, _, _ = _mc(predictor="off")
    mc.write_line(4, 9, 0, 0)
    mc.write_line(8, 9, 0, 0)
    mc.current.mark_spec(2)
    mc.on_token(0)
    data, _ = mc.scrub_request(1, 5)
    assert data == (9, 0, 0, 0)
    data, _ = mc.scrub_request(2, 5)
    assert data is None
    assert mc.epoch_stats[0]["mispredictions"] == 1


def test_kernels_agree_with_reference():
    rng = np.random.default_rng(1)
    for _ in range(20):
        valid = (rng.random(1024) < 0.3).astype(np.uint8)
        spec = ((rng.random(1024) < 0.2) & (valid == 1)).astype(np.uint8)
        priv = rng.integers(0, 4, 1024).astype(np.uint8)
        sh = rng.integers(0, 8, 16).astype(np.uint8)
        a_out = np.empty(1024, dtype=np.int64)
        b_out = np.empty(1024, dtype=np.int64)
        pa, sa, pb, sb = priv.copy(), sh.copy(), priv.copy(), sh.copy()
        na = _accel.predictor_sweep_np(valid, spec, pa, sa, 1, 2, a_out)
        nb = _accel.predictor_sweep(valid, spec, pb, sb, 1, 2, b_out)
        assert na == nb and (a_out[:na] == b_out[:nb]).all()
        assert (pa == pb).all() and (sa == sb).all()


def test_k_not_sampled_before_cache_data_drains():
    mc, nvm, _ = _mc(predictor="off")
    for p in range(3):
        mc.write_line(4 * p, 1, 0, 0)
    mc.on_token(0)
    mc.start_walk(0, 300)
    mc._walk_step(0)
    mc.drained = True  # the controller sets this once scrubbed data is durable
    mc._walk_step(mc.walk_next)
    assert nvm.callbacks[0] is None and nvm.callbacks[1] is not None
    nvm.callbacks[1](5000)
    assert mc.k == (mc.cfg.nvm_latency + 5000) / 2
