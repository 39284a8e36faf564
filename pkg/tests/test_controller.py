import random

from epochsim.simulator import Simulator
from epochsim.trace import parse_trace

from conftest import small_config


def _trace(rng, cores, n, pages=64):
    out = []
    for _ in range(n):
        out.append(f"{rng.randrange(cores)} {'W' if rng.random() < 0.6 else 'R'} "
                   f"{hex(rng.randrange(pages) * 256 + rng.randrange(4) * 64)}")
    return out


def _run(cfg, lines, **kw):
    sim = Simulator(cfg, parse_trace(lines, cfg.core_count))
    res = sim.run(**kw)
    return sim, res


def test_phases_in_order():
    cfg = small_config()
    sim, res = _run(cfg, _trace(random.Random(1), 2, 600), final_checkpoint=True)
    assert res.records
    for r in res.records:
        assert r.committed
        assert r.init < r.flush_done <= r.l2_done <= r.llc_done
        assert r.flush_done <= r.walk_done
        assert r.llc_done <= r.drain_done
        assert max(r.llc_done, r.walk_done, r.drain_done) < r.commit
        assert r.cl_obs_cycles == r.commit - r.init
        assert r.cl_min_cycles == r.drain_done - r.init


def test_epochs_numbered_consecutively():
    cfg = small_config()
    sim, res = _run(cfg, _trace(random.Random(2), 2, 800), final_checkpoint=True)
    assert [r.epoch for r in res.records] == list(range(len(res.records)))
    assert res.image.epoch == res.records[-1].epoch


def test_timer_fires_every_es():
    cfg = small_config(epoch_size_cycles=3000)
    sim, res = _run(cfg, [], max_cycles=10_000, stop_when_idle=False)
    inits = [r.init for r in res.records]
    assert inits == [3000, 6000, 9000]
    assert all(r.trigger == "timer" for r in res.records)


def test_event_checkpoint_rebases_timer():
    cfg = small_config(epoch_size_cycles=3000)
    lines = ["0 W 0x0"] * 50 + ["0 ! CHECKPOINT"]
    sim, res = _run(cfg, lines, max_cycles=8000, stop_when_idle=False)
    ev = [r for r in res.records if r.trigger == "event"]
    assert len(ev) == 1
    nxt = [r for r in res.records if r.init > ev[0].init]
    assert nxt and nxt[0].init == ev[0].commit + 3000


def test_request_rejected_during_checkpoint():
    cfg = small_config()
    sim = Simulator(cfg, parse_trace(["0 W 0x0"], 2))
    ctl = sim.controller
    assert ctl.request(5, "event")
    assert not ctl.request(6, "event")
    assert "rejected during Flushing" in ctl.log[-1][1]


def test_cl_target_in_cycles():
    cfg = small_config(cl_target_seconds=0.0016, frequency_hz=1_000_000)
    sim = Simulator(cfg, parse_trace([], 2))
    sim.controller.request(0, "event")
    assert sim.controller.current.cl_target == 1600


def test_set_es_and_cl_take_effect_next_checkpoint():
    cfg = small_config(epoch_size_cycles=4000)
    sim = Simulator(cfg, parse_trace([], 2))
    ctl = sim.controller
    ctl.set_es(1000, 0)  # not above CL: rejected
    assert "rejected" in ctl.log[-1][1]
    ctl.set_es(5000, 0)
    ctl.set_cl(0.002, 0)
    assert ctl.params.es_cycles == 4000
    ctl.request(10, "event")
    assert ctl.params.es_cycles == 5000 and ctl.params.cl_cycles == 2000
    assert ctl.current.cl_target == 2000


def test_set_cl_not_below_es_rejected():
    cfg = small_config(epoch_size_cycles=4000)
    sim = Simulator(cfg, parse_trace([], 2))
    sim.controller.set_cl(0.004, 0)
    assert "rejected" in sim.controller.log[-1][1]
    assert sim.controller._pending_cl is None


def test_directives_in_trace():
    cfg = small_config(epoch_size_cycles=4000)
    lines = ["! SET ES 6000", "0 W 0x0", "! CHECKPOINT"]
    sim, res = _run(cfg, lines, final_checkpoint=True)
    assert res.records[0].es_cycles == 6000


def test_commit_within_target_when_feasible():
    cfg = small_config(cl_target_seconds=0.003, epoch_size_cycles=6000)
    sim, res = _run(cfg, _trace(random.Random(4), 2, 1500, pages=200),
                    final_checkpoint=True)
    checked = [r for r in res.records if r.cl_target > 1.2 * r.cl_min_cycles]
    assert checked
    for r in checked:
        assert abs(r.cl_obs_cycles - r.cl_target) <= 0.05 * r.cl_target
