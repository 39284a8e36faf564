import pytest

from epochsim.config import SimConfig


def small_config(**kw) -> SimConfig:
    """2x2 torus with tiny caches so short traces reach DRAM."""
    base = dict(core_count=2, noc_width=2, noc_height=2, l1_sets=4, l2_sets=4, l2_ways=2,
                llc_sets=4, llc_ways=2, epoch_size_cycles=4000, frequency_hz=1_000_000,
                cl_target_seconds=0.0016, scrubbing_step=2, walk_step_min=1,
                report_interval=8)
    base.update(kw)
    return SimConfig(**base)


@pytest.fixture
def small_cfg():
    return small_config()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
