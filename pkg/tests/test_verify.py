import json
import random

import pytest

from epochsim.verify import (CampaignResult, check_causal_chain, crash_campaign, cut_campaign,
                             image_matches, mutation_control, noc_campaign, oracle_campaign,
                             random_system, verdict_report, walker_matches_set)
from epochsim.simulator import Simulator


def test_small_noc_campaign_passes():
    r = noc_campaign(12, seed=5)
    assert r.ok, r.failures


def test_small_cut_campaign_passes():
    r = cut_campaign(12, seed=6)
    assert r.ok, r.failures


def test_causal_chain_scenario_consistent():
    assert check_causal_chain() == []


@pytest.mark.parametrize("kind,mutation", [("noc", "token_bypass"), ("noc", "no_dir_adjust"),
                                           ("noc", "short_window"), ("cut", "no_dir_adjust")])
def test_mutations_detected(kind, mutation):
    r = mutation_control(kind, mutation, seed=0, budget=40)
    assert r.ok, r.failures


def test_crash_campaign_small():
    r = crash_campaign(random_crashes=10, seed=2)
    assert r.runs > 10 and r.ok, r.failures


def test_oracle_campaign_small():
    r = oracle_campaign(8, seed=3)
    assert r.ok, r.failures


def test_walker_oracle_many_seeds():
    rng = random.Random(9)
    for _ in range(30):
        assert walker_matches_set(rng) == []


def test_image_mismatch_detected():
    rng = random.Random(4)
    cfg, ops = random_system(rng, max_dim=2, ops=120, sharing=0.0)
    sim = Simulator(cfg, ops)
    res = sim.run(final_checkpoint=True)
    img = res.image
    assert image_matches(sim, img)
    loc = next(iter(img.table.values()))
    img.versions[loc] = tuple(v + 1 for v in img.versions[loc])
    assert not image_matches(sim, img)


def test_random_system_is_seeded():
    a = random_system(random.Random(11))
    b = random_system(random.Random(11))
    assert a[0] == b[0] and a[1] == b[1]


def test_verdict_report_lines():
    ok = CampaignResult("x", runs=2, passed=2)
    bad = CampaignResult("y", runs=2, passed=1, failures=[(1, "boom")])
    text = verdict_report([ok, bad]).splitlines()
    assert text[0] == "PASS x: 2/2 passed"
    assert text[1].startswith("FAIL y: 1/2 passed, first failure")
    assert [d["name"] for d in json.loads(text[2])] == ["x", "y"]
