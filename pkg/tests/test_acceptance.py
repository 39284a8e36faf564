"""Acceptance suite. Each test prints one PASS/FAIL line for its criterion;
the lines are repeated in the terminal summary."""

import functools
import random
import subprocess
import sys
import time

from epochsim import SimConfig, Simulator
from epochsim.dram import build_oracle
from epochsim.nvm import wa_report
from epochsim.report import epoch_rows, write_csv
from epochsim.trace import bundled_trace, parse_trace
from epochsim.verify import (check_causal_chain, crash_campaign, cut_campaign, mutation_control,
                             noc_campaign, random_system, scheduler_equivalence,
                             walker_matches_set)

TRACES = ["high-locality", "streaming", "shared-heavy", "small-working-set"]
CL_POINTS = [0.005, 0.0075, 0.01, 0.015, 0.025]  # seconds, a 5x range
ES_POINTS = [25_000, 50_000, 100_000, 200_000]
ES_SWEEP_CL = 0.005
JITTER = 0.01
RESULTS: dict[int, str] = {}


def report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n} {title}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS[n] = line
    print(line)


@functools.lru_cache(maxsize=None)
def trace_ops(name):
    return parse_trace(bundled_trace(name).splitlines(), 4)


@functools.lru_cache(maxsize=None)
def run(name, cl=None, es=None, predictor="adaptive"):
    cfg = SimConfig(predictor=predictor)
    if cl is not None:
        cfg = cfg.replace(cl_target_seconds=cl)
    if es is not None:
        cfg = cfg.replace(epoch_size_cycles=es)
    t = time.perf_counter()
    sim = Simulator(cfg, trace_ops(name))
    sim.run(final_checkpoint=True)
    return {"rows": epoch_rows(sim), "wa": wa_report(sim.nvm.device), "sim": sim,
            "secs": time.perf_counter() - t}


def non_increasing(values):
    return all(b <= a * (1 + JITTER) for a, b in zip(values, values[1:]))


def test_1_cl_tracking():
    worst, checked, problems, slow = 0.0, 0, [], []
    for name in TRACES:
        secs = 0.0
        for cl in CL_POINTS:
            r = run(name, cl=cl)
            secs += r["secs"]
            for row in r["rows"]:
                if row.cl_target_cycles > 1.2 * row.cl_min_cycles:
                    checked += 1
                    err = abs(row.cl_obs_cycles - row.cl_target_cycles) / row.cl_target_cycles
                    worst = max(worst, err)
                    if err > 0.05:
                        problems.append(f"{name} CL={cl}s epoch {row.epoch}: {err:.1%}")
        if secs > 300:
            slow.append(f"{name} took {secs:.0f}s")
    ok = checked > 0 and not problems and not slow
    report(1, "CL tracking", ok,
           f"{checked} epochs checked, worst error {worst:.2%}"
           + (f"; {problems[:3]}" if problems else "") + (f"; {slow}" if slow else ""))
    assert ok


def test_2_tradeoff_monotonicity():
    problems, notes = [], []
    for name in TRACES:
        was = [run(name, cl=cl)["wa"]["run_wa"] for cl in CL_POINTS]
        notes.append(f"{name} CL: " + "/".join(f"{w:.2f}" for w in was))
        if not non_increasing(was):
            problems.append(f"{name} WA not non-increasing in CL: {was}")
        wes = [run(name, cl=ES_SWEEP_CL, es=es)["wa"]["run_wa"] for es in ES_POINTS]
        notes.append(f"{name} ES: " + "/".join(f"{w:.2f}" for w in wes))
        if not non_increasing(wes):
            problems.append(f"{name} WA not non-increasing in ES: {wes}")
        if name == "small-working-set":
            first, last = wes[0] - wes[1], wes[-2] - wes[-1]
            if not last < first:
                problems.append(f"no diminishing returns: first step {first:.3f}, "
                                f"last step {last:.3f}")
    ok = not problems
    report(2, "tradeoff monotonicity", ok, "; ".join(problems or notes))
    assert ok


def test_3_flush_termination():
    t = time.perf_counter()
    r = noc_campaign(1000, seed=0)
    secs = time.perf_counter() - t
    ok = r.ok and r.runs == 1000 and secs <= 600
    report(3, "flush termination", ok,
           f"{r.passed}/{r.runs} clean in {secs:.0f}s"
           + (f", first failure {r.failures[0]}" if r.failures else ""))
    assert ok


def test_4_consistent_cut():
    r = cut_campaign(1000, seed=0)
    fig = check_causal_chain()
    controls = [mutation_control("cut", m, seed=0, budget=100)
                for m in ("token_bypass", "no_dir_adjust")]
    ok = r.ok and r.runs == 1000 and not fig and all(c.ok for c in controls)
    detail = (f"{r.passed}/{r.runs} runs consistent, scripted scenario "
              f"{'ok' if not fig else fig[0]}, mutations detected at run "
              + ", ".join(f"{c.name.split()[0]}={c.first_detection}" for c in controls))
    if r.failures:
        detail += f", first failure {r.failures[0]}"
    report(4, "consistent cut", ok, detail)
    assert ok


def test_5_crash_recovery():
    r = crash_campaign(random_crashes=200, seed=0)
    ok = r.ok and r.runs > 200
    report(5, "crash recovery", ok,
           f"{r.passed}/{r.runs} crash points recovered to a committed image"
           + (f", first failure {r.failures[0]}" if r.failures else ""))
    assert ok


def test_6_predictor_benefit():
    name, cl = "high-locality", 0.0125
    on = run(name, cl=cl)
    always = run(name, cl=cl, predictor="always")
    off = run(name, cl=cl, predictor="off")
    sim_off = off["sim"]
    oracle = build_oracle(sim_off.mc, sim_off.nvm.scheduler)
    sim = Simulator(SimConfig(cl_target_seconds=cl, predictor="perfect"), trace_ops(name))
    sim.mc.oracle = oracle
    sim.run(final_checkpoint=True)
    perfect = wa_report(sim.nvm.device)
    overhead = 100.0 * (on["wa"]["blocks"] - perfect["blocks"]) / perfect["blocks"]
    ok = on["wa"]["run_wa"] <= always["wa"]["run_wa"] and 5.0 <= overhead <= 60.0
    report(6, "predictor benefit", ok,
           f"WA adaptive {on['wa']['run_wa']:.3f} vs always-persist "
           f"{always['wa']['run_wa']:.3f}, perfect {perfect['run_wa']:.3f}, "
           f"no speculation {off['wa']['run_wa']:.3f}; overhead vs perfect {overhead:.1f}%")
    assert ok


def test_7_determinism_and_oracles(tmp_path):
    problems = []
    trace = tmp_path / "sws.trace"
    trace.write_text(bundled_trace("small-working-set"))
    outs = []
    for backend in ("", "", "1"):
        out = tmp_path / f"run{len(outs)}.csv"
        env = {"EPOCHSIM_NO_NUMBA": backend} if backend else {}
        subprocess.run([sys.executable, "-m", "epochsim.cli", "run", "--trace", str(trace),
                        "--seed", "7", "--out", str(out)], check=True, capture_output=True,
                       env={**__import__("os").environ, **env})
        outs.append(out.read_bytes())
    if outs[0] != outs[1]:
        problems.append("repeated runs produced different CSV bytes")
    if outs[0] != outs[2]:
        problems.append("numpy fallback CSV differs from the default backend")
    rows = run("small-working-set")["rows"]
    if write_csv(rows).encode() != outs[0]:
        problems.append("in-process CSV differs from the CLI CSV")

    rng = random.Random(0)
    walker = sum(bool(walker_matches_set(rng)) for _ in range(200))
    if walker:
        problems.append(f"walker disagreed with the flat set in {walker}/200 tables")

    rng = random.Random(1)
    sched = []
    for _ in range(25):
        cfg, ops = random_system(rng, max_dim=3, ops=200, sharing=0.0)
        sched += scheduler_equivalence(cfg, ops)
    if sched:
        problems.append(f"scheduler on/off: {sched[0]}")
    ok = not problems
    report(7, "determinism and oracles", ok,
           "; ".join(problems) or "CSV bit-identical across runs and backends, "
           "200 walker tables and 25 scheduler on/off pairs agree")
    assert ok
