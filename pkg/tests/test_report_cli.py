import csv
import io

import pytest

from epochsim.cli import main, parse_seconds
from epochsim.config import dump_config
from epochsim.report import COLUMNS, epoch_rows, summary, write_csv
from epochsim.simulator import Simulator
from epochsim.trace import gen_trace, parse_trace

from conftest import small_config

HEADER = ("epoch,trigger,committed,init_cycle,es_cycles,cl_target_cycles,cl_obs_cycles,"
          "cl_error,cl_min_cycles,flush_cycles,l2_scrub_cycles,llc_scrub_cycles,walk_cycles,"
          "commit_cycles,pages_m,budget_n,delta,predictor_rate,scrubbing_step,walk_step,"
          "blocks,pages,wa,spec_persists,mispredictions,pct_cache,pct_dram,pct_coalesced,"
          "pct_dram_wa")


@pytest.fixture
def files(tmp_path):
    cfg = small_config(cl_target_seconds=0.002, epoch_size_cycles=5000)
    conf = tmp_path / "sim.cfg"
    conf.write_text(dump_config(cfg))
    trace = tmp_path / "t.trace"
    trace.write_text(gen_trace(2, 600, 120, 0.8, 0.6, 0.1, 3))
    return cfg, str(conf), str(trace), tmp_path


def _sim(cfg, trace_path):
    with open(trace_path) as fh:
        ops = parse_trace(fh, cfg.core_count)
    sim = Simulator(cfg, ops)
    return sim, sim.run(final_checkpoint=True)


def test_csv_header_is_stable():
    assert ",".join(COLUMNS) == HEADER
    assert write_csv([]) == HEADER + "\n"


def test_rows_and_percentages(files):
    cfg, _, trace, _ = files
    sim, res = _sim(cfg, trace)
    rows = epoch_rows(sim)
    assert rows and all(r.committed for r in rows)
    for r in rows:
        assert r.cl_obs_cycles == r.cl_target_cycles * (1 + r.cl_error) or \
            abs(r.cl_obs_cycles - r.cl_target_cycles * (1 + r.cl_error)) < 1
        if r.pct_cache or r.pct_dram:
            assert r.pct_cache + r.pct_dram == pytest.approx(100, abs=0.01)
        assert r.wa >= 1.0 or r.blocks == 0
    text = write_csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert len(parsed) == len(rows)
    s = summary(sim, res)
    assert s["committed"] == len(rows) and s["recovered_epoch"] == rows[-1].epoch


def test_parse_seconds():
    assert parse_seconds("5ms") == pytest.approx(0.005)
    assert parse_seconds("250us") == pytest.approx(0.00025)
    assert parse_seconds("0.01") == 0.01
    assert parse_seconds("2s") == 2.0


def test_run_writes_csv_and_is_deterministic(files, capsys):
    _, conf, trace, tmp = files
    outs = []
    for i in range(2):
        out = tmp / f"run{i}.csv"
        assert main(["run", "--config", conf, "--trace", trace, "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert outs[0].startswith(HEADER.encode() + b"\n")
    assert b"\r\n" not in outs[0]


def test_run_verify_passes(files, capsys):
    _, conf, trace, _ = files
    assert main(["run", "--config", conf, "--trace", trace, "--verify"]) == 0
    assert "verify: PASS" in capsys.readouterr().err


@pytest.mark.parametrize("cl", ["0", "0.1ms"])
def test_infeasible_cl_exit_code(files, cl, capsys):
    _, conf, trace, _ = files
    assert main(["run", "--config", conf, "--trace", trace, "--cl-target", cl]) == 2
    assert "infeasible" in capsys.readouterr().err.lower()


def test_missing_trace_exit_code(files, capsys):
    _, conf, _, tmp = files
    assert main(["run", "--config", conf, "--trace", str(tmp / "nope")]) == 2


def test_malformed_trace_exit_code(files, capsys):
    _, conf, _, tmp = files
    bad = tmp / "bad.trace"
    bad.write_text("0 R 0x10\n0 X 0x20\n")
    assert main(["run", "--config", conf, "--trace", str(bad)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, files, capsys):
    _, _, trace, _ = files
    conf = tmp_path / "bad.cfg"
    conf.write_text("noc_width = banana\n")
    assert main(["run", "--config", str(conf), "--trace", trace]) == 2


def test_gen_trace_reproducible(tmp_path, capsys):
    args = ["gen-trace", "--cores", "2", "--ops", "300", "--pages", "50", "--zipf", "0.9",
            "--seed", "7"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert main(args[:-1] + ["8", "--out", str(b)]) == 0
    assert a.read_bytes() != b.read_bytes()


def test_sweep_cl_points(files, capsys):
    _, conf, trace, tmp = files
    out = tmp / "sweep.csv"
    assert main(["sweep", "--config", conf, "--trace", trace, "--cl", "2ms,3ms",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert {r["point"] for r in rows} == {"0", "1"}
    first = out.read_bytes()
    assert main(["sweep", "--config", conf, "--trace", trace, "--cl", "2ms,3ms",
                 "--out", str(out), "--jobs", "2"]) == 0
    assert out.read_bytes() == first


def test_sweep_flags_infeasible_point(files, capsys):
    _, conf, trace, tmp = files
    out = tmp / "sweep.csv"
    assert main(["sweep", "--config", conf, "--trace", trace, "--cl", "0.1ms,3ms",
                 "--out", str(out)]) == 0
    captured = capsys.readouterr()
    assert "infeasible" in captured.out + captured.err
    assert {r["point"] for r in csv.DictReader(out.open())} == {"1"}


def test_sweep_needs_two_points(files, capsys):
    _, conf, trace, _ = files
    assert main(["sweep", "--config", conf, "--trace", trace, "--cl", "2ms"]) == 2


def test_sweep_needs_exactly_one_axis(files, capsys):
    _, conf, trace, _ = files
    assert main(["sweep", "--config", conf, "--trace", trace]) == 2
    assert main(["sweep", "--config", conf, "--trace", trace, "--cl", "2ms,3ms",
                 "--es", "5000,6000"]) == 2


def test_verify_subcommand(capsys):
    assert main(["verify", "--campaign", "oracle", "--runs", "4"]) == 0
    assert capsys.readouterr().out.startswith("PASS oracle")


def test_sweep_es_points_at_fixed_cl(files, capsys):
    _, conf, trace, tmp = files
    out = tmp / "sweep.csv"
    assert main(["sweep", "--config", conf, "--trace", trace, "--es", "5000,8000",
                 "--cl-target", "2.5ms", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert {r["es_cycles"] for r in rows} == {"5000", "8000"}
    assert {r["cl_target_cycles"] for r in rows} == {"2500"}
