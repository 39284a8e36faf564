"""Per-checkpoint run reports with a stable CSV schema."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields

from .nvm import wa_report


@dataclass
class EpochRow:
    epoch: int
    trigger: str
    committed: bool
    init_cycle: int
    es_cycles: int
    cl_target_cycles: int
    cl_obs_cycles: int
    cl_error: float  # relative, (obs - target) / target
    cl_min_cycles: int  # measured floor for this checkpoint
    flush_cycles: int
    l2_scrub_cycles: int
    llc_scrub_cycles: int
    walk_cycles: int
    commit_cycles: int
    pages_m: int  # pages in the table when the token arrived
    budget_n: int
    delta: float
    predictor_rate: int
    scrubbing_step: int
    walk_step: int
    blocks: int
    pages: int
    wa: float
    spec_persists: int
    mispredictions: int
    pct_cache: float  # share of pre-snapshot lines that came from cache scrubbing
    pct_dram: float
    pct_coalesced: float  # cache lines merged into an open scheduler entry
    pct_dram_wa: float  # extra block writes from mispredicted speculation


COLUMNS = [f.name for f in fields(EpochRow)]


def _span(a: int, b: int) -> int:
    return b - a if a >= 0 and b >= 0 else -1


def _pct(a: int, b: int) -> float:
    return round(100.0 * a / b, 3) if b else 0.0


def epoch_rows(sim) -> list[EpochRow]:
    dev = sim.nvm.device
    wa = wa_report(dev)["per_epoch"]
    sched = sim.nvm.scheduler
    rows = []
    for rec in sim.controller.history:
        if not rec.committed:
            continue
        st = sim.mc.epoch_stats.get(rec.epoch, {})
        obs = rec.cl_obs_cycles
        cache_lines = int(st.get("cache_lines", 0))
        dram_lines = 4 * int(st.get("pages_at_token", 0))
        pre = cache_lines + dram_lines
        merged = sched.coalesced_by_epoch.get(rec.epoch, 0) if sched is not None else 0
        npages = len(dev.pages.get(rec.epoch, ()))
        rows.append(EpochRow(
            epoch=rec.epoch, trigger=rec.trigger, committed=rec.committed,
            init_cycle=rec.init, es_cycles=rec.es_cycles, cl_target_cycles=rec.cl_target,
            cl_obs_cycles=obs,
            cl_error=round((obs - rec.cl_target) / rec.cl_target, 6) if obs >= 0 else 0.0,
            cl_min_cycles=rec.cl_min_cycles,
            flush_cycles=_span(rec.init, rec.flush_done),
            l2_scrub_cycles=_span(rec.flush_done, rec.l2_done),
            llc_scrub_cycles=_span(rec.l2_done, rec.llc_done),
            walk_cycles=_span(rec.flush_done, rec.walk_done),
            commit_cycles=_span(max(rec.llc_done, rec.walk_done), rec.commit),
            pages_m=int(st.get("pages_at_token", 0)),
            budget_n=int(st.get("budget_n", 0)),
            delta=round(float(st.get("delta", 0.0)), 6),
            predictor_rate=int(st.get("rate", rec.predictor_rate)),
            scrubbing_step=rec.scrubbing_step, walk_step=rec.walk_step,
            blocks=int(dev.blocks.get(rec.epoch, 0)),
            pages=npages,
            wa=round(wa.get(rec.epoch, 1.0), 6),
            spec_persists=int(st.get("spec_persists", 0)),
            mispredictions=int(st.get("mispredictions", 0)),
            pct_cache=_pct(cache_lines, pre),
            pct_dram=_pct(dram_lines, pre),
            pct_coalesced=_pct(merged, cache_lines),
            pct_dram_wa=_pct(int(st.get("mispredictions", 0)), npages),
        ))
    return rows


def write_csv(rows: list[EpochRow], out=None) -> str:
    buf = out if out is not None else io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(asdict(r))
    return buf.getvalue() if out is None else ""


def summary(sim, result) -> dict:
    rows = epoch_rows(sim)
    wa = wa_report(sim.nvm.device)
    done = [r for r in rows if r.committed]
    return {
        "cycles": result.cycles,
        "checkpoints": len(rows),
        "committed": len(done),
        "recovered_epoch": result.image.epoch,
        "run_wa": round(wa["run_wa"], 6),
        "blocks": wa["blocks"],
        "pages": wa["pages"],
        "mean_cl_obs": round(sum(r.cl_obs_cycles for r in done) / len(done), 1) if done else 0,
        "crashed": result.crashed,
    }
