"""Out-of-band oracles, randomized campaigns and crash injection.

The observer only reads simulator state. Campaigns build random systems,
run them under the observer, and collect verdicts.
"""

from __future__ import annotations

import copy
import json
import random
from dataclasses import asdict, dataclass, field

from .config import SimConfig
from .dram import DramPageTable, WalkCursor
from .core import decode_value
from .noc import ACK, TOK
from .nvm import NvmImage, recover
from .simulator import CrashPlan, Simulator
from .trace import CHECKPOINT, MemOp, gen_trace, parse_trace


@dataclass
class FlushVerdict:
    epoch: int
    token: int
    completion: int
    oracle_clean: int
    leftover: list  # trajectories of pre-snapshot messages still in the NoC


class GlobalObserver:
    """Omniscient view used to check the flush, the cut and the images."""

    def __init__(self, brute_force: bool | None = None):
        self.brute_force = brute_force
        self.sim = None
        self.flushes: list[FlushVerdict] = []
        self.images: dict[int, tuple[dict, dict]] = {}  # epoch -> (lines, regs) at commit
        self.cuts: dict[int, dict] = {}
        self.failures: list[str] = []
        self._epoch = -1
        self._token = -1
        self._last_pre = -1
        self._last_pre_seen = -1

    def attach(self, sim: Simulator) -> None:
        self.sim = sim
        if self.brute_force is None:
            self.brute_force = sim.cfg.observe_noc
        sim.controller.on_flush = self.on_flush

    # --- hooks -----------------------------------------------------------------------

    def _pre(self) -> int:
        return self._epoch & 1

    def on_token(self, node: int, cycle: int) -> None:
        e = self.sim.controller.epoch
        if e != self._epoch:
            self._epoch = e
            self._token = cycle
            self._last_pre = cycle
            self._last_pre_seen = cycle

    def on_deliver(self, node: int, msg, cycle: int) -> None:
        if self._epoch >= 0 and msg.snap == self._pre() and self.sim.controller.busy:
            self._last_pre = max(self._last_pre, cycle)

    def end_cycle(self, cycle: int) -> None:
        if not self.brute_force or self._epoch < 0 or not self.sim.net.flushing:
            return
        # straightforward census: walk every queue, no counting involved
        if any(self._is_pre(m) for m in self.sim.net.iter_messages()):
            self._last_pre_seen = cycle

    def _is_pre(self, m) -> bool:
        return m.kind not in (TOK, ACK) and m.snap == self._pre()

    def on_flush(self, rec, cycle: int) -> None:
        left = [(repr(m), list(m.hops)) for m in self.sim.net.iter_messages() if self._is_pre(m)]
        oracle = max(self._last_pre, self._last_pre_seen if self.brute_force else -1)
        self.flushes.append(FlushVerdict(rec.epoch, self._token, cycle, oracle, left))

    def on_commit(self, rec, cycle: int) -> None:
        if not rec.committed:
            return
        img = self.sim.nvm.device.img
        self.images[rec.epoch] = (img.lines(), dict(img.regs))
        self.cuts[rec.epoch] = self.sim.regs(rec.epoch)

    # --- checks ------------------------------------------------------------------------

    def gap_bound(self) -> int:
        cfg = self.sim.cfg
        net = self.sim.net
        return (cfg.report_interval + (net.diameter + 2) * cfg.max_link_delay
                + 2 * cfg.side_latency + 1)

    def assert_flush_clean(self) -> list[str]:
        out = []
        for v in self.flushes:
            if v.leftover:
                out.append(f"epoch {v.epoch}: {len(v.leftover)} pre-snapshot messages in NoC "
                           f"at flush completion; first {v.leftover[0]}")
            if v.completion < v.oracle_clean:
                out.append(f"epoch {v.epoch}: completion {v.completion} precedes clean cycle "
                           f"{v.oracle_clean}")
            elif v.completion - max(v.oracle_clean, v.token) > self.gap_bound():
                out.append(f"epoch {v.epoch}: completion {v.completion} lags clean cycle "
                           f"{v.oracle_clean} by more than {self.gap_bound()}")
        for kind, cycle, router, mid, detail in self.sim.net.violations:
            out.append(f"{kind} at cycle {cycle} router {router}: {detail}")
        return out

    def check_consistent_cut(self) -> list[str]:
        sim = self.sim
        out = []
        for e, cut in sorted(self.cuts.items()):
            for reader, seq, value in sim.read_log:
                if value == 0 or seq >= cut[reader]:
                    continue
                wcore, wseq = decode_value(value)
                if wseq >= cut.get(wcore, 0):
                    out.append(f"epoch {e}: core {reader} op {seq} read core {wcore} op {wseq} "
                               f"outside the cut {cut}")
                    break
            lines, regs = self.images[e]
            gold = sim.golden(e)
            diff = [ln for ln in set(gold) | set(lines) if gold.get(ln, 0) != lines.get(ln, 0)]
            if diff:
                ln = min(diff)
                out.append(f"epoch {e}: NVM image differs from golden on {len(diff)} lines, "
                           f"e.g. {ln:#x}: {lines.get(ln, 0):#x} vs {gold.get(ln, 0):#x}")
            if regs != cut:
                out.append(f"epoch {e}: register blob {regs} != cut {cut}")
        return out


def image_matches(sim: Simulator, img: NvmImage) -> bool:
    gold = sim.golden(img.epoch) if img.epoch >= 0 else {}
    lines = img.lines()
    if any(gold.get(ln, 0) != lines.get(ln, 0) for ln in set(gold) | set(lines)):
        return False
    want = sim.regs(img.epoch) if img.epoch >= 0 else {}
    return img.regs == want


def crash_recover_equiv(cfg: SimConfig, ops, plan: CrashPlan) -> tuple[bool, int]:
    """Run to the crash, recover, and compare against the golden image."""
    sim = Simulator(cfg, ops, crash=plan)
    res = sim.run(final_checkpoint=True)
    img = res.image  # already recovered
    again = recover(copy.deepcopy(img))
    ok = image_matches(sim, img) and again.table == img.table and again.regs == img.regs
    return ok, img.epoch


# --- random systems -------------------------------------------------------------------

def random_system(rng: random.Random, min_dim=2, max_dim=4, ops=300, sharing=0.5,
                  mutation: str = "", strict: bool = False) -> tuple[SimConfig, list]:
    w = rng.randint(min_dim, max_dim)
    h = rng.randint(min_dim, max_dim)
    n = w * h
    cores = rng.randint(2, min(4, n))
    delays = {}
    for a in range(n):
        x, y = a % w, a // w
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            b = ((y + dy) % h) * w + (x + dx) % w
            if b != a:
                delays[(a, b)] = rng.randint(1, 4)
    es = rng.randint(3000, 6000)
    cfg = SimConfig(
        core_count=cores, noc_width=w, noc_height=h, link_delay=1, link_delays=delays,
        l1_sets=4, l2_sets=4, l2_ways=2, llc_sets=4, llc_ways=2,
        epoch_size_cycles=es, frequency_hz=1_000_000, cl_target_seconds=es * 0.4 / 1e6,
        scrubbing_step=2, walk_step_min=1, mutation=mutation, strict=strict,
        seed=rng.randint(0, 1 << 30), report_interval=8, timer_enabled=rng.random() < 0.7,
    )
    text = gen_trace(cores, ops * cores, rng.randint(4, 40), zipf=rng.random() * 1.2,
                     write_frac=0.5 + 0.4 * rng.random(), share_frac=sharing,
                     seed=cfg.seed, shared_pages=rng.randint(1, 6))
    per_core = parse_trace(text.splitlines(), cores)
    # scatter event checkpoints at random points
    for _ in range(rng.randint(1, 4)):
        c = rng.randrange(cores)
        pos = rng.randint(0, len(per_core[c]))
        per_core[c].insert(pos, MemOp(c, CHECKPOINT))
    per_core = [[MemOp(op.core, op.kind, op.addr, i, op.arg) for i, op in enumerate(ops_)]
                for ops_ in per_core]
    return cfg, per_core


# --- campaigns -------------------------------------------------------------------------

@dataclass
class CampaignResult:
    name: str
    runs: int = 0
    passed: int = 0
    detected: int = 0
    first_detection: int = -1
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.passed == self.runs

    def summary(self) -> dict:
        d = asdict(self)
        d["failures"] = d["failures"][:5]
        return d


def cycle_cap(cfg: SimConfig, ops) -> int:
    # generous: a correct run finishes well inside this
    longest = max((len(o) for o in ops), default=0)
    return 100 * longest + 8 * cfg.epoch_size_cycles


def _run_observed(cfg, ops):
    obs = GlobalObserver()
    sim = Simulator(cfg, ops, observer=obs)
    sim.run(max_cycles=cycle_cap(cfg, ops), final_checkpoint=True)
    if sim.controller.busy:
        obs.failures.append(f"checkpoint {sim.controller.epoch} stuck in "
                            f"{sim.controller.phase} at cycle {sim.cycle}")
    elif not all(c.done for c in sim.cores):
        obs.failures.append(f"cores did not finish by cycle {sim.cycle}")
    return sim, obs


def noc_campaign(runs: int = 1000, seed: int = 0, mutation: str = "",
                 stop_on_detect: bool = False, **kw) -> CampaignResult:
    rng = random.Random(seed)
    res = CampaignResult(f"noc{'/' + mutation if mutation else ''}")
    for i in range(runs):
        cfg, ops = random_system(rng, mutation=mutation, **kw)
        cfg = cfg.replace(observe_noc=True)  # brute-force census on every run
        try:
            sim, obs = _run_observed(cfg, ops)
            problems = obs.failures + obs.assert_flush_clean()
        except Exception as exc:  # a broken protocol may wedge or crash the model
            problems = [f"{type(exc).__name__}: {exc}"]
        res.runs += 1
        if problems:
            res.detected += 1
            if res.first_detection < 0:
                res.first_detection = i
            res.failures.append((i, problems[0]))
            if stop_on_detect:
                break
        else:
            res.passed += 1
    return res


def cut_campaign(runs: int = 1000, seed: int = 0, mutation: str = "",
                 stop_on_detect: bool = False, **kw) -> CampaignResult:
    rng = random.Random(seed)
    res = CampaignResult(f"cut{'/' + mutation if mutation else ''}")
    for i in range(runs):
        cfg, ops = random_system(rng, sharing=0.8, mutation=mutation, **kw)
        try:
            sim, obs = _run_observed(cfg, ops)
            problems = (obs.failures + obs.check_consistent_cut()
                        + obs.assert_flush_clean())
        except Exception as exc:
            problems = [f"{type(exc).__name__}: {exc}"]
        res.runs += 1
        if problems:
            res.detected += 1
            if res.first_detection < 0:
                res.first_detection = i
            res.failures.append((i, problems[0]))
            if stop_on_detect:
                break
        else:
            res.passed += 1
    return res


def causal_chain_scenario() -> tuple[SimConfig, list]:
    """Wx1 on core 0, read by core 1, which then writes y; checkpoint lands in between."""
    x, y = 0x1000 << 8, 0x2000 << 8
    c0 = [MemOp(0, "W", x, 0)] + [MemOp(0, "R", 0x3000 << 8 | (i % 4) << 6, i + 1)
                                 for i in range(40)]
    c1 = [MemOp(1, "R", 0x4000 << 8, 0), MemOp(1, "R", x, 1), MemOp(1, "W", y, 2)]
    c1 += [MemOp(1, "R", 0x5000 << 8, 3), MemOp(1, CHECKPOINT, 0, 4)]
    cfg = SimConfig(core_count=2, noc_width=2, noc_height=2, link_delays={(0, 1): 4, (1, 0): 4},
                    epoch_size_cycles=4000, frequency_hz=1_000_000,
                    cl_target_seconds=0.0015, scrubbing_step=2, walk_step_min=1,
                    timer_enabled=False, strict=True)
    return cfg, [c0, c1]


def check_causal_chain() -> list[str]:
    cfg, ops = causal_chain_scenario()
    sim, obs = _run_observed(cfg, ops)
    problems = obs.failures + obs.check_consistent_cut() + obs.assert_flush_clean()
    x, y = 0x1000 << 2, 0x2000 << 2
    for e, (lines, _) in obs.images.items():
        if lines.get(y, 0) and not lines.get(x, 0):
            problems.append(f"epoch {e}: y persisted without x")
    return problems


def crash_campaign(random_crashes: int = 200, seed: int = 0) -> CampaignResult:
    """Every commit-log step of one commit, then random mid-run crash cycles."""
    rng = random.Random(seed)
    res = CampaignResult("crash")
    cfg, ops = random_system(rng, min_dim=2, max_dim=3, ops=200, sharing=0.4)
    # speculate on every write so crashes land among speculative persists
    cfg = cfg.replace(timer_enabled=True, predictor="always")
    base = Simulator(cfg, ops)
    full = base.run(final_checkpoint=True)
    committed = [r for r in full.records if r.committed]
    target = committed[len(committed) // 2] if committed else None
    if target is not None:
        steps = base.nvm.device.commit_lengths[target.epoch]
        for k in range(steps + 1):
            ok, epoch = crash_recover_equiv(cfg, ops, CrashPlan(commit_epoch=target.epoch,
                                                                commit_step=k))
            expect = target.epoch if k >= steps else target.epoch - 1
            res.runs += 1
            if ok and epoch == expect:
                res.passed += 1
            else:
                res.failures.append((f"step {k}", epoch, expect))
    for _ in range(random_crashes):
        c = rng.randint(1, max(2, full.cycles))
        ok, epoch = crash_recover_equiv(cfg, ops, CrashPlan(cycle=c))
        expect = max((r.epoch for r in full.records if r.committed and r.commit < c),
                     default=-1)
        res.runs += 1
        if ok and epoch == expect:
            res.passed += 1
        else:
            res.failures.append((f"cycle {c}", epoch, expect))
    return res


def walker_matches_set(rng: random.Random, ops: int = 400) -> list[str]:
    """Random inserts and clears; a full walk must list exactly the live pages."""
    table = DramPageTable(0)
    live: set[int] = set()
    span = rng.choice([1 << 12, 1 << 22, 1 << 40])
    for _ in range(ops):
        page = rng.randrange(span)
        if live and rng.random() < 0.3:
            page = rng.choice(sorted(live))
            table.clear(page)
            live.discard(page)
        else:
            table.insert(page)
            live.add(page)
    cur = WalkCursor(table)
    walked = []
    while (p := cur.next_page()) is not None:
        walked.append(p)
    out = []
    if walked != sorted(live):
        out.append(f"walker listed {len(walked)} pages, table holds {len(live)}")
    if table.pages() != sorted(live):
        out.append("flat page listing disagrees with the live set")
    return out


def scheduler_equivalence(cfg: SimConfig, ops) -> list[str]:
    """Final committed NVM content must not depend on the access scheduler.

    Use race-free traces: with write sharing the winner of a race depends on
    timing, which the scheduler legitimately changes.
    """
    images = []
    for on in (True, False):
        sim = Simulator(cfg.replace(scheduler_enabled=on), ops)
        res = sim.run(max_cycles=cycle_cap(cfg, ops), final_checkpoint=True)
        if not image_matches(sim, res.image):
            return [f"scheduler={'on' if on else 'off'} image differs from golden"]
        images.append((res.image.lines(), res.image.regs))
    if images[0] != images[1]:
        a, b = images[0][0], images[1][0]
        diff = [ln for ln in set(a) | set(b) if a.get(ln, 0) != b.get(ln, 0)]
        return [f"scheduler on/off images differ on {len(diff)} lines"]
    return []


def oracle_campaign(runs: int = 100, seed: int = 0) -> CampaignResult:
    rng = random.Random(seed)
    res = CampaignResult("oracle")
    for i in range(runs):
        problems = walker_matches_set(rng)
        if i % 4 == 0:
            cfg, ops = random_system(rng, max_dim=3, ops=150, sharing=0.0)
            problems += scheduler_equivalence(cfg, ops)
        res.runs += 1
        if problems:
            res.failures.append((i, problems[0]))
        else:
            res.passed += 1
    return res


def run_campaign(name: str, runs: int, seed: int = 0) -> list[CampaignResult]:
    out = []
    if name in ("noc", "all"):
        out.append(noc_campaign(runs, seed))
        for m in ("token_bypass", "no_dir_adjust"):
            out.append(mutation_control("noc", m, seed))
    if name in ("cut", "all"):
        r = cut_campaign(runs, seed)
        fig = check_causal_chain()
        r.runs += 1
        if fig:
            r.failures.append(("causal chain", fig[0]))
        else:
            r.passed += 1
        out.append(r)
        for m in ("token_bypass", "no_dir_adjust"):
            out.append(mutation_control("cut", m, seed))
    if name in ("crash", "all"):
        out.append(crash_campaign(min(runs, 200), seed))
    if name in ("oracle", "all"):
        out.append(oracle_campaign(min(runs, 100), seed))
    return out


def mutation_control(kind: str, mutation: str, seed: int = 0,
                     budget: int = 100) -> CampaignResult:
    """A negative control passes when the mutation is detected within the budget."""
    fn = noc_campaign if kind == "noc" else cut_campaign
    r = fn(budget, seed, mutation=mutation, stop_on_detect=True)
    res = CampaignResult(f"{kind}/{mutation} detected", runs=1,
                         passed=int(r.detected > 0), detected=r.detected,
                         first_detection=r.first_detection, failures=r.failures)
    if not r.detected:
        res.failures = [f"not detected in {budget} runs"]
    return res


def verdict_report(results: list[CampaignResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        lines.append(f"{status} {r.name}: {r.passed}/{r.runs} passed"
                     + (f", first failure {r.failures[0]}" if r.failures else ""))
    lines.append(json.dumps([r.summary() for r in results], default=str))
    return "\n".join(lines)
