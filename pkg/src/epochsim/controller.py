"""Checkpoint controller: initiation, flush detection, scrub sequencing and commit."""

from __future__ import annotations

from dataclasses import dataclass, field

IDLE = "Idle"
FLUSHING = "Flushing"
L2_SCRUB = "L2Scrub"
LLC_SCRUB = "LLCScrub"
AWAIT_DRAM = "AwaitDram"
COMMITTING = "Committing"


@dataclass
class TunableParams:
    scrubbing_step: int
    scrubbing_granularity: int
    memory_walk_step: int
    predictor_rate: int
    es_cycles: int
    cl_cycles: int


@dataclass
class CheckpointRecord:
    epoch: int
    trigger: str
    init: int
    cl_target: int
    es_cycles: int
    flush_done: int = -1
    l2_done: int = -1
    llc_done: int = -1
    walk_done: int = -1
    drain_done: int = -1  # cache-scrubbed data durable in NVM
    commit: int = -1
    pages_at_token: int = 0
    predictor_rate: int = 0
    scrubbing_step: int = 0
    walk_step: int = 0
    committed: bool = False

    @property
    def cl_obs_cycles(self) -> int:
        return self.commit - self.init if self.commit >= 0 else -1

    @property
    def cache_scrub_cycles(self) -> int:
        return self.llc_done - self.init if self.llc_done >= 0 else -1

    @property
    def cl_min_cycles(self) -> int:
        """Measured floor: initiation until the scrubbed cache data is in NVM."""
        return self.drain_done - self.init if self.drain_done >= 0 else -1


@dataclass
class _Report:
    cycle: int
    x: int
    p: int
    closed: bool


class CheckpointController:
    """Drives one checkpoint at a time through its phases.

    Router reports and element completions reach the controller over a side
    channel with one fixed latency, so reports arrive in the order they
    were sent. The flush is complete once every router has entered TR,
    every router's latest report has its windows closed, and the summed
    message and delivery counts agree.
    """

    def __init__(self, cfg, net, l2s, llcs, mc, nvm, side, wake, regs, on_commit=None):
        self.cfg = cfg
        self.net = net
        self.l2s = l2s
        self.llcs = llcs
        self.mc = mc
        self.nvm = nvm
        self.side = side  # side(delay, fn, *args)
        self.wake = wake
        self.regs = regs  # regs(epoch) -> {core: retired ops with tag <= epoch}
        self.on_commit = on_commit
        self.on_flush = None  # observer hook: on_flush(record, cycle)
        self.latency = cfg.side_latency
        self.phase = IDLE
        self.epoch = 0  # number of the next checkpoint
        self.params = TunableParams(cfg.scrubbing_step, cfg.scrubbing_granularity,
                                    cfg.memory_walk_step, cfg.predictor_rate_max,
                                    cfg.epoch_size_cycles, cfg.cl_cycles)
        self._pending_es = None
        self._pending_cl = None
        self.reports: dict[int, _Report] = {}
        self.l2_done: set = set()
        self.llc_done: set = set()
        self.walk_finished = False
        self.current: CheckpointRecord | None = None
        self.history: list[CheckpointRecord] = []
        self.log: list[tuple[int, str]] = []
        self.next_timer = cfg.epoch_size_cycles if cfg.timer_enabled else -1
        self.deadline = 0
        self.commit_at = -1
        self.commit_cycles = cfg.nvm_latency
        self.margin = cfg.commit_margin or (self.latency + self.commit_cycles + 2)
        self.halted = False
        if self.next_timer >= 0:
            wake(self.next_timer)

    # --- directives ----------------------------------------------------------------

    def set_es(self, cycles: int, cycle: int) -> None:
        if cycles <= self.params.cl_cycles:
            self.log.append((cycle, f"SET ES {cycles} rejected: not above CL"))
            return
        self._pending_es = int(cycles)
        self.log.append((cycle, f"SET ES {cycles} pending"))

    def set_cl(self, seconds: float, cycle: int) -> None:
        c = int(round(seconds * self.cfg.frequency_hz))
        if c <= 0 or c >= (self._pending_es or self.params.es_cycles):
            self.log.append((cycle, f"SET CL {seconds} rejected"))
            return
        self._pending_cl = c
        self.log.append((cycle, f"SET CL {seconds} pending"))

    def request(self, cycle: int, trigger: str = "event") -> bool:
        if self.phase != IDLE:
            self.log.append((cycle, f"{trigger} checkpoint rejected during {self.phase}"))
            return False
        self._initiate(cycle, trigger)
        return True

    # --- phases ------------------------------------------------------------------------

    def _initiate(self, cycle: int, trigger: str) -> None:
        if self._pending_es is not None:
            self.params.es_cycles = self._pending_es
            self._pending_es = None
        if self._pending_cl is not None:
            self.params.cl_cycles = self._pending_cl
            self._pending_cl = None
        self.mc.cl_cycles = self.params.cl_cycles
        self.mc.es_cycles = self.params.es_cycles
        self.phase = FLUSHING
        self.reports = {}
        self.l2_done = set()
        self.llc_done = set()
        self.walk_finished = False
        self.current = CheckpointRecord(self.epoch, trigger, cycle, self.params.cl_cycles,
                                        self.params.es_cycles,
                                        predictor_rate=self.mc.predictor.rate,
                                        scrubbing_step=self.params.scrubbing_step)
        self.deadline = cycle + self.params.cl_cycles - self.margin
        if self.cfg.timer_enabled:
            self.next_timer = cycle + self.params.es_cycles
            self.wake(self.next_timer)
        self.net.flushing = True
        self.net.inject_token(self.cfg.controller_node, cycle)

    def on_report(self, cycle: int, router: int, sent: int, x: int, p: int,
                  closed: bool) -> None:
        if self.phase != FLUSHING:
            return
        prev = self.reports.get(router)
        if prev is None or sent >= prev.cycle:
            self.reports[router] = _Report(sent, x, p, closed)
        if self.flush_complete():
            self.current.flush_done = cycle
            if self.on_flush is not None:
                self.on_flush(self.current, cycle)
            self.current.pages_at_token = self.mc.epoch_stats[self.epoch].get(
                "pages_at_token", 0)
            self.phase = L2_SCRUB
            self.side(self.latency, self._start_l2_scrub)
            self.side(self.latency, self._start_walk)

    def flush_complete(self) -> bool:
        if len(self.reports) < self.net.n:
            return False
        if not all(r.closed for r in self.reports.values()):
            return False
        return sum(r.x for r in self.reports.values()) == sum(
            r.p for r in self.reports.values())

    def _start_l2_scrub(self, cycle: int) -> None:
        for l2 in self.l2s:
            l2.start_scrub(cycle, self.params.scrubbing_step, self.params.scrubbing_granularity)

    def _start_walk(self, cycle: int) -> None:
        self.mc.start_walk(cycle, max(cycle, self.deadline))

    def on_l2_done(self, cycle: int, core: int) -> None:
        self.l2_done.add(core)
        if self.phase == L2_SCRUB and len(self.l2_done) == len(self.l2s):
            self.current.l2_done = cycle
            self.phase = LLC_SCRUB
            self.side(self.latency, self._start_llc_scrub)

    def _start_llc_scrub(self, cycle: int) -> None:
        for llc in self.llcs:
            llc.start_scrub(cycle, self.params.scrubbing_step, self.params.scrubbing_granularity)

    def on_llc_done(self, cycle: int, node: int) -> None:
        self.llc_done.add(node)
        if self.phase == LLC_SCRUB and len(self.llc_done) == len(self.llcs):
            self.current.llc_done = cycle
            self._tune_after_scrub()
            self.phase = AWAIT_DRAM
            self.wake(cycle)

    def on_walk_done(self, cycle: int) -> None:
        self.walk_finished = True
        self.current.walk_done = cycle
        self.current.walk_step = self.mc.stats.get("walk_step_last", 0)
        self.wake(cycle)

    def _tune_after_scrub(self) -> None:
        rec = self.current
        scrub = rec.llc_done - rec.init
        self.mc.cl_floor = float(scrub)
        if scrub > rec.cl_target // 2 and self.params.scrubbing_step > 1:
            self.params.scrubbing_step = max(1, self.params.scrubbing_step // 2)
            self.log.append((rec.llc_done, f"scrubbing step halved to {self.params.scrubbing_step}"))

    def tick(self, cycle: int) -> None:
        if self.phase == AWAIT_DRAM:
            drained = self.nvm.drain(cycle)
            if drained and self.current.drain_done < 0:
                self.current.drain_done = cycle
                self.mc.cl_floor = float(self.current.cl_min_cycles)
                self.mc.drained = True
            if drained and self.walk_finished:
                self.phase = COMMITTING
                self.commit_at = cycle + self.commit_cycles
                self.wake(self.commit_at)
            elif not drained:
                nxt = self.nvm.device.next_event()
                self.wake(nxt if nxt is not None and nxt > cycle else cycle + 1)
        if self.phase == COMMITTING and cycle >= self.commit_at:
            self._commit(cycle)
        if (self.cfg.timer_enabled and not self.halted and self.next_timer >= 0
                and cycle >= self.next_timer):
            if self.phase == IDLE:
                self._initiate(cycle, "timer")
            elif self.phase != COMMITTING or cycle < self.commit_at:
                self.log.append((cycle, "timer fired during a checkpoint; deferred to commit"))
                self.next_timer = -2  # initiate at commit

    def _commit(self, cycle: int) -> None:
        rec = self.current
        ok = self.nvm.device.commit(rec.epoch, self.regs(rec.epoch))
        rec.commit = cycle
        rec.committed = ok
        self.history.append(rec)
        self.net.reset()
        for c in self.l2s:
            c.scrub.reset()
        for t in self.llcs:
            t.scrub.reset()
        self.mc.on_commit(cycle)
        self.epoch += 1
        self.phase = IDLE
        self.current = None
        if self.on_commit is not None:
            self.on_commit(rec, cycle)
        if not ok:
            self.halted = True
            return
        if self.next_timer == -2 or (rec.trigger == "event" and self.cfg.timer_enabled):
            self.next_timer = cycle + self.params.es_cycles if self.next_timer != -2 else cycle
            self.wake(self.next_timer)

    @property
    def busy(self) -> bool:
        return self.phase != IDLE
