"""Wiring of all components and the main event loop.

Within a cycle units tick in a fixed order: cores, L2 tiles, LLC tiles,
directory, NoC, memory controller, NVM, side channel, checkpoint
controller. A unit woken for the current cycle by a unit later in that
order runs on the next cycle. Cycles in which nothing is scheduled are
skipped.
"""

from __future__ import annotations

import copy
import heapq
from collections import defaultdict
from dataclasses import dataclass, field

from .cache import Directory, L2Controller, LLCTile
from .config import SimConfig
from .controller import CheckpointController
from .core import Core
from .dram import MemoryController
from .noc import Network
from .nvm import NvmSubsystem, recover


@dataclass
class CrashPlan:
    """Power failure either at a cycle or at a step of a given commit."""

    cycle: int | None = None
    commit_epoch: int | None = None
    commit_step: int | None = None


class _Unit:
    __slots__ = ("tick",)

    def __init__(self, tick):
        self.tick = tick


@dataclass
class RunResult:
    cfg: SimConfig
    cycles: int
    records: list
    image: object  # NvmImage after recovery (crash) or at end of run
    crashed: bool
    stats: dict = field(default_factory=dict)


class Simulator:
    def __init__(self, cfg: SimConfig, per_core_ops, oracle=None, crash: CrashPlan | None = None,
                 observer=None):
        self.cfg = cfg
        self.cycle = 0
        self.crash = crash
        self._heap: list = []
        self._queued: set = set()
        self._side: list = []
        self._side_seq = 0
        self.units: list[_Unit] = []

        net = self.net = Network(cfg.noc_width, cfg.noc_height, cfg.link_delay,
                                 cfg.link_delays, cfg.mutation, cfg.strict, cfg.report_interval)
        net.dir_node = cfg.dir_node
        net.deliver = self._deliver
        net.on_token = self._on_token
        net.report = self._report

        n_cores = cfg.core_count
        core_ids = [self._reserve() for _ in range(n_cores)]
        l2_ids = [self._reserve() for _ in range(n_cores)]
        llc_ids = [self._reserve() for _ in range(net.n)]
        dir_id = self._reserve()
        self._noc_id = self._reserve()
        mc_id = self._reserve()
        nvm_id = self._reserve()
        self._side_id = self._reserve()
        ctrl_id = self._reserve()
        net.wake = self._waker(self._noc_id)

        self.l2s = [L2Controller(i, cfg, net, self._waker(l2_ids[i]), self._l2_notify)
                    for i in range(n_cores)]
        self.llcs = [LLCTile(n, cfg, net, self._waker(llc_ids[n]), self._llc_notify)
                     for n in range(net.n)]
        self.directory = Directory(cfg.dir_node, cfg, net, self._waker(dir_id),
                                   lambda line: line % net.n)
        self.nvm = NvmSubsystem(cfg, self._waker(nvm_id))
        self.mc = MemoryController(cfg, cfg.memory_node, self.nvm, self._send,
                                   self._mc_notify, self._waker(mc_id))
        self.mc.net_count = net.count_held
        self.mc.oracle = oracle
        self.nvm.attach(self.mc)
        self.mc.cl_floor = float(cfg.cl_min_estimate_cycles or self.estimate_cl_min())
        self.mc.start_epoch(0)
        self.controller = CheckpointController(
            cfg, net, self.l2s, self.llcs, self.mc, self.nvm, self._side_send,
            self._waker(ctrl_id), self.regs, on_commit=self._on_commit)
        self.cores = [Core(i, per_core_ops[i] if i < len(per_core_ops) else [], self.l2s[i],
                           cfg, self._waker(core_ids[i]), self.controller, self._on_retire)
                      for i in range(n_cores)]
        for i in range(n_cores):
            self.units[core_ids[i]] = _Unit(self.cores[i].tick)
            self.units[l2_ids[i]] = _Unit(self.l2s[i].tick)
        for n in range(net.n):
            self.units[llc_ids[n]] = _Unit(self.llcs[n].tick)
        self.units[dir_id] = _Unit(self.directory.tick)
        self.units[self._noc_id] = _Unit(self._noc_tick)
        self.units[mc_id] = _Unit(self.mc.tick)
        self.units[nvm_id] = _Unit(self.nvm.tick)
        self.units[self._side_id] = _Unit(self._side_tick)
        self.units[ctrl_id] = _Unit(self.controller.tick)

        self.observer = observer
        if observer is not None:
            observer.attach(self)
        # golden-image bookkeeping
        self.write_log: list[tuple[int, int, int, int, int]] = []  # cycle, core, line, value, tag
        self.read_log: list[tuple[int, int, int]] = []  # reader core, reader seq, value
        self.tag_counts = [defaultdict(int) for _ in range(n_cores)]
        self.crashed = False
        if crash is not None and crash.commit_step is not None and crash.commit_epoch == 0:
            self.nvm.device.crash_at_step = crash.commit_step

    # --- scheduling ------------------------------------------------------------------

    def _reserve(self) -> int:
        self.units.append(None)
        return len(self.units) - 1

    def _waker(self, idx: int):
        def wake(cycle, _idx=idx):
            key = (cycle, _idx)
            if key not in self._queued:
                self._queued.add(key)
                heapq.heappush(self._heap, key)
        return wake

    def _send(self, msg, cycle: int) -> None:
        self.net.send(msg, cycle)

    def _noc_tick(self, cycle: int) -> None:
        self.net.tick(cycle)
        nxt = self.net.next_event(cycle)
        if nxt is not None:
            self._waker(self._noc_id)(nxt)

    def _side_send(self, delay: int, fn, *args) -> None:
        self._side_seq += 1
        t = self.cycle + delay
        heapq.heappush(self._side, (t, self._side_seq, fn, args))
        self._waker(self._side_id)(t)

    def _side_tick(self, cycle: int) -> None:
        while self._side and self._side[0][0] <= cycle:
            _, _, fn, args = heapq.heappop(self._side)
            fn(cycle, *args)

    # --- callbacks ----------------------------------------------------------------------

    def _deliver(self, node: int, msg, cycle: int) -> None:
        t = msg.target
        if t == "l2":
            self.l2s[node].receive(msg, cycle)
        elif t == "llc":
            self.llcs[node].receive(msg, cycle)
        elif t == "dir":
            self.directory.receive(msg, cycle)
        elif t == "mc":
            self.mc.receive(msg, cycle)
        else:
            raise AssertionError(f"no element {t!r} at node {node}")
        if self.observer is not None:
            self.observer.on_deliver(node, msg, cycle)

    def _on_token(self, node: int, cycle: int) -> None:
        if node < len(self.l2s):
            self.l2s[node].on_token(cycle)
        self.llcs[node].on_token(cycle)
        if node == self.cfg.dir_node:
            self.directory.on_token(cycle)
        if node == self.cfg.memory_node:
            self.mc.on_token(cycle)
        if self.observer is not None:
            self.observer.on_token(node, cycle)

    def _report(self, router: int, cycle: int, x: int, p: int, closed: bool) -> None:
        self._side_send(self.cfg.side_latency, self.controller.on_report, router, cycle,
                        x, p, closed)

    def _l2_notify(self, event: str, core: int, *args) -> None:
        if event == "unstall":
            self.cores[core].unstall(args[-1])
        else:
            self._side_send(self.cfg.side_latency, self.controller.on_l2_done, core)

    def _llc_notify(self, event: str, node: int, cycle: int) -> None:
        self._side_send(self.cfg.side_latency, self.controller.on_llc_done, node)

    def _mc_notify(self, event: str, cycle: int) -> None:
        self._side_send(self.cfg.side_latency, self.controller.on_walk_done)

    def _on_retire(self, core: int, op, cycle: int, tag: int, value) -> None:
        self.tag_counts[core][tag] += 1
        if op.kind == "W":
            self.write_log.append((cycle, core, op.addr >> 6, value, tag))
        elif op.kind == "R":
            self.read_log.append((core, op.seq, value))

    def _on_commit(self, rec, cycle: int) -> None:
        if self.observer is not None:
            self.observer.on_commit(rec, cycle)
        c = self.crash
        if c is not None and c.commit_step is not None and c.commit_epoch == rec.epoch + 1:
            self.nvm.device.crash_at_step = c.commit_step

    # --- golden state -------------------------------------------------------------------

    def regs(self, epoch: int) -> dict[int, int]:
        return {c: sum(n for tag, n in counts.items() if tag <= epoch)
                for c, counts in enumerate(self.tag_counts)}

    def golden(self, epoch: int) -> dict[int, int]:
        """Line values of the consistent cut after ``epoch``'s writes."""
        img: dict[int, int] = {}
        for _, _, line, value, tag in self.write_log:
            if tag <= epoch:
                img[line] = value
        return img

    def estimate_cl_min(self) -> int:
        cfg = self.cfg
        flush = 4 * self.net.diameter * cfg.max_link_delay + 2 * cfg.report_interval
        g = max(1, cfg.scrubbing_granularity)
        l2 = cfg.l2_sets * cfg.l2_ways * cfg.scrubbing_step // g
        llc = cfg.llc_sets * cfg.llc_ways * cfg.scrubbing_step // g
        # every cached line dirty: the scrubbed data still has to reach NVM
        lines = (cfg.l2_sets * cfg.l2_ways * cfg.core_count
                 + cfg.llc_sets * cfg.llc_ways * cfg.node_count)
        drain = -(-lines // max(1, cfg.nvm_banks)) * cfg.nvm_latency
        return flush + max(l2 + llc, drain) + 4 * cfg.side_latency

    # --- main loop ------------------------------------------------------------------------

    def _quiescent(self) -> bool:
        return all(c.done for c in self.cores) and not self.controller.busy

    def step_cycle(self, t: int) -> None:
        self.cycle = t
        due: set = set()
        last = -1
        deferred = []
        heap = self._heap
        while True:
            while heap and heap[0][0] <= t:
                key = heapq.heappop(heap)
                self._queued.discard(key)
                if key[1] <= last:
                    deferred.append(key[1])
                else:
                    due.add(key[1])
            if not due:
                break
            idx = min(due)
            due.discard(idx)
            last = idx
            self.units[idx].tick(t)
        for idx in deferred:
            self._waker(idx)(t + 1)

    def run(self, max_cycles: int | None = None, final_checkpoint: bool = False,
            stop_when_idle: bool = True) -> RunResult:
        """Run until the trace is done (or ``max_cycles``, timers still firing)."""
        final_requested = False
        while self._heap:
            t = self._heap[0][0]
            if max_cycles is not None and t > max_cycles:
                break
            if self.crash is not None and self.crash.cycle is not None and t >= self.crash.cycle:
                self.cycle = self.crash.cycle
                self.crashed = True
                break
            self.step_cycle(t)
            if self.observer is not None:
                self.observer.end_cycle(t)
            if self.nvm.device.crashed:
                self.crashed = True
                break
            if stop_when_idle and self._quiescent():
                if final_checkpoint and not final_requested:
                    final_requested = True
                    self.controller.request(self.cycle, "final")
                    continue
                break
        return self.result()

    def result(self) -> RunResult:
        img = copy.deepcopy(self.nvm.device.img)
        recover(img)
        return RunResult(self.cfg, self.cycle, list(self.controller.history), img,
                         self.crashed, self.stats())

    def stats(self) -> dict:
        out = {
            "noc_messages": self.net.sent_messages,
            "violations": len(self.net.violations),
            "dir": dict(self.directory.stats),
            "mc": dict(self.mc.stats),
            "nvm_kinds": dict(self.nvm.device.kinds),
            "retired": [c.retired for c in self.cores],
            "table_reads": self.mc.table_reads,
        }
        if self.nvm.scheduler is not None:
            out["scheduler"] = dict(self.nvm.scheduler.stats)
        return out


def simulate(cfg: SimConfig, per_core_ops, **kw) -> tuple[Simulator, RunResult]:
    sim = Simulator(cfg, per_core_ops, **{k: v for k, v in kw.items()
                                         if k in ("oracle", "crash", "observer")})
    res = sim.run(kw.get("max_cycles"), kw.get("final_checkpoint", False))
    return sim, res
