"""DRAM model, per-epoch modified-page tables, the table walker and the
locality predictor with its rate tuner."""

from __future__ import annotations

import math
from collections import OrderedDict, defaultdict, deque

import numpy as np

from . import _accel
from .address import LEVEL_BITS, level_indices
from .config import InfeasibleCL

ENTRIES = 1 << LEVEL_BITS
TABLE_BASE = 0xF000_0000_0000  # where table nodes live in the physical map
PRIVATE_MAX = 3
SHARED_MAX = 7


class TableExhausted(RuntimeError):
    pass


class _Inner:
    __slots__ = ("id", "child", "present")

    def __init__(self, nid: int):
        self.id = nid
        self.child = np.full(ENTRIES, -1, dtype=np.int64)
        self.present = np.zeros(ENTRIES, dtype=np.uint8)


class _Leaf:
    __slots__ = ("id", "key", "valid", "private", "spec")

    def __init__(self, nid: int, key: int):
        self.id = nid
        self.key = key  # page >> 10
        self.valid = np.zeros(ENTRIES, dtype=np.uint8)
        self.private = np.zeros(ENTRIES, dtype=np.uint8)
        self.spec = np.zeros(ENTRIES, dtype=np.uint8)


class DramPageTable:
    """Four-level radix tree over 256-byte pages for one epoch.

    Inner entries hold the child node's address and a valid bit; leaf
    entries hold the valid bit, a 2-bit private counter and a flag marking
    pages already persisted speculatively.
    """

    def __init__(self, epoch: int, node_limit: int = 1 << 16):
        self.epoch = epoch
        self.node_limit = node_limit
        self.nodes: list = []
        self.root: _Inner | None = None
        self.leaves: dict[int, _Leaf] = {}
        self.valid_count = 0
        self.live = 0  # valid and not speculatively persisted

    def _alloc(self, node):
        if len(self.nodes) >= self.node_limit:
            raise TableExhausted(
                f"epoch {self.epoch} page table exhausted {self.node_limit} nodes")
        self.nodes.append(node)
        return node

    @staticmethod
    def node_address(node) -> int:
        return TABLE_BASE + node.id * 4096

    def insert(self, page: int) -> tuple[_Leaf, int, int, bool]:
        """Set the leaf valid bit; returns (leaf, idx, inner nodes allocated, first touch)."""
        i0, i1, i2, i3 = level_indices(page)
        inner_new = 0
        if self.root is None:
            self.root = self._alloc(_Inner(len(self.nodes)))
            inner_new += 1
        node = self.root
        for depth, idx in enumerate((i0, i1, i2)):
            cid = node.child[idx]
            if cid < 0:
                if depth < 2:
                    child = self._alloc(_Inner(len(self.nodes)))
                    inner_new += 1
                else:
                    child = self._alloc(_Leaf(len(self.nodes), page >> 10))
                    self.leaves[page >> 10] = child
                node.child[idx] = child.id
                node.present[idx] = 1
                cid = child.id
            node = self.nodes[cid]
        first = not node.valid[i3]
        if first:
            node.valid[i3] = 1
            node.private[i3] = 0
            node.spec[i3] = 0
            self.valid_count += 1
            self.live += 1
        return node, i3, inner_new, first

    def lookup(self, page: int):
        leaf = self.leaves.get(page >> 10)
        if leaf is None:
            return None, -1
        return leaf, page & (ENTRIES - 1)

    def is_valid(self, page: int) -> bool:
        leaf, i = self.lookup(page)
        return leaf is not None and bool(leaf.valid[i])

    def is_spec(self, page: int) -> bool:
        leaf, i = self.lookup(page)
        return leaf is not None and bool(leaf.valid[i]) and bool(leaf.spec[i])

    def clear(self, page: int) -> None:
        leaf, i = self.lookup(page)
        if leaf is None or not leaf.valid[i]:
            return
        leaf.valid[i] = 0
        self.valid_count -= 1
        if not leaf.spec[i]:
            self.live -= 1
        leaf.spec[i] = 0

    def mark_spec(self, page: int) -> None:
        leaf, i = self.lookup(page)
        if leaf.valid[i] and not leaf.spec[i]:
            leaf.spec[i] = 1
            self.live -= 1

    def unmark_spec(self, page: int) -> None:
        leaf, i = self.lookup(page)
        if leaf.valid[i] and leaf.spec[i]:
            leaf.spec[i] = 0
            self.live += 1

    def pages(self) -> list[int]:
        out = []
        for key in sorted(self.leaves):
            leaf = self.leaves[key]
            out.extend((key << 10) | int(i) for i in np.flatnonzero(leaf.valid))
        return out


class WalkCursor:
    """Hierarchical per-level counters walking a table in page order.

    Inner table pages are fetched through a small node cache; misses are
    counted as DRAM reads.
    """

    def __init__(self, table: DramPageTable, cache: OrderedDict | None = None,
                 cache_entries: int = 3):
        self.table = table
        self.counters = [0, 0, 0, 0]
        self.path: list = [table.root, None, None, None]
        self.cache = cache if cache is not None else OrderedDict()
        self.cache_entries = cache_entries
        self.dram_reads = 0
        self.leaf_reads = 0
        self.parent_advances = 0
        self.done = table.root is None
        if table.root is not None:
            self._read(table.root, inner=True)

    def _read(self, node, inner: bool) -> None:
        if not inner:
            self.leaf_reads += 1
            return
        addr = DramPageTable.node_address(node)
        if addr in self.cache:
            self.cache.move_to_end(addr)
            return
        self.dram_reads += 1
        if self.cache_entries:
            self.cache[addr] = True
            while len(self.cache) > self.cache_entries:
                self.cache.popitem(last=False)

    def next_page(self) -> int | None:
        """Advance to the next valid leaf and return its page, or None when done."""
        if self.done:
            return None
        lvl = 3
        while lvl > 0 and self.path[lvl] is None:
            lvl -= 1
        while lvl >= 0:
            node = self.path[lvl]
            flags = node.valid if lvl == 3 else node.present
            i = _accel.next_set(flags, self.counters[lvl])
            if i < 0:
                self.path[lvl] = None
                self.counters[lvl] = ENTRIES
                lvl -= 1
                if lvl >= 0:
                    self.parent_advances += 1
                continue
            self.counters[lvl] = i + 1
            if lvl == 3:
                c = self.counters
                return ((c[0] - 1) << 30) | ((c[1] - 1) << 20) | ((c[2] - 1) << 10) | i
            child = self.table.nodes[node.child[i]]
            self._read(child, inner=lvl + 1 < 3)
            self.path[lvl + 1] = child
            self.counters[lvl + 1] = 0
            lvl += 1
        self.done = True
        return None


def cyclic_clear(value: int, bit: int) -> int:
    return value & ~(1 << bit)


def tune_rate(n: int, m: int, r_min: int = 512, r_max: int = 262_144):
    """Sub-epoch retune of the predictor activation period.

    Returns (delta, R, flagged). delta = (n - m) / n clamped to [0, 1];
    R moves linearly from r_min (no headroom) to r_max (idle epoch).
    """
    if n <= 0:
        return 0.0, r_min, True
    delta = min(1.0, max(0.0, (n - m) / n))
    return delta, int(round(r_min + delta * (r_max - r_min))), False


def compute_page_budget(cl_seconds: float, frequency_hz: float, k: float,
                        floor_cycles: float = 0) -> int:
    """Largest unpersisted page count that still fits in the latency target."""
    if k <= 0:
        raise ValueError("k must be positive")
    c = round(cl_seconds * frequency_hz)
    if c <= floor_cycles:
        raise InfeasibleCL(
            f"CL of {c} cycles is not above the cache-scrub floor of {floor_cycles:.0f}")
    return int(math.floor((c - floor_cycles) / k))


class LocalityPredictor:
    """Saturating private/shared counters with cyclic decay."""

    def __init__(self, r_min: int = 512, r_max: int = 262_144):
        if not 512 <= r_min <= r_max <= 262_144 and (r_min < 1 or r_min > r_max):
            raise ValueError("bad predictor range")
        self.r_min = r_min
        self.r_max = r_max
        self.rate = r_max
        self.shared: dict[int, np.ndarray] = {}
        self.activations = 0
        self.n = 0
        self.deltas: list[float] = []
        self.rates: list[int] = []
        self.flags: list[str] = []
        self._out = np.empty(1024, dtype=np.int64)

    def _shared_for(self, leaf_key: int) -> np.ndarray:
        arr = self.shared.get(leaf_key)
        if arr is None:
            arr = self.shared[leaf_key] = np.zeros(_accel.GROUPS_PER_LEAF, dtype=np.uint8)
        return arr

    def shared_value(self, page: int) -> int:
        return int(self._shared_for(page >> 10)[(page & 1023) // 64])

    def on_write(self, leaf: _Leaf, idx: int) -> None:
        if leaf.private[idx] < PRIVATE_MAX:
            leaf.private[idx] += 1
        sh = self._shared_for(leaf.key)
        g = idx // 64
        if sh[g] < SHARED_MAX:
            sh[g] += 1

    def activate(self, table: DramPageTable) -> list[int]:
        """One predictor pass: pick cold pages, then decay visited counters."""
        priv_bit = self.activations % 2
        shared_bit = self.activations % 3
        self.activations += 1
        picked = []
        for key in sorted(table.leaves):
            leaf = table.leaves[key]
            n = _accel.predictor_sweep(leaf.valid, leaf.spec, leaf.private,
                                       self._shared_for(key), priv_bit, shared_bit,
                                       self._out)
            picked.extend((key << 10) | int(i) for i in self._out[:n])
        return picked

    def tune(self, n: int, m: int) -> int:
        delta, rate, flagged = tune_rate(n, m, self.r_min, self.r_max)
        self.n = n
        self.rate = rate
        self.deltas.append(delta)
        self.rates.append(rate)
        if flagged:
            self.flags.append("zero-budget")
        return rate


def build_oracle(mc, scheduler=None) -> dict:
    """Future knowledge for the perfect predictor, taken from a finished run.

    ``last`` is each page's final DRAM write count per epoch, so the replay
    can persist a page right after its last write; ``sched`` lists pages the
    access scheduler later wrote for that epoch, which are left alone.
    """
    last = {e: dict(pages) for e, pages in mc.write_counts.items()}
    sched = {e: set(p) for e, p in scheduler.pages_by_epoch.items()} if scheduler else {}
    return {"last": last, "sched": sched}


class MemoryController:
    """DRAM, modified-page tracking, walker and predictor at the memory node.

    ``nvm`` is the NVM subsystem (device + access scheduler). ``send``
    injects NoC messages; ``notify`` delivers side-channel events to the
    checkpoint controller.
    """

    def __init__(self, cfg, node: int, nvm, send, notify, wake):
        self.cfg = cfg
        self.node = node
        self.nvm = nvm
        self.send = send
        self.notify = notify
        self.wake = wake
        self.dram: dict[int, int] = defaultdict(int)
        self.epoch = 0
        self.current = DramPageTable(0, cfg.table_node_limit)
        self.persisting: DramPageTable | None = None
        self.predictor = LocalityPredictor(cfg.predictor_rate_min, cfg.predictor_rate_max)
        self.inbox: deque = deque()
        self.outq: list = []  # (ready_cycle, seq, msg)
        self._seq = 0
        self.node_cache: OrderedDict = OrderedDict()
        self.walker: WalkCursor | None = None
        self.walk_next = -1
        self.walk_deadline = 0
        self.walk_started = -1
        self.pred_next = -1
        self.sub_next = -1
        self.epoch_start = 0
        self.k_samples: deque = deque([float(cfg.nvm_latency)], maxlen=16)
        self.cl_floor = 0.0
        # k is sampled only once the scrubbed cache data has drained; queueing
        # behind that burst is already part of the floor
        self.drained = True
        self.cl_cycles = cfg.cl_cycles
        self.es_cycles = cfg.epoch_size_cycles
        self.write_counts: dict[int, dict[int, int]] = defaultdict(lambda: defaultdict(int))
        self.oracle = None  # perfect-predictor knowledge from a previous run
        self.stats = defaultdict(int)
        self.epoch_stats: dict[int, dict] = defaultdict(lambda: defaultdict(int))
        self.table_reads = 0
        self.post_lines: set[int] = set()
        self.net_count = lambda node, m: None
        self.predictor.tune(self.budget(), 0)

    # --- budget / tuning -------------------------------------------------------

    @property
    def k(self) -> float:
        return max(float(self.cfg.walk_step_min), sum(self.k_samples) / len(self.k_samples))

    def budget(self) -> int:
        try:
            return compute_page_budget(self.cl_cycles / self.cfg.frequency_hz,
                                       self.cfg.frequency_hz, self.k, self.cl_floor)
        except InfeasibleCL:
            return 0

    def start_epoch(self, cycle: int) -> None:
        self.epoch_start = cycle
        self.sub_next = cycle + max(1, self.es_cycles // self.cfg.sub_epochs)
        self._schedule_predictor(cycle)
        self.wake(self.sub_next)

    def _schedule_predictor(self, cycle: int) -> None:
        if self.cfg.predictor == "adaptive":
            self.pred_next = cycle + self.predictor.rate
            self.wake(self.pred_next)

    # --- NoC side -----------------------------------------------------------------

    def receive(self, msg, cycle: int) -> None:
        self.inbox.append(msg)
        self.wake(cycle + 1)

    def _reply(self, msg, ready: int) -> None:
        self._seq += 1
        self.outq.append((ready, self._seq, msg))
        self.wake(ready)

    def _sense(self) -> int:
        return self.epoch & 1

    def tick(self, cycle: int) -> None:
        from .noc import CTRL, DATA, GETS, Message, WB
        while self.inbox:
            msg = self.inbox.popleft()
            if msg.kind == GETS:
                resp = Message(DATA, self.node, msg.src, "llc", self._sense(), sub="fill",
                               line=msg.line, value=self.dram[msg.line])
                self._reply(resp, cycle + self.cfg.dram_latency)
            elif msg.kind == WB:
                if not self.write_line(msg.line, msg.value, msg.lsnap, cycle):
                    self.inbox.appendleft(msg)  # scheduler full: retry next cycle
                    self.wake(cycle + 1)
                    break
                ack = Message(CTRL, self.node, msg.src, "llc", self._sense(), sub="mc_ack",
                              line=msg.line)
                if msg.acks:
                    self._reply(ack, cycle + 1)
            else:
                raise AssertionError(f"memory controller cannot handle {msg}")
        if self.outq:
            ready = [e for e in self.outq if e[0] <= cycle]
            if ready:
                self.outq = [e for e in self.outq if e[0] > cycle]
                for _, _, m in sorted(ready):
                    self.send(m, cycle)
        if self.sub_next >= 0 and cycle >= self.sub_next:
            self.predictor.tune(self.budget(), self.current.live)
            self.sub_next = cycle + max(1, self.es_cycles // self.cfg.sub_epochs)
            self.wake(self.sub_next)
            if self.pred_next > cycle + self.predictor.rate:
                self._schedule_predictor(cycle)  # a shorter period takes effect now
        if self.pred_next >= 0 and cycle >= self.pred_next:
            self.pred_next = -1
            if self.persisting is None:
                self.run_predictor(cycle)
            self._schedule_predictor(cycle)
        if self.walker is not None and cycle >= self.walk_next:
            self._walk_step(cycle)

    # --- writes and tracking -----------------------------------------------------

    def read_page(self, page: int) -> tuple[int, int, int, int]:
        base = page << 2
        return tuple(self.dram.get(base + s, 0) for s in range(4))

    def write_line(self, line: int, value: int, lsnap: int, cycle: int) -> None:
        page = line >> 2
        if self.persisting is not None and lsnap != self._sense():
            # pre-snapshot data arriving during a checkpoint: goes to NVM via
            # the access scheduler; DRAM copy is refreshed but not re-tracked
            if not self.nvm.enqueue_line(line, value, self.epoch - 1, cycle):
                return False
            self.epoch_stats[self.epoch - 1]["cache_lines"] += 1
            if line not in self.post_lines:
                self.dram[line] = value
            return True
        if lsnap != self._sense():
            raise AssertionError(
                f"stale snapshot bit on DRAM write of line {line:#x} outside a checkpoint")
        self.record_write(page, cycle)
        self.dram[line] = value
        if self.persisting is not None:
            self.post_lines.add(line)
            return True  # speculation waits until the checkpoint commits
        if self.cfg.predictor == "always":
            self._speculate(page, cycle)
        elif self.cfg.predictor == "perfect" and self.oracle is not None:
            last = self.oracle.get("last", {}).get(self.epoch, {}).get(page)
            sched = self.oracle.get("sched", {}).get(self.epoch, set())
            if last is not None and last == self.write_counts[self.epoch][page] \
                    and page not in sched:
                self._speculate(page, cycle)
        return True

    def record_write(self, page: int, cycle: int) -> None:
        if self.persisting is not None and self.persisting.is_valid(page):
            # the earlier avatar must reach NVM before this epoch touches it
            spec = self.persisting.is_spec(page)
            self.persisting.clear(page)
            if not spec:
                self.nvm.write_page(page, self.read_page(page), self.epoch - 1, cycle,
                                    kind="urgent")
                self.stats["urgent_persists"] += 1
                if self.walker is not None:
                    self._pace_walk(cycle)
        leaf, idx, _, first = self.current.insert(page)
        if not first and leaf.spec[idx]:
            self.current.unmark_spec(page)
            self.stats["spec_rewritten"] += 1
            self.epoch_stats[self.epoch]["mispredictions"] += 1
        self.predictor.on_write(leaf, idx)
        self.write_counts[self.epoch][page] += 1
        if self.cfg.debug_checks and self.persisting is not None:
            assert not self.persisting.is_valid(page), "page valid in both epoch tables"

    def _speculate(self, page: int, cycle: int) -> None:
        if not self.current.is_valid(page) or self.current.is_spec(page):
            return
        self.current.mark_spec(page)
        self.nvm.write_page(page, self.read_page(page), self.epoch, cycle, kind="spec")
        self.stats["spec_persists"] += 1
        self.epoch_stats[self.epoch]["spec_persists"] += 1

    def run_predictor(self, cycle: int) -> int:
        picked = self.predictor.activate(self.current)
        for page in picked:
            self._speculate(page, cycle)
        return len(picked)

    # --- access scheduler requests -------------------------------------------------

    def scrub_request(self, page: int, cycle: int):
        """Scheduler asks for a page: (data tuple or None for nak, ready cycle)."""
        ready = cycle + self.cfg.dram_latency
        t = self.persisting
        if t is not None and t.is_valid(page) and not t.is_spec(page):
            t.clear(page)
            self.stats["scrub_data"] += 1
            return self.read_page(page), ready
        if t is not None and t.is_spec(page):
            t.clear(page)
            self.stats["scrub_nak_spec"] += 1
            self.epoch_stats[self.epoch - 1]["mispredictions"] += 1
        else:
            self.stats["scrub_nak"] += 1
        return None, ready

    # --- checkpoint hooks -----------------------------------------------------------

    def on_token(self, cycle: int) -> None:
        for _, _, m in self.outq:
            self.net_count(self.node, m)
        self.persisting = self.current
        self.post_lines = set()
        self.drained = False
        self.epoch += 1
        self.current = DramPageTable(self.epoch, self.cfg.table_node_limit)
        st = self.epoch_stats[self.epoch - 1]
        st["pages_at_token"] = self.persisting.live
        st["budget_n"] = self.predictor.n
        st["rate"] = self.predictor.rate
        st["delta"] = self.predictor.deltas[-1] if self.predictor.deltas else 0.0
        self.start_epoch(cycle)

    def start_walk(self, cycle: int, deadline: int) -> None:
        self.walker = WalkCursor(self.persisting, self.node_cache, self.cfg.node_cache_entries)
        self.walk_deadline = deadline
        self.walk_started = cycle
        self.walk_next = cycle
        self.wake(cycle)

    def _walk_step(self, cycle: int) -> None:
        """Persist the next unpersisted valid entry.

        Speculated entries are cleared as the cursor passes them; they need
        no DRAM read or NVM write, so they do not cost a step. Persists are
        paced so the last one lands on the deadline: the time left is split
        evenly over the entries still to persist.
        """
        w = self.walker
        while True:
            page = w.next_page()
            if page is None:
                self.table_reads += w.dram_reads
                self.walker = None
                self.notify("walk_done", cycle)
                return
            if not self.persisting.is_spec(page):
                break
            self.persisting.clear(page)
            self.stats["walk_skipped_spec"] += 1
        self.persisting.clear(page)
        self.stats["walk_persists"] += 1
        self.nvm.write_page(page, self.read_page(page), self.epoch - 1, cycle, kind="walk",
                            on_done=self._walk_sample if self.drained else None)
        self._pace_walk(cycle)

    def _pace_walk(self, cycle: int) -> None:
        # re-run whenever the count of pages left changes
        step = (self.walk_deadline - cycle) / (self.persisting.live + 1)
        step = int(min(self.cfg.walk_step_max, max(self.cfg.walk_step_min, step)))
        self.stats["walk_step_last"] = step
        self.walk_next = cycle + step
        self.wake(self.walk_next)

    def _walk_sample(self, latency: int) -> None:
        self.k_samples.append(float(latency))

    def on_commit(self, cycle: int) -> None:
        self.persisting = None
        self._schedule_predictor(cycle)

    def next_event(self, cycle: int):
        return None
