"""Private L1/L2 tiles, shared LLC tiles and the blocking directory.

Lines carry a dirty flag and a snapshot bit (the epoch parity at the time
of the last write). A line is pre-snapshot dirty when it is dirty and its
snapshot bit differs from its holder's current parity; such lines are
pushed one level down before they are overwritten, forwarded or
invalidated, and swept out by the scrubbers during a checkpoint.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .noc import CTRL, DATA, GETS, GETX, INV, WB, Message

INF = float("inf")


@dataclass(slots=True)
class Line:
    line: int
    state: str = "S"  # S or M in private caches; "V" in the LLC
    dirty: bool = False
    snap: int = 0
    value: int = 0


class Cache:
    """Set-associative array with LRU replacement and fixed way slots."""

    def __init__(self, sets: int, ways: int):
        self.sets = sets
        self.ways = ways
        self.slots: list[Line | None] = [None] * (sets * ways)
        self.stamp = [0] * (sets * ways)
        self.where: dict[int, int] = {}
        self.clock = 0

    def __len__(self):
        return len(self.where)

    def __contains__(self, line: int) -> bool:
        return line in self.where

    def get(self, line: int, touch: bool = True) -> Line | None:
        i = self.where.get(line)
        if i is None:
            return None
        if touch:
            self.clock += 1
            self.stamp[i] = self.clock
        return self.slots[i]

    def victim(self, line: int) -> Line | None:
        """Line that ``install(line)`` would evict, if any."""
        base = (line % self.sets) * self.ways
        best = None
        for i in range(base, base + self.ways):
            if self.slots[i] is None:
                return None
            if best is None or self.stamp[i] < self.stamp[best]:
                best = i
        return self.slots[best]

    def install(self, entry: Line) -> Line | None:
        base = (entry.line % self.sets) * self.ways
        slot = None
        for i in range(base, base + self.ways):
            if self.slots[i] is None:
                slot = i
                break
            if slot is None or self.stamp[i] < self.stamp[slot]:
                slot = i
        old = self.slots[slot]
        if old is not None:
            del self.where[old.line]
        self.slots[slot] = entry
        self.where[entry.line] = slot
        self.clock += 1
        self.stamp[slot] = self.clock
        return old

    def remove(self, line: int) -> Line | None:
        i = self.where.pop(line, None)
        if i is None:
            return None
        old = self.slots[i]
        self.slots[i] = None
        return old

    def lines(self):
        return (s for s in self.slots if s is not None)


class Element:
    """Something that sits on a NoC node, follows the epoch and can be woken."""

    target = ""

    def __init__(self, node: int, net, wake):
        self.node = node
        self.net = net
        self._wake = wake
        self.epoch = 0
        self.inbox: deque = deque()

    @property
    def sense(self) -> int:
        return self.epoch & 1

    def wake(self, cycle: int) -> None:
        self._wake(cycle)

    def on_token(self, cycle: int) -> None:
        self.epoch += 1

    def receive(self, msg: Message, cycle: int) -> None:
        self.inbox.append(msg)
        self.wake(cycle + 1)

    def pre_dirty(self, ln: Line) -> bool:
        return ln.dirty and ln.snap != self.sense

    def msg(self, kind, dst, target, sub="", **kw) -> Message:
        return Message(kind, self.node, dst, target, self.sense, sub=sub, **kw)


class Scrubber:
    """Cursor over a cache's slots, visiting ``granularity`` slots every ``step`` cycles."""

    def __init__(self, cache: Cache):
        self.cache = cache
        self.active = False
        self.finished = False
        self.pos = 0
        self.next = -1
        self.step = 1
        self.granularity = 1
        self.started = -1
        self.passes = 0

    def start(self, cycle: int, step: int, granularity: int) -> None:
        self.active = True
        self.finished = False
        self.pos = 0
        self.step = max(1, step)
        self.granularity = max(1, granularity)
        self.next = cycle
        self.started = cycle
        self.passes = 0

    def visit(self, cycle: int):
        """Yield slot lines for this step; returns True after a full pass."""
        out = []
        n = len(self.cache.slots)
        for _ in range(self.granularity):
            if self.pos >= n:
                break
            ln = self.cache.slots[self.pos]
            self.pos += 1
            if ln is not None:
                out.append(ln)
        self.next = cycle + self.step
        return out, self.pos >= n

    def reset(self) -> None:
        self.active = False
        self.finished = False


class L2Controller(Element):
    """Core-private L1 (write-through, no write-allocate) over an inclusive L2."""

    target = "l2"

    def __init__(self, core: int, cfg, net, wake, notify):
        super().__init__(core, net, wake)
        self.core = core
        self.cfg = cfg
        self.dir_node = cfg.dir_node
        self.l1 = Cache(cfg.l1_sets, cfg.l1_ways)
        self.l2 = Cache(cfg.l2_sets, cfg.l2_ways)
        self.wb_buffer: dict[int, Line] = {}
        self.mshr = None  # (op, value, kind, line, data, acks_needed, acks_seen, have_data)
        self.retire = None  # set by the core: retire(op, cycle, epoch)
        self.stalled = None  # op waiting for a writeback buffer slot to drain
        self.outstanding_pushes = 0
        self.notify = notify
        self.scrub = Scrubber(self.l2)
        self.stats = {"l1_hits": 0, "l2_hits": 0, "misses": 0, "pushes": 0,
                      "scrub_pushes": 0, "evictions": 0}

    # --- core side -------------------------------------------------------------

    def access(self, op, value: int, cycle: int) -> int | None:
        """Try an op; returns its completion latency, or None if it went to memory."""
        line = op.addr >> 6
        if line in self.wb_buffer:
            self.stalled = (op, value)
            return None
        is_write = op.kind == "W"
        if not is_write and self.l1.get(line) is not None:
            self.stats["l1_hits"] += 1
            self.retire(op, cycle, self.epoch, self.l2.get(line, touch=False).value)
            return self.cfg.l1_latency
        ln = self.l2.get(line)
        if ln is not None and (not is_write or ln.state == "M"):
            self.stats["l2_hits"] += 1
            if is_write:
                self._write(ln, value, cycle)
            else:
                self._l1_fill(line)
            self.retire(op, cycle, self.epoch, value if is_write else ln.value)
            return self.cfg.l2_latency
        self.stats["misses"] += 1
        kind = GETX if is_write else GETS
        self.mshr = [op, value, kind, line, None, 0, 0, False]
        self.net.send(self.msg(kind, self.dir_node, "dir", line=line, requester=self.node), cycle)
        return None

    def _l1_fill(self, line: int) -> None:
        self.l1.install(Line(line))

    def _write(self, ln: Line, value: int, cycle: int) -> None:
        if self.pre_dirty(ln):
            self._push(ln, cycle)
        ln.value = value
        ln.dirty = True
        ln.snap = self.sense
        ln.state = "M"

    def _push(self, ln: Line, cycle: int, scrub: bool = False) -> None:
        """Send a pre-snapshot dirty line one level down and keep a clean copy."""
        self.outstanding_pushes += 1
        self.stats["scrub_pushes" if scrub else "pushes"] += 1
        self.net.send(self.msg(WB, self.dir_node, "dir", sub="push", line=ln.line,
                               value=ln.value, dirty=True, lsnap=ln.snap,
                               origin=self.node, acks=1), cycle)
        ln.dirty = False

    def _evict(self, ln: Line, cycle: int) -> None:
        self.l1.remove(ln.line)
        self.stats["evictions"] += 1
        self.wb_buffer[ln.line] = ln
        pre = self.pre_dirty(ln)
        if pre:
            self.outstanding_pushes += 1
        self.net.send(self.msg(WB, self.dir_node, "dir", sub="evict", line=ln.line,
                               value=ln.value, dirty=ln.dirty, lsnap=ln.snap,
                               origin=self.node, acks=int(pre)), cycle)

    def _install(self, ln: Line, cycle: int) -> None:
        old = self.l2.install(ln)
        if old is not None:
            self._evict(old, cycle)

    # --- network side ------------------------------------------------------------

    def tick(self, cycle: int) -> None:
        while self.inbox:
            self._handle(self.inbox.popleft(), cycle)
        if self.scrub.active and cycle >= self.scrub.next:
            self._scrub_step(cycle)

    def _handle(self, m: Message, cycle: int) -> None:
        k, sub = m.kind, m.sub
        if k == DATA or (k == CTRL and sub == "grant"):
            st = self.mshr
            assert st is not None and st[3] == m.line, f"unexpected {m}"
            st[4] = m
            st[5] = m.acks
            st[7] = True
            self._try_complete(cycle)
        elif k == CTRL and sub == "inv_ack":
            self.mshr[6] += 1
            self._try_complete(cycle)
        elif k == CTRL and sub == "wb_ack":
            self.wb_buffer.pop(m.line, None)
            # an absorbed stale writeback will never be acknowledged by the LLC
            self.outstanding_pushes -= m.acks
            if self.stalled is not None and (self.stalled[0].addr >> 6) == m.line:
                op, value = self.stalled
                self.stalled = None
                self.notify("unstall", self.core, op, value, cycle)
        elif k == CTRL and sub == "llc_ack":
            self.outstanding_pushes -= 1
            assert self.outstanding_pushes >= 0
            self.wake(cycle + 1)
        elif k == GETS and sub == "fwd":
            self._fwd_gets(m, cycle)
        elif k == GETX and sub == "fwd":
            self._fwd_getx(m, cycle)
        elif k == INV:
            ln = self.l2.get(m.line, touch=False)
            if ln is not None:
                if self.pre_dirty(ln):
                    self._push(ln, cycle)
                self.l2.remove(m.line)
                self.l1.remove(m.line)
            self.net.send(self.msg(CTRL, m.requester, "l2", sub="inv_ack", line=m.line),
                          cycle)
        else:
            raise AssertionError(f"L2 {self.node} cannot handle {m}")

    def _source(self, line: int) -> Line:
        ln = self.l2.get(line, touch=False)
        if ln is None:
            ln = self.wb_buffer.get(line)
        assert ln is not None, f"L2 {self.node} forwarded line {line:#x} it does not hold"
        return ln

    def _fwd_gets(self, m: Message, cycle: int) -> None:
        ln = self._source(m.line)
        self.net.send(self.msg(DATA, m.requester, "l2", line=m.line, value=ln.value,
                               acks=0), cycle)
        if ln.state == "M":
            ln.state = "S"

    def _fwd_getx(self, m: Message, cycle: int) -> None:
        ln = self._source(m.line)
        if self.pre_dirty(ln):
            self._push(ln, cycle)
        self.net.send(self.msg(DATA, m.requester, "l2", line=m.line, value=ln.value,
                               dirty=ln.dirty, lsnap=ln.snap, acks=m.acks), cycle)
        ln.dirty = False
        if self.l2.get(m.line, touch=False) is ln:
            self.l2.remove(m.line)
            self.l1.remove(m.line)

    def _try_complete(self, cycle: int) -> None:
        op, value, kind, line, data, need, seen, have = self.mshr
        if not have or seen < need:
            return
        self.mshr = None
        ln = self.l2.get(line)
        if ln is None:
            ln = Line(line, "S", False, self.sense, data.value)
            if data.kind == DATA and data.dirty:
                ln.dirty = True
                ln.snap = data.lsnap
            self._install(ln, cycle)
        elif data.kind == DATA:
            ln.value = data.value
            if data.dirty:
                ln.dirty = True
                ln.snap = data.lsnap
        if kind == GETX:
            ln.state = "M"
            self._write(ln, value, cycle)
        else:
            self._l1_fill(line)
        self.net.send(self.msg(CTRL, self.dir_node, "dir", sub="unblock", line=line,
                               requester=self.node), cycle)
        self.retire(op, cycle, self.epoch, value if kind == GETX else ln.value)

    # --- scrubbing -------------------------------------------------------------

    def start_scrub(self, cycle: int, step: int, granularity: int) -> None:
        self.scrub.start(cycle, step, granularity)
        self.wake(cycle)

    def _scrub_step(self, cycle: int) -> None:
        s = self.scrub
        if s.pos < len(self.l2.slots):
            lines, _ = s.visit(cycle)
            for ln in lines:
                if self.pre_dirty(ln):
                    self._push(ln, cycle, scrub=True)
            self.wake(s.next)
            return
        if any(self.pre_dirty(ln) for ln in self.l2.lines()):
            s.pos = 0
            s.passes += 1
            self.wake(cycle + 1)
            return
        if self.outstanding_pushes:
            return  # woken by the next LLC ack
        s.active = False
        s.finished = True
        self.notify("scrub_done", self.core, cycle)

    def pre_dirty_count(self) -> int:
        return sum(1 for ln in self.l2.lines() if self.pre_dirty(ln))


class LLCTile(Element):
    """One SNUCA slice of the shared last-level cache."""

    target = "llc"

    def __init__(self, node: int, cfg, net, wake, notify):
        super().__init__(node, net, wake)
        self.cfg = cfg
        self.mc_node = cfg.memory_node
        self.cache = Cache(cfg.llc_sets, cfg.llc_ways)
        self.pending: dict[int, list[Message]] = {}  # line -> forwards waiting on a fill
        self.outq: list = []  # (ready, seq, msg)
        self._seq = 0
        self.outstanding_pushes = 0
        self.notify = notify
        self.scrub = Scrubber(self.cache)
        self.stats = {"hits": 0, "misses": 0, "pushes": 0, "scrub_pushes": 0,
                      "writebacks": 0, "passthrough": 0}

    def on_token(self, cycle: int) -> None:
        super().on_token(cycle)
        for _, _, m in self.outq:
            self.net.count_held(self.node, m)

    def _send_later(self, m: Message, cycle: int) -> None:
        self._seq += 1
        ready = cycle + self.cfg.llc_latency
        self.outq.append((ready, self._seq, m))
        self.wake(ready)

    def tick(self, cycle: int) -> None:
        while self.inbox:
            self._handle(self.inbox.popleft(), cycle)
        if self.outq:
            due = [e for e in self.outq if e[0] <= cycle]
            if due:
                self.outq = [e for e in self.outq if e[0] > cycle]
                for _, _, m in sorted(due, key=lambda e: (e[0], e[1])):
                    self.net.send(m, cycle)
        if self.scrub.active and cycle >= self.scrub.next:
            self._scrub_step(cycle)

    def _to_mc(self, line: int, value: int, lsnap: int, cycle: int, sub: str) -> None:
        pre = lsnap != self.sense
        if pre:
            self.outstanding_pushes += 1
        self.net.send(self.msg(WB, self.mc_node, "mc", sub=sub, line=line, value=value,
                               dirty=True, lsnap=lsnap, origin=self.node, acks=int(pre)),
                      cycle)

    def _push(self, ln: Line, cycle: int, scrub: bool = False) -> None:
        self.stats["scrub_pushes" if scrub else "pushes"] += 1
        self._to_mc(ln.line, ln.value, ln.snap, cycle, "push")
        ln.dirty = False

    def _install(self, ln: Line, cycle: int) -> None:
        old = self.cache.install(ln)
        if old is not None and old.dirty:
            self.stats["writebacks"] += 1
            self._to_mc(old.line, old.value, old.snap, cycle, "evict")

    def _handle(self, m: Message, cycle: int) -> None:
        if m.kind in (GETS, GETX):
            ln = self.cache.get(m.line)
            if ln is None:
                self.stats["misses"] += 1
                waiting = self.pending.setdefault(m.line, [])
                waiting.append(m)
                if len(waiting) == 1:
                    self.net.send(self.msg(GETS, self.mc_node, "mc", line=m.line), cycle)
                return
            self.stats["hits"] += 1
            self._respond(m, ln, cycle)
        elif m.kind == DATA and m.sub == "fill":
            ln = self.cache.get(m.line)
            if ln is None:
                ln = Line(m.line, "V", False, self.sense, m.value)
                self._install(ln, cycle)
            for req in self.pending.pop(m.line, []):
                self._respond(req, ln, cycle)
        elif m.kind == WB:
            self._writeback(m, cycle)
        elif m.kind == CTRL and m.sub == "mc_ack":
            self.outstanding_pushes -= 1
            assert self.outstanding_pushes >= 0
            self.wake(cycle + 1)
        else:
            raise AssertionError(f"LLC {self.node} cannot handle {m}")

    def _respond(self, req: Message, ln: Line, cycle: int) -> None:
        self._send_later(self.msg(DATA, req.requester, "l2", line=req.line, value=ln.value,
                                  acks=req.acks), cycle)

    def _writeback(self, m: Message, cycle: int) -> None:
        pre = m.lsnap != self.sense
        if m.acks and m.origin >= 0:
            ack = self.msg(CTRL, m.origin, "l2", sub="llc_ack", line=m.line)
        else:
            ack = None
        ln = self.cache.get(m.line)
        if pre and (self.scrub.active or self.scrub.finished
                    or (ln is not None and ln.dirty and not self.pre_dirty(ln))):
            # a newer copy already lives here, or the sweep has started: go straight down
            self.stats["passthrough"] += 1
            self._to_mc(m.line, m.value, m.lsnap, cycle, "push")
            if ln is not None and not ln.dirty:
                ln.value = m.value
        elif ln is None:
            self._install(Line(m.line, "V", True, m.lsnap, m.value), cycle)
        else:
            if not pre and self.pre_dirty(ln):
                self._push(ln, cycle)
            ln.value = m.value
            ln.dirty = True
            ln.snap = m.lsnap
        if ack is not None:
            self.net.send(ack, cycle)

    def start_scrub(self, cycle: int, step: int, granularity: int) -> None:
        self.scrub.start(cycle, step, granularity)
        self.wake(cycle)

    def _scrub_step(self, cycle: int) -> None:
        s = self.scrub
        if s.pos < len(self.cache.slots):
            lines, _ = s.visit(cycle)
            for ln in lines:
                if self.pre_dirty(ln):
                    self._push(ln, cycle, scrub=True)
            self.wake(s.next)
            return
        if any(self.pre_dirty(ln) for ln in self.cache.lines()):
            s.pos = 0
            s.passes += 1
            self.wake(cycle + 1)
            return
        if self.outstanding_pushes:
            return
        s.active = False
        s.finished = True
        self.notify("llc_scrub_done", self.node, cycle)

    def pre_dirty_count(self) -> int:
        return sum(1 for ln in self.cache.lines() if self.pre_dirty(ln))


@dataclass(slots=True)
class DirEntry:
    state: str = "I"  # I, S, M
    sharers: set = None
    owner: int = -1
    busy: bool = False

    def __post_init__(self):
        if self.sharers is None:
            self.sharers = set()


class Directory(Element):
    """Blocking full-map directory; one transaction per line at a time.

    Every message the directory emits while consuming a request carries the
    request's snapshot bit. When the request was counted by the flush, the
    emitted messages are pre-marked and the router is told how many there
    were so its expected-delivery count stays balanced.
    """

    target = "dir"

    def __init__(self, node: int, cfg, net, wake, home_of):
        super().__init__(node, net, wake)
        self.cfg = cfg
        self.home_of = home_of
        self.entries: dict[int, DirEntry] = {}
        self.queues: dict[int, deque] = {}
        self.ready: deque = deque()  # (cycle, msg)
        self.stats = {"requests": 0, "stale_wb": 0, "queued": 0}
        self.trace = None  # optional list of (cycle, msg, n_generated)

    def on_token(self, cycle: int) -> None:
        # requests already delivered but not yet consumed still belong to the
        # old epoch; count them here so their consumption settles the balance
        super().on_token(cycle)
        for _, m in self.ready:
            self.net.count_held(self.node, m)
        for q in self.queues.values():
            for m in q:
                self.net.count_held(self.node, m)

    def receive(self, msg: Message, cycle: int) -> None:
        self.ready.append((cycle + self.cfg.dir_latency, msg))
        self.wake(cycle + self.cfg.dir_latency)

    def tick(self, cycle: int) -> None:
        while self.ready and self.ready[0][0] <= cycle:
            _, m = self.ready.popleft()
            self._accept(m, cycle)
        if self.ready:
            self.wake(self.ready[0][0])

    def entry(self, line: int) -> DirEntry:
        e = self.entries.get(line)
        if e is None:
            e = self.entries[line] = DirEntry()
        return e

    def _accept(self, m: Message, cycle: int) -> None:
        e = self.entry(m.line)
        if m.kind == CTRL and m.sub == "unblock":
            self._consume(m, cycle, self._unblock, e)
            q = self.queues.get(m.line)
            while q and not self.entry(m.line).busy:
                self._consume(q.popleft(), cycle, self._process, self.entry(m.line))
            if q is not None and not q:
                del self.queues[m.line]
            return
        if m.kind == WB and m.sub == "push":
            self._consume(m, cycle, self._process, e)
            return
        if e.busy:
            self.stats["queued"] += 1
            self.queues.setdefault(m.line, deque()).append(m)
            return
        self._consume(m, cycle, self._process, e)

    def _consume(self, m: Message, cycle: int, fn, e: DirEntry) -> None:
        out: list[Message] = []
        fn(m, e, out)
        for g in out:
            g.snap = m.snap
            if m.counted_by is not None:
                g.counted_by = self.node
            self.net.send(g, cycle)
        if self.trace is not None:
            self.trace.append((cycle, m, len(out)))
        if m.counted_by is not None:
            self.net.directory_adjust(len(out), cycle)

    def _unblock(self, m: Message, e: DirEntry, out: list) -> None:
        e.busy = False

    def _process(self, m: Message, e: DirEntry, out: list) -> None:
        line = m.line
        self.stats["requests"] += 1
        home = self.home_of(line)
        if m.kind == GETS:
            r = m.requester
            if e.owner >= 0 and e.owner != r:
                out.append(self.msg(GETS, e.owner, "l2", sub="fwd", line=line, requester=r))
                e.state = "S"
            else:
                out.append(self.msg(GETS, home, "llc", line=line, requester=r))
                if e.state != "M":
                    e.state = "S"
            e.sharers.add(r)
            e.busy = True
        elif m.kind == GETX:
            r = m.requester
            invs = [s for s in sorted(e.sharers) if s != r and s != e.owner]
            acks = len(invs)
            for s in invs:
                out.append(self.msg(INV, s, "l2", line=line, requester=r))
            if e.owner >= 0 and e.owner != r:
                out.append(self.msg(GETX, e.owner, "l2", sub="fwd", line=line,
                                    requester=r, acks=acks))
            elif r in e.sharers:
                out.append(self.msg(CTRL, r, "l2", sub="grant", line=line, acks=acks))
            else:
                out.append(self.msg(GETX, home, "llc", line=line, requester=r, acks=acks))
            e.state = "M"
            e.owner = r
            e.sharers = {r}
            e.busy = True
        elif m.kind == WB:
            src = m.origin
            if m.sub == "push":
                out.append(self._to_llc(m, home))
                return
            absorbed = 0
            if src == e.owner and m.dirty:
                out.append(self._to_llc(m, home))
            else:
                absorbed = m.acks
                if src != e.owner and src not in e.sharers:
                    self.stats["stale_wb"] += 1
            out.append(self.msg(CTRL, src, "l2", sub="wb_ack", line=line, acks=absorbed))
            if src == e.owner:
                e.owner = -1
            e.sharers.discard(src)
            e.state = "S" if e.sharers else "I"
            if e.state == "I" and not e.busy:
                self.entries.pop(line, None)
        else:
            raise AssertionError(f"directory cannot handle {m}")

    def _to_llc(self, m: Message, home: int) -> Message:
        return self.msg(WB, home, "llc", sub=m.sub, line=m.line, value=m.value,
                        dirty=True, lsnap=m.lsnap, origin=m.origin, acks=m.acks)
