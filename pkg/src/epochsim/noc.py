"""Torus network with FIFO links, a token lane, and flush termination counting.

Each router runs the marking/counting protocol: on the first token it marks
every buffered message and reports the count, floods the token, and opens a
per-link window during which unmarked pre-snapshot arrivals are counted at
the receiver. Deliveries of counted messages increment ``pcount``. The
directory's router defers ``pcount`` for requests the directory consumes and
instead applies the directory's n-generated adjustment.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

NTR = "NTR"
TR = "TR"

TOK, ACK, DATA, GETS, GETX, INV, EVICT, WB, NAK, CTRL = (
    "TOK", "ACK", "DATA", "GETS", "GETX", "INV", "EVICT", "WB", "NAK", "CTRL")


class ProtocolViolation(AssertionError):
    pass


_ids = itertools.count(1)


class Message:
    __slots__ = ("id", "kind", "sub", "snap", "src", "dst", "target", "line",
                 "value", "dirty", "lsnap", "requester", "acks", "origin",
                 "counted_by", "sent", "link_seq", "hops")

    def __init__(self, kind, src, dst, target, snap, sub="", line=-1, value=0,
                 dirty=False, lsnap=0, requester=-1, acks=0, origin=-1):
        self.id = next(_ids)
        self.kind = kind
        self.sub = sub
        self.snap = snap
        self.src = src
        self.dst = dst
        self.target = target
        self.line = line
        self.value = value
        self.dirty = dirty
        self.lsnap = lsnap
        self.requester = requester
        self.acks = acks
        self.origin = origin
        self.counted_by = None
        self.sent = -1
        self.link_seq = -1
        self.hops = []

    @property
    def marked(self) -> bool:
        return self.counted_by is not None

    def __repr__(self):
        return (f"Message#{self.id}({self.kind}/{self.sub} {self.src}->{self.dst}:"
                f"{self.target} snap={self.snap} line={self.line:#x} "
                f"counted_by={self.counted_by})")


class Link:
    __slots__ = ("src", "dst", "delay", "queue", "express", "send_seq", "recv_seq")

    def __init__(self, src: int, dst: int, delay: int):
        self.src = src
        self.dst = dst
        self.delay = delay
        self.queue: deque = deque()
        self.express: deque = deque()
        self.send_seq = 0
        self.recv_seq = 0

    def push(self, msg: Message, cycle: int, express: bool = False) -> None:
        msg.link_seq = self.send_seq
        self.send_seq += 1
        msg.hops.append((self.src, cycle))
        if express:
            self.express.append((cycle + 1, msg))
        else:
            self.queue.append((cycle + self.delay, msg))

    def pop_due(self, cycle: int) -> list[Message]:
        out = []
        q = self.queue
        while q and q[0][0] <= cycle:
            out.append(q.popleft())
        e = self.express
        while e and e[0][0] <= cycle:
            out.append(e.popleft())
        if len(out) > 1:
            out.sort(key=lambda am: (am[0], am[1].link_seq))
        return [m for _, m in out]

    def next_arrival(self) -> int | None:
        heads = [q[0][0] for q in (self.queue, self.express) if q]
        return min(heads) if heads else None

    def __len__(self):
        return len(self.queue) + len(self.express)


@dataclass
class Router:
    id: int
    neighbors: list[int]
    state: str = NTR
    epoch: int = 0  # tokens taken so far; sense = epoch % 2
    pre_parity: int = 0
    xcount: int = 0
    pcount: int = 0
    tr_cycle: int = -1
    window: dict = field(default_factory=dict)  # neighbor -> window length
    tok_links: set = field(default_factory=set)
    out_q: dict = field(default_factory=dict)  # next hop (or -1 local) -> deque
    tok_q: dict = field(default_factory=dict)
    inject: list = field(default_factory=list)
    last_report: int = -1
    window_end: int = -1

    @property
    def sense(self) -> int:
        return self.epoch & 1

    def window_open(self, nb: int, cycle: int) -> bool:
        return self.state == TR and cycle - self.tr_cycle < self.window.get(nb, 0)

    def buffered(self):
        for q in self.out_q.values():
            yield from q


class Network:
    """The NoC: routers, links, routing and the flush counting protocol.

    ``deliver(node, msg, cycle)`` hands a message to a tile element;
    ``on_token(node, cycle)`` notifies a node's tile elements of the token;
    ``report(router, cycle, x, p, windows_closed)`` is the side channel to
    the checkpoint controller.
    """

    def __init__(self, width: int, height: int, link_delay: int = 1,
                 link_delays: dict | None = None, mutation: str = "",
                 strict: bool = True, report_interval: int = 16):
        self.width = width
        self.height = height
        self.n = width * height
        self.mutation = mutation
        self.strict = strict
        self.report_interval = report_interval
        self.links: dict[tuple[int, int], Link] = {}
        self.routers: list[Router] = []
        for r in range(self.n):
            nbs = sorted(set(self._grid_neighbors(r)))
            self.routers.append(Router(r, nbs))
            for nb in nbs:
                d = (link_delays or {}).get((r, nb), link_delay)
                self.links[(r, nb)] = Link(r, nb, d)
        for r in self.routers:
            r.out_q = {nb: deque() for nb in r.neighbors}
            r.tok_q = {nb: deque() for nb in r.neighbors}
        self.in_links = {r: [self.links[(nb, r)] for nb in self.routers[r].neighbors]
                         for r in range(self.n)}
        self._next_hop = [[self._route(s, d) for d in range(self.n)] for s in range(self.n)]
        self.deliver: Callable = lambda node, msg, cycle: None
        self.on_token: Callable = lambda node, cycle: None
        self.report: Callable = lambda router, cycle, x, p, closed: None
        self.observer = None
        self.violations: list[tuple] = []
        self.dir_node = -1
        self.flushing = False
        self.busy_routers: set[int] = set()
        self.sent_messages = 0
        self.wake: Callable = lambda cycle: None
        self.pending_tokens: list[int] = []

    # --- topology -----------------------------------------------------------

    def coords(self, r: int) -> tuple[int, int]:
        return r % self.width, r // self.width

    def node_at(self, x: int, y: int) -> int:
        return (y % self.height) * self.width + (x % self.width)

    def _grid_neighbors(self, r: int):
        x, y = self.coords(r)
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nb = self.node_at(x + dx, y + dy)
            if nb != r:
                yield nb

    @staticmethod
    def _step(a: int, b: int, size: int) -> int:
        fwd = (b - a) % size
        if fwd == 0:
            return 0
        return 1 if fwd <= size - fwd else -1

    def _route(self, src: int, dst: int) -> int:
        """Dimension-ordered (x then y) next hop on the torus."""
        if src == dst:
            return -1
        sx, sy = self.coords(src)
        dx, dy = self.coords(dst)
        step = self._step(sx, dx, self.width)
        if step:
            return self.node_at(sx + step, sy)
        return self.node_at(sx, sy + self._step(sy, dy, self.height))

    def hop_distance(self, a: int, b: int) -> int:
        hops = 0
        while a != b:
            a = self._next_hop[a][b]
            hops += 1
        return hops

    @property
    def diameter(self) -> int:
        return max(self.hop_distance(a, b) for a in range(self.n) for b in range(self.n))

    # --- element interface ----------------------------------------------------

    def send(self, msg: Message, cycle: int) -> None:
        msg.sent = cycle
        self.sent_messages += 1
        self.routers[msg.src].inject.append(msg)
        self.busy_routers.add(msg.src)
        self.wake(cycle)

    def _violate(self, kind: str, cycle: int, router: int, msg, detail: str = ""):
        rec = (kind, cycle, router, getattr(msg, "id", None), detail or repr(msg))
        self.violations.append(rec)
        if self.strict:
            raise ProtocolViolation(f"{kind} at cycle {cycle}, router {router}: {rec[4]}")

    # --- token handling --------------------------------------------------------

    def inject_token(self, router: int, cycle: int) -> None:
        """Checkpoint controller hands the token to its local router.

        The router takes it at its next tick, after that cycle's local
        injections and before link arrivals, so the window starts when the
        flood actually leaves.
        """
        self.pending_tokens.append(router)
        self.wake(cycle)

    def _take_token(self, r: Router, cycle: int, from_link) -> None:
        if r.state == TR:
            if from_link in r.tok_links:
                self._violate("duplicate-token", cycle, r.id, None,
                              f"token twice on link {from_link}->{r.id}")
            r.tok_links.add(from_link)
            if from_link is not None:
                ack = Message(ACK, r.id, from_link, "router", r.sense)
                self._enqueue(r, ack)
            return
        r.pre_parity = r.sense
        r.state = TR
        r.epoch += 1
        r.tr_cycle = cycle
        r.tok_links = {from_link}
        r.xcount = 0
        r.pcount = 0
        for msg in r.buffered():
            self._count(r, msg, cycle)
        for nb in r.neighbors:
            fwd = self.links[(nb, r.id)].delay
            back = self.links[(r.id, nb)].delay
            r.window[nb] = fwd if self.mutation == "short_window" else fwd + back
            tok = Message(TOK, r.id, nb, "router", r.sense)
            r.tok_q[nb].append(tok)
        r.window_end = cycle + max(r.window.values(), default=0)
        if from_link is not None:
            self._enqueue(r, Message(ACK, r.id, from_link, "router", r.sense))
        self.busy_routers.add(r.id)
        self.on_token(r.id, cycle)
        self._report(r, cycle)

    def _count(self, r: Router, msg: Message, cycle: int) -> None:
        if msg.snap != r.pre_parity:
            self._violate("early-post", cycle, r.id, msg, "post-snapshot message buffered at NTR router")
            return
        if msg.counted_by is not None:
            self._violate("double-count", cycle, r.id, msg,
                          f"message already counted by router {msg.counted_by}")
            return
        msg.counted_by = r.id
        r.xcount += 1

    def _report(self, r: Router, cycle: int) -> None:
        r.last_report = cycle
        closed = cycle >= r.window_end
        self.report(r.id, cycle, r.xcount, r.pcount, closed)

    def count_held(self, node: int, msg: Message) -> None:
        """Count a pre-snapshot message an element still holds when the token arrives."""
        r = self.routers[node]
        if msg.counted_by is None and msg.snap == r.pre_parity:
            msg.counted_by = node
            r.xcount += 1

    def directory_adjust(self, n_generated: int, cycle: int) -> None:
        """Directory finished a counted pre-snapshot request that produced n messages."""
        r = self.routers[self.dir_node]
        if r.state != TR:
            self._violate("dir-adjust", cycle, r.id, None, "adjustment outside a flush")
            return
        if n_generated == 0:
            r.pcount += 1
        elif n_generated >= 2 and self.mutation != "no_dir_adjust":
            r.xcount += n_generated - 1
        self._report(r, cycle)

    def reset(self) -> None:
        """Commit broadcast: every router returns to NTR for the next epoch."""
        for r in self.routers:
            r.state = NTR
            r.xcount = r.pcount = 0
            r.window = {}
            r.tok_links = set()
            r.window_end = -1
        self.flushing = False

    # --- per-cycle operation ------------------------------------------------------

    def _enqueue(self, r: Router, msg: Message) -> None:
        hop = self._next_hop[r.id][msg.dst]
        if hop == -1:
            raise AssertionError("local message enqueued for transmission")
        r.out_q[hop].append(msg)
        self.busy_routers.add(r.id)

    def _arrive(self, r: Router, msg: Message, cycle: int, from_nb) -> None:
        if msg.kind == TOK:
            self._take_token(r, cycle, from_nb)
            return
        if r.state == NTR:
            if msg.snap != r.sense:
                self._violate("early-post", cycle, r.id, msg,
                              "post-snapshot message reached a router in NTR")
        elif msg.snap == r.pre_parity and msg.counted_by is None:
            if from_nb is None or r.window_open(from_nb, cycle):
                msg.counted_by = r.id
                r.xcount += 1
                if from_nb is None:
                    self._report(r, cycle)
            else:
                self._violate("window-miss", cycle, r.id, msg,
                              f"unmarked pre-snapshot arrival from {from_nb} after window")
        if msg.dst != r.id:
            self._enqueue(r, msg)
            return
        if msg.target == "router":
            return
        if msg.counted_by is not None:
            if r.state != TR:
                self._violate("counted-at-ntr", cycle, r.id, msg)
            elif not (msg.target == "dir" and r.id == self.dir_node):
                r.pcount += 1
        self.deliver(r.id, msg, cycle)

    def tick(self, cycle: int) -> None:
        for rid in sorted(self.busy_routers):
            r = self.routers[rid]
            if r.inject:
                pending, r.inject = r.inject, []
                for msg in pending:
                    self._arrive(r, msg, cycle, None)
        while self.pending_tokens:
            self._take_token(self.routers[self.pending_tokens.pop(0)], cycle, from_link=None)
        for rid in range(self.n):
            for link in self.in_links[rid]:
                if link.queue or link.express:
                    due = link.pop_due(cycle)
                    for msg in due:
                        if self.mutation != "token_bypass" and msg.link_seq != link.recv_seq:
                            self._violate("fifo", cycle, rid, msg, "link delivered out of order")
                        link.recv_seq = msg.link_seq + 1
                        self._arrive(self.routers[rid], msg, cycle, link.src)
        still = set()
        for rid in sorted(self.busy_routers):
            r = self.routers[rid]
            for nb in r.neighbors:
                link = self.links[(rid, nb)]
                tq = r.tok_q[nb]
                while tq:
                    link.push(tq.popleft(), cycle)
                q = r.out_q[nb]
                if q:
                    msg = q.popleft()
                    express = self.mutation == "token_bypass" and msg.kind == DATA
                    link.push(msg, cycle, express)
                    if q:
                        still.add(rid)
            if r.inject:
                still.add(rid)
        self.busy_routers = still
        if self.flushing:
            for r in self.routers:
                if r.state == TR and (cycle - r.last_report >= self.report_interval
                                      or cycle == r.window_end):
                    self._report(r, cycle)

    def next_event(self, cycle: int) -> int | None:
        """Earliest future cycle at which the NoC has work, or None."""
        if self.busy_routers or self.pending_tokens:
            return cycle + 1
        best = None
        for link in self.links.values():
            if link.queue or link.express:
                t = link.next_arrival()
                if best is None or t < best:
                    best = t
        if self.flushing:
            for r in self.routers:
                if r.state == TR:
                    t = r.last_report + self.report_interval
                    if r.window_end > cycle:
                        t = min(t, r.window_end)
                    if best is None or t < best:
                        best = t
        if best is not None and best <= cycle:
            best = cycle + 1
        return best

    # --- inspection (read-only) ------------------------------------------------

    def iter_messages(self):
        for r in self.routers:
            yield from r.inject
            for q in r.out_q.values():
                yield from q
            for q in r.tok_q.values():
                yield from q
        for link in self.links.values():
            for _, m in link.queue:
                yield m
            for _, m in link.express:
                yield m

    def in_flight(self) -> int:
        return sum(len(l) for l in self.links.values()) + sum(
            len(q) for r in self.routers for q in r.out_q.values()) + sum(
            len(r.inject) for r in self.routers)
