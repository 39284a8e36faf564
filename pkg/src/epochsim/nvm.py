"""NVM: a log-structured page store, the access scheduler in front of it,
the commit log and crash recovery.

Every block write lands in a fresh location. Versions written for an
epoch stay in that epoch's pending map until its commit record is durable;
recovery only ever follows the committed page map, so speculative or
half-finished writes can never leak into a recovered image.
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict, defaultdict, deque
from dataclasses import dataclass, field

ZERO_PAGE = (0, 0, 0, 0)
MAGIC = b"EPNV"
FORMAT_VERSION = 1

# commit log record kinds
BEGIN, REC, REGS, COMMIT = 1, 2, 3, 4


class CorruptLog(RuntimeError):
    pass


@dataclass
class LogRecord:
    kind: int
    a: int = 0
    b: int = 0

    def payload(self) -> bytes:
        return struct.pack("<BQQ", self.kind, self.a, self.b)

    @property
    def crc(self) -> int:
        return zlib.crc32(self.payload())


@dataclass
class NvmImage:
    """Everything that survives a power failure."""

    versions: dict = field(default_factory=dict)  # location -> 4-tuple of line values
    table: dict = field(default_factory=dict)  # page -> location (committed)
    regs: dict = field(default_factory=dict)  # core -> retired-op count at the cut
    epoch: int = -1  # last committed checkpoint
    log: list = field(default_factory=list)  # list of (LogRecord, crc)

    def page(self, page: int) -> tuple:
        loc = self.table.get(page)
        return ZERO_PAGE if loc is None else self.versions[loc]

    def lines(self) -> dict[int, int]:
        out = {}
        for page, loc in self.table.items():
            for s, v in enumerate(self.versions[loc]):
                out[(page << 2) | s] = v
        return out


def recover(img: NvmImage) -> NvmImage:
    """Bring an image back to its last committed checkpoint.

    A log ending in COMMIT is replayed (idempotently); anything else is a
    checkpoint that never finished and is dropped.
    """
    for rec, crc in img.log:
        if rec.crc != crc:
            raise CorruptLog(f"bad checksum on log record {rec}")
    recs = [r for r, _ in img.log]
    if recs and recs[-1].kind == COMMIT:
        if recs[0].kind != BEGIN or recs[0].a != recs[-1].a:
            raise CorruptLog("commit record without a matching begin")
        for r in recs:
            if r.kind == REC:
                img.table[r.a] = r.b
            elif r.kind == REGS:
                img.regs[r.a] = r.b
        img.epoch = recs[-1].a
    img.log = []
    return img


# --- serialization -----------------------------------------------------------

def serialize(img: NvmImage) -> bytes:
    out = [MAGIC, struct.pack("<Hq", FORMAT_VERSION, img.epoch)]
    out.append(struct.pack("<I", len(img.versions)))
    for loc in sorted(img.versions):
        out.append(struct.pack("<Q4Q", loc, *img.versions[loc]))
    out.append(struct.pack("<I", len(img.table)))
    for page in sorted(img.table):
        out.append(struct.pack("<QQ", page, img.table[page]))
    out.append(struct.pack("<I", len(img.regs)))
    for core in sorted(img.regs):
        out.append(struct.pack("<QQ", core, img.regs[core]))
    out.append(struct.pack("<I", len(img.log)))
    for rec, crc in img.log:
        out.append(rec.payload() + struct.pack("<I", crc))
    return b"".join(out)


def deserialize(data: bytes) -> NvmImage:
    if data[:4] != MAGIC:
        raise CorruptLog("not an NVM image")
    off = 4
    version, epoch = struct.unpack_from("<Hq", data, off)
    off += struct.calcsize("<Hq")
    if version != FORMAT_VERSION:
        raise CorruptLog(f"unsupported image version {version}")
    img = NvmImage(epoch=epoch)

    def count():
        nonlocal off
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        return n

    for _ in range(count()):
        loc, *vals = struct.unpack_from("<Q4Q", data, off)
        off += 40
        img.versions[loc] = tuple(vals)
    for _ in range(count()):
        page, loc = struct.unpack_from("<QQ", data, off)
        off += 16
        img.table[page] = loc
    for _ in range(count()):
        core, n = struct.unpack_from("<QQ", data, off)
        off += 16
        img.regs[core] = n
    for _ in range(count()):
        kind, a, b, crc = struct.unpack_from("<BQQI", data, off)
        off += struct.calcsize("<BQQI")
        img.log.append((LogRecord(kind, a, b), crc))
    return img


# --- device ------------------------------------------------------------------------

@dataclass
class _Job:
    page: int
    epoch: int
    data: tuple | None  # full page, or None for a partial write
    slots: dict
    kind: str
    issued: int
    finish: int
    on_done: object = None


class NvmDevice:
    """Banked device; each bank serves its block writes in FIFO order, one per
    ``latency`` cycles. A page always maps to the same bank, so writes to one
    page are applied in the order they were issued.
    """

    def __init__(self, latency: int, wake=None, banks: int = 1):
        self.latency = latency
        self.banks = banks
        self.img = NvmImage()
        self.pending: dict[int, dict[int, int]] = defaultdict(dict)  # epoch -> page -> loc
        self.queues: list[deque] = [deque() for _ in range(banks)]
        self.free_at = [0] * banks
        self.next_loc = 0
        self.wake = wake or (lambda c: None)
        self.blocks: dict[int, int] = defaultdict(int)  # epoch -> block writes
        self.pages: dict[int, set] = defaultdict(set)  # epoch -> pages block-written
        self.commit_lengths: dict[int, int] = {}  # epoch -> log records of its commit
        self.kinds: dict[str, int] = defaultdict(int)
        self.bytes_written = 0
        self.open_blocks: dict[int, tuple] = {}  # bank -> (page, epoch, slots), schedulerless path
        self.crash_at_step = None  # commit step at which power fails
        self.crashed = False

    def _enqueue(self, page, epoch, data, slots, kind, cycle, on_done=None):
        b = page % self.banks
        start = max(cycle, self.free_at[b])
        finish = start + self.latency
        self.free_at[b] = finish
        self.queues[b].append(_Job(page, epoch, data, dict(slots), kind, cycle, finish, on_done))
        self.blocks[epoch] += 1
        self.pages[epoch].add(page)
        self.kinds[kind] += 1
        self.bytes_written += 256
        self.wake(finish)

    def write_page(self, page: int, data: tuple, epoch: int, cycle: int, kind: str = "walk",
                   on_done=None) -> None:
        self._enqueue(page, epoch, tuple(data), {}, kind, cycle, on_done)

    def write_block(self, page: int, slots: dict, epoch: int, cycle: int, data=None,
                    kind: str = "sched") -> None:
        if not slots and data is None:
            raise AssertionError("flush of an empty scheduler entry")
        if data is not None:
            merged = list(data)
            for s, v in slots.items():
                merged[s] = v
            self._enqueue(page, epoch, tuple(merged), {}, kind, cycle)
        else:
            self._enqueue(page, epoch, None, slots, kind, cycle)

    def write_line(self, line: int, value: int, epoch: int, cycle: int) -> None:
        """Unscheduled line write through the bank's open-block buffer."""
        page, slot = line >> 2, line & 3
        b = page % self.banks
        ob = self.open_blocks.get(b)
        if ob is not None and (ob[0] != page or ob[1] != epoch):
            self._close(b, cycle)
            ob = None
        if ob is None:
            ob = self.open_blocks[b] = (page, epoch, {})
        ob[2][slot] = value

    def _close(self, bank: int, cycle: int) -> None:
        page, epoch, slots = self.open_blocks.pop(bank)
        self._enqueue(page, epoch, None, slots, "line", cycle)

    def flush_open(self, cycle: int) -> None:
        for b in sorted(self.open_blocks):
            self._close(b, cycle)

    def tick(self, cycle: int) -> None:
        for q in self.queues:
            while q and q[0].finish <= cycle:
                job = q.popleft()
                self._apply(job)
                if job.on_done is not None:
                    job.on_done(job.finish - job.issued)

    def _apply(self, job: _Job) -> None:
        pend = self.pending[job.epoch]
        if job.data is not None:
            vals = job.data
        else:
            loc = pend.get(job.page, self.img.table.get(job.page))
            base = list(ZERO_PAGE if loc is None else self.img.versions[loc])
            for s, v in job.slots.items():
                base[s] = v
            vals = tuple(base)
        loc = self.next_loc
        self.next_loc += 1
        self.img.versions[loc] = vals
        pend[job.page] = loc

    @property
    def idle(self) -> bool:
        return not any(self.queues) and not self.open_blocks

    def next_event(self):
        return min((q[0].finish for q in self.queues if q), default=None)

    # --- commit ------------------------------------------------------------------

    def commit(self, epoch: int, regs: dict[int, int]) -> bool:
        """Write BEGIN/REC/REGS/COMMIT, apply, clear. Returns False if a crash hit."""
        recs = [LogRecord(BEGIN, epoch)]
        recs += [LogRecord(REC, p, loc) for p, loc in sorted(self.pending.get(epoch, {}).items())]
        recs += [LogRecord(REGS, c, n) for c, n in sorted(regs.items())]
        recs.append(LogRecord(COMMIT, epoch))
        self.commit_lengths[epoch] = len(recs)
        for step, rec in enumerate(recs):
            if step == self.crash_at_step:
                self.crashed = True
                return False
            self.img.log.append((rec, rec.crc))
        if self.crash_at_step == len(recs):
            # failure after the commit record but before the table update
            self.crashed = True
            return False
        recover(self.img)
        self.pending.pop(epoch, None)
        self.gc()
        return True

    def gc(self) -> None:
        live = set(self.img.table.values())
        for pend in self.pending.values():
            live.update(pend.values())
        for loc in [l for l in self.img.versions if l not in live]:
            del self.img.versions[loc]

    def commit_steps(self, epoch: int, regs: dict) -> int:
        return len(self.pending.get(epoch, {})) + len(regs) + 2


class AccessScheduler:
    """Coalesces pre-snapshot lines by page before they are written to NVM.

    The first line of a page asks the memory controller for the rest of
    the page. A data reply fills the slots the entry does not have; a nak
    means the page was already persisted and only the collected lines are
    written, merged over the stored version.
    """

    SLOTS = 4

    def __init__(self, entries: int, device: NvmDevice, request, wake=None):
        self.capacity = entries
        self.device = device
        self.request = request  # request(page, cycle) -> (data | None, ready_cycle)
        self.wake = wake or (lambda c: None)
        self.entries: OrderedDict[int, dict] = OrderedDict()
        self.stats = defaultdict(int)
        self.pages_by_epoch: dict[int, set] = defaultdict(set)
        self.coalesced_by_epoch: dict[int, int] = defaultdict(int)

    def enqueue(self, line: int, value: int, epoch: int, cycle: int) -> bool:
        page, slot = line >> 2, line & 3
        self.pages_by_epoch[epoch].add(page)
        ent = self.entries.get(page)
        if ent is not None and ent["epoch"] == epoch:
            ent["slots"][slot] = value
            self.stats["coalesced"] += 1
            self.coalesced_by_epoch[epoch] += 1
            return True
        if len(self.entries) >= self.capacity and not self._flush_one(cycle):
            self.stats["stalls"] += 1
            return False
        data, ready = self.request(page, cycle)
        self.entries[page] = {"epoch": epoch, "slots": {slot: value}, "data": data,
                              "ready": ready, "created": cycle}
        self.stats["requests"] += 1
        self.wake(ready)
        return True

    def _ready(self, ent, cycle) -> bool:
        return ent["ready"] <= cycle

    def _full(self, ent) -> bool:
        return ent["data"] is not None or len(ent["slots"]) == self.SLOTS

    def _flush_one(self, cycle: int) -> bool:
        ready = [(p, e) for p, e in self.entries.items() if self._ready(e, cycle)]
        if not ready:
            return False
        full = [pe for pe in ready if self._full(pe[1])]
        page, _ = (full or ready)[0]
        self._flush(page, cycle)
        return True

    def _flush(self, page: int, cycle: int) -> None:
        ent = self.entries.pop(page)
        self.device.write_block(page, ent["slots"], ent["epoch"], cycle, data=ent["data"])
        self.stats["flush_full" if self._full(ent) else "flush_partial"] += 1

    def drain(self, cycle: int) -> bool:
        """Flush every entry whose reply has arrived; True once empty."""
        for page in [p for p, e in self.entries.items() if self._ready(e, cycle)]:
            self._flush(page, cycle)
        if self.entries:
            self.wake(min(e["ready"] for e in self.entries.values()))
        return not self.entries

    def next_event(self):
        return min((e["ready"] for e in self.entries.values()), default=None)


class NvmSubsystem:
    """Device plus (optionally) the access scheduler, as seen by the memory controller."""

    def __init__(self, cfg, wake=None):
        self.cfg = cfg
        self.device = NvmDevice(cfg.nvm_latency, wake, cfg.nvm_banks)
        self.scheduler = None
        self._wake = wake or (lambda c: None)
        self.line_pages: dict[int, set] = defaultdict(set)

    def attach(self, mc) -> None:
        if self.cfg.scheduler_enabled:
            self.scheduler = AccessScheduler(self.cfg.scheduler_entries, self.device,
                                             mc.scrub_request, self._wake)

    def enqueue_line(self, line: int, value: int, epoch: int, cycle: int) -> bool:
        self.line_pages[epoch].add(line >> 2)
        if self.scheduler is not None:
            return self.scheduler.enqueue(line, value, epoch, cycle)
        self.device.write_line(line, value, epoch, cycle)
        return True

    def write_page(self, page, data, epoch, cycle, kind="walk", on_done=None) -> None:
        self.device.write_page(page, data, epoch, cycle, kind, on_done)

    def drain(self, cycle: int) -> bool:
        done = True
        if self.scheduler is not None:
            done = self.scheduler.drain(cycle)
        self.device.flush_open(cycle)
        return done and self.device.idle

    def tick(self, cycle: int) -> None:
        self.device.tick(cycle)


def wa_report(device: NvmDevice) -> dict:
    """Write amplification: block writes per distinct page written."""
    per_epoch = {}
    for e in sorted(device.blocks):
        pages = len(device.pages[e])
        per_epoch[e] = device.blocks[e] / pages if pages else 1.0
    total_blocks = sum(device.blocks.values())
    all_pages = set().union(*device.pages.values()) if device.pages else set()
    return {
        "per_epoch": per_epoch,
        "blocks": total_blocks,
        "pages": len(all_pages),
        "run_wa": total_blocks / len(all_pages) if all_pages else 1.0,
    }
