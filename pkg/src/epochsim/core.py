"""In-order trace-driven cores: one outstanding memory op at a time."""

from __future__ import annotations

from .trace import CHECKPOINT, SET_CL, SET_ES, WRITE, MemOp


def encode_value(core: int, seq: int) -> int:
    """Value stored by a write; nonzero so it differs from untouched memory."""
    return (core << 40) | (seq + 1)


def decode_value(value: int) -> tuple[int, int]:
    return value >> 40, (value & ((1 << 40) - 1)) - 1


class Core:
    def __init__(self, cid: int, ops: list[MemOp], l2, cfg, wake, controller=None,
                 on_retire=None):
        self.id = cid
        self.ops = ops
        self.l2 = l2
        self.cfg = cfg
        self.wake = wake
        self.controller = controller
        self.on_retire = on_retire
        self.pc = 0
        self.ready = 0
        self.waiting = False
        self.retired = 0
        self.last_retire = -1
        l2.retire = self.retire
        if ops:
            wake(0)

    @property
    def done(self) -> bool:
        return self.pc >= len(self.ops) and not self.waiting

    def tick(self, cycle: int) -> None:
        if self.waiting or self.pc >= len(self.ops):
            return
        if cycle < self.ready:
            self.wake(self.ready)
            return
        op = self.ops[self.pc]
        if not op.is_mem:
            self._directive(op, cycle)
            self.retire(op, cycle, self.l2.epoch, None)
            self.ready = cycle + 1 + self.cfg.op_gap
            self.wake(self.ready)
            return
        value = encode_value(self.id, op.seq) if op.kind == WRITE else None
        lat = self.l2.access(op, value, cycle)
        if lat is None:
            self.waiting = True
            return
        self.ready = cycle + lat + self.cfg.op_gap
        self.wake(self.ready)

    def _directive(self, op: MemOp, cycle: int) -> None:
        if self.controller is None:
            return
        if op.kind == CHECKPOINT:
            self.controller.request(cycle, "event")
        elif op.kind == SET_ES:
            self.controller.set_es(int(op.arg), cycle)
        elif op.kind == SET_CL:
            self.controller.set_cl(float(op.arg), cycle)

    def retire(self, op: MemOp, cycle: int, epoch: int, value) -> None:
        self.pc += 1
        self.retired += 1
        self.last_retire = cycle
        if self.on_retire is not None:
            self.on_retire(self.id, op, cycle, epoch, value)
        if self.waiting:
            self.waiting = False
            self.ready = cycle + 1 + self.cfg.op_gap
            self.wake(self.ready)

    def unstall(self, cycle: int) -> None:
        """The L2 drained the writeback that blocked the current op; retry it."""
        self.waiting = False
        self.ready = cycle + 1
        self.wake(self.ready)
