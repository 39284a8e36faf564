"""Trace grammar, parsing and the synthetic trace generator.

One entry per line::

    <core_id> <R|W> 0x<hex48>
    ! CHECKPOINT                  # event checkpoint in the directive core's stream
    <core_id> ! CHECKPOINT        # same, for an explicit core
    ! SET ES <cycles>
    ! SET CL <seconds>

``#`` starts a comment.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np

from .address import ADDR_MASK
from .config import ConfigError

READ = "R"
WRITE = "W"
CHECKPOINT = "CHECKPOINT"
SET_ES = "SET_ES"
SET_CL = "SET_CL"


class TraceError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True, slots=True)
class MemOp:
    core: int
    kind: str
    addr: int = 0
    seq: int = 0
    arg: float = 0.0

    @property
    def is_mem(self) -> bool:
        return self.kind in (READ, WRITE)


_OP = re.compile(r"^(\d+)\s+([RW])\s+0x([0-9a-fA-F]+)$")
_DIRECTIVE = re.compile(r"^(?:(\d+)\s+)?!\s*(CHECKPOINT|SET\s+ES\s+(\S+)|SET\s+CL\s+(\S+))$")


def parse_trace(stream: TextIO | Iterable[str], core_count: int,
                directive_core: int = 0) -> list[list[MemOp]]:
    """Split a trace into per-core op lists, keeping file order within a core."""
    per_core: list[list[MemOp]] = [[] for _ in range(core_count)]

    def add(core, kind, addr=0, arg=0.0, lineno=0):
        if core >= core_count:
            raise ConfigError(f"line {lineno}: core {core} >= core_count {core_count}")
        ops = per_core[core]
        ops.append(MemOp(core, kind, addr, len(ops), arg))

    for lineno, raw in enumerate(stream, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _OP.match(line)
        if m:
            addr = int(m.group(3), 16)
            if addr > ADDR_MASK:
                raise TraceError(lineno, f"address 0x{m.group(3)} exceeds 48 bits")
            add(int(m.group(1)), m.group(2), addr, lineno=lineno)
            continue
        m = _DIRECTIVE.match(line)
        if not m:
            raise TraceError(lineno, f"cannot parse {line!r}")
        core = int(m.group(1)) if m.group(1) else directive_core
        try:
            if m.group(3) is not None:
                add(core, SET_ES, arg=int(m.group(3)), lineno=lineno)
            elif m.group(4) is not None:
                add(core, SET_CL, arg=float(m.group(4)), lineno=lineno)
            else:
                add(core, CHECKPOINT, lineno=lineno)
        except ValueError:
            raise TraceError(lineno, f"bad directive argument in {line!r}") from None
    return per_core


def read_trace(path, core_count: int, directive_core: int = 0) -> list[list[MemOp]]:
    with open(path) as fh:
        return parse_trace(fh, core_count, directive_core)


# --- synthetic traces -------------------------------------------------------

PRIVATE_STRIDE = 1 << 22  # pages between per-core private regions
SHARED_BASE = 1 << 31  # first shared page


def _zipf_probs(n: int, skew: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=float) ** skew
    return w / w.sum()


def gen_trace(cores: int, ops: int, pages: int, zipf: float = 0.0,
              write_frac: float = 0.5, share_frac: float = 0.0, seed: int = 0,
              shared_pages: int | None = None) -> str:
    """Generate a reproducible synthetic trace as text.

    Each core draws from its own region of ``pages`` pages; a ``share_frac``
    fraction of ops instead target a common region. Page popularity is Zipf
    with exponent ``zipf`` (0 is uniform) over a seeded random rank order.
    """
    if cores <= 0 or ops < 0 or pages <= 0:
        raise ValueError("cores and pages must be positive, ops non-negative")
    if zipf < 0 or not 0 <= write_frac <= 1 or not 0 <= share_frac <= 1:
        raise ValueError("zipf >= 0 and fractions in [0, 1] required")
    rng = np.random.default_rng(seed)
    shared_pages = shared_pages or max(1, pages // 4)
    probs = _zipf_probs(pages, zipf)
    sprobs = _zipf_probs(shared_pages, zipf)
    rank = [rng.permutation(pages) for _ in range(cores)]
    srank = rng.permutation(shared_pages)

    core_of = np.arange(ops) % cores
    shared = rng.random(ops) < share_frac
    is_write = rng.random(ops) < write_frac
    line = rng.integers(0, 4, ops)
    priv_pick = rng.choice(pages, size=ops, p=probs)
    shared_pick = rng.choice(shared_pages, size=ops, p=sprobs)

    out = [f"# gen-trace cores={cores} ops={ops} pages={pages} zipf={zipf} "
           f"write_frac={write_frac} share_frac={share_frac} seed={seed}"]
    for i in range(ops):
        c = int(core_of[i])
        if shared[i]:
            page = SHARED_BASE + int(srank[shared_pick[i]])
        else:
            page = (c + 1) * PRIVATE_STRIDE + int(rank[c][priv_pick[i]])
        addr = (page << 8) | (int(line[i]) << 6)
        out.append(f"{c} {'W' if is_write[i] else 'R'} 0x{addr:012x}")
    return "\n".join(out) + "\n"


# Named synthetic workloads. Generated on demand, byte-identical per seed.
BUNDLED = {
    # hot private pages, rare sharing
    "high-locality": dict(cores=4, ops=60000, pages=1500, zipf=1.1, write_frac=0.7,
                          share_frac=0.05, seed=11),
    # uniform over a large footprint, pages rarely revisited
    "streaming": dict(cores=4, ops=60000, pages=20000, zipf=0.0, write_frac=0.6,
                      share_frac=0.0, seed=12),
    # most ops go to a common region
    "shared-heavy": dict(cores=4, ops=60000, pages=800, zipf=0.8, write_frac=0.6,
                         share_frac=0.6, shared_pages=400, seed=13),
    # footprint only a little larger than the LLC
    "small-working-set": dict(cores=4, ops=60000, pages=200, zipf=0.6, write_frac=0.6,
                              share_frac=0.1, seed=14),
}


def bundled_trace(name: str) -> str:
    if name not in BUNDLED:
        raise KeyError(f"unknown bundled trace {name!r}; have {sorted(BUNDLED)}")
    return gen_trace(**BUNDLED[name])


def format_ops(per_core: list[list[MemOp]]) -> str:
    """Round-robin serialisation of per-core lists back to trace text."""
    out = []
    longest = max((len(ops) for ops in per_core), default=0)
    for i in range(longest):
        for ops in per_core:
            if i >= len(ops):
                continue
            op = ops[i]
            if op.is_mem:
                out.append(f"{op.core} {op.kind} 0x{op.addr:012x}")
            elif op.kind == CHECKPOINT:
                out.append(f"{op.core} ! CHECKPOINT")
            elif op.kind == SET_ES:
                out.append(f"{op.core} ! SET ES {int(op.arg)}")
            else:
                out.append(f"{op.core} ! SET CL {op.arg}")
    return "\n".join(out) + "\n"
