"""48-bit physical address arithmetic.

Bits 0..7 are the offset inside a 256-byte page; bits 8..47 are the page
index, split into four 10-bit page-table level indices (level 0 is the root).
"""

from __future__ import annotations

from typing import NamedTuple

ADDR_BITS = 48
ADDR_MASK = (1 << ADDR_BITS) - 1
OFFSET_BITS = 8
LEVEL_BITS = 10
LEVELS = 4
LEVEL_MASK = (1 << LEVEL_BITS) - 1
GROUP_PAGES = 64


class AddressParts(NamedTuple):
    page_index: int
    offset: int
    line_in_page: int
    group_index: int
    level_indices: tuple[int, int, int, int]


def level_indices(page: int) -> tuple[int, int, int, int]:
    return (
        (page >> 30) & LEVEL_MASK,
        (page >> 20) & LEVEL_MASK,
        (page >> 10) & LEVEL_MASK,
        page & LEVEL_MASK,
    )


def decompose(raw: int) -> AddressParts:
    if not 0 <= raw <= ADDR_MASK:
        raise ValueError(f"address {raw:#x} does not fit in 48 bits")
    page = raw >> OFFSET_BITS
    offset = raw & 0xFF
    return AddressParts(page, offset, offset >> 6, page // GROUP_PAGES,
                        level_indices(page))


def compose(parts: AddressParts) -> int:
    page = 0
    for idx in parts.level_indices:
        page = (page << LEVEL_BITS) | idx
    assert page == parts.page_index, "level indices disagree with page index"
    return (page << OFFSET_BITS) | parts.offset


def line_of(raw: int) -> int:
    """Cache-line number (address >> 6)."""
    return raw >> 6


def page_of_line(line: int) -> int:
    return line >> 2


def slot_of_line(line: int) -> int:
    return line & 3
