"""Gadget-chain compiler.

Width 2: the entry block carries a short jump in bytes 0..1 to byte 14 of
the next block; each payload block holds two instruction bytes at 14..15,
which fall through into the jump window of the block after it.

Width 4: payload windows straddle a block boundary. A moved block ``M``
carries bytes 14..15 and the following oracle-made block ``O`` carries
bytes 0..1 plus a jump (2..3) on to byte 14 of the next ``M``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from ..block_mover import ByteConstraint, constraints_at
from ..isa import Instr, EncodingError, Op, encode
from ..tweak_cipher import BLOCK

JMP = 0xEB
NOP = 0x90
HALT = 0xF4
_NO_FALLTHROUGH = {Op.RET, Op.JMP, Op.JMPR, Op.HALT}


@dataclass
class PlanBlock:
    dest: int
    constraints: tuple[ByteConstraint, ...]
    role: str  # "jmp" | "payload" | "payload+jmp"
    source: str = "mover"  # "mover" (2-byte windows) or "oracle4" (4 leading bytes)

    def window(self) -> tuple[int, int]:
        offs = [c.offset for c in self.constraints]
        return min(offs), max(offs) + 1

    def controlled(self) -> bytes:
        return bytes(c.value for c in sorted(self.constraints, key=lambda c: c.offset))


@dataclass
class BlockPlan:
    blocks: list[PlanBlock] = field(default_factory=list)
    width: int = 2

    def __len__(self) -> int:
        return len(self.blocks)

    def controlled_ranges(self) -> list[tuple[int, int]]:
        out = []
        for b in self.blocks:
            lo, hi = b.window()
            out.append((b.dest + lo, b.dest + hi))
        return out

    def span(self) -> tuple[int, int]:
        if not self.blocks:
            return (0, 0)
        return self.blocks[0].dest, self.blocks[-1].dest + BLOCK


def _jmp(from_next: int, to: int) -> bytes:
    disp = to - from_next
    if not -128 <= disp <= 127:
        raise EncodingError(f"jump of {disp} bytes does not fit a short jump")
    return bytes([JMP, disp & 0xFF])


def pack_windows(payload: Sequence[Instr], width: int) -> list[bytes]:
    """Greedy packing of whole instructions into ``width``-byte windows."""
    windows: list[bytes] = []
    cur = b""
    for ins in payload:
        raw = encode(ins)
        if len(raw) > width:
            raise EncodingError(f"{ins} is {len(raw)} bytes; payload windows hold {width}")
        if len(cur) + len(raw) > width:
            windows.append(cur)
            cur = b""
        cur += raw
    if cur:
        windows.append(cur)
    return windows


def _ends(payload: Sequence[Instr]) -> bool:
    return bool(payload) and payload[-1].op in _NO_FALLTHROUGH


def compile_chain(payload: Sequence[Instr], payload_width: int, start: int,
                  exit: int | None = None) -> BlockPlan:
    """Plan blocks from ``start`` (block-aligned) that execute ``payload``.

    When the last instruction falls through, control leaves through a
    jump to ``exit`` or, with no exit, a HALT.
    """
    if payload_width not in (2, 4):
        raise ValueError("payload width must be 2 or 4")
    if start % BLOCK:
        raise ValueError("chain start must be block-aligned")
    if not payload:
        return BlockPlan([], payload_width)
    windows = pack_windows(payload, payload_width)
    terminal = _ends(payload)
    if payload_width == 2 and len(windows) == 1 and terminal:
        return BlockPlan([PlanBlock(start, tuple(constraints_at(0, windows[0])), "payload")], 2)
    return compile_windows(windows, payload_width, start, exit=exit, terminal=terminal)


def compile_windows(windows: Sequence[bytes], width: int, start: int,
                    exit: int | None = None, terminal: bool = False) -> BlockPlan:
    """Lay out pre-packed payload windows (padded with NOPs to ``width``)."""
    blocks: list[PlanBlock] = []
    addr = start
    blocks.append(PlanBlock(addr, tuple(constraints_at(0, _jmp(addr + 2, addr + BLOCK + 14))), "jmp"))
    addr += BLOCK
    for k, w in enumerate(windows):
        w = bytes(w) + bytes([NOP]) * (width - len(w))
        last = k == len(windows) - 1
        if width == 2:
            blocks.append(PlanBlock(addr, tuple(constraints_at(14, w)), "payload"))
            addr += BLOCK
            if last and terminal:
                break
            if last:
                tail = _jmp(addr + 2, exit) if exit is not None else bytes([HALT])
                role = "jmp" if exit is not None else "payload"
            else:
                tail, role = _jmp(addr + 2, addr + BLOCK + 14), "jmp"
            blocks.append(PlanBlock(addr, tuple(constraints_at(0, tail)), role))
            addr += BLOCK
        else:
            blocks.append(PlanBlock(addr, tuple(constraints_at(14, w[:2])), "payload"))
            addr += BLOCK
            if last and terminal:
                tail = b""
            elif last:
                tail = _jmp(addr + 4, exit) if exit is not None else bytes([HALT, NOP])
            else:
                tail = _jmp(addr + 4, addr + BLOCK + 14)
            blocks.append(PlanBlock(addr, tuple(constraints_at(0, w[2:] + tail)),
                                    "payload+jmp" if tail else "payload", source="oracle4"))
            addr += BLOCK
    return BlockPlan(blocks, width)


def check_trace(trace: Sequence[tuple[int, int]], plans: Sequence[BlockPlan],
                trusted: Sequence[tuple[int, int]] = ()) -> list[tuple[int, int]]:
    """Executed instructions inside any plan's span that touch uncontrolled bytes.

    ``trusted`` ranges (fully controlled blocks, e.g. oracle-written code)
    count as controlled. Returns the offending (ip, length) pairs.
    """
    ranges = [r for p in plans for r in p.controlled_ranges()] + list(trusted)
    spans = [p.span() for p in plans if p.blocks]
    bad = []
    for ip, n in trace:
        if not any(lo <= ip < hi for lo, hi in spans):
            continue
        for a in range(ip, ip + n):
            if not any(lo <= a < hi for lo, hi in ranges):
                bad.append((ip, n))
                break
    return bad
