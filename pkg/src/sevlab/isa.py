"""Encoding of the mini guest ISA.

Widths follow the x86-64 instructions they stand in for::

    NOP           90                  1
    RET           C3                  1
    HALT          F4                  1
    PUSH r        50+r                1
    POP r         58+r                1
    JMP rel8      EB d                2
    JNZ rel8      75 d                2
    SYNC          0F A2               2   (cpuid / rdtsc trap)
    XOR r, s      31 C0|s<<3|r        2   32-bit ops zero bits 32..63
    INC r         FF C0|r             2
    DEC r         FF C8|r             2
    JMPR r        FF E0|r             2
    SHL1 r        D1 E0|r             2
    LDIND r, [s]  8B r<<3|s           2   8-byte load
    STIND [r], s  88 s<<3|r           2   8-byte store
    STORE r, a16  89 r lo hi          4   8-byte store to absolute gpa a16
    LOAD r, a16   8A r lo hi          4
    CALL rel32    E8 d d d d          5
    XORQ r, s     48 31 ..            3   REX-wide (64-bit) forms
    INCQ r        48 FF C0|r          3
    DECQ r        48 FF C8|r          3
    SHL1Q r       48 D1 E0|r          3
    SHLK r, k     48 C1 E0|r k        4
    ADD r, s      48 01 C0|s<<3|r     3
    ADDI r, i8    48 83 C0|r i        4
    MOVI r, i64   48 B8+r i*8         10
    SHARE r       0F 01 D0|r          3   guest marks page at [r] shared
    UNSHARE r     0F 01 D8|r          3

Registers are r0..r7; r6 plays rsi, r5 rdi and r7 is the stack pointer.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass


class EncodingError(ValueError):
    pass


class DecodeError(ValueError):
    pass


class Op(enum.Enum):
    NOP = "nop"
    RET = "ret"
    HALT = "halt"
    PUSH = "push"
    POP = "pop"
    JMP = "jmp"
    JNZ = "jnz"
    SYNC = "sync"
    XOR = "xor"
    INC = "inc"
    DEC = "dec"
    JMPR = "jmpr"
    SHL1 = "shl1"
    LDIND = "ldind"
    STIND = "stind"
    STORE = "store"
    LOAD = "load"
    CALL = "call"
    XORQ = "xorq"
    INCQ = "incq"
    DECQ = "decq"
    SHL1Q = "shl1q"
    SHLK = "shlk"
    ADD = "add"
    ADDI = "addi"
    MOVI = "movi"
    SHARE = "share"
    UNSHARE = "unshare"


WIDTH = {
    Op.NOP: 1, Op.RET: 1, Op.HALT: 1, Op.PUSH: 1, Op.POP: 1,
    Op.JMP: 2, Op.JNZ: 2, Op.SYNC: 2, Op.XOR: 2, Op.INC: 2, Op.DEC: 2, Op.JMPR: 2,
    Op.SHL1: 2, Op.LDIND: 2, Op.STIND: 2,
    Op.STORE: 4, Op.LOAD: 4, Op.CALL: 5,
    Op.XORQ: 3, Op.INCQ: 3, Op.DECQ: 3, Op.SHL1Q: 3, Op.SHLK: 4, Op.ADD: 3, Op.ADDI: 4,
    Op.MOVI: 10, Op.SHARE: 3, Op.UNSHARE: 3,
}

# operand layout: which of (a, b, imm) an op uses
_REG1 = {Op.PUSH, Op.POP, Op.INC, Op.DEC, Op.JMPR, Op.SHL1, Op.INCQ, Op.DECQ, Op.SHL1Q,
         Op.SHARE, Op.UNSHARE}
_REG2 = {Op.XOR, Op.XORQ, Op.ADD, Op.LDIND, Op.STIND}
_REG_IMM = {Op.STORE, Op.LOAD, Op.SHLK, Op.ADDI, Op.MOVI}
_IMM = {Op.JMP, Op.JNZ, Op.CALL}


@dataclass(frozen=True)
class Instr:
    op: Op
    a: int = 0
    b: int = 0
    imm: int = 0

    @property
    def width(self) -> int:
        return WIDTH[self.op]

    def __str__(self) -> str:
        name = self.op.value
        if self.op in _REG1:
            return f"{name} r{self.a}"
        if self.op in _REG2:
            return f"{name} r{self.a}, r{self.b}"
        if self.op in _REG_IMM:
            return f"{name} r{self.a}, {self.imm:#x}" if self.op in (Op.MOVI, Op.STORE, Op.LOAD) \
                else f"{name} r{self.a}, {self.imm}"
        if self.op in _IMM:
            return f"{name} {self.imm}"
        return name


def _reg(r: int) -> int:
    if not 0 <= r < 8:
        raise EncodingError(f"register r{r} out of range")
    return r


def encode(ins: Instr) -> bytes:
    op, a, b, imm = ins.op, ins.a, ins.b, ins.imm
    if op is Op.NOP:
        return b"\x90"
    if op is Op.RET:
        return b"\xc3"
    if op is Op.HALT:
        return b"\xf4"
    if op is Op.PUSH:
        return bytes([0x50 + _reg(a)])
    if op is Op.POP:
        return bytes([0x58 + _reg(a)])
    if op in (Op.JMP, Op.JNZ):
        if not -128 <= imm <= 127:
            raise EncodingError(f"{op.value} displacement {imm} outside signed 8-bit range")
        return bytes([0xEB if op is Op.JMP else 0x75, imm & 0xFF])
    if op is Op.SYNC:
        return b"\x0f\xa2"
    if op is Op.XOR:
        return bytes([0x31, 0xC0 | _reg(b) << 3 | _reg(a)])
    if op is Op.INC:
        return bytes([0xFF, 0xC0 | _reg(a)])
    if op is Op.DEC:
        return bytes([0xFF, 0xC8 | _reg(a)])
    if op is Op.JMPR:
        return bytes([0xFF, 0xE0 | _reg(a)])
    if op is Op.SHL1:
        return bytes([0xD1, 0xE0 | _reg(a)])
    if op is Op.LDIND:
        return bytes([0x8B, _reg(a) << 3 | _reg(b)])
    if op is Op.STIND:
        return bytes([0x88, _reg(b) << 3 | _reg(a)])
    if op in (Op.STORE, Op.LOAD):
        if not 0 <= imm < 1 << 16:
            raise EncodingError(f"{op.value} address {imm:#x} outside 16-bit window")
        return bytes([0x89 if op is Op.STORE else 0x8A, _reg(a)]) + imm.to_bytes(2, "little")
    if op is Op.CALL:
        if not -(1 << 31) <= imm < 1 << 31:
            raise EncodingError("call displacement outside signed 32-bit range")
        return b"\xe8" + (imm & 0xFFFFFFFF).to_bytes(4, "little")
    if op is Op.XORQ:
        return bytes([0x48, 0x31, 0xC0 | _reg(b) << 3 | _reg(a)])
    if op is Op.INCQ:
        return bytes([0x48, 0xFF, 0xC0 | _reg(a)])
    if op is Op.DECQ:
        return bytes([0x48, 0xFF, 0xC8 | _reg(a)])
    if op is Op.SHL1Q:
        return bytes([0x48, 0xD1, 0xE0 | _reg(a)])
    if op is Op.SHLK:
        if not 0 <= imm < 64:
            raise EncodingError(f"shift count {imm} outside 0..63")
        return bytes([0x48, 0xC1, 0xE0 | _reg(a), imm])
    if op is Op.ADD:
        return bytes([0x48, 0x01, 0xC0 | _reg(b) << 3 | _reg(a)])
    if op is Op.ADDI:
        if not -128 <= imm <= 127:
            raise EncodingError(f"addi immediate {imm} outside signed 8-bit range")
        return bytes([0x48, 0x83, 0xC0 | _reg(a), imm & 0xFF])
    if op is Op.MOVI:
        if not 0 <= imm < 1 << 64:
            raise EncodingError("movi immediate outside 64-bit range")
        return bytes([0x48, 0xB8 + _reg(a)]) + imm.to_bytes(8, "little")
    if op is Op.SHARE:
        return bytes([0x0F, 0x01, 0xD0 | _reg(a)])
    if op is Op.UNSHARE:
        return bytes([0x0F, 0x01, 0xD8 | _reg(a)])
    raise EncodingError(f"cannot encode {ins}")


def assemble(listing) -> bytes:
    """Concatenate fixed-width encodings of ``listing``."""
    return b"".join(encode(i) for i in listing)


def _s8(x: int) -> int:
    return x - 256 if x >= 128 else x


def length_of(first: int, second: int | None = None) -> int | None:
    """Instruction length from its first byte(s); None means undecodable.

    Returns 0 when the second byte is needed but was not supplied.
    """
    if first in (0x90, 0xC3, 0xF4) or 0x50 <= first <= 0x5F:
        return 1
    if first in (0xEB, 0x75, 0x31, 0xFF, 0xD1, 0x8B, 0x88):
        return 2
    if first in (0x89, 0x8A):
        return 4
    if first == 0xE8:
        return 5
    if first == 0x0F:
        if second is None:
            return 0
        return {0xA2: 2, 0x01: 3}.get(second)
    if first == 0x48:
        if second is None:
            return 0
        if 0xB8 <= second <= 0xBF:
            return 10
        return {0x31: 3, 0xFF: 3, 0xD1: 3, 0x01: 3, 0xC1: 4, 0x83: 4}.get(second)
    return None


def decode(buf: bytes) -> Instr:
    """Decode exactly one instruction occupying all of ``buf``."""
    if not buf:
        raise DecodeError("empty buffer")
    f = buf[0]
    n = length_of(f, buf[1] if len(buf) > 1 else None)
    if not n or n != len(buf):
        raise DecodeError(f"undecodable bytes {buf.hex()}")
    if f == 0x90:
        return Instr(Op.NOP)
    if f == 0xC3:
        return Instr(Op.RET)
    if f == 0xF4:
        return Instr(Op.HALT)
    if 0x50 <= f <= 0x57:
        return Instr(Op.PUSH, f - 0x50)
    if 0x58 <= f <= 0x5F:
        return Instr(Op.POP, f - 0x58)
    if f == 0xEB:
        return Instr(Op.JMP, imm=_s8(buf[1]))
    if f == 0x75:
        return Instr(Op.JNZ, imm=_s8(buf[1]))
    if f == 0xE8:
        d = int.from_bytes(buf[1:5], "little")
        return Instr(Op.CALL, imm=d - (1 << 32) if d >> 31 else d)
    s = buf[1]
    if f == 0x0F:
        if s == 0xA2:
            return Instr(Op.SYNC)
        m = buf[2]
        if 0xD0 <= m <= 0xD7:
            return Instr(Op.SHARE, m - 0xD0)
        if 0xD8 <= m <= 0xDF:
            return Instr(Op.UNSHARE, m - 0xD8)
        raise DecodeError(f"undecodable bytes {buf.hex()}")
    if f == 0x31:
        if s < 0xC0:
            raise DecodeError(f"undecodable bytes {buf.hex()}")
        return Instr(Op.XOR, s & 7, (s >> 3) & 7)
    if f == 0xFF:
        return _decode_ff(s, Op.INC, Op.DEC, Op.JMPR, buf)
    if f == 0xD1:
        if s & 0xF8 != 0xE0:
            raise DecodeError(f"undecodable bytes {buf.hex()}")
        return Instr(Op.SHL1, s & 7)
    if f == 0x8B:
        if s >= 0x40:
            raise DecodeError(f"undecodable bytes {buf.hex()}")
        return Instr(Op.LDIND, (s >> 3) & 7, s & 7)
    if f == 0x88:
        if s >= 0x40:
            raise DecodeError(f"undecodable bytes {buf.hex()}")
        return Instr(Op.STIND, s & 7, (s >> 3) & 7)
    if f in (0x89, 0x8A):
        if s >= 8:
            raise DecodeError(f"undecodable bytes {buf.hex()}")
        return Instr(Op.STORE if f == 0x89 else Op.LOAD, s, imm=int.from_bytes(buf[2:4], "little"))
    # REX-wide
    if 0xB8 <= s <= 0xBF:
        return Instr(Op.MOVI, s - 0xB8, imm=int.from_bytes(buf[2:10], "little"))
    m = buf[2]
    if s == 0x31:
        if m < 0xC0:
            raise DecodeError(f"undecodable bytes {buf.hex()}")
        return Instr(Op.XORQ, m & 7, (m >> 3) & 7)
    if s == 0xFF:
        ins = _decode_ff(m, Op.INCQ, Op.DECQ, None, buf)
        return ins
    if s == 0xD1:
        if m & 0xF8 != 0xE0:
            raise DecodeError(f"undecodable bytes {buf.hex()}")
        return Instr(Op.SHL1Q, m & 7)
    if s == 0x01:
        if m < 0xC0:
            raise DecodeError(f"undecodable bytes {buf.hex()}")
        return Instr(Op.ADD, m & 7, (m >> 3) & 7)
    if s == 0xC1:
        if m & 0xF8 != 0xE0 or buf[3] >= 64:
            raise DecodeError(f"undecodable bytes {buf.hex()}")
        return Instr(Op.SHLK, m & 7, imm=buf[3])
    if s == 0x83:
        if m & 0xF8 != 0xC0:
            raise DecodeError(f"undecodable bytes {buf.hex()}")
        return Instr(Op.ADDI, m & 7, imm=_s8(buf[3]))
    raise DecodeError(f"undecodable bytes {buf.hex()}")


def _decode_ff(m: int, inc: Op, dec: Op, jmpr: Op | None, buf: bytes) -> Instr:
    if m & 0xF8 == 0xC0:
        return Instr(inc, m & 7)
    if m & 0xF8 == 0xC8:
        return Instr(dec, m & 7)
    if jmpr is not None and m & 0xF8 == 0xE0:
        return Instr(jmpr, m & 7)
    raise DecodeError(f"undecodable bytes {buf.hex()}")


def disassemble(code: bytes) -> list[Instr]:
    out = []
    pos = 0
    while pos < len(code):
        n = length_of(code[pos], code[pos + 1] if pos + 1 < len(code) else None)
        if not n or pos + n > len(code):
            raise DecodeError(f"undecodable at offset {pos}")
        out.append(decode(code[pos:pos + n]))
        pos += n
    return out


# --- text assembly ------------------------------------------------------------

_LINE = re.compile(r"^\s*(?:(?P<label>[A-Za-z_.][\w.]*)\s*:)?\s*(?P<body>[^;]*?)\s*(?:;.*)?$")


def _parse_int(tok: str) -> int:
    return int(tok, 0)


def _parse_reg(tok: str) -> int:
    tok = tok.strip().lower()
    if not re.fullmatch(r"r[0-7]", tok):
        raise EncodingError(f"bad register {tok!r}")
    return int(tok[1])


def assemble_text(source: str, origin: int = 0) -> bytes:
    """Assemble one-instruction-per-line text; ``;`` starts a comment.

    Branch operands may be labels (resolved relative to ``origin``) or
    numeric displacements.
    """
    parsed: list[tuple[Op, list[str]]] = []
    labels: dict[str, int] = {}
    addr = origin
    for lineno, line in enumerate(source.splitlines(), 1):
        m = _LINE.match(line)
        if not m:
            raise EncodingError(f"line {lineno}: cannot parse {line!r}")
        if m.group("label"):
            labels[m.group("label")] = addr
        body = m.group("body")
        if not body:
            continue
        mnem, _, rest = body.partition(" ")
        try:
            op = Op(mnem.lower())
        except ValueError:
            raise EncodingError(f"line {lineno}: unknown mnemonic {mnem!r}") from None
        args = [a.strip() for a in rest.split(",")] if rest.strip() else []
        parsed.append((op, args))
        addr += WIDTH[op]
    out = bytearray()
    addr = origin
    for op, args in parsed:
        end = addr + WIDTH[op]
        if op in _REG1:
            ins = Instr(op, _parse_reg(args[0]))
        elif op in _REG2:
            ins = Instr(op, _parse_reg(args[0]), _parse_reg(args[1]))
        elif op in _REG_IMM:
            ins = Instr(op, _parse_reg(args[0]), imm=_parse_int(args[1]))
        elif op in _IMM:
            tok = args[0]
            disp = labels[tok] - end if tok in labels else _parse_int(tok)
            ins = Instr(op, imm=disp)
        else:
            ins = Instr(op)
        out += encode(ins)
        addr = end
    return bytes(out)
