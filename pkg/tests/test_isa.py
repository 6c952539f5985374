
import pytest
from hypothesis import given, strategies as st

from sevlab.isa import (DecodeError, EncodingError, Instr, Op, WIDTH, assemble, assemble_text,
                        decode, disassemble, encode)

# A second, table-driven disassembler written only for these tests.
# Each entry: prefix bytes, total width, how the operands are packed.
_FORMS = [
    (Op.NOP, b"\x90", 1, None), (Op.RET, b"\xc3", 1, None), (Op.HALT, b"\xf4", 1, None),
    (Op.SYNC, b"\x0f\xa2", 2, None),
    (Op.JMP, b"\xeb", 2, "rel8"), (Op.JNZ, b"\x75", 2, "rel8"), (Op.CALL, b"\xe8", 5, "rel32"),
    (Op.INC, b"\xff", 2, ("modrm", 0xC0)), (Op.DEC, b"\xff", 2, ("modrm", 0xC8)),
    (Op.JMPR, b"\xff", 2, ("modrm", 0xE0)), (Op.SHL1, b"\xd1", 2, ("modrm", 0xE0)),
    (Op.INCQ, b"\x48\xff", 3, ("modrm", 0xC0)), (Op.DECQ, b"\x48\xff", 3, ("modrm", 0xC8)),
    (Op.SHL1Q, b"\x48\xd1", 3, ("modrm", 0xE0)),
    (Op.SHARE, b"\x0f\x01", 3, ("modrm", 0xD0)), (Op.UNSHARE, b"\x0f\x01", 3, ("modrm", 0xD8)),
]


def ref_disassemble(code: bytes) -> list[tuple]:
    out, i = [], 0
    while i < len(code):
        b0 = code[i]
        if 0x50 <= b0 <= 0x57:
            out.append((Op.PUSH, b0 - 0x50)); i += 1; continue
        if 0x58 <= b0 <= 0x5F:
            out.append((Op.POP, b0 - 0x58)); i += 1; continue
        if b0 in (0x89, 0x8A):
            out.append((Op.STORE if b0 == 0x89 else Op.LOAD, code[i + 1],
                        int.from_bytes(code[i + 2:i + 4], "little"))); i += 4; continue
        if b0 == 0x31 or code[i:i + 2] in (b"\x48\x31", b"\x48\x01"):
            pre = 1 if b0 == 0x31 else 2
            m = code[i + pre]
            op = Op.XOR if b0 == 0x31 else (Op.XORQ if code[i + 1] == 0x31 else Op.ADD)
            out.append((op, m & 7, (m >> 3) & 7)); i += pre + 1; continue
        if b0 == 0x8B:
            m = code[i + 1]; out.append((Op.LDIND, (m >> 3) & 7, m & 7)); i += 2; continue
        if b0 == 0x88:
            m = code[i + 1]; out.append((Op.STIND, m & 7, (m >> 3) & 7)); i += 2; continue
        if code[i:i + 2] == b"\x48\xc1":
            out.append((Op.SHLK, code[i + 2] & 7, code[i + 3])); i += 4; continue
        if code[i:i + 2] == b"\x48\x83":
            v = code[i + 3]
            out.append((Op.ADDI, code[i + 2] & 7, v - 256 if v > 127 else v)); i += 4; continue
        if b0 == 0x48 and 0xB8 <= code[i + 1] <= 0xBF:
            out.append((Op.MOVI, code[i + 1] - 0xB8, int.from_bytes(code[i + 2:i + 10], "little")))
            i += 10; continue
        for op, pre, w, kind in _FORMS:
            if not code.startswith(pre, i):
                continue
            if kind is None:
                out.append((op,)); break
            if kind == "rel8":
                v = code[i + 1]; out.append((op, v - 256 if v > 127 else v)); break
            if kind == "rel32":
                out.append((op, int.from_bytes(code[i + 1:i + 5], "little", signed=True))); break
            m = code[i + len(pre)]
            if m & 0xF8 == kind[1]:
                out.append((op, m & 7)); break
        else:
            raise ValueError(f"bad byte at {i}")
        i += w
    return out


def _tuple(ins: Instr) -> tuple:
    if ins.op in (Op.NOP, Op.RET, Op.HALT, Op.SYNC):
        return (ins.op,)
    if ins.op in (Op.JMP, Op.JNZ, Op.CALL):
        return (ins.op, ins.imm)
    if ins.op in (Op.XOR, Op.XORQ, Op.ADD, Op.LDIND, Op.STIND):
        return (ins.op, ins.a, ins.b)
    if ins.op in (Op.STORE, Op.LOAD, Op.SHLK, Op.ADDI, Op.MOVI):
        return (ins.op, ins.a, ins.imm)
    return (ins.op, ins.a)


reg = st.integers(0, 7)
instrs = st.one_of(
    st.sampled_from([Op.NOP, Op.RET, Op.HALT, Op.SYNC]).map(Instr),
    st.builds(Instr, st.sampled_from([Op.PUSH, Op.POP, Op.INC, Op.DEC, Op.JMPR, Op.SHL1, Op.INCQ,
                                      Op.DECQ, Op.SHL1Q, Op.SHARE, Op.UNSHARE]), reg),
    st.builds(Instr, st.sampled_from([Op.XOR, Op.XORQ, Op.ADD, Op.LDIND, Op.STIND]), reg, reg),
    st.builds(lambda op, d: Instr(op, imm=d), st.sampled_from([Op.JMP, Op.JNZ]), st.integers(-128, 127)),
    st.builds(lambda d: Instr(Op.CALL, imm=d), st.integers(-(1 << 31), (1 << 31) - 1)),
    st.builds(lambda op, r, a: Instr(op, r, imm=a), st.sampled_from([Op.STORE, Op.LOAD]), reg,
              st.integers(0, 0xFFFF)),
    st.builds(lambda r, k: Instr(Op.SHLK, r, imm=k), reg, st.integers(0, 63)),
    st.builds(lambda r, k: Instr(Op.ADDI, r, imm=k), reg, st.integers(-128, 127)),
    st.builds(lambda r, k: Instr(Op.MOVI, r, imm=k), reg, st.integers(0, 2**64 - 1)),
)


def test_widths():
    assert len(encode(Instr(Op.RET))) == 1
    assert len(assemble([Instr(Op.SYNC), Instr(Op.PUSH, 5), Instr(Op.SYNC)])) == 5


@given(st.lists(instrs, max_size=20))
def test_round_trip_against_reference(prog):
    code = assemble(prog)
    assert disassemble(code) == prog
    assert ref_disassemble(code) == [_tuple(i) for i in prog]
    assert len(code) == sum(WIDTH[i.op] for i in prog)


def test_encoding_errors():
    with pytest.raises(EncodingError):
        encode(Instr(Op.JMP, imm=200))
    with pytest.raises(EncodingError):
        encode(Instr(Op.PUSH, 9))
    with pytest.raises(EncodingError):
        encode(Instr(Op.STORE, 0, imm=1 << 16))


def test_decode_errors():
    with pytest.raises(DecodeError):
        decode(b"")
    with pytest.raises(DecodeError):
        decode(b"\x06")


def test_assemble_text():
    code = assemble_text("""
        sync
        push r5
        sync
    """)
    assert code == b"\x0f\xa2\x55\x0f\xa2"
