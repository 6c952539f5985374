"""Hijacked-loop attacks: stack detection, the 4- and 16-byte encryption
oracles and the shared-page decryption oracle.

The hypervisor catches the guest entering function F (execute permission
removed from F's page), overwrites F with a gadget loop and then drives it
one round per sync. A round runs the blocks in the A and B slots once;
between rounds the hypervisor swaps those blocks for other pre-computed
ciphertexts, so each round executes whatever instruction it needs next.

Width-2 loop (from F's entry ``b0``; ``bK`` is the K-th block)::

    b0 J -> b1@14   b1 [sync]   b2 J   b3 [A]   b4 J   b5 [B]   b6 J -> b1@14

Width-4 loop: same addresses, with b2/b4/b6 produced by the 4-byte oracle
so every window holds 4 instruction bytes.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..block_mover import ByteConstraint, find_injection, moved_ciphertext
from ..isa import Instr, Op, assemble, encode
from ..machine import Access, NptLocked, Perms
from ..mini_vm import ExitEvent, StepLimitExceeded, hv_resume, run_until_exit
from ..tweak_cipher import BLOCK, PAGE, CipherMode, TweakTable, to_bytes, to_int
from . import layout
from .chain import BlockPlan, check_trace, compile_windows
from .report import Blocked, EventLog, Failed
from .sync import make_driver

R6, R5 = 6, 5

A2 = {
    "nop": b"\x90\x90",
    "xor": encode(Instr(Op.XOR, R6, R6)),
    "inc": encode(Instr(Op.INC, R6)),
    "push": encode(Instr(Op.PUSH, R6)) + b"\x90",
    "pushpush": encode(Instr(Op.PUSH, R6)) * 2,
    "poppop": encode(Instr(Op.POP, R5)) * 2,
    "pop": encode(Instr(Op.POP, R5)) + b"\x90",
}
B2 = {
    "nop": b"\x90\x90",
    "shl": encode(Instr(Op.SHL1, R6)),
    "xor": A2["xor"],
    "poppop": A2["poppop"],
}


def _pad4(b: bytes) -> bytes:
    return b + b"\x90" * (4 - len(b))


A4 = {
    "nop": b"\x90" * 4,
    "xorq": _pad4(encode(Instr(Op.XORQ, R6, R6))),
    "incq": _pad4(encode(Instr(Op.INCQ, R6))),
}
for _k in range(2, 9):
    A4[f"shlk{_k}"] = encode(Instr(Op.SHLK, R6, imm=_k))
B4 = {
    "nop": b"\x90" * 4,
    "shlq": _pad4(encode(Instr(Op.SHL1Q, R6))),
    "push": _pad4(encode(Instr(Op.PUSH, R6))),
    "poppop": _pad4(encode(Instr(Op.POP, R5)) * 2),
}

STAGES = ("Hijack", "Bootstrap4", "Bootstrap16", "Ready")
PROGRAM_AT = (layout.P2 << 12) + 112


@dataclass
class OracleSession:
    stage: str = "Hijack"
    stack_hpa: int | None = None  # host frame base of the located stack pointer
    stack_offset: int | None = None
    alignment: bool | None = None  # r7 was 16-byte aligned when found
    sync_count: int = 0
    exit_count: int = 0
    oracle_block_gpa: int | None = None  # where double pushes land

    def advance(self, stage: str) -> None:
        if STAGES.index(stage) < STAGES.index(self.stage):
            raise ValueError(f"session cannot go back from {self.stage} to {stage}")
        if stage in ("Bootstrap16", "Ready") and (self.stack_hpa is None or self.alignment is None):
            raise ValueError("stack must be located before the wide oracle")
        self.stage = stage


class _TraceSet(set):
    append = set.add


def schedule(ops: list[str], a_slot: dict, b_slot: dict) -> list[tuple[str, str]]:
    """Pack an op sequence into (A, B) rounds, keeping order."""
    rounds = []
    i = 0
    while i < len(ops):
        a = b = "nop"
        if ops[i] in a_slot and ops[i] != "nop":
            a = ops[i]
            i += 1
        if i < len(ops) and ops[i] in b_slot and ops[i] != "nop":
            b = ops[i]
            i += 1
        if a == "nop" and b == "nop":
            raise ValueError(f"op {ops[i]!r} fits no slot")
        rounds.append((a, b))
    return rounds


def load_ops(value: int, inc: str, shl: str, shift_runs: bool = False) -> list[str]:
    """Ops building ``value`` bit by bit after a clear, msb first."""
    ops: list[str] = []
    nbits = value.bit_length()
    for k in range(nbits - 1, -1, -1):
        if (value >> k) & 1:
            ops.append(inc)
        if k:
            ops.append(shl)
    if not shift_runs:
        return ops
    out: list[str] = []
    for op in ops:
        if op == shl and out and out[-1].startswith(("shlq", "shlk")):
            run = 2 if out[-1] == "shlq" else int(out[-1][4:]) + 1
            if run <= 8:
                out[-1] = f"shlk{run}"
                continue
        out.append(op)
    return out


class Attack:
    """Hypervisor-side driver around one victim machine."""

    def __init__(self, victim: layout.Victim, table: TweakTable | None = None,
                 driver: str = "auto", log: EventLog | None = None, max_steps: int = 200_000,
                 shift_runs: bool = False, check_chain: bool = True):
        self.victim = victim
        self.machine = victim.machine
        self.vm = victim.vm
        self.corpus = victim.corpus
        self.table = table or self.machine.table
        self.driver = make_driver(driver, self.machine, layout.P1, layout.P2)
        self.log = log or EventLog()
        self.max_steps = max_steps
        self.shift_runs = shift_runs
        self.session = OracleSession()
        self.steps: list[dict] = []
        self.width = 2
        self._written: dict[int, bytes] = {}
        self._mover: dict[tuple, bytes] = {}
        self._oracle_blocks: dict[tuple, bytes] = {}
        self._variants: dict[tuple, list[tuple[int, bytes]]] = {}
        self.plans: dict[int, BlockPlan] = {}
        self.trusted: list[tuple[int, int]] = []
        self.chain_violations: list[tuple[int, int]] = []
        self.check_chain = check_chain
        self.pending_pops = False
        self.hijacked = False
        if check_chain:
            self.vm.trace = _TraceSet()

    # -- plumbing ----------------------------------------------------------

    def note(self, action: str, **detail) -> None:
        self.steps.append({"action": action, **detail})
        self.log.hv(self.vm.steps, action, **detail)

    def run(self) -> ExitEvent:
        if self.vm.awaiting_resume:
            hv_resume(self.machine, self.vm)
        try:
            ev = run_until_exit(self.machine, self.vm, self.max_steps)
        except StepLimitExceeded as e:
            raise Failed(f"guest made no exit: {e}") from None
        self.log.exit(ev)
        if ev.kind in ("halt", "decode_fault"):
            raise Failed(f"guest stopped with {ev.kind} at step {ev.step_index}")
        return ev

    def write_block(self, gpa: int, c: bytes) -> None:
        hpa = self.machine.translate(gpa)
        if self._written.get(hpa) == c:
            return
        self.machine.hv_write_phys(hpa, c)
        self.machine.metrics.blocks_moved += 1
        self._written[hpa] = c

    def mover_block(self, gpa: int, constraints) -> bytes:
        key = (gpa, tuple(sorted(constraints, key=lambda c: c.offset)))
        c = self._mover.get(key)
        if c is None:
            frame = self.machine.npt[gpa >> 12].hpa_frame
            sol = find_injection(self.corpus, key[1], gpa, [frame], self.table)
            c = moved_ciphertext(self.machine, sol, self.table)
            self._mover[key] = c
        return c

    def relocated(self, c: bytes, src_gpa: int, dst_gpa: int) -> bytes:
        """Ciphertext ``c`` from ``src_gpa`` adjusted to decrypt at ``dst_gpa``."""
        if self.machine.mode is CipherMode.XE:
            return c
        t = self.table
        return to_bytes(to_int(c) ^ t.tweak(self.machine.translate(src_gpa))
                        ^ t.tweak(self.machine.translate(dst_gpa)))

    def tweak_delta(self, src_gpa: int, dst_gpa: int) -> bytes:
        t = self.table
        return to_bytes(t.tweak(self.machine.translate(src_gpa)) ^ t.tweak(self.machine.translate(dst_gpa)))

    def _flush_trace(self) -> None:
        if not self.check_chain or not self.vm.trace:
            return
        plan = self.plans.get(self.width)
        if plan is not None:
            self.chain_violations += check_trace(sorted(self.vm.trace), [plan], self.trusted)
        self.vm.trace.clear()

    # -- the loop ----------------------------------------------------------

    def _plan(self, a: str = "nop", b: str = "nop", width: int | None = None) -> BlockPlan:
        w = width or self.width
        slots = (A2, B2) if w == 2 else (A4, B4)
        sync = self.driver.window + b"\x90" * (w - 2)
        entry = layout.F_ENTRY
        return compile_windows([sync, slots[0][a], slots[1][b]], w, entry, exit=entry + BLOCK + 14)

    def _variant(self, a: str, b: str) -> list[tuple[int, bytes]]:
        key = (self.width, a, b)
        out = self._variants.get(key)
        if out is None:
            out = []
            for blk in self._plan(a, b).blocks:
                if blk.source == "mover":
                    c = self.mover_block(blk.dest, blk.constraints)
                else:
                    c = self._oracle_blocks.get((blk.dest, blk.controlled()))
                    if c is None:
                        raise Failed(f"no oracle-made block for {blk.controlled().hex()} at {blk.dest:#x}")
                out.append((blk.dest, c))
            self._variants[key] = out
        return out

    def set_slots(self, a: str, b: str) -> None:
        for gpa, c in self._variant(a, b):
            self.write_block(gpa, c)

    def wait_sync(self) -> ExitEvent:
        ev = self.driver.wait(self)
        if ev.kind != "sync":
            raise Failed(f"expected a sync, got {ev.kind}")
        self.session.sync_count += 1
        return ev

    def round(self, a: str, b: str) -> None:
        self.set_slots(a, b)
        self.wait_sync()

    # -- phases ------------------------------------------------------------

    def hijack(self) -> None:
        mach = self.machine
        p1 = mach.npt[layout.P1].perms
        try:
            mach.set_npt_perms(layout.P1, Perms(p1.read, p1.write, False))
        except NptLocked as e:
            raise Blocked("npt-locked", str(e)) from None
        while True:
            ev = self.run()
            if ev.kind == "fault" and ev.fault.access is Access.EXECUTE and ev.fault.gpa >> 12 == layout.P1:
                break
            if ev.kind != "sync":
                raise Failed(f"unexpected {ev.kind} before F was entered")
        self.hijacked = True
        self.note("hijack", entry=layout.F_ENTRY, driver=self.driver.name)
        self.plans[2] = self._plan()
        self.set_slots("nop", "nop")
        if self.driver.name == "cpuid":
            mach.set_npt_perms(layout.P1, p1)
        self.driver.arm(self)
        self.wait_sync()
        self._flush_trace()

    def stack_detect(self) -> tuple[int, int]:
        """Locate the guest stack pointer; leave it 16-byte aligned."""
        mach = self.machine
        if not self.hijacked:
            self.hijack()
        self.set_slots("push", "nop")
        try:
            saved = mach.set_all_perms(write=False)
        except NptLocked as e:
            raise Blocked("npt-locked", str(e)) from None
        ev = self.driver.wait(self)
        if ev.kind != "fault" or ev.fault.access is not Access.WRITE:
            raise Failed(f"push did not fault (got {ev.kind})")
        fault_gpa = ev.fault.gpa
        frame = fault_gpa >> 12
        hpa_page = mach.npt[frame].hpa_frame << 12
        before = mach.hv_read_phys(hpa_page, PAGE)
        mach.restore_perms(saved)
        self.wait_sync()
        if not mach.flags.sev_es:
            push1 = fault_gpa
            self.note("stack-fault", gpa=fault_gpa, exact=True)
            pops = "pop"
        else:
            after = mach.hv_read_phys(hpa_page, PAGE)
            changed = [k for k in range(0, PAGE, BLOCK) if before[k:k + BLOCK] != after[k:k + BLOCK]]
            if len(changed) != 1:
                raise Failed(f"stack diff found {len(changed)} changed blocks")
            x = changed[0]
            self.set_slots("push", "nop")
            self.wait_sync()
            again = mach.hv_read_phys(hpa_page + x, BLOCK)
            upper = again != after[x:x + BLOCK]
            push1 = (frame << 12) + x + (8 if upper else 0)
            self.note("stack-diff", page=frame << 12, block=x, half="upper" if upper else "lower")
            pops = "poppop"
        r7 = push1 + 8
        self.round(pops, "nop")
        aligned = r7 % 16 == 0
        if not aligned:
            self.round("pop", "nop")
            self.note("stack-align", pop=True)
        top = r7 if aligned else r7 + 8
        s = self.session
        s.stack_hpa = mach.translate(r7) & ~(PAGE - 1)
        s.stack_offset = r7 & (PAGE - 1)
        s.alignment = aligned
        s.oracle_block_gpa = top - BLOCK
        s.advance("Bootstrap4")
        self.note("stack-located", gpa=r7, hpa_page=s.stack_hpa, offset=s.stack_offset, aligned=aligned)
        self._flush_trace()
        return s.stack_hpa, s.stack_offset

    def _oracle_rounds(self, ops: list[str], slots: tuple[dict, dict]) -> None:
        for a, b in schedule(ops, *slots):
            self.round(a, b)

    def oracle4(self, value: int) -> bytes:
        """Ciphertext of ``[v, 0, v, 0]`` (v = ``value``, 4 bytes LE) at the oracle block."""
        if self.session.stage == "Hijack":
            self.stack_detect()
        if self.width != 2:
            raise Failed("the 4-byte oracle runs in the width-2 loop")
        value &= 0xFFFFFFFF
        ops = ["xor"] + (["poppop"] if self.pending_pops else [])
        ops += load_ops(value, "inc", "shl") + ["pushpush"]
        self._oracle_rounds(ops, (A2, B2))
        self.pending_pops = True
        gpa = self.session.oracle_block_gpa
        return self.machine.hv_read_phys(self.machine.translate(gpa), BLOCK)

    def oracle4_place(self, dest_gpa: int, data: bytes) -> bytes:
        """Ciphertext that decrypts at ``dest_gpa`` with ``data`` in bytes 0..3."""
        src = self.session.oracle_block_gpa
        delta = self.tweak_delta(src, dest_gpa)
        v = bytes(d ^ x for d, x in zip(_pad4(data) if len(data) < 4 else data, delta[:4]))
        c = self.oracle4(int.from_bytes(v, "little"))
        return self.relocated(c, src, dest_gpa)

    def bootstrap16(self) -> None:
        """Produce the width-4 oracle blocks and switch the loop to width 4."""
        if STAGES.index(self.session.stage) >= STAGES.index("Bootstrap16"):
            return
        if self.session.stage == "Hijack":
            self.stack_detect()
        a_names = [k for k in A4 if self.shift_runs or not k.startswith("shlk")]
        needed: dict[tuple, None] = {}
        for a in a_names:
            for b in B4:
                for blk in self._plan(a, b, width=4).blocks:
                    if blk.source == "oracle4":
                        needed[(blk.dest, blk.controlled())] = None
        for dest, data in needed:
            self._oracle_blocks[(dest, data)] = self.oracle4_place(dest, data)
        self.note("wide-blocks", count=len(needed))
        self.session.advance("Bootstrap16")
        # drain the double push before switching, then swap in the wide loop
        self.round("poppop", "nop")
        self.pending_pops = False
        self._flush_trace()
        self.width = 4
        self.plans[4] = self._plan()
        self.set_slots("nop", "nop")
        self.wait_sync()
        self.session.advance("Ready")
        self.note("wide-loop", width=4)

    def oracle16(self, value: bytes) -> bytes:
        """Ciphertext of the 16-byte ``value`` at the oracle block."""
        if len(value) != BLOCK:
            raise ValueError("oracle16 takes a 16-byte block")
        if self.session.stage != "Ready":
            self.bootstrap16()
        lo = int.from_bytes(value[:8], "little")
        hi = int.from_bytes(value[8:], "little")
        ops = ["xorq"] + (["poppop"] if self.pending_pops else [])
        ops += load_ops(hi, "incq", "shlq", self.shift_runs) + ["push", "xorq"]
        ops += load_ops(lo, "incq", "shlq", self.shift_runs) + ["push"]
        self._oracle_rounds(ops, (A4, B4))
        self.pending_pops = True
        gpa = self.session.oracle_block_gpa
        return self.machine.hv_read_phys(self.machine.translate(gpa), BLOCK)

    def oracle16_place(self, dest_gpa: int, data: bytes) -> bytes:
        src = self.session.oracle_block_gpa
        delta = self.tweak_delta(src, dest_gpa)
        c = self.oracle16(bytes(d ^ x for d, x in zip(data, delta)))
        return self.relocated(c, src, dest_gpa)

    def write_code(self, gpa: int, code: bytes) -> None:
        """Place arbitrary code (block-aligned) with the 16-byte oracle."""
        code = code + b"\x90" * (-len(code) % BLOCK)
        for k in range(0, len(code), BLOCK):
            self.write_block(gpa + k, self.oracle16_place(gpa + k, code[k:k + BLOCK]))
        self.trusted.append((gpa, gpa + len(code)))

    def decrypt(self, target_gpa: int, length: int) -> bytes:
        if length <= 0:
            return b""
        if self.session.stage != "Ready":
            self.bootstrap16()
        out = bytearray()
        start = target_gpa & ~7
        skip = target_gpa - start
        total = skip + length
        pos = 0
        while pos < total:
            n = min(PAGE, total - pos)
            out += self._copy_out(start + pos, (n + 7) // 8)
            pos += n
        return bytes(out[skip:skip + length])

    def _copy_out(self, src_gpa: int, qwords: int) -> bytes:
        scratch = layout.SCRATCH_FRAME << 12
        back = layout.F_ENTRY + BLOCK + 14
        prog = [Instr(Op.MOVI, 5, imm=scratch), Instr(Op.SHARE, 5),
                Instr(Op.MOVI, 4, imm=src_gpa), Instr(Op.MOVI, 3, imm=qwords)]
        body = [Instr(Op.LDIND, 2, 4), Instr(Op.STIND, 5, 2), Instr(Op.ADDI, 4, imm=8),
                Instr(Op.ADDI, 5, imm=8), Instr(Op.DEC, 3)]
        body_len = sum(i.width for i in body) + 2
        prog += body + [Instr(Op.JNZ, imm=-body_len), Instr(Op.MOVI, 1, imm=back), Instr(Op.JMPR, 1)]
        self.write_code(PROGRAM_AT, assemble(prog))
        b2 = layout.F_ENTRY + 2 * BLOCK
        jump = [ByteConstraint(0, 0xEB), ByteConstraint(1, PROGRAM_AT - (b2 + 2))]
        self.write_block(b2, self.mover_block(b2, jump))
        self.note("redirect", to=PROGRAM_AT, qwords=qwords)
        self.wait_sync()
        self.set_slots("nop", "nop")
        hpa = self.machine.translate(scratch)
        return self.machine.hv_decrypt_own(hpa, qwords * 8)

    def finish(self) -> None:
        self._flush_trace()
