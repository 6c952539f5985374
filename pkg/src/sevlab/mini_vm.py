"""Deterministic interpreter for the mini guest ISA.

Every memory touch, including instruction fetch, goes through
``Machine.vm_access`` so NPT permissions and the encryption layer apply to
the guest exactly as they would on hardware. A permission fault leaves
registers and memory untouched; re-running after the hypervisor fixes the
permission executes the faulted instruction once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .isa import DecodeError, Instr, Op, decode, length_of
from .machine import Access, FaultInfo, Machine, MachineError

MASK64 = (1 << 64) - 1
MASK32 = (1 << 32) - 1
SP = 7

# register values a native (non-intercepted) cpuid leaf 0 would produce
NATIVE_CPUID = (0xD, 0x68747541, 0x444D4163, 0x69746E65)


class StepLimitExceeded(MachineError):
    pass


class ResumeError(MachineError):
    pass


class InterceptionDisabled(ResumeError):
    """Register override refused: the guest does not let cpuid be intercepted."""


@dataclass
class VMState:
    regs: list[int] = field(default_factory=lambda: [0] * 8)
    ip: int = 0
    running: bool = True
    zf: bool = False
    steps: int = 0
    sync_mode: str = "cpuid"  # or "rdtsc"
    awaiting_resume: bool = False
    last_exit: str | None = None
    trace: list[tuple[int, int]] | None = None  # (ip, length) of executed instructions

    def copy(self) -> "VMState":
        return VMState(list(self.regs), self.ip, self.running, self.zf, self.steps, self.sync_mode,
                       self.awaiting_resume, self.last_exit,
                       None if self.trace is None else list(self.trace))


@dataclass(frozen=True)
class ExitEvent:
    kind: str  # "fault" | "sync" | "halt" | "decode_fault"
    step_index: int
    fault: FaultInfo | None = None
    ghcb: tuple[int, ...] | None = None
    counter: int | None = None
    ip: int | None = None  # only for decode faults (the guest has halted; the hv sees why)

    def to_json(self) -> dict:
        detail: dict = {}
        if self.fault is not None:
            detail.update(self.fault.to_json())
        if self.ghcb is not None:
            detail["ghcb"] = [f"{v:#x}" for v in self.ghcb]
        if self.counter is not None:
            detail["counter"] = self.counter
        return {"step": self.step_index, "kind": self.kind, "detail": detail}


class _Fault(Exception):
    def __init__(self, info: FaultInfo):
        self.info = info


def _mem(machine: Machine, kind: str, gpa: int, arg):
    res = machine.vm_access(kind, gpa, arg)
    if isinstance(res, FaultInfo):
        raise _Fault(res)
    return res


def _fetch(machine: Machine, ip: int) -> tuple[Instr | None, int]:
    first = _mem(machine, "fetch", ip, 1)[0]
    n = length_of(first)
    if n == 0:
        second = _mem(machine, "fetch", ip + 1, 1)[0]
        n = length_of(first, second)
    if not n:
        return None, 1
    raw = _mem(machine, "fetch", ip, n)
    try:
        return decode(raw), n
    except DecodeError:
        return None, n


def _emit(machine: Machine, vm: VMState, ev: ExitEvent) -> ExitEvent:
    machine.metrics.vm_exits += 1
    if ev.kind == "fault":
        machine.metrics.page_faults += 1
    vm.awaiting_resume = True
    vm.last_exit = ev.kind
    return ev


def run_until_exit(machine: Machine, vm: VMState, max_steps: int = 2_000_000) -> ExitEvent:
    """Execute until the next SYNC, HALT, decode failure or permission fault."""
    if not vm.running:
        raise ResumeError("guest is not running")
    if vm.awaiting_resume:
        raise ResumeError("previous exit has not been resumed")
    regs = vm.regs
    budget = max_steps
    while True:
        if budget <= 0:
            raise StepLimitExceeded(f"no exit within {max_steps} steps (ip={vm.ip:#x})")
        budget -= 1
        ip = vm.ip
        try:
            ins, n = _fetch(machine, ip)
            if ins is None:
                vm.running = False
                return _emit(machine, vm, ExitEvent("decode_fault", vm.steps, ip=ip))
            nxt = ip + n
            op = ins.op
            if op is Op.SYNC:
                vm.steps += 1
                if vm.trace is not None:
                    vm.trace.append((ip, n))
                vm.ip = nxt
                if not machine.flags.interception_enabled:
                    regs[0:4] = list(NATIVE_CPUID)
                    continue
                if vm.sync_mode == "rdtsc":
                    return _emit(machine, vm, ExitEvent("sync", vm.steps, counter=vm.steps))
                shown = tuple(regs[0:4]) if machine.flags.sev_es else tuple(regs)
                return _emit(machine, vm, ExitEvent("sync", vm.steps, ghcb=shown))
            if op is Op.HALT:
                vm.steps += 1
                if vm.trace is not None:
                    vm.trace.append((ip, n))
                vm.ip = nxt
                vm.running = False
                return _emit(machine, vm, ExitEvent("halt", vm.steps))
            _execute(machine, vm, ins, nxt)
            vm.steps += 1
            if vm.trace is not None:
                vm.trace.append((ip, n))
        except _Fault as f:
            return _emit(machine, vm, ExitEvent("fault", vm.steps, fault=f.info))


def _set32(regs, r, v):
    regs[r] = v & MASK32
    return regs[r]


def _execute(machine: Machine, vm: VMState, ins: Instr, nxt: int) -> None:
    """Run one non-exiting instruction; raise _Fault before any state change."""
    regs = vm.regs
    op, a, b = ins.op, ins.a, ins.b
    if op is Op.NOP:
        pass
    elif op is Op.PUSH:
        sp = (regs[SP] - 8) & MASK64
        _mem(machine, "write", sp, regs[a].to_bytes(8, "little"))
        regs[SP] = sp
    elif op is Op.POP:
        v = int.from_bytes(_mem(machine, "read", regs[SP], 8), "little")
        regs[SP] = (regs[SP] + 8) & MASK64
        regs[a] = v
    elif op is Op.RET:
        v = int.from_bytes(_mem(machine, "read", regs[SP], 8), "little")
        regs[SP] = (regs[SP] + 8) & MASK64
        vm.ip = v
        return
    elif op is Op.CALL:
        sp = (regs[SP] - 8) & MASK64
        _mem(machine, "write", sp, nxt.to_bytes(8, "little"))
        regs[SP] = sp
        vm.ip = (nxt + ins.imm) & MASK64
        return
    elif op is Op.JMP:
        vm.ip = (nxt + ins.imm) & MASK64
        return
    elif op is Op.JNZ:
        vm.ip = (nxt + ins.imm) & MASK64 if not vm.zf else nxt
        return
    elif op is Op.JMPR:
        vm.ip = regs[a]
        return
    elif op is Op.XOR:
        vm.zf = _set32(regs, a, regs[a] ^ regs[b]) == 0
    elif op is Op.INC:
        vm.zf = _set32(regs, a, regs[a] + 1) == 0
    elif op is Op.DEC:
        vm.zf = _set32(regs, a, regs[a] - 1) == 0
    elif op is Op.SHL1:
        vm.zf = _set32(regs, a, regs[a] << 1) == 0
    elif op is Op.XORQ:
        regs[a] ^= regs[b]
        vm.zf = regs[a] == 0
    elif op is Op.INCQ:
        regs[a] = (regs[a] + 1) & MASK64
        vm.zf = regs[a] == 0
    elif op is Op.DECQ:
        regs[a] = (regs[a] - 1) & MASK64
        vm.zf = regs[a] == 0
    elif op is Op.SHL1Q:
        regs[a] = (regs[a] << 1) & MASK64
        vm.zf = regs[a] == 0
    elif op is Op.SHLK:
        regs[a] = (regs[a] << ins.imm) & MASK64
        vm.zf = regs[a] == 0
    elif op is Op.ADD:
        regs[a] = (regs[a] + regs[b]) & MASK64
        vm.zf = regs[a] == 0
    elif op is Op.ADDI:
        regs[a] = (regs[a] + ins.imm) & MASK64
        vm.zf = regs[a] == 0
    elif op is Op.MOVI:
        regs[a] = ins.imm
    elif op is Op.LDIND:
        regs[a] = int.from_bytes(_mem(machine, "read", regs[b], 8), "little")
    elif op is Op.STIND:
        _mem(machine, "write", regs[a], regs[b].to_bytes(8, "little"))
    elif op is Op.LOAD:
        regs[a] = int.from_bytes(_mem(machine, "read", ins.imm, 8), "little")
    elif op is Op.STORE:
        _mem(machine, "write", ins.imm, regs[a].to_bytes(8, "little"))
    elif op in (Op.SHARE, Op.UNSHARE):
        frame = regs[a] >> 12
        if frame not in machine.npt:
            raise _Fault(machine._fault(regs[a], Access.WRITE))
        machine.guest_set_shared(machine.vm_id, frame, op is Op.SHARE)
    else:  # pragma: no cover - decode() only yields known ops
        raise DecodeError(f"no semantics for {ins}")
    vm.ip = nxt


def hv_resume(machine: Machine, vm: VMState, ghcb_override: dict[int, int] | None = None) -> None:
    """Resume after an exit, optionally installing r0..r3 (cpuid results)."""
    if not vm.awaiting_resume:
        raise ResumeError("no pending exit to resume")
    if ghcb_override:
        if not machine.flags.interception_enabled:
            raise InterceptionDisabled("cpuid interception is disabled for this guest")
        if vm.last_exit != "sync":
            raise ResumeError("register override is only possible at a sync exit")
        for r, v in ghcb_override.items():
            if not 0 <= r < 4:
                raise ResumeError(f"r{r} is not exposed through the GHCB")
        for r, v in ghcb_override.items():
            vm.regs[r] = v & MASK64
    vm.awaiting_resume = False
