import random

import pytest

from sevlab.isa import Instr, Op, assemble
from sevlab.machine import Flags
from sevlab.mini_vm import (InterceptionDisabled, ResumeError, StepLimitExceeded, VMState,
                            hv_resume, run_until_exit)

# measured over 1000 random 16-byte blocks (seeded below) and pinned
DECODE_FAULT_RATE = 0.995


def test_halt(small_guest):
    mach, vm = small_guest(assemble([Instr(Op.HALT)]))
    ev = run_until_exit(mach, vm)
    assert ev.kind == "halt" and vm.steps == 1


def test_sync_then_halt(small_guest):
    mach, vm = small_guest(assemble([Instr(Op.SYNC), Instr(Op.HALT)]))
    assert run_until_exit(mach, vm).kind == "sync"
    hv_resume(mach, vm)
    assert run_until_exit(mach, vm).kind == "halt"


def test_override_reaches_memory(small_guest):
    prog = [Instr(Op.SYNC), Instr(Op.STORE, 0, imm=0x1000), Instr(Op.HALT)]
    mach, vm = small_guest(assemble(prog))
    run_until_exit(mach, vm)
    hv_resume(mach, vm, {0: 0xDEADBEEF})
    run_until_exit(mach, vm)
    assert mach.vm_access("read", 0x1000, 8) == (0xDEADBEEF).to_bytes(8, "little")


def test_no_override_keeps_registers(small_guest):
    mach, vm = small_guest(assemble([Instr(Op.INC, 3), Instr(Op.SYNC), Instr(Op.HALT)]))
    run_until_exit(mach, vm)
    before = list(vm.regs)
    hv_resume(mach, vm)
    assert vm.regs == before


def test_override_rejected_without_interception(small_guest):
    mach, vm = small_guest(assemble([Instr(Op.SYNC), Instr(Op.HALT)]),
                           flags=Flags(interception_enabled=False))
    # the SYNC runs natively, so the first exit is the halt
    assert run_until_exit(mach, vm).kind == "halt"
    with pytest.raises(InterceptionDisabled):
        hv_resume(mach, vm, {0: 1})


def test_resume_protocol(small_guest):
    mach, vm = small_guest(assemble([Instr(Op.SYNC), Instr(Op.HALT)]))
    with pytest.raises(ResumeError):
        hv_resume(mach, vm)
    run_until_exit(mach, vm)
    with pytest.raises(ResumeError):
        run_until_exit(mach, vm)


def test_step_limit(small_guest):
    mach, vm = small_guest(assemble([Instr(Op.JMP, imm=-2)]))
    with pytest.raises(StepLimitExceeded):
        run_until_exit(mach, vm, max_steps=100)


def test_push_pop_and_call(small_guest):
    # call +1 skips the halt; inc r1; ret returns to the halt
    prog = [Instr(Op.CALL, imm=1), Instr(Op.HALT), Instr(Op.INC, 1), Instr(Op.RET)]
    mach, vm = small_guest(assemble(prog))
    sp = vm.regs[7]
    assert run_until_exit(mach, vm).kind == "halt"
    assert vm.regs[1] == 1 and vm.regs[7] == sp


def test_copy_is_independent():
    vm = VMState(trace=[(0, 1)])
    c = vm.copy()
    c.regs[0] = 5
    c.trace.append((1, 1))
    assert vm.regs[0] == 0 and vm.trace == [(0, 1)]


def _fault_rate(small_guest, trials: int = 1000) -> float:
    rng = random.Random(2024)
    mach, _ = small_guest()
    faults = 0
    for _ in range(trials):
        mach.launch_write(0x2000, rng.randbytes(16) + b"\xf4" * 16)
        vm = VMState(ip=0x2000)
        vm.regs[7] = 0x3800
        try:
            ev = run_until_exit(mach, vm, max_steps=16)
        except StepLimitExceeded:
            continue
        faults += ev.kind in ("decode_fault", "fault")
    return faults / trials


def test_random_bytes_mostly_fault(small_guest):
    rate = _fault_rate(small_guest)
    assert rate >= 0.9
    assert rate == pytest.approx(DECODE_FAULT_RATE, abs=1e-9)
