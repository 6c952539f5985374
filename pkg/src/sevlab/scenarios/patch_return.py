"""Pin the randomized kernel base by turning the randomize routine into RET.

The loader copies the routine to a block that straddles two pages. With
write permission removed from the second page, the first write fault
marks the moment the first block has landed; the hypervisor replaces it
with a block that starts with RET, restores write access and lets the
loader call it. The base slot keeps its fixed fallback.
"""

from __future__ import annotations

from ..block_mover import ByteConstraint, apply_solution, find_injection
from ..machine import Access, NptLocked, Perms
from ..mini_vm import StepLimitExceeded, hv_resume, run_until_exit
from ..tweak_cipher import TweakTable
from . import layout
from .report import Blocked, EventLog, Failed

RET = 0xC3


def boot_once(guest: layout.BootGuest, table: TweakTable | None, inject: bool,
              log: EventLog, budget: int = 100_000) -> int:
    """Run one boot; return the base the kernel ended up at."""
    mach, vm = guest.machine, guest.vm
    trap = (layout.RANDOMIZE_AT >> 12) + 1
    if inject:
        p = mach.npt[trap].perms
        try:
            mach.set_npt_perms(trap, Perms(p.read, False, p.execute))
        except NptLocked as e:
            raise Blocked("npt-locked", str(e)) from None
    while True:
        try:
            ev = run_until_exit(mach, vm, budget)
        except StepLimitExceeded:
            raise Failed("boot did not finish") from None
        log.exit(ev)
        if ev.kind == "halt":
            return vm.ip - layout.KERNEL_SIZE
        if ev.kind == "decode_fault":
            raise Failed(f"boot crashed at {ev.ip:#x}")
        if ev.kind == "fault" and ev.fault.access is Access.WRITE and ev.fault.gpa >> 12 == trap:
            sol = find_injection(guest.corpus, [ByteConstraint(0, RET)], layout.RANDOMIZE_AT,
                                 [mach.npt[layout.RANDOMIZE_AT >> 12].hpa_frame], table or mach.table)
            apply_solution(mach, sol, guest.corpus, table)
            log.hv(vm.steps, "ret-injected", at=layout.RANDOMIZE_AT, source=sol.q)
            mach.set_npt_perms(trap, p)
        elif ev.kind == "fault":
            raise Failed(f"boot faulted on {ev.fault.access.value} at {ev.fault.gpa:#x}")
        hv_resume(mach, vm)
