"""Ways for the hypervisor to stop the hijacked loop once per round.

``InterceptSync`` relies on the SYNC instruction trapping (cpuid-style).
``PageFaultSync`` needs no trapping instruction: the loop spans two pages
and only one of them is executable at a time, so every crossing faults.
Crossing into P2 is the sync point; the fault on the way back into P1
only re-arms the trap.
"""

from __future__ import annotations

from ..isa import Instr, Op, encode
from ..machine import Access, NptLocked, Perms
from ..mini_vm import ExitEvent
from .report import Blocked

SYNC_BYTES = encode(Instr(Op.SYNC))
NOP2 = b"\x90\x90"


class InterceptSync:
    name = "cpuid"
    window = SYNC_BYTES

    def __init__(self, p1: int, p2: int):
        self.p1, self.p2 = p1, p2

    def arm(self, att) -> None:
        if not att.machine.flags.interception_enabled:
            raise Blocked("no-interception", "the guest does not let SYNC trap")

    def wait(self, att) -> ExitEvent:
        return att.run()

    def disarm(self, att) -> None:
        pass


class PageFaultSync:
    name = "pagefault"
    window = NOP2

    def __init__(self, p1: int, p2: int):
        self.p1, self.p2 = p1, p2

    def _exec_only(self, att, frame: int) -> None:
        other = self.p2 if frame == self.p1 else self.p1
        mach = att.machine
        try:
            mach.set_npt_perms(frame, Perms(mach.npt[frame].perms.read, mach.npt[frame].perms.write, True))
            mach.set_npt_perms(other, Perms(mach.npt[other].perms.read, mach.npt[other].perms.write, False))
        except NptLocked as e:
            raise Blocked("npt-locked", str(e)) from None

    def arm(self, att) -> None:
        self._exec_only(att, self.p1)

    def wait(self, att) -> ExitEvent:
        while True:
            ev = att.run()
            if ev.kind != "fault" or ev.fault.access is not Access.EXECUTE:
                return ev
            frame = ev.fault.gpa >> 12
            if frame == self.p2:
                self._exec_only(att, self.p2)
                return ExitEvent("sync", ev.step_index, fault=ev.fault)
            if frame == self.p1:
                self._exec_only(att, self.p1)
                continue
            return ev

    def disarm(self, att) -> None:
        for f in (self.p1, self.p2):
            p = att.machine.npt[f].perms
            att.machine.set_npt_perms(f, Perms(p.read, p.write, True))


def make_driver(kind: str, machine, p1: int, p2: int):
    if kind == "auto":
        kind = "cpuid" if machine.flags.interception_enabled else "pagefault"
    if kind == "cpuid":
        return InterceptSync(p1, p2)
    if kind == "pagefault":
        return PageFaultSync(p1, p2)
    raise ValueError(f"unknown sync driver {kind!r}")
