"""Encryption oracle through an intercepted cpuid-style instruction.

get_model_name runs SYNC and then stores r0/r1 into a buffer. The
hypervisor swaps the block holding the function's RET for a short jump
back to the SYNC, so the guest loops: every exit lets the hypervisor
choose r0/r1 and read the previous block's ciphertext from the buffer.
"""

from __future__ import annotations

from ..block_mover import ByteConstraint
from ..mini_vm import run_until_exit, hv_resume, StepLimitExceeded
from ..tweak_cipher import BLOCK
from . import layout
from .oracles import Attack
from .report import Blocked, Failed

SYNC_AT = layout.GET_MODEL_NAME + 6
RET_BLOCK = layout.GET_MODEL_NAME + BLOCK


def cpuid_oracle(att: Attack, plaintexts: list[bytes], budget: int = 10_000) -> list[bytes]:
    if not plaintexts:
        return []
    mach, vm = att.machine, att.vm
    jump = [ByteConstraint(0, 0xEB), ByteConstraint(1, (SYNC_AT - (RET_BLOCK + 2)) & 0xFF)]
    att.write_block(RET_BLOCK, att.mover_block(RET_BLOCK, jump))
    att.note("loop-injected", at=RET_BLOCK, to=SYNC_AT)

    def next_exit():
        try:
            ev = run_until_exit(mach, vm, budget)
        except StepLimitExceeded:
            if not mach.flags.interception_enabled:
                raise Blocked("no-interception", "SYNC executed natively; no exit to hook") from None
            raise Failed("guest never reached the sync") from None
        att.log.exit(ev)
        if ev.kind != "sync":
            raise Failed(f"expected a sync exit, got {ev.kind}")
        return ev

    next_exit()  # bootstrap: the guest's own first call
    buf_hpa = mach.translate(layout.CPUID_BUF)
    out = []
    for m in plaintexts:
        if len(m) != BLOCK:
            raise ValueError("plaintexts must be 16-byte blocks")
        hv_resume(mach, vm, {0: int.from_bytes(m[:8], "little"), 1: int.from_bytes(m[8:], "little")})
        next_exit()
        out.append(mach.hv_read_phys(buf_hpa, BLOCK))
    return out
