"""Bundled guests: the victim kernel analogue and the boot-time loader.

Victim guest-physical layout::

    0x0000        data page; cpuid buffer at 0x100
    0x1000        main: CALL get_model_name; CALL F; HALT
    0x1100        get_model_name: NOP*6, SYNC, STORE r0/r1 -> buffer, RET
    0x2000-0x3fff stack
    0x4000        scratch page (decryption copies land here)
    0x5000        data page filled with seeded bytes (a decryption target)
    0x6000-0x7fff P1/P2, the pages holding F; F starts at 0x6fe0
    0x100000...   known kernel text, 8 MiB by default

Every guest frame maps to a seeded random host frame.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from ..block_mover import Corpus, build_corpus
from ..config import MachineConfig
from ..isa import Instr, Op, assemble
from ..machine import Machine
from ..mini_vm import VMState
from ..tweak_cipher import BLOCK, PAGE

DATA_FRAME = 0
CPUID_BUF = 0x100
MAIN = 0x1000
GET_MODEL_NAME = 0x1100
STACK_FRAMES = (2, 3)
SCRATCH_FRAME = 4
TARGET_FRAME = 5
P1, P2 = 6, 7
F_ENTRY = (P1 << 12) + PAGE - 2 * BLOCK
KERNEL_FRAME = 0x100


@dataclass
class Victim:
    machine: Machine
    vm: VMState
    corpus: Corpus
    kernel_image: bytes
    stack_top: int

    @property
    def gadget_base(self) -> int:
        return F_ENTRY


def _host_frames(rng: random.Random, count: int, n: int) -> list[int]:
    top = 1 << (n - 12)
    if count > top - 16:
        raise ValueError(f"{count} frames do not fit a {n}-bit host")
    return rng.sample(range(16, top), count)


def victim_code() -> dict[int, bytes]:
    main = assemble([Instr(Op.CALL, imm=GET_MODEL_NAME - (MAIN + 5)),
                     Instr(Op.CALL, imm=F_ENTRY - (MAIN + 10)),
                     Instr(Op.HALT)])
    gmn = assemble([Instr(Op.NOP)] * 6 + [Instr(Op.SYNC), Instr(Op.STORE, 0, imm=CPUID_BUF),
                                          Instr(Op.STORE, 1, imm=CPUID_BUF + 8), Instr(Op.RET)])
    f_body = bytes([0x90]) * (0x7100 - F_ENTRY) + bytes([0xC3])
    return {MAIN: main, GET_MODEL_NAME: gmn, F_ENTRY: f_body}


def build_victim(cfg: MachineConfig, corpus_size: int = 8 << 20,
                 stack_pointer: int | None = None) -> Victim:
    """A fresh machine running the victim guest, paused before its first instruction.

    ``corpus`` is what the attacker knows: the kernel text and where the
    NPT put it. The gadget pages are left out because the attack rewrites them.
    """
    mach = cfg.new_machine()
    rng = random.Random(f"victim:{cfg.seed}")
    kpages = corpus_size // PAGE
    gframes = [DATA_FRAME, 1, *STACK_FRAMES, SCRATCH_FRAME, TARGET_FRAME, P1, P2]
    gframes += [KERNEL_FRAME + k for k in range(kpages)]
    for g, h in zip(gframes, _host_frames(rng, len(gframes), cfg.n)):
        mach.map_guest_page(g, h)
    for addr, code in victim_code().items():
        mach.launch_write(addr, code)
    mach.launch_write(TARGET_FRAME << 12, rng.randbytes(PAGE))
    image = random.Random(f"kernel:{cfg.seed}").randbytes(corpus_size)
    mach.launch_write(KERNEL_FRAME << 12, image)
    if stack_pointer is None:
        lo = STACK_FRAMES[0] << 12
        stack_pointer = lo + 8 * rng.randrange(8, 2 * PAGE // 8)
    vm = VMState(ip=MAIN)
    vm.regs[7] = stack_pointer
    corpus = build_corpus(image, KERNEL_FRAME << 12, mach.translate, mach)
    return Victim(mach, vm, corpus, image, stack_pointer)


# --- boot loader analogue ----------------------------------------------------

ENTROPY_SLOT = 0x200
BASE_SLOT = 0x208
LOADER = 0x1000
STAGING = 0x2000  # randomize routine, then the kernel, as shipped in the image
RANDOMIZE_AT = (4 << 12) + PAGE - BLOCK  # straddles frames 4 and 5
KERNEL_MIN = 0x20 << 12
KERNEL_SLOTS = 16
KERNEL_SIZE = 64
ROUTINE_SIZE = 32


@dataclass
class BootGuest:
    machine: Machine
    vm: VMState
    corpus: Corpus
    entropy: int


def randomize_routine() -> bytes:
    code = assemble([Instr(Op.LOAD, 1, imm=ENTROPY_SLOT), Instr(Op.SHLK, 1, imm=12),
                     Instr(Op.MOVI, 2, imm=KERNEL_MIN), Instr(Op.ADD, 1, 2),
                     Instr(Op.STORE, 1, imm=BASE_SLOT), Instr(Op.RET)])
    return code + bytes([0x90]) * (ROUTINE_SIZE - len(code))


def _copy_loop(src: int, dst_reg_setup: list[Instr], qwords: int) -> list[Instr]:
    # r3 = counter, r4 = src, r5 = dst, r2 scratch
    body = [Instr(Op.LDIND, 2, 4), Instr(Op.STIND, 5, 2), Instr(Op.ADDI, 4, imm=8),
            Instr(Op.ADDI, 5, imm=8), Instr(Op.DEC, 3)]
    body_len = sum(i.width for i in body) + 2
    return ([Instr(Op.MOVI, 4, imm=src)] + dst_reg_setup + [Instr(Op.MOVI, 3, imm=qwords)]
            + body + [Instr(Op.JNZ, imm=-body_len)])


def loader_code() -> bytes:
    part1 = _copy_loop(STAGING, [Instr(Op.MOVI, 5, imm=RANDOMIZE_AT)], ROUTINE_SIZE // 8)
    call_at = LOADER + sum(i.width for i in part1)
    part2 = [Instr(Op.CALL, imm=RANDOMIZE_AT - (call_at + 5))]
    part3 = _copy_loop(STAGING + ROUTINE_SIZE, [Instr(Op.LOAD, 5, imm=BASE_SLOT)], KERNEL_SIZE // 8)
    part4 = [Instr(Op.LOAD, 1, imm=BASE_SLOT), Instr(Op.JMPR, 1)]
    return assemble(part1 + part2 + part3 + part4)


def kernel_stub() -> bytes:
    return bytes([0x90]) * (KERNEL_SIZE - 1) + bytes([0xF4])


def build_boot_guest(cfg: MachineConfig, boot_seed: int, known_pages: int = 64) -> BootGuest:
    """Loader guest whose kernel base depends on ``boot_seed``.

    The attacker's corpus is ``known_pages`` pages of firmware-like known
    content that the guest also maps.
    """
    mach = cfg.new_machine()
    rng = random.Random(f"boot:{cfg.seed}:{boot_seed}")
    gframes = [0, 1, 2, 4, 5] + [(KERNEL_MIN >> 12) + k for k in range(KERNEL_SLOTS + 1)]
    known = [0x80 + k for k in range(known_pages)]
    gframes += known
    for g, h in zip(gframes, _host_frames(rng, len(gframes), cfg.n)):
        mach.map_guest_page(g, h)
    entropy = rng.randrange(KERNEL_SLOTS)
    data = bytearray(PAGE)
    data[ENTROPY_SLOT:ENTROPY_SLOT + 8] = entropy.to_bytes(8, "little")
    data[BASE_SLOT:BASE_SLOT + 8] = KERNEL_MIN.to_bytes(8, "little")
    mach.launch_write(0, bytes(data))
    mach.launch_write(LOADER, loader_code())
    mach.launch_write(STAGING, randomize_routine() + kernel_stub())
    image = random.Random(f"firmware:{cfg.seed}").randbytes(known_pages * PAGE)
    mach.launch_write(0x80 << 12, image)
    vm = VMState(ip=LOADER)
    vm.regs[7] = (2 << 12) + PAGE - 64
    corpus = build_corpus(image, 0x80 << 12, mach.translate, mach)
    return BootGuest(mach, vm, corpus, entropy)
