"""Fast sanity checks behind ``sevlab selftest``."""

from __future__ import annotations

import random

from . import recovery
from .machine import Machine
from .tweak_cipher import (AesPermutation, CipherKey, CipherMode, PaperDefault, decrypt_block,
                           encrypt_block, make_tweak_table)

# FIPS-197 appendix C.1
AES_KEY = bytes(range(16))
AES_PT = bytes.fromhex("00112233445566778899aabbccddeeff")
AES_CT = bytes.fromhex("69c4e0d86a7b0430d8cdb78070b4c55a")


def _aes() -> bool:
    return AesPermutation(AES_KEY).encrypt(AES_PT) == AES_CT


def _round_trip() -> bool:
    rng = random.Random(0)
    table = make_tweak_table(PaperDefault(n=20))
    key = CipherKey(rng.randbytes(16), "VM1")
    for mode in CipherMode:
        for _ in range(200):
            m, p = rng.randbytes(16), rng.randrange(1 << 20) & ~15
            if decrypt_block(key, mode, table, encrypt_block(key, mode, table, m, p), p) != m:
                return False
    return True


def _xe_recovery() -> bool:
    table = make_tweak_table(PaperDefault(n=20))
    mach = Machine(table, CipherMode.XE, b"\x01" * 16, b"\x02" * 16)
    mach.map_guest_page(0, 4)
    mach.map_guest_page(1, 5)
    setup = recovery.setup_probes(mach, 0, 1, bytes(range(16)), count=4)
    res = recovery.recover_xe_constants(setup, range(4, 20))
    return all(res.constants[i] == table.constant(i) for i in range(4, 20))


CHECKS = [("aes-128 known answer", _aes), ("xe/xex round trip", _round_trip),
          ("xe constant recovery", _xe_recovery)]


def run_selftest() -> list[tuple[str, bool]]:
    out = []
    for name, fn in CHECKS:
        try:
            ok = bool(fn())
        except Exception:
            ok = False
        out.append((name, ok))
    return out
