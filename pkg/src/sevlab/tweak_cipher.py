"""Address-tweaked 128-bit block encryption in XE and XEX form.

The tweak of a physical address ``p`` is the XOR of the constants ``t_i``
for every set address bit ``i >= 4``. Blocks are 16 bytes; 128-bit values
are handled as Python ints in little-endian byte order, so byte ``j`` of a
value ``v`` is ``(v >> 8*j) & 0xff``.
"""

from __future__ import annotations

import enum
import random
import threading
from dataclasses import dataclass, field
from typing import Protocol, Sequence, Union

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from . import gf2

BLOCK = 16
PAGE = 4096
MASK128 = (1 << 128) - 1

# Epyc 7251 constants for address bits 4, 5, 6.
PAPER_T4 = bytes.fromhex("82253838") * 4
PAPER_T5 = bytes.fromhex("ec09079c") * 4
PAPER_T6 = bytes.fromhex("40000018") * 4
PAPER_DEFAULT_SEED = 0x5E5


class TweakError(ValueError):
    pass


class AddressRangeError(TweakError):
    pass


class AlignmentError(TweakError):
    pass


class TableValidationError(TweakError):
    pass


class CipherMode(enum.Enum):
    XE = "XE"
    XEX = "XEX"


@dataclass(frozen=True)
class CipherKey:
    key: bytes
    owner: str

    def __post_init__(self):
        if len(self.key) != 16:
            raise ValueError("CipherKey must be 16 bytes")


def to_int(b: bytes) -> int:
    return int.from_bytes(b, "little")


def to_bytes(v: int) -> bytes:
    return v.to_bytes(BLOCK, "little")


def expand_unit(unit: int, periodicity: int = 4) -> int:
    """Repeat a ``periodicity``-byte unit across a 16-byte value."""
    raw = unit.to_bytes(periodicity, "little")
    return to_int(raw * (BLOCK // periodicity))


@dataclass(frozen=True)
class TweakTable:
    constants: tuple[bytes, ...]
    n: int = 48
    periodicity: int = 4
    independent_rank: int = 28
    _ints: tuple[int, ...] = field(init=False, repr=False, compare=False)
    _offset_tweaks: tuple[int, ...] = field(init=False, repr=False, compare=False)
    _frame_cache: dict = field(init=False, repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        if self.periodicity not in (4, 16):
            raise TableValidationError(f"periodicity must be 4 or 16, got {self.periodicity}")
        if self.n < 12 or self.n > 64:
            raise TableValidationError(f"address width {self.n} outside 12..64")
        consts = tuple(bytes(c) for c in self.constants)
        if len(consts) != self.n - 4:
            raise TableValidationError(f"expected {self.n - 4} constants, got {len(consts)}")
        for idx, c in enumerate(consts):
            if len(c) != BLOCK:
                raise TableValidationError(f"t_{idx + 4} is {len(c)} bytes, expected 16")
            if self.periodicity == 4 and c != c[:4] * 4:
                raise TableValidationError(f"t_{idx + 4} is not 4-byte periodic")
        object.__setattr__(self, "constants", consts)
        ints = tuple(to_int(c) for c in consts)
        object.__setattr__(self, "_ints", ints)
        offs = []
        for off in range(PAGE // BLOCK):
            v = 0
            for k in range(8):
                if (off >> k) & 1:
                    v ^= ints[k]
            offs.append(v)
        object.__setattr__(self, "_offset_tweaks", tuple(offs))

    def constant(self, bit: int) -> bytes:
        return self.constants[bit - 4]

    def unit(self, bit: int) -> int:
        """The repeating unit of t_bit as an int (little-endian)."""
        return to_int(self.constants[bit - 4][: self.periodicity])

    def frame_tweak(self, frame: int) -> int:
        v = self._frame_cache.get(frame)
        if v is None:
            v = 0
            bits = frame
            i = 8
            while bits:
                if bits & 1:
                    v ^= self._ints[i]
                bits >>= 1
                i += 1
            if len(self._frame_cache) > 1 << 16:
                self._frame_cache.clear()
            self._frame_cache[frame] = v
        return v

    def tweak(self, p: int) -> int:
        if p < 0 or p >> self.n:
            raise AddressRangeError(f"address {p:#x} exceeds {self.n}-bit physical space")
        return self.frame_tweak(p >> 12) ^ self._offset_tweaks[(p >> 4) & 0xFF]

    def page_tweaks(self, frame: int) -> np.ndarray:
        """(256, 16) uint8 array of tweaks for every block of a frame."""
        base = np.frombuffer(to_bytes(self.frame_tweak(frame)), dtype=np.uint8)
        return self.offset_tweak_array() ^ base

    def offset_tweak_array(self) -> np.ndarray:
        arr = self._frame_cache.get("offsets")
        if arr is None:
            arr = np.frombuffer(b"".join(to_bytes(v) for v in self._offset_tweaks), dtype=np.uint8)
            arr = arr.reshape(PAGE // BLOCK, BLOCK)
            self._frame_cache["offsets"] = arr
        return arr

    def rank(self) -> int:
        return gf2.rank(self._ints)

    def to_spec_lines(self) -> list[str]:
        """Serialize as flat key=value lines (hex constants)."""
        lines = [f"table.n={self.n}", f"table.periodicity={self.periodicity}",
                 f"table.rank={self.independent_rank}"]
        for i, c in enumerate(self.constants):
            lines.append(f"table.t{i + 4}={c.hex()}")
        return lines

    @classmethod
    def from_spec_lines(cls, lines: Sequence[str]) -> "TweakTable":
        kv = {}
        for line in lines:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
        n = int(kv["table.n"])
        consts = [bytes.fromhex(kv[f"table.t{i}"]) for i in range(4, n)]
        return make_tweak_table(Explicit(consts, n=n, periodicity=int(kv["table.periodicity"]),
                                         rank=int(kv.get("table.rank", n - 4))))


def tweak_value(table: TweakTable, p: int) -> int:
    """XOR of t_i over the set bits i in [4, n) of ``p``."""
    return table.tweak(p)


# --- table specs -----------------------------------------------------------

@dataclass(frozen=True)
class PaperDefault:
    n: int = 48
    seed: int = PAPER_DEFAULT_SEED
    rank: int = 28


@dataclass(frozen=True)
class Seeded:
    seed: int
    periodicity: int = 4
    rank: int = 28
    n: int = 48
    entropy_bits: int | None = None  # per-unit entropy; default 8 * periodicity


@dataclass(frozen=True)
class Explicit:
    constants: Sequence[bytes]
    n: int = 48
    periodicity: int = 4
    rank: int | None = None


TableSpec = Union[PaperDefault, Seeded, Explicit]


def _generate_units(rng: random.Random, count: int, rank: int, entropy_bits: int,
                    fixed: Sequence[int] = ()) -> list[int]:
    basis = gf2.Gf2Basis()
    units: list[int] = []
    for u in fixed:
        units.append(u)
        basis.add(u)
    independent = list(units)
    while len(independent) < rank:
        u = rng.getrandbits(entropy_bits)
        if basis.add(u):
            independent.append(u)
            units.append(u)
    while len(units) < count:
        combo = 0
        while combo == 0:
            combo = 0
            for v in independent:
                if rng.getrandbits(1):
                    combo ^= v
        units.append(combo)
    return units[:count]


def make_tweak_table(spec: TableSpec) -> TweakTable:
    if isinstance(spec, Explicit):
        consts = tuple(bytes(c) for c in spec.constants)
        if spec.rank is None:
            r = gf2.rank(to_int(c) for c in consts) if len(consts) == spec.n - 4 else 0
        else:
            r = spec.rank
        return TweakTable(consts, n=spec.n, periodicity=spec.periodicity, independent_rank=r)
    if isinstance(spec, PaperDefault):
        count = spec.n - 4
        fixed = [to_int(c[:4]) for c in (PAPER_T4, PAPER_T5, PAPER_T6)][:count]
        rank = min(spec.rank, count, 32)
        units = _generate_units(random.Random(spec.seed), count, rank, 32, fixed)
        consts = tuple(u.to_bytes(4, "little") * 4 for u in units)
        return TweakTable(consts, n=spec.n, periodicity=4, independent_rank=rank)
    if isinstance(spec, Seeded):
        count = spec.n - 4
        width = 8 * spec.periodicity
        entropy = width if spec.entropy_bits is None else min(spec.entropy_bits, width)
        rank = min(spec.rank, count, entropy)
        units = _generate_units(random.Random(spec.seed), count, rank, entropy)
        reps = BLOCK // spec.periodicity
        consts = tuple(u.to_bytes(spec.periodicity, "little") * reps for u in units)
        return TweakTable(consts, n=spec.n, periodicity=spec.periodicity, independent_rank=rank)
    raise TypeError(f"unknown table spec {spec!r}")


# --- the keyed permutation -------------------------------------------------

class BlockPermutation(Protocol):
    def encrypt(self, block: bytes) -> bytes: ...
    def decrypt(self, block: bytes) -> bytes: ...


class AesPermutation:
    """AES-128 in single-block ECB use; contexts are per thread."""

    def __init__(self, key: bytes):
        self._key = bytes(key)
        self._local = threading.local()

    def _ctx(self):
        loc = self._local
        if not hasattr(loc, "enc"):
            c = Cipher(algorithms.AES(self._key), modes.ECB())
            loc.enc = c.encryptor()
            loc.dec = c.decryptor()
        return loc

    def encrypt(self, block: bytes) -> bytes:
        return self._ctx().enc.update(block)

    def decrypt(self, block: bytes) -> bytes:
        return self._ctx().dec.update(block)

    def __getstate__(self):
        return {"_key": self._key}

    def __setstate__(self, state):
        self._key = state["_key"]
        self._local = threading.local()


_perm_lock = threading.Lock()
_perm_cache: dict[bytes, AesPermutation] = {}


def permutation_for(key: CipherKey) -> AesPermutation:
    perm = _perm_cache.get(key.key)
    if perm is None:
        with _perm_lock:
            perm = _perm_cache.setdefault(key.key, AesPermutation(key.key))
    return perm


def _check_block(b: bytes) -> None:
    if len(b) != BLOCK:
        raise ValueError(f"block must be 16 bytes, got {len(b)}")


def _check_aligned(p: int) -> None:
    if p & (BLOCK - 1):
        raise AlignmentError(f"address {p:#x} is not 16-byte aligned")


def encrypt_block(key: CipherKey, mode: CipherMode, table: TweakTable, m: bytes, p: int,
                  permutation: BlockPermutation | None = None) -> bytes:
    _check_block(m)
    _check_aligned(p)
    perm = permutation or permutation_for(key)
    t = table.tweak(p)
    c = perm.encrypt(to_bytes(to_int(m) ^ t))
    if mode is CipherMode.XEX:
        c = to_bytes(to_int(c) ^ t)
    return c


def decrypt_block(key: CipherKey, mode: CipherMode, table: TweakTable, c: bytes, p: int,
                  permutation: BlockPermutation | None = None) -> bytes:
    _check_block(c)
    _check_aligned(p)
    perm = permutation or permutation_for(key)
    t = table.tweak(p)
    if mode is CipherMode.XEX:
        c = to_bytes(to_int(c) ^ t)
    return to_bytes(to_int(perm.decrypt(c)) ^ t)


def encrypt_page(key: CipherKey, mode: CipherMode, table: TweakTable, data: bytes,
                 frame: int) -> bytes:
    """Encrypt a whole 4 KiB frame in one pass (same result as per-block calls)."""
    if len(data) != PAGE:
        raise ValueError("page must be 4096 bytes")
    tw = table.page_tweaks(frame)
    x = np.frombuffer(data, dtype=np.uint8).reshape(-1, BLOCK) ^ tw
    c = np.frombuffer(permutation_for(key).encrypt(x.tobytes()), dtype=np.uint8).reshape(-1, BLOCK)
    if mode is CipherMode.XEX:
        c = c ^ tw
    return c.tobytes()


def decrypt_page(key: CipherKey, mode: CipherMode, table: TweakTable, data: bytes,
                 frame: int) -> bytes:
    if len(data) != PAGE:
        raise ValueError("page must be 4096 bytes")
    tw = table.page_tweaks(frame)
    c = np.frombuffer(data, dtype=np.uint8).reshape(-1, BLOCK)
    if mode is CipherMode.XEX:
        c = c ^ tw
    x = np.frombuffer(permutation_for(key).decrypt(c.tobytes()), dtype=np.uint8).reshape(-1, BLOCK)
    return (x ^ tw).tobytes()
