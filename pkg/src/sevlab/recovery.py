"""Tweak-constant recovery from hypervisor capabilities.

XE: relocated ciphertext decrypts to ``m ^ T(p ^ q)``, which is linear in
the constants, so a handful of relocations give a GF(2) system.
XEX: the hypervisor must guess ``T(p) ^ T(q)`` and XOR it into the copy;
with 4-byte periodic constants the guess space is one 32-bit unit per bit.

Observations need somebody to decrypt at the destination. That is the
:class:`GuestReader`, a cooperative in-guest reader (think diagnostic
kernel module). It is the only guest cooperation in the toolkit and is
used for table recovery only.
"""

from __future__ import annotations

import concurrent.futures as cf
import multiprocessing
import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import gf2
from .gf2 import Gf2Inconsistent, Gf2Solution  # noqa: F401  (re-exported)
from .machine import Machine
from .tweak_cipher import BLOCK, PAGE, TweakTable, expand_unit, to_bytes, to_int

solve_gf2 = gf2.solve


class RecoveryError(Exception):
    pass


class RankDeficient(RecoveryError):
    def __init__(self, unrecoverable: Sequence[int], partial: dict[int, bytes]):
        super().__init__(f"constants for bits {sorted(unrecoverable)} are not determined")
        self.unrecoverable = sorted(unrecoverable)
        self.partial = partial


class NotFound(RecoveryError):
    pass


class Ambiguous(RecoveryError):
    def __init__(self, matches):
        super().__init__(f"{len(matches)} candidates satisfy the check: {[hex(g) for g in matches[:8]]}")
        self.matches = matches


@dataclass
class PlaintextProbe:
    """Known plaintext ``m`` whose ciphertext sits at host address ``p``."""
    m: bytes
    p: int


@dataclass
class RecoveryResult:
    constants: dict[int, bytes]
    provenance: dict[int, str] = field(default_factory=dict)

    def as_table(self, n: int, periodicity: int = 4) -> TweakTable:
        missing = [i for i in range(4, n) if i not in self.constants]
        if missing:
            raise RankDeficient(missing, dict(self.constants))
        return TweakTable(tuple(self.constants[i] for i in range(4, n)), n=n, periodicity=periodicity,
                          independent_rank=gf2.rank(to_int(self.constants[i]) for i in range(4, n)))


class GuestReader:
    """Cooperative guest: reads 16 bytes at a host address through a probe page.

    The hypervisor remaps the probe gpa frame onto the wanted host frame;
    the guest then performs an ordinary read there.
    """

    def __init__(self, machine: Machine, probe_gpa_frame: int):
        self.machine = machine
        self.frame = probe_gpa_frame

    def read(self, hpa: int) -> bytes:
        mach = self.machine
        target = hpa >> 12
        if mach.npt[self.frame].hpa_frame != target:
            mach.alloc_frame(target)
            mach.remap_gpa(self.frame, target)
        res = mach.vm_access("read", (self.frame << 12) | (hpa & (PAGE - 1)), BLOCK)
        if not isinstance(res, bytes):
            raise RecoveryError(f"probe read faulted: {res}")
        return res


@dataclass
class ProbeSetup:
    machine: Machine
    reader: GuestReader
    probes: list[PlaintextProbe]


def setup_probes(machine: Machine, home_gpa_frame: int, reader_gpa_frame: int,
                 m: bytes, count: int = 256) -> ProbeSetup:
    """Have the cooperative guest write ``m`` into ``count`` blocks of its home page."""
    probes = []
    for k in range(count):
        gpa = (home_gpa_frame << 12) + k * BLOCK
        machine.vm_access("write", gpa, m)
        probes.append(PlaintextProbe(m, machine.translate(gpa)))
    return ProbeSetup(machine, GuestReader(machine, reader_gpa_frame), probes)


def _addr_mask(x: int) -> int:
    return x >> 4


def recover_xe_constants(setup: ProbeSetup, targets: Iterable[int],
                         dests: Sequence[int] | None = None, checks: int = 4,
                         seed: int = 0) -> RecoveryResult:
    """Solve for t_i (i in ``targets``) by relocating one known ciphertext.

    Default destinations are single-bit flips ``p ^ 2^i`` (each constant
    is read off directly) plus ``checks`` random multi-bit combinations
    that make the system overdetermined, so a wrong mode assumption shows
    up as an inconsistency.
    """
    mach, reader = setup.machine, setup.reader
    probe = setup.probes[0]
    targets = sorted(set(targets))
    n = mach.table.n
    if any(i < 4 or i >= n for i in targets):
        raise ValueError("target bits must lie in [4, n)")
    if dests is None:
        rng = random.Random(seed)
        dests = [probe.p ^ (1 << i) for i in targets]
        for _ in range(checks if len(targets) > 1 else 0):
            combo = 0
            while bin(combo).count("1") < 2:
                combo = sum(1 << i for i in targets if rng.getrandbits(1))
            dests.append(probe.p ^ combo)
    c = mach.hv_read_phys(probe.p, BLOCK)
    m_int = to_int(probe.m)
    rows = []
    for q in dests:
        _ensure_scratch(mach, q)
        mach.hv_write_phys(q, c)
        obs = reader.read(q)
        rows.append((_addr_mask(probe.p ^ q), to_int(obs) ^ m_int))
    sol = solve_gf2(rows, n - 4)
    single = {probe.p ^ q for q in dests if bin(probe.p ^ q).count("1") == 1}
    constants, prov, missing = {}, {}, []
    for i in targets:
        v = sol.values.get(i - 4)
        if v is None:
            missing.append(i)
            prov[i] = "unrecoverable"
            continue
        constants[i] = to_bytes(v)
        prov[i] = "read-off" if (1 << i) in single else "solved"
    if missing:
        err = RankDeficient(missing, constants)
        err.provenance = prov
        raise err
    return RecoveryResult(constants, prov)


def _ensure_scratch(mach: Machine, q: int) -> None:
    if q >> 12 not in mach.memory:
        mach.alloc_frame(q >> 12)


# --- XEX brute force ------------------------------------------------------

def _xex_pairs(setup: ProbeSetup, bit: int, parts: int) -> list[tuple[PlaintextProbe, int]]:
    """Pick write-disjoint (probe, destination) pairs, one per partition."""
    pairs = []
    for probe in setup.probes:
        if bit < 12 and probe.p & (1 << bit):
            continue
        pairs.append((probe, probe.p ^ (1 << bit)))
        if len(pairs) == parts:
            return pairs
    raise RecoveryError(f"not enough probe blocks for {parts} partitions at bit {bit}")


def _search_range(mach: Machine, reader_frame: int, m: bytes, p: int, q: int,
                  lo: int, hi: int, periodicity: int) -> list[int]:
    reader = GuestReader(mach, reader_frame)
    c_int = to_int(mach.hv_read_phys(p, BLOCK))
    m_int = to_int(m)
    _ensure_scratch(mach, q)
    saved = mach.hv_read_phys(q, BLOCK)
    write = mach.hv_write_phys
    read = reader.read
    hits = []
    for g in range(lo, hi):
        d = expand_unit(g, periodicity)
        write(q, to_bytes(c_int ^ d))
        if to_int(read(q)) == m_int ^ d:
            hits.append(g)
    write(q, saved)
    return hits


def _search_worker(args):
    mach, reader_frame, m, p, q, lo, hi, periodicity = args
    return _search_range(mach, reader_frame, m, p, q, lo, hi, periodicity)


def partition_range(lo: int, hi: int, parts: int) -> list[tuple[int, int]]:
    step, extra = divmod(hi - lo, parts)
    out, a = [], lo
    for k in range(parts):
        b = a + step + (1 if k < extra else 0)
        out.append((a, b))
        a = b
    return [r for r in out if r[0] < r[1]]


def recover_xex_constant(setup: ProbeSetup, bit: int, period_bits: int = 32,
                         lo: int = 0, hi: int | None = None, jobs: int = 1,
                         partitions: int | None = None) -> int:
    """Exhaustively search the periodic unit of t_bit over ``[lo, hi)``.

    The range is cut into disjoint partitions; each uses its own probe
    block and destination, so partitions can run in separate processes
    (``jobs > 1``) on private copies of the machine and results are merged
    by union.
    """
    hi = (1 << period_bits) if hi is None else hi
    parts = partitions or jobs
    ranges = partition_range(lo, hi, parts)
    pairs = _xex_pairs(setup, bit, len(ranges))
    mach = setup.machine
    per = 4
    tasks = [(mach, setup.reader.frame, probe.m, probe.p, q, a, b, per)
             for (probe, q), (a, b) in zip(pairs, ranges)]
    hits: list[int] = []
    if jobs <= 1:
        for t in tasks:
            hits += _search_worker(t)
    else:
        mach._plain_cache.clear()
        ctx = multiprocessing.get_context("fork")
        with cf.ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            for res in pool.map(_search_worker, tasks):
                hits += res
    hits = sorted(set(hits))
    if not hits:
        raise NotFound(f"no periodic unit in [{lo:#x}, {hi:#x}) satisfies the check for bit {bit}")
    if len(hits) > 1:
        raise Ambiguous(hits)
    g = hits[0]
    # soundness: re-verify the winning unit once on the live machine
    probe, q = pairs[0]
    if _search_range(mach, setup.reader.frame, probe.m, probe.p, q, g, g + 1, per) != [g]:
        raise RecoveryError(f"unit {g:#x} failed re-verification")
    return g


def recover_xex_constants(setup: ProbeSetup, targets: Iterable[int], period_bits: int = 32,
                          jobs: int = 1) -> RecoveryResult:
    constants, prov = {}, {}
    for i in sorted(set(targets)):
        g = recover_xex_constant(setup, i, period_bits=period_bits, jobs=jobs)
        constants[i] = to_bytes(expand_unit(g))
        prov[i] = "brute-forced"
    return RecoveryResult(constants, prov)


# --- delta index ------------------------------------------------------------

class DeltaIndex:
    """Cached ``T(p) ^ T(q)`` over a working set of addresses."""

    def __init__(self, table: TweakTable, addresses: Iterable[int]):
        self.table = table
        self._t = {a: table.tweak(a) for a in addresses}

    def tweak(self, p: int) -> int:
        v = self._t.get(p)
        if v is None:
            v = self._t[p] = self.table.tweak(p)
        return v

    def delta(self, p: int, q: int) -> int:
        return self.tweak(p) ^ self.tweak(q)


def precompute_tweak_deltas(table: TweakTable, frames: Iterable[int]) -> DeltaIndex:
    addrs = [(f << 12) | (k * BLOCK) for f in frames for k in range(PAGE // BLOCK)]
    return DeltaIndex(table, addrs)
