"""GF(2) linear algebra on Python int bitsets.

Vectors are ints; bit k is coordinate k. Right-hand sides of linear
systems may be arbitrary-width ints (each bit is an independent system
sharing the same coefficient matrix).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence


class Gf2Inconsistent(ValueError):
    """The system has no solution."""

    def __init__(self, row_index: int):
        super().__init__(f"inconsistent GF(2) system (row {row_index} reduces to 0 = nonzero)")
        self.row_index = row_index


def rank(vectors: Iterable[int]) -> int:
    basis = Gf2Basis()
    for v in vectors:
        basis.add(v)
    return len(basis)


class Gf2Basis:
    """Incremental row-echelon basis keyed by leading bit."""

    def __init__(self, vectors: Iterable[int] = ()):
        self._rows: dict[int, int] = {}
        for v in vectors:
            self.add(v)

    def __len__(self) -> int:
        return len(self._rows)

    def reduce(self, v: int) -> int:
        while v:
            top = v.bit_length() - 1
            row = self._rows.get(top)
            if row is None:
                return v
            v ^= row
        return 0

    def add(self, v: int) -> bool:
        """Insert v; return True if it increased the rank."""
        r = self.reduce(v)
        if not r:
            return False
        self._rows[r.bit_length() - 1] = r
        return True

    def contains(self, v: int) -> bool:
        return self.reduce(v) == 0

    def vectors(self) -> list[int]:
        return [self._rows[k] for k in sorted(self._rows)]


@dataclass
class Gf2Solution:
    values: dict[int, int]
    free: set[int] = field(default_factory=set)
    # pivot variables whose value depends on free variables: var -> (free mask, constant)
    dependent: dict[int, tuple[int, int]] = field(default_factory=dict)

    @property
    def is_unique(self) -> bool:
        return not self.free and not self.dependent


def solve(rows: Sequence[tuple[int, int]], nvars: int) -> Gf2Solution:
    """Gauss-Jordan elimination of ``mask . x = rhs`` over GF(2).

    ``rows`` holds (coefficient mask, rhs) pairs; ``nvars`` bounds the
    variable indices. Variables not referenced by any row are reported as
    free.
    """
    work = [[m, r] for m, r in rows]
    pivots: list[tuple[int, int]] = []  # (column, row index)
    row_idx = 0
    for col in range(nvars):
        bit = 1 << col
        pivot = None
        for k in range(row_idx, len(work)):
            if work[k][0] & bit:
                pivot = k
                break
        if pivot is None:
            continue
        work[row_idx], work[pivot] = work[pivot], work[row_idx]
        pm, pr = work[row_idx]
        for k in range(len(work)):
            if k != row_idx and work[k][0] & bit:
                work[k][0] ^= pm
                work[k][1] ^= pr
        pivots.append((col, row_idx))
        row_idx += 1
    for k in range(row_idx, len(work)):
        if work[k][0] == 0 and work[k][1] != 0:
            raise Gf2Inconsistent(k)
    pivot_cols = {c for c, _ in pivots}
    free = {c for c in range(nvars) if c not in pivot_cols}
    free_mask = sum(1 << c for c in free)
    values: dict[int, int] = {}
    dependent: dict[int, tuple[int, int]] = {}
    for col, k in pivots:
        m, r = work[k]
        rest = m & ~(1 << col)
        if rest & free_mask:
            dependent[col] = (rest, r)
        else:
            values[col] = r
    return Gf2Solution(values=values, free=free, dependent=dependent)
