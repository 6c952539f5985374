import random

import pytest
from hypothesis import given, strategies as st

from sevlab import gf2


def test_single_row_reads_off():
    sol = gf2.solve([(1 << 3, 0xABC)], 8)
    assert sol.values[3] == 0xABC


def test_inconsistent_system_raises():
    rows = [(0b01, 1), (0b10, 2), (0b11, 4)]
    with pytest.raises(gf2.Gf2Inconsistent):
        gf2.solve(rows, 2)


def test_underdetermined_leaves_free_vars_out():
    sol = gf2.solve([(0b11, 5)], 2)
    assert 0 not in sol.values and 1 not in sol.values
    assert not sol.is_unique


@given(st.integers(1, 24), st.integers(0, 2**32))
def test_generator_round_trip(nvars, seed):
    rng = random.Random(seed)
    secret = [rng.getrandbits(128) for _ in range(nvars)]
    rows = []
    for k in range(nvars):
        rows.append((1 << k, secret[k]))
    for _ in range(6):
        mask = rng.getrandbits(nvars)
        rhs = 0
        for k in range(nvars):
            if mask >> k & 1:
                rhs ^= secret[k]
        rows.append((mask, rhs))
    rng.shuffle(rows)
    sol = gf2.solve(rows, nvars)
    assert [sol.values[k] for k in range(nvars)] == secret


@given(st.lists(st.integers(0, 2**16 - 1), max_size=24))
def test_rank_bounded_and_basis_spans(vectors):
    r = gf2.rank(vectors)
    assert r <= min(len(vectors), 16)
    basis = gf2.Gf2Basis()
    for v in vectors:
        basis.add(v)
    assert len(basis.vectors()) == r
    assert all(basis.contains(v) for v in vectors)
