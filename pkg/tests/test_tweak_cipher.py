import random

import pytest
from hypothesis import given, strategies as st

from sevlab.tweak_cipher import (AesPermutation, AddressRangeError, AlignmentError, CipherKey,
                                 CipherMode, Explicit, PaperDefault, Seeded, TableValidationError,
                                 TweakTable, decrypt_block, encrypt_block, make_tweak_table,
                                 to_bytes, to_int, tweak_value)
from sevlab import gf2

PAPER = make_tweak_table(PaperDefault())
KEY = CipherKey(bytes(range(16)), "VM1")
ZERO20 = make_tweak_table(Explicit([bytes(16)] * 16, n=20))

blocks = st.binary(min_size=16, max_size=16)
addrs = st.integers(0, 2**48 - 1).map(lambda p: p & ~15)
modes = st.sampled_from(list(CipherMode))


def test_tweak_of_zero_is_zero():
    assert tweak_value(PAPER, 0) == 0


def test_table1_constants():
    assert to_bytes(tweak_value(PAPER, 0x10)) == bytes.fromhex("82253838") * 4
    assert PAPER.constant(5) == bytes.fromhex("ec09079c") * 4
    assert PAPER.constant(6) == bytes.fromhex("40000018") * 4


def test_aes_zero_key_vector():
    # AES-128(0^16, 0^16); FIPS-197 known answer, checked against an external implementation
    k = CipherKey(bytes(16), "VM1")
    c = encrypt_block(k, CipherMode.XE, ZERO20, bytes(16), 0)
    assert c.hex() == "66e94bd4ef8a2c3b884cfa59ca342b2e"


def test_aes_fips197_c1():
    aes = AesPermutation(bytes(range(16)))
    assert aes.encrypt(bytes.fromhex("00112233445566778899aabbccddeeff")).hex() == \
        "69c4e0d86a7b0430d8cdb78070b4c55a"


def test_xe_zero_table_is_raw_aes():
    aes = AesPermutation(KEY.key)
    c = bytes(range(100, 116))
    assert decrypt_block(KEY, CipherMode.XE, ZERO20, c, 0x230) == aes.decrypt(c)


@given(addrs, addrs)
def test_tweak_linear(p, q):
    assert tweak_value(PAPER, p) ^ tweak_value(PAPER, q) == tweak_value(PAPER, p ^ q)


@given(st.integers(0, 2**48 - 1))
def test_low_bits_ignored(p):
    assert tweak_value(PAPER, p) == tweak_value(PAPER, p & ~15)


@given(addrs)
def test_periodicity_four(p):
    t = to_bytes(tweak_value(PAPER, p))
    assert t == t[:4] * 4


@given(modes, blocks, addrs)
def test_round_trip(mode, m, p):
    assert decrypt_block(KEY, mode, PAPER, encrypt_block(KEY, mode, PAPER, m, p), p) == m


@given(blocks, addrs, addrs)
def test_xe_relocation(m, p, q):
    c = encrypt_block(KEY, CipherMode.XE, PAPER, m, p)
    assert to_int(decrypt_block(KEY, CipherMode.XE, PAPER, c, q)) == to_int(m) ^ tweak_value(PAPER, p ^ q)


@given(blocks, addrs, addrs)
def test_xex_relocation(m, p, q):
    d = tweak_value(PAPER, p) ^ tweak_value(PAPER, q)
    c = to_bytes(to_int(encrypt_block(KEY, CipherMode.XEX, PAPER, m, p)) ^ d)
    assert to_int(decrypt_block(KEY, CipherMode.XEX, PAPER, c, q)) == to_int(m) ^ d


def test_avalanche():
    rng = random.Random(3)
    total = 0
    for _ in range(1000):
        m, p = rng.randbytes(16), rng.randrange(1 << 40) & ~15
        c = bytearray(encrypt_block(KEY, CipherMode.XEX, PAPER, m, p))
        c[rng.randrange(16)] ^= 1 << rng.randrange(8)
        diff = bin(to_int(decrypt_block(KEY, CipherMode.XEX, PAPER, bytes(c), p)) ^ to_int(m)).count("1")
        assert diff >= 1
        total += diff
    assert total / 1000 >= 48


def test_seeded_deterministic_and_rank():
    a = make_tweak_table(Seeded(11, 16, 44))
    assert a == make_tweak_table(Seeded(11, 16, 44))
    b = make_tweak_table(Seeded(11, 4, 28))
    assert gf2.rank(to_int(c) for c in b.constants) == 28
    assert b.rank() == 28


def test_entropy_bits_limits_units():
    t = make_tweak_table(Seeded(5, 4, 16, n=20, entropy_bits=16))
    assert all(t.unit(i) < 1 << 16 for i in range(4, 20))


def test_validation_errors():
    with pytest.raises(TableValidationError):
        TweakTable((bytes(range(16)),) * 16, n=20)
    with pytest.raises(TableValidationError):
        TweakTable((bytes(16),) * 3, n=20)
    with pytest.raises(AddressRangeError):
        tweak_value(ZERO20, 1 << 20)
    with pytest.raises(AlignmentError):
        encrypt_block(KEY, CipherMode.XE, ZERO20, bytes(16), 8)


def test_spec_lines_round_trip():
    t = make_tweak_table(Seeded(2, 4, 10, n=24))
    assert TweakTable.from_spec_lines(t.to_spec_lines()) == t
