
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from sevlab.machine import (HYPERVISOR, Access, FaultInfo, Flags, MemoryFault, NptLocked, OwnershipViolation,
                            PermissionDenied, Perms, SnapshotError, parse_snapshot_header)
from sevlab.tweak_cipher import CipherMode, decrypt_block, to_int, tweak_value


def test_hv_write_read(small_guest):
    mach, _ = small_guest()
    mach.alloc_frame(40)
    mach.hv_write_phys(40 << 12 | 0x20, b"hello")
    assert mach.hv_read_phys(40 << 12 | 0x20, 5) == b"hello"


@settings(max_examples=100, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.binary(min_size=16, max_size=16))
def test_private_memory_is_encrypted(small_guest, m):
    mach, _ = small_guest()
    mach.vm_access("write", 0x1040, m)
    assert mach.hv_read_phys(mach.translate(0x1040), 16) != m
    assert mach.vm_access("read", 0x1040, 16) == m


def test_shared_page_uses_hypervisor_key(small_guest):
    mach, _ = small_guest()
    mach.guest_set_shared(mach.vm_id, 1, True)
    m = bytes(range(16))
    mach.vm_access("write", 0x1000, m)
    assert mach.hv_decrypt_own(mach.translate(0x1000), 16) == m


def test_flip_to_shared_garbles(small_guest):
    mach, _ = small_guest()
    m = bytes(range(16))
    mach.vm_access("write", 0x1000, m)
    c = mach.hv_read_phys(mach.translate(0x1000), 16)
    mach.guest_set_shared(mach.vm_id, 1, True)
    # the stored ciphertext is now read under the hypervisor key
    want = decrypt_block(mach.keys[HYPERVISOR], mach.mode, mach.table, c, mach.translate(0x1000))
    got = mach.vm_access("read", 0x1000, 16)
    assert got == want and got != m


def test_only_guest_sets_attributes(small_guest):
    mach, _ = small_guest()
    with pytest.raises(PermissionDenied):
        mach.guest_set_shared("hypervisor", 1, True)


def test_rmp_blocks_overwrite(small_guest):
    mach, _ = small_guest(flags=Flags(rmp_ownership=True))
    hpa = mach.translate(0)
    before = mach.hv_read_phys(hpa, 4096)
    with pytest.raises(OwnershipViolation):
        mach.hv_write_phys(hpa + 32, b"\x90" * 16)
    assert mach.hv_read_phys(hpa, 4096) == before


def test_overwrite_allowed_without_rmp(small_guest):
    mach, _ = small_guest()
    mach.hv_write_phys(mach.translate(0), b"\x90" * 16)
    assert mach.hv_read_phys(mach.translate(0), 16) == b"\x90" * 16


def test_exec_fault_masks_offset_under_es(small_guest):
    mach, _ = small_guest()
    mach.set_npt_perms(1, Perms(True, True, False))
    res = mach.vm_access("fetch", 0x1234, 1)
    assert res == FaultInfo(0x1000, Access.EXECUTE)
    mach2, _ = small_guest(flags=Flags(sev_es=False))
    mach2.set_npt_perms(1, Perms(True, True, False))
    assert mach2.vm_access("fetch", 0x1234, 1) == FaultInfo(0x1234, Access.EXECUTE)


def test_write_fault_leaves_memory(small_guest):
    mach, _ = small_guest()
    mach.set_npt_perms(2, Perms(True, False, True))
    before = mach.hv_read_phys(mach.translate(0x2000), 4096)
    res = mach.vm_access("write", 0x2010, b"x" * 16)
    assert isinstance(res, FaultInfo) and res.access is Access.WRITE
    assert mach.hv_read_phys(mach.translate(0x2000), 4096) == before


def test_set_all_and_restore(small_guest):
    mach, _ = small_guest()
    saved = mach.set_all_perms(execute=False)
    faults = [mach.vm_access("fetch", g << 12, 1) for g in range(4)]
    assert all(isinstance(f, FaultInfo) for f in faults)
    mach.restore_perms(saved)
    assert all(not isinstance(mach.vm_access("fetch", g << 12, 1), FaultInfo) for g in range(4))


def test_npt_locked(small_guest):
    mach, _ = small_guest(flags=Flags(npt_locked=True))
    with pytest.raises(NptLocked):
        mach.set_npt_perms(0, Perms(True, False, True))
    with pytest.raises(NptLocked):
        mach.set_all_perms(write=False)


def test_remap_xe_law(small_guest):
    mach, _ = small_guest(mode=CipherMode.XE)
    m = bytes(range(16, 32))
    mach.vm_access("write", 0x1050, m)
    p = mach.translate(0x1050)
    mach.alloc_frame(60)
    q = (60 << 12) | 0x050
    mach.hv_write_phys(q, mach.hv_read_phys(p, 16))
    mach.remap_gpa(1, 60)
    got = mach.vm_access("read", 0x1050, 16)
    assert to_int(got) == to_int(m) ^ tweak_value(mach.table, p ^ q)


def test_remap_same_frame_is_noop(small_guest):
    mach, _ = small_guest()
    mach.vm_access("write", 0x1000, b"A" * 16)
    mach.remap_gpa(1, mach.npt[1].hpa_frame)
    assert mach.vm_access("read", 0x1000, 16) == b"A" * 16


def test_remap_rejected_under_rmp(small_guest):
    mach, _ = small_guest(flags=Flags(rmp_ownership=True))
    mach.alloc_frame(60)
    with pytest.raises(OwnershipViolation):
        mach.remap_gpa(1, 60)


def test_frame_beyond_address_space(small_guest):
    mach, _ = small_guest()
    with pytest.raises(MemoryFault):
        mach.alloc_frame(1 << 8)


def test_snapshot_round_trip(small_guest):
    mach, _ = small_guest(bytes(range(256)) * 4)
    blob = mach.dump_snapshot()
    other, _ = small_guest()
    other.load_snapshot(blob)
    assert other.dump_snapshot() == blob
    assert parse_snapshot_header(blob)["mode"] is CipherMode.XEX


def test_snapshot_bad_magic(small_guest):
    mach, _ = small_guest()
    with pytest.raises(SnapshotError):
        mach.load_snapshot(b"XXXX" + mach.dump_snapshot()[4:])
