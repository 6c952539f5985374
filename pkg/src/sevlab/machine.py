"""Hypervisor/guest trust boundary over encrypted physical memory.

Physical memory holds raw ciphertext. Guest accesses go through the NPT
(gpa frame -> host frame + permissions) and are decrypted/encrypted at
block granularity under the VM key, or the hypervisor key for pages the
guest marked shared. Hypervisor accesses see raw bytes.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace

from .tweak_cipher import (BLOCK, PAGE, CipherKey, CipherMode, TweakTable, decrypt_block,
                           decrypt_page, encrypt_block, encrypt_page)

HYPERVISOR = "HYPERVISOR"
SNAPSHOT_MAGIC = b"SEVLAB01"
_HEADER = struct.Struct(">8sHBB")
_FRAME_HDR = struct.Struct(">Q")


class MachineError(Exception):
    pass


class MemoryFault(MachineError):
    """Hypervisor touched host memory that does not exist."""


class OwnershipViolation(MachineError):
    """RMP-style ownership check rejected a hypervisor operation."""


class PermissionDenied(MachineError):
    pass


class NptLocked(MachineError):
    """NPT permission changes are disabled by mitigation."""


class SnapshotError(MachineError):
    pass


class Access(str, enum.Enum):
    READ = "read"
    WRITE = "write"
    EXECUTE = "execute"


@dataclass(frozen=True)
class Perms:
    read: bool = True
    write: bool = True
    execute: bool = True

    def allows(self, access: Access) -> bool:
        return {Access.READ: self.read, Access.WRITE: self.write, Access.EXECUTE: self.execute}[access]


@dataclass
class NptEntry:
    hpa_frame: int
    perms: Perms = field(default_factory=Perms)
    owner: str = HYPERVISOR


@dataclass(frozen=True)
class FaultInfo:
    gpa: int
    access: Access

    def to_json(self) -> dict:
        return {"gpa": self.gpa, "access": self.access.value}


@dataclass
class Flags:
    sev_es: bool = True
    rmp_ownership: bool = False
    interception_enabled: bool = True
    npt_locked: bool = False

    def to_byte(self) -> int:
        return (self.sev_es | self.rmp_ownership << 1 | self.interception_enabled << 2
                | self.npt_locked << 3)

    @classmethod
    def from_byte(cls, b: int) -> "Flags":
        return cls(bool(b & 1), bool(b & 2), bool(b & 4), bool(b & 8))


@dataclass
class Metrics:
    vm_exits: int = 0
    page_faults: int = 0
    blocks_moved: int = 0

    def snapshot(self) -> dict:
        return {"vm_exits": self.vm_exits, "page_faults": self.page_faults,
                "blocks_moved": self.blocks_moved}


class Machine:
    """One host with one SEV guest.

    Attack code may use the ``hv_*`` operations, ``translate``,
    ``set_npt_perms`` and ``remap_gpa``. Methods prefixed ``referee_`` use
    the VM key and exist only for ground-truth checks in tests and reports.
    """

    def __init__(self, table: TweakTable, mode: CipherMode, vm_key: bytes, hv_key: bytes,
                 flags: Flags | None = None, vm_id: str = "VM1"):
        if vm_key == hv_key:
            raise ValueError("VM and hypervisor keys must differ")
        self.table = table
        self.mode = mode
        self.vm_id = vm_id
        self.keys = {HYPERVISOR: CipherKey(hv_key, HYPERVISOR), vm_id: CipherKey(vm_key, vm_id)}
        self.flags = flags or Flags()
        self.metrics = Metrics()
        self.memory: dict[int, bytearray] = {}
        self.npt: dict[int, NptEntry] = {}
        self.guest_page_attrs: dict[int, bool] = {}  # gpa frame -> shared
        self.frame_owner: dict[int, str] = {}
        self._plain_cache: dict[tuple, bytes] = {}

    # -- setup -------------------------------------------------------------

    def alloc_frame(self, frame: int, owner: str = HYPERVISOR) -> None:
        if (frame << 12) >> self.table.n:
            raise MemoryFault(f"host frame {frame:#x} beyond {self.table.n}-bit address space")
        if frame not in self.memory:
            self.memory[frame] = bytearray(PAGE)
            self.frame_owner[frame] = owner

    def map_guest_page(self, gpa_frame: int, hpa_frame: int) -> None:
        """Launch-time mapping of a private guest page."""
        self.alloc_frame(hpa_frame, self.vm_id)
        self.frame_owner[hpa_frame] = self.vm_id
        self.npt[gpa_frame] = NptEntry(hpa_frame, Perms(), self.vm_id)
        self.guest_page_attrs.setdefault(gpa_frame, False)

    def launch_write(self, gpa: int, data: bytes) -> None:
        """Guest-image load (the VM writes its own initial memory)."""
        off = 0
        while off < len(data):
            g = gpa + off
            frame, pofs = divmod(g, PAGE)
            if pofs == 0 and len(data) - off >= PAGE:
                entry = self.npt[frame]
                key = self._key_for(frame)
                self.memory[entry.hpa_frame][:] = encrypt_page(key, self.mode, self.table,
                                                               bytes(data[off:off + PAGE]),
                                                               entry.hpa_frame)
                off += PAGE
                continue
            n = min(len(data) - off, PAGE - pofs)
            res = self.vm_access(Access.WRITE, g, bytes(data[off:off + n]))
            if isinstance(res, FaultInfo):
                raise MachineError(f"launch write faulted: {res}")
            off += n

    # -- keys / translation ------------------------------------------------

    def _key_for(self, gpa_frame: int) -> CipherKey:
        return self.keys[HYPERVISOR] if self.guest_page_attrs.get(gpa_frame) else self.keys[self.vm_id]

    def translate(self, gpa: int) -> int:
        entry = self.npt.get(gpa >> 12)
        if entry is None:
            raise MemoryFault(f"gpa {gpa:#x} unmapped")
        return (entry.hpa_frame << 12) | (gpa & (PAGE - 1))

    def gpa_of_frame(self, hpa_frame: int) -> int | None:
        for g, e in self.npt.items():
            if e.hpa_frame == hpa_frame:
                return g
        return None

    # -- hypervisor capabilities ---------------------------------------------

    def _frame(self, hpa: int) -> bytearray:
        mem = self.memory.get(hpa >> 12)
        if mem is None:
            raise MemoryFault(f"hpa {hpa:#x} not backed by memory")
        return mem

    def hv_read_phys(self, hpa: int, length: int) -> bytes:
        out = bytearray()
        while length > 0:
            mem = self._frame(hpa)
            o = hpa & (PAGE - 1)
            n = min(length, PAGE - o)
            out += mem[o:o + n]
            hpa += n
            length -= n
        return bytes(out)

    def hv_write_phys(self, hpa: int, data: bytes) -> None:
        # validate the whole range first so a rejection leaves memory untouched
        a, end = hpa, hpa + len(data)
        while a < end:
            self._frame(a)
            if self.flags.rmp_ownership and self.frame_owner.get(a >> 12) != HYPERVISOR:
                raise OwnershipViolation(f"frame {a >> 12:#x} is owned by {self.frame_owner.get(a >> 12)}")
            a = ((a >> 12) + 1) << 12
        off = 0
        while off < len(data):
            mem = self._frame(hpa + off)
            o = (hpa + off) & (PAGE - 1)
            n = min(len(data) - off, PAGE - o)
            mem[o:o + n] = data[off:off + n]
            off += n

    def hv_decrypt_own(self, hpa: int, length: int) -> bytes:
        """Decrypt host memory with the hypervisor's own key."""
        return self._decrypt_range(self.keys[HYPERVISOR], hpa, length)

    def set_npt_perms(self, gpa_frame: int, perms: Perms) -> None:
        if self.flags.npt_locked:
            raise NptLocked("NPT permission control is locked")
        entry = self.npt.get(gpa_frame)
        if entry is None:
            raise MemoryFault(f"gpa frame {gpa_frame:#x} unmapped")
        entry.perms = perms

    def set_all_perms(self, **changes: bool) -> dict[int, Perms]:
        """Apply ``changes`` to every mapped frame; return the previous perms."""
        if self.flags.npt_locked:
            raise NptLocked("NPT permission control is locked")
        old = {g: e.perms for g, e in self.npt.items()}
        for e in self.npt.values():
            e.perms = replace(e.perms, **changes)
        return old

    def restore_perms(self, saved: dict[int, Perms]) -> None:
        for g, p in saved.items():
            self.set_npt_perms(g, p)

    def remap_gpa(self, gpa_frame: int, new_hpa_frame: int) -> None:
        entry = self.npt.get(gpa_frame)
        if entry is None:
            raise MemoryFault(f"gpa frame {gpa_frame:#x} unmapped")
        if new_hpa_frame not in self.memory:
            raise MemoryFault(f"host frame {new_hpa_frame:#x} does not exist")
        if self.flags.rmp_ownership and new_hpa_frame != entry.hpa_frame:
            raise OwnershipViolation(f"gpa frame {gpa_frame:#x} is validated at its current host frame")
        entry.hpa_frame = new_hpa_frame
        self.frame_owner[new_hpa_frame] = entry.owner

    # -- guest side ----------------------------------------------------------

    def guest_set_shared(self, caller: str, gpa_frame: int, shared: bool) -> None:
        if caller != self.vm_id:
            raise PermissionDenied("only the guest can change its page attributes")
        if gpa_frame not in self.npt:
            raise MemoryFault(f"gpa frame {gpa_frame:#x} unmapped")
        self.guest_page_attrs[gpa_frame] = bool(shared)

    def _fault(self, gpa: int, access: Access) -> FaultInfo:
        if self.flags.sev_es:
            gpa &= ~(PAGE - 1)
        return FaultInfo(gpa, access)

    def _check(self, access: Access, gpa: int, length: int) -> FaultInfo | None:
        g = gpa
        end = gpa + max(length, 1)
        while g < end:
            entry = self.npt.get(g >> 12)
            if entry is None or not entry.perms.allows(access):
                return self._fault(g, access)
            g = ((g >> 12) + 1) << 12
        return None

    def _decrypt_block_cached(self, key: CipherKey, hpa: int) -> bytes:
        c = bytes(self._frame(hpa)[hpa & 0xFFF:(hpa & 0xFFF) + BLOCK])
        ck = (key.owner, hpa, c)
        m = self._plain_cache.get(ck)
        if m is None:
            m = decrypt_block(key, self.mode, self.table, c, hpa)
            if len(self._plain_cache) > 200_000:
                self._plain_cache.clear()
            self._plain_cache[ck] = m
        return m

    def _decrypt_range(self, key: CipherKey, hpa: int, length: int) -> bytes:
        out = bytearray()
        start = hpa & ~(BLOCK - 1)
        a = start
        while a < hpa + length:
            out += self._decrypt_block_cached(key, a)
            a += BLOCK
        o = hpa - start
        return bytes(out[o:o + length])

    def vm_access(self, kind: Access | str, gpa: int, arg: int | bytes):
        """Guest memory access through the NPT.

        Returns the plaintext for reads/fetches, ``None`` for a completed
        write, or a :class:`FaultInfo` when a permission check fails.
        """
        access = Access.EXECUTE if kind in ("fetch", Access.EXECUTE) else Access(kind)
        length = arg if isinstance(arg, int) else len(arg)
        fault = self._check(access, gpa, length)
        if fault is not None:
            return fault
        if access is Access.WRITE:
            self._guest_write(gpa, bytes(arg))
            return None
        out = bytearray()
        g, remaining = gpa, length
        while remaining > 0:
            n = min(remaining, PAGE - (g & 0xFFF))
            out += self._decrypt_range(self._key_for(g >> 12), self.translate(g), n)
            g += n
            remaining -= n
        return bytes(out)

    def _guest_write(self, gpa: int, data: bytes) -> None:
        off = 0
        while off < len(data):
            g = gpa + off
            blk = g & ~(BLOCK - 1)
            o = g - blk
            n = min(len(data) - off, BLOCK - o)
            key = self._key_for(g >> 12)
            hpa = self.translate(blk)
            if n == BLOCK:
                plain = data[off:off + BLOCK]
            else:
                cur = bytearray(self._decrypt_block_cached(key, hpa))
                cur[o:o + n] = data[off:off + n]
                plain = bytes(cur)
            c = encrypt_block(key, self.mode, self.table, plain, hpa)
            mem = self._frame(hpa)
            mem[hpa & 0xFFF:(hpa & 0xFFF) + BLOCK] = c
            self._plain_cache[(key.owner, hpa, c)] = plain
            off += n

    # -- ground truth ------------------------------------------------------

    def referee_decrypt(self, hpa: int, length: int, owner: str | None = None) -> bytes:
        """Decrypt host memory with a given owner's key (default: the VM)."""
        return self._decrypt_range(self.keys[owner or self.vm_id], hpa, length)

    def referee_encrypt_block(self, m: bytes, hpa: int, owner: str | None = None) -> bytes:
        return encrypt_block(self.keys[owner or self.vm_id], self.mode, self.table, m, hpa)

    def referee_guest_view(self, gpa: int, length: int) -> bytes:
        """Guest-visible content, ignoring NPT permissions."""
        out = bytearray()
        g, remaining = gpa, length
        while remaining > 0:
            n = min(remaining, PAGE - (g & 0xFFF))
            out += self._decrypt_range(self._key_for(g >> 12), self.translate(g), n)
            g += n
            remaining -= n
        return bytes(out)

    def referee_page_plain(self, gpa_frame: int) -> bytes:
        entry = self.npt[gpa_frame]
        return decrypt_page(self._key_for(gpa_frame), self.mode, self.table,
                            bytes(self.memory[entry.hpa_frame]), entry.hpa_frame)

    # -- snapshots -----------------------------------------------------------

    def dump_snapshot(self) -> bytes:
        mode = 0 if self.mode is CipherMode.XE else 1
        out = [_HEADER.pack(SNAPSHOT_MAGIC, self.table.n, mode, self.flags.to_byte())]
        for frame in sorted(self.memory):
            out.append(_FRAME_HDR.pack(frame))
            out.append(bytes(self.memory[frame]))
        return b"".join(out)

    def load_snapshot(self, data: bytes) -> None:
        """Replace physical memory with a snapshot taken from a same-config machine."""
        header = parse_snapshot_header(data)
        if header["n"] != self.table.n or header["mode"] is not self.mode:
            raise SnapshotError("snapshot header does not match this machine")
        frames = {}
        pos = _HEADER.size
        rec = _FRAME_HDR.size + PAGE
        if (len(data) - pos) % rec:
            raise SnapshotError("truncated frame record")
        while pos < len(data):
            (frame,) = _FRAME_HDR.unpack_from(data, pos)
            frames[frame] = bytearray(data[pos + _FRAME_HDR.size:pos + rec])
            pos += rec
        self.flags = header["flags"]
        for frame in frames:
            self.frame_owner.setdefault(frame, HYPERVISOR)
        self.memory = frames
        self._plain_cache.clear()


def parse_snapshot_header(data: bytes) -> dict:
    if len(data) < _HEADER.size:
        raise SnapshotError("snapshot too short")
    magic, n, mode, flags = _HEADER.unpack_from(data, 0)
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotError(f"bad magic {magic!r}")
    if mode not in (0, 1):
        raise SnapshotError(f"bad mode byte {mode}")
    return {"n": n, "mode": CipherMode.XE if mode == 0 else CipherMode.XEX,
            "flags": Flags.from_byte(flags)}
