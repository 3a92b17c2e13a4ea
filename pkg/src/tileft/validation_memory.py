"""Per-tile validation memory: status registers, thread slots and checksums.

Every tile owns one :class:`ValidationMemory`.  Only the owner writes it;
siblings observe it through :meth:`ValidationBank.read_sibling`, which hands
out frozen snapshots.  A supervisor (``SUPERVISOR``) may flip status flags on
a tile it has judged faulty, but never publishes checkpoint data.
"""
from __future__ import annotations

import contextlib
import enum
import math
import threading
import zlib
from collections import Counter
from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, Iterator, Sequence

from .errors import (
    BufferOverflow,
    GroupIdInUse,
    NoSuchSlot,
    NoSuchTile,
    NotOwner,
    RemoteReadOutsideBarrier,
    SlotOccupied,
    TooManyGroups,
)

STATE_BUFFER_SIZE = 4096
NUM_THREADS = 16
MAX_TILES = 32
MAX_GROUPS = 32

SUPERVISOR = -1


class TileStatus(enum.IntFlag):
    NONE = 0
    ACTIVE = 1
    ADDED = 1 << 1
    RESET = 1 << 2
    BROKEN = 1 << 3


class ThreadStatus(enum.IntFlag):
    NONE = 0
    CS_VALID = 1
    FAILURE = 1 << 1


def crc32(data: bytes | bytearray | memoryview, value: int = 0) -> int:
    """Reflected CRC-32 (poly 0xEDB88320, init and final xor 0xFFFFFFFF).

    ``value`` continues a running checksum, so chunks can be fed in order.
    """
    return zlib.crc32(data, value) & 0xFFFFFFFF


def gcd(a: int, b: int) -> int:
    while b:
        a, b = b, a % b
    return a


@dataclass(frozen=True)
class ThreadGroup:
    """A replicated application thread running in ``slot`` on every member."""

    group_id: int
    members: tuple[int, ...]
    period: int
    slot: int = 0

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(sorted(set(self.members))))
        if not self.members:
            raise ValueError("thread group needs at least one member")
        if self.period < 1:
            raise ValueError(f"period must be positive, got {self.period}")
        if self.slot < 0:
            raise ValueError(f"slot must be non-negative, got {self.slot}")

    @property
    def replication(self) -> int:
        return len(self.members)


@dataclass
class ThreadInfo:
    checkpoint_interval: int = 1
    next_check: int = 1
    status: ThreadStatus = ThreadStatus.NONE
    csum: int = 0
    len: int = 0
    state: bytearray = field(default_factory=lambda: bytearray(STATE_BUFFER_SIZE))
    # bookkeeping beyond the raw record
    group_id: int | None = None
    period: int = 0
    epoch: int = -1  # tick of the last publish

    @property
    def data(self) -> bytes:
        return bytes(self.state[: self.len])


@dataclass(frozen=True)
class ThreadSnapshot:
    """Read-only copy of one thread slot plus the owning tile's status."""

    tile: int
    slot: int
    tile_status: TileStatus
    status: ThreadStatus
    csum: int
    len: int
    checkpoint_interval: int
    next_check: int
    epoch: int
    data: bytes

    @property
    def valid(self) -> bool:
        return ThreadStatus.CS_VALID in self.status and ThreadStatus.FAILURE not in self.status

    @property
    def key(self) -> tuple[int, int]:
        return (self.csum, self.len)


class ValidationMemory:
    """Owner-writable record of one tile.

    Mutators take the id of the writing party and raise :class:`NotOwner`
    for anyone else.  Accepted writes are counted per writer in ``audit``.
    """

    def __init__(self, owner: int, num_threads: int = NUM_THREADS,
                 state_buffer_size: int = STATE_BUFFER_SIZE):
        self.owner = owner
        self.state_buffer_size = state_buffer_size
        self.status = TileStatus.ACTIVE
        self.member_of_thread_group = 0
        self.disagree = 0
        self.threads = [ThreadInfo(state=bytearray(state_buffer_size)) for _ in range(num_threads)]
        self.global_checkpoint_freq = 0  # 0 until the first group registers
        self.dynamic: dict[str, object] = {}
        self.audit: Counter[int] = Counter()
        self._lock = threading.Lock()

    def __deepcopy__(self, memo):
        clone = ValidationMemory.__new__(ValidationMemory)
        memo[id(self)] = clone
        clone.owner = self.owner
        clone.state_buffer_size = self.state_buffer_size
        clone.status = self.status
        clone.member_of_thread_group = self.member_of_thread_group
        clone.disagree = self.disagree
        clone.threads = [
            ThreadInfo(t.checkpoint_interval, t.next_check, t.status, t.csum, t.len,
                       bytearray(t.state), t.group_id, t.period, t.epoch)
            for t in self.threads
        ]
        clone.global_checkpoint_freq = self.global_checkpoint_freq
        clone.dynamic = dict(self.dynamic)
        clone.audit = Counter(self.audit)
        clone._lock = threading.Lock()
        return clone

    # -- access discipline -------------------------------------------------

    def _write(self, writer: int, supervisor_ok: bool = False) -> None:
        if writer != self.owner and not (supervisor_ok and writer == SUPERVISOR):
            raise NotOwner(f"tile {writer} may not write validation memory of tile {self.owner}")
        self.audit[writer] += 1

    def _slot(self, slot: int) -> ThreadInfo:
        if not 0 <= slot < len(self.threads):
            raise NoSuchSlot(f"slot {slot} out of range for tile {self.owner}")
        return self.threads[slot]

    # -- registration ------------------------------------------------------

    def join_group(self, writer: int, group: ThreadGroup) -> None:
        self._write(writer)
        info = self._slot(group.slot)
        if info.group_id is not None:
            raise SlotOccupied(f"slot {group.slot} on tile {self.owner} runs group {info.group_id}")
        old = self.global_checkpoint_freq
        self.global_checkpoint_freq = group.period if old == 0 else gcd(old, group.period)
        self.member_of_thread_group |= 1 << group.group_id
        info.group_id = group.group_id
        info.period = group.period
        info.checkpoint_interval = group.period // self.global_checkpoint_freq
        info.next_check = info.checkpoint_interval
        if self.global_checkpoint_freq != old:
            for other in self.threads:
                if other.group_id is None or other is info:
                    continue
                # registration precedes execution, so re-arm from time zero
                other.checkpoint_interval = other.period // self.global_checkpoint_freq
                other.next_check = other.checkpoint_interval

    def registered_slots(self) -> list[int]:
        return [i for i, t in enumerate(self.threads) if t.group_id is not None]

    # -- checkpoint data ---------------------------------------------------

    def publish(self, writer: int, slot: int, state: bytes, epoch: int = 0) -> ThreadInfo:
        self._write(writer)
        info = self._slot(slot)
        n = len(state)
        if n > self.state_buffer_size:
            raise BufferOverflow(f"{n} bytes exceed the {self.state_buffer_size}-byte state buffer")
        info.state[:n] = state
        info.len = n
        info.csum = crc32(state)
        info.epoch = epoch
        info.status = (info.status | ThreadStatus.CS_VALID) & ~ThreadStatus.FAILURE
        return info

    def corrupt_checksum(self, writer: int, slot: int, mask: int = 1) -> None:
        self._write(writer)
        info = self._slot(slot)
        info.csum ^= mask

    def load_slot(self, writer: int, slot: int, data: bytes, epoch: int) -> ThreadInfo:
        """Overwrite a slot with checkpoint data fetched from a sibling."""
        return self.publish(writer, slot, data, epoch)

    def set_thread_status(self, writer: int, slot: int, status: ThreadStatus) -> None:
        self._write(writer, supervisor_ok=True)
        if ThreadStatus.FAILURE in status:
            status &= ~ThreadStatus.CS_VALID
        self._slot(slot).status = status

    def countdown(self, writer: int, slot: int) -> bool:
        """Decrement ``next_check``; on reaching zero re-arm it and return True."""
        self._write(writer)
        info = self._slot(slot)
        info.next_check -= 1
        if info.next_check <= 0:
            info.next_check = info.checkpoint_interval
            return True
        return False

    def set_next_check(self, writer: int, slot: int, value: int) -> None:
        self._write(writer)
        info = self._slot(slot)
        info.next_check = max(0, min(value, info.checkpoint_interval))

    # -- tile-level registers ----------------------------------------------

    def set_disagree(self, writer: int, mask: int) -> None:
        self._write(writer)
        self.disagree = (mask & ~(1 << self.owner)) & 0xFFFFFFFF

    def set_status(self, writer: int, status: TileStatus) -> None:
        self._write(writer, supervisor_ok=True)
        if TileStatus.BROKEN in status and TileStatus.ACTIVE in status:
            raise ValueError("a tile cannot be ACTIVE and BROKEN at once")
        self.status = status

    def snapshot(self, slot: int) -> ThreadSnapshot:
        with self._lock:
            info = self._slot(slot)
            return ThreadSnapshot(
                tile=self.owner, slot=slot, tile_status=self.status, status=info.status,
                csum=info.csum, len=info.len, checkpoint_interval=info.checkpoint_interval,
                next_check=info.next_check, epoch=info.epoch, data=info.data,
            )


class ValidationBank:
    """All tiles' validation memories, as seen over the shared interconnect."""

    def __init__(self, tile_count: int, num_threads: int = NUM_THREADS,
                 state_buffer_size: int = STATE_BUFFER_SIZE):
        if not 1 <= tile_count <= MAX_TILES:
            raise ValueError(f"tile_count must be in [1, {MAX_TILES}], got {tile_count}")
        self.memories = [ValidationMemory(i, num_threads, state_buffer_size) for i in range(tile_count)]
        self.groups: dict[int, ThreadGroup] = {}
        self._barrier_open = False

    def __len__(self) -> int:
        return len(self.memories)

    def __getitem__(self, tile: int) -> ValidationMemory:
        if not 0 <= tile < len(self.memories):
            raise NoSuchTile(f"no tile {tile}")
        return self.memories[tile]

    def __iter__(self) -> Iterator[ValidationMemory]:
        return iter(self.memories)

    def register_thread_group(self, group: ThreadGroup) -> None:
        if not 0 <= group.group_id < MAX_GROUPS:
            raise TooManyGroups(f"group id {group.group_id} outside [0, {MAX_GROUPS - 1}]")
        if group.group_id in self.groups:
            raise GroupIdInUse(f"group id {group.group_id} already registered")
        for tile in group.members:
            vm = self[tile]
            if vm._slot(group.slot).group_id is not None:
                raise SlotOccupied(f"slot {group.slot} on tile {tile} is taken")
        for tile in group.members:
            self.memories[tile].join_group(tile, group)
        self.groups[group.group_id] = group

    @contextlib.contextmanager
    def barrier(self) -> Iterator[None]:
        """Window during which tiles may read each other's memory."""
        self._barrier_open = True
        try:
            yield
        finally:
            self._barrier_open = False

    def read_sibling(self, tile: int, slot: int, reader: int | None = None) -> ThreadSnapshot:
        """Snapshot ``slot`` of ``tile``.

        ``reader`` identifies the requesting tile; remote reads by a tile are
        only permitted inside :meth:`barrier`.  ``None`` is the supervisor.
        """
        vm = self[tile]
        if reader is not None and reader != tile and not self._barrier_open:
            raise RemoteReadOutsideBarrier(f"tile {reader} read tile {tile} between barriers")
        return vm.snapshot(slot)

    def snapshots(self, group: ThreadGroup, reader: int | None = None) -> list[ThreadSnapshot]:
        return [self.read_sibling(t, group.slot, reader) for t in group.members]

    def system_tick_unit(self) -> int:
        """GCD of all tiles' global checkpoint frequencies (1 if none registered)."""
        freqs = [vm.global_checkpoint_freq for vm in self.memories if vm.global_checkpoint_freq]
        return reduce(math.gcd, freqs) if freqs else 1


def fold_gcd(periods: Iterable[int]) -> int:
    return reduce(math.gcd, periods)


def register_thread_group(vm_set: ValidationBank, group: ThreadGroup) -> ValidationBank:
    vm_set.register_thread_group(group)
    return vm_set


def member_mask(tiles: Sequence[int]) -> int:
    mask = 0
    for t in tiles:
        mask |= 1 << t
    return mask
