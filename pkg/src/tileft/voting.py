"""Checksum comparison, disagree registers, result bus and majority voting."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import NoSuchTile, OwnChecksumMissing, ReplicationOne
from .validation_memory import (
    ThreadGroup,
    ThreadSnapshot,
    ThreadStatus,
    TileStatus,
    ValidationBank,
    ValidationMemory,
)


class VerdictKind(enum.Enum):
    AGREEMENT = "agreement"
    MINORITY_FAULT = "minority_fault"
    NO_MAJORITY = "no_majority"


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    faulty: frozenset[int] = frozenset()
    majority_csum: int | None = None
    majority_len: int | None = None

    @classmethod
    def agreement(cls, csum: int | None = None, length: int | None = None) -> "Verdict":
        return cls(VerdictKind.AGREEMENT, frozenset(), csum, length)

    @classmethod
    def minority_fault(cls, faulty: Iterable[int], csum: int, length: int) -> "Verdict":
        return cls(VerdictKind.MINORITY_FAULT, frozenset(faulty), csum, length)

    @classmethod
    def no_majority(cls) -> "Verdict":
        return cls(VerdictKind.NO_MAJORITY)

    @property
    def ok(self) -> bool:
        return self.kind is VerdictKind.AGREEMENT

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "faulty": sorted(self.faulty),
            "majority_csum": self.majority_csum,
            "majority_len": self.majority_len,
        }


@dataclass(frozen=True)
class DisagreeMatrix:
    """Rows are disagree masks; ``matrix[i, j]`` is tile i's bit for tile j."""

    tiles: tuple[int, ...]
    rows: tuple[int, ...]

    def __getitem__(self, ij: tuple[int, int]) -> bool:
        i, j = ij
        return bool(self.rows[self.tiles.index(i)] >> j & 1)

    def restricted(self, tiles: Sequence[int]) -> "DisagreeMatrix":
        mask = 0
        for t in tiles:
            mask |= 1 << t
        return DisagreeMatrix(tuple(tiles), tuple(self.rows[self.tiles.index(t)] & mask for t in tiles))

    def is_zero(self) -> bool:
        return not any(self.rows)

    def is_symmetric(self) -> bool:
        return all(self[i, j] == self[j, i] for i in self.tiles for j in self.tiles)

    def as_lists(self) -> list[list[bool]]:
        return [[self[i, j] for j in self.tiles] for i in self.tiles]


def _current(snap: ThreadSnapshot, epoch: int | None) -> bool:
    return snap.valid and TileStatus.BROKEN not in snap.tile_status and (
        epoch is None or snap.epoch == epoch)


def compare_and_mark(vm: ValidationMemory, group: ThreadGroup,
                     siblings: Sequence[ThreadSnapshot], epoch: int | None = None) -> int:
    """Update the owner's disagree bits for the group's members.

    A sibling is marked when its (csum, len) differs from the owner's, or it
    carries FAILURE, lacks CS_VALID, or its tile is BROKEN.  Bits of tiles
    outside the group keep their value.
    """
    own = next((s for s in siblings if s.tile == vm.owner), None)
    if own is None:
        own = vm.snapshot(group.slot)
    if not _current(own, epoch):
        raise OwnChecksumMissing(f"tile {vm.owner} has no valid checksum in slot {group.slot}")
    mask = vm.disagree
    for snap in siblings:
        if snap.tile == vm.owner or snap.tile not in group.members:
            continue
        bit = 1 << snap.tile
        if not _current(snap, epoch) or snap.key != own.key:
            mask |= bit
        else:
            mask &= ~bit
    vm.set_disagree(vm.owner, mask)
    return vm.disagree


def result_bus_select(bank: ValidationBank, sel: int) -> int:
    """Multiplexer readout: the disagree vector of tile ``sel``."""
    if not 0 <= sel < len(bank):
        raise NoSuchTile(f"result bus has no input {sel}")
    return bank[sel].disagree


def disagree_matrix(bank: ValidationBank, tiles: Sequence[int] | None = None) -> DisagreeMatrix:
    tiles = tuple(range(len(bank))) if tiles is None else tuple(tiles)
    full = DisagreeMatrix(tuple(range(len(bank))), tuple(result_bus_select(bank, i) for i in range(len(bank))))
    return full.restricted(tiles)


def mark_deadline_failures(group: ThreadGroup, snapshots: Sequence[ThreadSnapshot],
                           deadline_reached: bool = True,
                           epoch: int | None = None) -> dict[int, ThreadStatus]:
    """Statuses after the barrier deadline, keyed by tile.

    Members without a current checksum gain FAILURE.  Members of BROKEN
    tiles are not waited for and are left untouched.
    """
    out = {}
    for snap in snapshots:
        status = snap.status
        if deadline_reached and TileStatus.BROKEN not in snap.tile_status:
            published = ThreadStatus.CS_VALID in status and (epoch is None or snap.epoch == epoch)
            if not published:
                status = (status | ThreadStatus.FAILURE) & ~ThreadStatus.CS_VALID
        out[snap.tile] = status
    return out


def vote(group: ThreadGroup, snapshots: Sequence[ThreadSnapshot], epoch: int | None = None) -> Verdict:
    """Strict-majority vote over identical (csum, len) pairs.

    BROKEN tiles do not take part.  Failed or silent members form singleton
    classes.  ADDED tiles are compared but do not count toward the majority.
    """
    if group.replication < 2:
        raise ReplicationOne(f"group {group.group_id} runs a single replica")
    participants = [s for s in snapshots if TileStatus.BROKEN not in s.tile_status]
    voters = [s for s in participants if TileStatus.ADDED not in s.tile_status]
    tally: dict[tuple[int, int], int] = {}
    for s in voters:
        if _current(s, epoch):
            tally[s.key] = tally.get(s.key, 0) + 1
    winner = None
    for key, count in tally.items():
        if 2 * count > len(voters):
            winner = key
    if winner is None:
        return Verdict.no_majority()
    faulty = [s.tile for s in participants if not (_current(s, epoch) and s.key == winner)]
    if not faulty:
        return Verdict.agreement(*winner)
    return Verdict.minority_fault(faulty, *winner)
