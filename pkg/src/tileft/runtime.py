"""Tile runtime: checkpoint rounds, voting, recovery and supervision.

A tick is one system checkpoint epoch, ``unit`` base time units long, where
``unit`` is the GCD of every tile's global checkpoint frequency.  During a
tick each live tile advances its application replicas by ``unit`` units,
counts down the slots that are due and publishes their checkpoints.  The
control thread then runs the barrier for every due group: deadline marking,
cross comparison, voting and recovery.
"""
from __future__ import annotations

import concurrent.futures
import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

from .errors import (
    ConfigError,
    FaultTimingError,
    InvariantViolation,
    RepairPending,
    SourceInvalid,
    TargetInactive,
    TileNotBroken,
)
from .validation_memory import (
    MAX_TILES,
    NUM_THREADS,
    STATE_BUFFER_SIZE,
    SUPERVISOR,
    ThreadGroup,
    ThreadStatus,
    TileStatus,
    ValidationBank,
    ValidationMemory,
)
from .voting import (
    DisagreeMatrix,
    Verdict,
    VerdictKind,
    compare_and_mark,
    disagree_matrix,
    mark_deadline_failures,
    vote,
)

log = logging.getLogger(__name__)

DETERMINISTIC = "deterministic"
CONCURRENT = "concurrent"


class Application(Protocol):
    state_bits: int

    def advance(self, units: int = 1) -> None: ...

    def serialize(self) -> bytes: ...

    def clone(self) -> "Application": ...

    def flip_bit(self, index: int) -> None: ...

    def output_bytes(self) -> bytes: ...


class CounterApp:
    """Tiny deterministic replica: a 512-bit affine recurrence plus a counter.

    Every step is a bijection of the state, so a flipped bit never heals.
    """

    WIDTH = 512
    _MASK = (1 << WIDTH) - 1
    _MULT = (0x9E3779B97F4A7C15 << 448) | 0xD1B54A32D192ED03  # odd

    def __init__(self, seed: int = 0):
        self.value = (seed * 0x2545F4914F6CDD1D + 1) & self._MASK
        self.counter = 0
        self.state_bits = self.WIDTH

    def advance(self, units: int = 1) -> None:
        for _ in range(units):
            self.counter += 1
            self.value = (self.value * self._MULT + self.counter) & self._MASK

    def serialize(self) -> bytes:
        return self.counter.to_bytes(8, "little") + self.value.to_bytes(self.WIDTH // 8, "little")

    def clone(self) -> "CounterApp":
        other = CounterApp.__new__(CounterApp)
        other.__dict__.update(self.__dict__)
        return other

    def flip_bit(self, index: int) -> None:
        self.value ^= 1 << (index % self.WIDTH)

    def output_bytes(self) -> bytes:
        return self.serialize()


@dataclass
class SimulatorConfig:
    tile_count: int = 3
    groups: Sequence[ThreadGroup] = ()
    mode: str = DETERMINISTIC
    barrier_deadline: float = 30.0  # seconds, concurrent mode only
    repair_latency: int = 0
    broken_threshold: int = 3
    seed: int = 0
    num_threads: int = NUM_THREADS
    state_buffer_size: int = STATE_BUFFER_SIZE
    protected: bool = True
    auto_rejoin: bool = True

    def validate(self) -> None:
        if not 1 <= self.tile_count <= MAX_TILES:
            raise ConfigError(f"tile_count must be in [1, {MAX_TILES}], got {self.tile_count}")
        if self.mode not in (DETERMINISTIC, CONCURRENT):
            raise ConfigError(f"mode must be {DETERMINISTIC!r} or {CONCURRENT!r}, got {self.mode!r}")
        if self.broken_threshold < 1:
            raise ConfigError("broken_threshold must be at least 1")
        if self.repair_latency < 0:
            raise ConfigError("repair_latency must be non-negative")
        for g in self.groups:
            bad = [m for m in g.members if not 0 <= m < self.tile_count]
            if bad:
                raise ConfigError(f"group {g.group_id} names missing tiles {bad}")


@dataclass
class TileState:
    id: int
    vm: ValidationMemory
    apps: dict[int, Application] = field(default_factory=dict)
    fault_counts: dict[int, int] = field(default_factory=dict)
    dead: bool = False
    hung: set[int] = field(default_factory=set)
    crashed: set[int] = field(default_factory=set)
    corrupt_next: dict[int, int] = field(default_factory=dict)
    broken_tick: int | None = None
    pending_added: set[int] = field(default_factory=set)

    @property
    def status(self) -> TileStatus:
        return self.vm.status

    @property
    def runs(self) -> bool:
        return TileStatus.BROKEN not in self.vm.status and not self.dead


@dataclass
class LogRecord:
    tick: int
    event: str
    group: int | None = None
    verdict: Verdict | None = None
    matrix: tuple[int, ...] | None = None
    actions: tuple[str, ...] = ()
    detail: dict | None = None

    def to_dict(self) -> dict:
        out = {"tick": self.tick, "event": self.event}
        if self.group is not None:
            out["group"] = self.group
        if self.verdict is not None:
            out["verdict"] = self.verdict.to_dict()
        if self.matrix is not None:
            out["matrix"] = list(self.matrix)
        if self.actions:
            out["actions"] = list(self.actions)
        if self.detail:
            out["detail"] = self.detail
        return out


class CheckpointLog:
    """Append-only event log; appends are serialized by a lock."""

    def __init__(self):
        self.records: list[LogRecord] = []
        self._lock = threading.Lock()

    def __getstate__(self):
        return {"records": list(self.records)}

    def __setstate__(self, state):
        self.records = state["records"]
        self._lock = threading.Lock()

    def append(self, record: LogRecord) -> None:
        with self._lock:
            if self.records and record.tick < self.records[-1].tick:
                raise InvariantViolation(f"log tick went backwards: {record.tick} < {self.records[-1].tick}")
            self.records.append(record)

    def __iter__(self):
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def checkpoints(self, group: int | None = None) -> list[LogRecord]:
        return [r for r in self.records if r.event == "checkpoint" and (group is None or r.group == group)]

    def dumps(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"
                       for r in self.records)


AppFactory = Callable[[int, ThreadGroup], Application]


class Simulator:
    def __init__(self, config: SimulatorConfig, app_factory: AppFactory, faults=None):
        config.validate()
        self.config = config
        self.bank = ValidationBank(config.tile_count, config.num_threads, config.state_buffer_size)
        for g in sorted(config.groups, key=lambda g: g.group_id):
            self.bank.register_thread_group(g)
        self.groups: dict[int, ThreadGroup] = dict(sorted(self.bank.groups.items()))
        self.unit = self.bank.system_tick_unit()
        self.tiles = [TileState(i, self.bank[i]) for i in range(config.tile_count)]
        for g in self.groups.values():
            for t in g.members:
                self.tiles[t].apps[g.slot] = app_factory(t, g)
                self.tiles[t].fault_counts[g.slot] = 0
        self.now = 0
        self.log = CheckpointLog()
        self.last_agreed = {gid: (0, self.tiles[g.members[0]].apps[g.slot].clone())
                            for gid, g in self.groups.items()}
        self.last_majority: dict[int, tuple[int, ...]] = {gid: g.members for gid, g in self.groups.items()}
        self.failed_groups: set[int] = set()
        self._faults = sorted(faults.faults if faults is not None else (), key=lambda f: f.trigger_tick)
        self._fault_pos = 0
        self._init_runtime()

    def _init_runtime(self) -> None:
        self._executor = None
        self._barrier_lock = threading.Lock()
        self._barrier_closed = False

    def __getstate__(self):
        state = dict(self.__dict__)
        for key in ("_executor", "_barrier_lock", "_barrier_closed"):
            state.pop(key)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._init_runtime()

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def schedule_faults(self, faults) -> None:
        """Replace the pending faults; all must lie after the current tick."""
        pending = sorted(faults.faults if hasattr(faults, "faults") else faults, key=lambda f: f.trigger_tick)
        if pending and pending[0].trigger_tick <= self.now:
            raise FaultTimingError(f"fault at tick {pending[0].trigger_tick} is not after tick {self.now}")
        self._faults = pending
        self._fault_pos = 0

    # -- main loop ---------------------------------------------------------

    def run(self, ticks: int) -> CheckpointLog:
        try:
            for _ in range(ticks):
                self.tick()
        finally:
            self.close()
        return self.log

    def tick(self) -> list[tuple[ThreadGroup, Verdict]]:
        if self.config.auto_rejoin:
            for tile in self.tiles:
                if (TileStatus.BROKEN in tile.status
                        and self.now + 1 - tile.broken_tick >= self.config.repair_latency):
                    try:
                        self.rejoin_tile(tile.id)
                    except SourceInvalid as exc:
                        self.log.append(LogRecord(self.now + 1, "rejoin_failed", detail={"tile": tile.id,
                                                                                          "reason": str(exc)}))
        self.now += 1
        t = self.now
        from .faults import apply_fault  # runtime <-> faults are mutually aware

        while self._fault_pos < len(self._faults) and self._faults[self._fault_pos].trigger_tick <= t:
            spec = self._faults[self._fault_pos]
            self._fault_pos += 1
            if spec.trigger_tick < t:
                raise FaultTimingError(f"fault {spec} scheduled in the past (now {t})")
            try:
                apply_fault(self, spec)
            except TargetInactive as exc:
                self.log.append(LogRecord(t, "injection_skipped", detail={**spec.to_dict(), "reason": str(exc)}))

        due = self._run_tiles(t)
        verdicts: list[tuple[ThreadGroup, Verdict]] = []
        if not self.config.protected:
            return verdicts
        due_groups = sorted({self.bank[tile].threads[slot].group_id
                             for tile, slots in due.items() for slot in slots})
        for gid in due_groups:
            verdicts.extend(self._round(self.groups[gid], t))
        return verdicts

    def _run_tiles(self, t: int) -> dict[int, set[int]]:
        self._barrier_closed = False
        if self.config.mode == DETERMINISTIC:
            return {tile.id: self._run_tile(tile, t) for tile in self.tiles}
        if self._executor is None:
            self._executor = concurrent.futures.ThreadPoolExecutor(
                max_workers=len(self.tiles), thread_name_prefix="tile")
        futures = {tile.id: self._executor.submit(self._run_tile, tile, t) for tile in self.tiles}
        _, late = concurrent.futures.wait(futures.values(), timeout=self.config.barrier_deadline)
        with self._barrier_lock:
            self._barrier_closed = True
        if late:
            log.warning("tick %d: %d tile(s) missed the barrier deadline", t, len(late))
        return {tid: f.result() for tid, f in futures.items()}

    def _run_tile(self, tile: TileState, t: int) -> set[int]:
        """Work phase of one tile; only ever writes the tile's own memory."""
        if not tile.runs:
            return set()
        for slot, app in tile.apps.items():
            if slot not in tile.crashed:
                app.advance(self.unit)
        vm = tile.vm
        gf = vm.global_checkpoint_freq  # 0 on a tile outside every group
        if not self.config.protected or not gf or (t * self.unit) % gf:
            return set()
        due = {slot for slot in vm.registered_slots() if vm.countdown(tile.id, slot)}
        for slot in sorted(due):
            self._publish(tile, slot, t)
        return due

    def _publish(self, tile: TileState, slot: int, t: int) -> None:
        if slot in tile.crashed or not tile.runs:
            return
        if slot in tile.hung:
            tile.hung.discard(slot)
            return
        data = tile.apps[slot].serialize()
        with self._barrier_lock:
            if self._barrier_closed and self.config.mode == CONCURRENT:
                return
            tile.vm.publish(tile.id, slot, data, epoch=t)
            mask = tile.corrupt_next.pop(slot, 0)
            if mask:
                tile.vm.corrupt_checksum(tile.id, slot, mask)

    # -- checkpoint round --------------------------------------------------

    def _round(self, group: ThreadGroup, t: int, retry: bool = False) -> list[tuple[ThreadGroup, Verdict]]:
        if retry:
            for m in group.members:
                if self.tiles[m].runs:
                    self._publish(self.tiles[m], group.slot, t)
        if group.replication < 2:
            self.log.append(LogRecord(t, "unchecked", group.group_id))
            return []
        slot = group.slot
        with self.bank.barrier():
            snaps = self.bank.snapshots(group)
            for snap, status in zip(snaps, mark_deadline_failures(group, snaps, True, epoch=t).values()):
                if status != snap.status:
                    self.bank[snap.tile].set_thread_status(SUPERVISOR, slot, status)
            for m in group.members:
                tile = self.tiles[m]
                own = tile.vm.snapshot(slot)
                if tile.runs and own.valid and own.epoch == t:
                    siblings = [self.bank.read_sibling(j, slot, reader=m) for j in group.members]
                    compare_and_mark(tile.vm, group, siblings, epoch=t)
            snaps = self.bank.snapshots(group)
        matrix = disagree_matrix(self.bank, group.members)
        verdict = vote(group, snaps, epoch=t)
        actions = self.handle_verdict(group, verdict, retry=retry)
        self.log.append(LogRecord(t, "checkpoint", group.group_id, verdict, matrix.rows, tuple(actions),
                                  {"retry": True} if retry else None))
        out = [(group, verdict)]
        if verdict.kind is VerdictKind.NO_MAJORITY and not retry:
            out.extend(self._round(group, t, retry=True))
        return out

    def handle_verdict(self, group: ThreadGroup, verdict: Verdict, retry: bool = False) -> list[str]:
        """Apply the recovery policy for one verdict; returns action labels.

        A NoMajority verdict rolls the group back and re-executes it here;
        the caller runs the retry barrier.
        """
        slot, gid = group.slot, group.group_id
        participants = [m for m in group.members if TileStatus.BROKEN not in self.tiles[m].status]
        actions: list[str] = []
        if verdict.kind is VerdictKind.NO_MAJORITY:
            if retry:
                self.failed_groups.add(gid)
                actions.append("group_failed")
                for m in participants:
                    if ThreadStatus.FAILURE in self.bank[m].threads[slot].status:
                        actions.extend(self._count_fault(self.tiles[m], group, resync=False))
            else:
                actions.extend(self._rollback(group))
            return actions

        majority = [m for m in participants if m not in verdict.faulty]
        self.last_majority[gid] = tuple(majority)
        for m in majority:
            tile = self.tiles[m]
            tile.fault_counts[slot] = 0
            if gid in tile.pending_added:
                tile.pending_added.discard(gid)
                if not tile.pending_added and TileStatus.ADDED in tile.status:
                    tile.vm.set_status(m, tile.status & ~TileStatus.ADDED)
                    actions.append(f"added_cleared:{m}")
        keeper = self._choose_source(group, allowed=majority)
        if keeper is not None:
            self.last_agreed[gid] = (self.now, self.tiles[keeper].apps[slot].clone())
        for m in sorted(verdict.faulty):
            actions.extend(self._count_fault(self.tiles[m], group))
        return actions

    def _count_fault(self, tile: TileState, group: ThreadGroup, resync: bool = True) -> list[str]:
        slot = group.slot
        tile.fault_counts[slot] = tile.fault_counts.get(slot, 0) + 1
        if tile.fault_counts[slot] >= self.config.broken_threshold:
            tile.vm.set_status(SUPERVISOR, TileStatus.BROKEN)
            tile.broken_tick = self.now
            tile.pending_added.clear()
            return [f"broken:{tile.id}"]
        if not resync:
            return []
        actions = [f"reset:{tile.id}"]
        tile.vm.set_status(SUPERVISOR, (tile.status | TileStatus.RESET) & ~TileStatus.BROKEN)
        source = self._choose_source(group, exclude={tile.id}, allowed=self.last_majority[group.group_id])
        if tile.dead:
            # dead hardware takes no state transfer; the fault count will break it
            actions.append(f"sync_failed:{tile.id}")
        elif source is None:
            actions.append(f"sync_deferred:{tile.id}")
        else:
            self.sync(tile.id, source, slot)
            actions.append(f"sync:{source}->{tile.id}")
        tile.vm.set_status(SUPERVISOR, tile.status & ~TileStatus.RESET)
        return actions

    def _rollback(self, group: ThreadGroup) -> list[str]:
        agreed_tick, agreed_app = self.last_agreed[group.group_id]
        units = (self.now - agreed_tick) * self.unit
        actions = [f"rollback:{agreed_tick}"]
        for m in group.members:
            tile = self.tiles[m]
            if TileStatus.BROKEN in tile.status:
                continue
            tile.apps[group.slot] = agreed_app.clone()
            tile.crashed.discard(group.slot)
            tile.hung.discard(group.slot)
            if not tile.dead:
                tile.apps[group.slot].advance(units)
        actions.append(f"reexecute:{units}")
        return actions

    def _choose_source(self, group: ThreadGroup, exclude: Iterable[int] = (),
                       allowed: Iterable[int] | None = None) -> int | None:
        """Healthy member to copy state from, preferring the latest majority."""
        exclude = set(exclude)
        allowed = None if allowed is None else set(allowed)
        preferred = self.last_majority.get(group.group_id, ())
        candidates = []
        for m in group.members:
            if m in exclude or (allowed is not None and m not in allowed):
                continue
            tile = self.tiles[m]
            snap = tile.vm.snapshot(group.slot)
            if (not tile.runs or group.slot in tile.crashed or not snap.valid
                    or snap.tile_status & (TileStatus.RESET | TileStatus.BROKEN)):
                continue
            candidates.append((TileStatus.ADDED in snap.tile_status, m not in preferred, m))
        return min(candidates)[2] if candidates else None

    # -- recovery primitives ----------------------------------------------

    def sync(self, target: int, source: int, slot: int) -> None:
        """Copy a healthy sibling's checkpoint and live state into ``target``."""
        src = self.tiles[source]
        snap = self.bank.read_sibling(source, slot)
        if (not snap.valid or snap.tile_status & (TileStatus.RESET | TileStatus.BROKEN)
                or not src.runs or slot in src.crashed):
            raise SourceInvalid(f"tile {source} cannot serve slot {slot}")
        dst = self.tiles[target]
        if dst.dead:
            raise TargetInactive(f"tile {target} is dead and cannot be resynced")
        dst.apps[slot] = src.apps[slot].clone()
        info = dst.vm.load_slot(target, slot, snap.data, epoch=snap.epoch)
        dst.crashed.discard(slot)
        dst.hung.discard(slot)
        dst.corrupt_next.pop(slot, None)
        if (info.csum, info.len) != snap.key:
            raise InvariantViolation(f"resync of tile {target} slot {slot} produced a different checksum")

    def rejoin_tile(self, tile_id: int) -> None:
        """Bring a repaired BROKEN tile back as ADDED|ACTIVE for the next tick."""
        tile = self.tiles[tile_id]
        if TileStatus.BROKEN not in tile.status:
            raise TileNotBroken(f"tile {tile_id} is not broken")
        if self.now + 1 - tile.broken_tick < self.config.repair_latency:
            raise RepairPending(f"tile {tile_id} broke at tick {tile.broken_tick}; "
                                f"repair takes {self.config.repair_latency} ticks")
        plan = []
        for slot in tile.vm.registered_slots():
            group = self.groups[tile.vm.threads[slot].group_id]
            source = self._choose_source(group, exclude={tile_id})
            if source is None:
                raise SourceInvalid(f"no healthy member of group {group.group_id} to resync from")
            plan.append((group, source))
        tile.dead = False
        tile.hung.clear()
        tile.crashed.clear()
        tile.corrupt_next.clear()
        tile.fault_counts = {slot: 0 for slot in tile.fault_counts}
        tile.vm.set_status(tile_id, TileStatus.ACTIVE | TileStatus.ADDED)
        for group, source in plan:
            self.sync(tile_id, source, group.slot)
            tile.vm.set_next_check(tile_id, group.slot, self._aligned_next_check(source, tile_id, group.slot))
        tile.pending_added = {g.group_id for g, _ in plan}
        if not tile.pending_added:
            tile.vm.set_status(tile_id, TileStatus.ACTIVE)
        self.log.append(LogRecord(self.now + 1, "rejoin", detail={
            "tile": tile_id, "sources": {str(g.group_id): s for g, s in plan}}))

    def _aligned_next_check(self, source: int, target: int, slot: int) -> int:
        elapsed = self.now * self.unit
        src_f = self.bank[source].global_checkpoint_freq
        dst_f = self.bank[target].global_checkpoint_freq
        next_time = (elapsed // src_f + self.bank[source].threads[slot].next_check) * src_f
        return next_time // dst_f - elapsed // dst_f

    # -- supervision -------------------------------------------------------

    def supervisor_poll(self) -> tuple[DisagreeMatrix, list[TileStatus]]:
        return disagree_matrix(self.bank), [vm.status for vm in self.bank]

    def outputs(self) -> dict[int, dict[int, bytes]]:
        return {tile.id: {slot: app.output_bytes() for slot, app in tile.apps.items()}
                for tile in self.tiles}


def counter_factory(seed: int = 0) -> AppFactory:
    """Replica factory for :class:`CounterApp`; replicas of a group share a seed."""
    return lambda tile, group: CounterApp(seed * 1000003 + group.group_id)
