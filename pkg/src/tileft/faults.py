"""Seeded fault injection for the tile runtime."""
from __future__ import annotations

import csv
import enum
import io
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence, TextIO

from .errors import ConfigError, FaultTimingError, NoSuchSlot, NoSuchTile, TargetInactive
from .validation_memory import STATE_BUFFER_SIZE, ThreadGroup, ThreadStatus, TileStatus


class FaultKind(enum.Enum):
    STATE_BIT_FLIP = "state_bit_flip"
    CHECKSUM_CORRUPT = "checksum_corrupt"
    HANG = "hang"
    CRASH = "crash"
    PERMANENT_DEATH = "permanent_death"


TRANSIENT_KINDS = (FaultKind.STATE_BIT_FLIP, FaultKind.CHECKSUM_CORRUPT, FaultKind.HANG, FaultKind.CRASH)

SCHEDULE_FIELDS = ("trigger_tick", "kind", "target_tile", "target_slot", "payload", "seed")


@dataclass(frozen=True)
class FaultSpec:
    kind: FaultKind
    target_tile: int
    target_slot: int
    trigger_tick: int
    payload: int = 0  # bit index for STATE_BIT_FLIP
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.kind, FaultKind):
            object.__setattr__(self, "kind", FaultKind(self.kind))
        if self.trigger_tick < 1:
            raise ConfigError(f"trigger_tick must be >= 1, got {self.trigger_tick}")
        if self.payload < 0:
            raise ConfigError(f"payload must be non-negative, got {self.payload}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


@dataclass(frozen=True)
class FaultSchedule:
    faults: tuple[FaultSpec, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "faults", tuple(sorted(self.faults, key=lambda f: f.trigger_tick)))

    def __len__(self) -> int:
        return len(self.faults)

    def __iter__(self):
        return iter(self.faults)


def apply_fault(sim, spec: FaultSpec):
    """Inject ``spec`` into ``sim`` at the current tick; returns the log record."""
    from .runtime import LogRecord

    if spec.trigger_tick != sim.now:
        raise FaultTimingError(f"fault due at tick {spec.trigger_tick}, simulator is at {sim.now}")
    if not 0 <= spec.target_tile < len(sim.tiles):
        raise NoSuchTile(f"no tile {spec.target_tile}")
    tile = sim.tiles[spec.target_tile]
    if TileStatus.ACTIVE not in tile.status:
        raise TargetInactive(f"tile {tile.id} is not active ({tile.status!r})")
    slot = spec.target_slot
    if slot not in tile.apps:
        raise NoSuchSlot(f"tile {tile.id} runs nothing in slot {slot}")

    if spec.kind is FaultKind.STATE_BIT_FLIP:
        app = tile.apps[slot]
        if spec.payload >= app.state_bits:
            raise ConfigError(f"bit {spec.payload} outside the {app.state_bits}-bit application state")
        app.flip_bit(spec.payload)
    elif spec.kind is FaultKind.CHECKSUM_CORRUPT:
        tile.corrupt_next[slot] = 1
    elif spec.kind is FaultKind.HANG:
        tile.hung.add(slot)
    elif spec.kind is FaultKind.CRASH:
        tile.crashed.add(slot)
        tile.vm.set_thread_status(tile.id, slot, ThreadStatus.FAILURE)
    elif spec.kind is FaultKind.PERMANENT_DEATH:
        tile.dead = True

    record = LogRecord(sim.now, "injection", tile.vm.threads[slot].group_id, detail=spec.to_dict())
    sim.log.append(record)
    return record


def random_schedule(seed: int, horizon: int, rate: float, groups: Sequence[ThreadGroup] = (),
                    kinds: Sequence[FaultKind] = TRANSIENT_KINDS, tick_unit: int = 1,
                    state_bits: int = 8 * STATE_BUFFER_SIZE) -> FaultSchedule:
    """Bernoulli(rate) fault arrivals per tick over ``horizon`` ticks.

    Each arrival hits one member of a random voting group.  A group takes at
    most one fault per checkpoint window, and never after its last checkpoint
    inside the horizon, so every fault has a checkpoint that can see it.
    Arrivals with no eligible group are dropped.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"rate must be in [0, 1], got {rate}")
    rng = random.Random(seed)
    voting = [g for g in groups if g.replication >= 2]
    used: set[tuple[int, int]] = set()
    faults = []
    for t in range(1, horizon + 1):
        if rng.random() >= rate:
            continue
        eligible = []
        for g in voting:
            interval = g.period // tick_unit
            window = (t - 1) // interval
            if (g.group_id, window) not in used and t <= (horizon // interval) * interval:
                eligible.append((g, window))
        if not eligible:
            continue
        g, window = rng.choice(eligible)
        kind = rng.choice(list(kinds))
        tile = rng.choice(g.members)
        payload = rng.randrange(state_bits) if kind is FaultKind.STATE_BIT_FLIP else 0
        used.add((g.group_id, window))
        faults.append(FaultSpec(kind, tile, g.slot, t, payload, seed))
    return FaultSchedule(tuple(faults), seed)


def dump_schedule(schedule: FaultSchedule, out: TextIO | str | Path) -> None:
    if isinstance(out, (str, Path)):
        with open(out, "w", newline="", encoding="utf-8") as fh:
            return dump_schedule(schedule, fh)
    writer = csv.DictWriter(out, fieldnames=SCHEDULE_FIELDS, lineterminator="\n")
    writer.writeheader()
    for f in schedule:
        writer.writerow(f.to_dict())


def load_schedule(src: TextIO | str | Path) -> FaultSchedule:
    if isinstance(src, (str, Path)):
        with open(src, newline="", encoding="utf-8") as fh:
            return load_schedule(fh)
    reader = csv.DictReader(row for row in src if row.strip() and not row.lstrip().startswith("#"))
    missing = set(SCHEDULE_FIELDS[:4]) - set(reader.fieldnames or ())
    if missing:
        raise ConfigError(f"fault schedule lacks columns {sorted(missing)}")
    faults = []
    for n, row in enumerate(reader, start=2):
        try:
            faults.append(FaultSpec(
                kind=FaultKind(row["kind"].strip()),
                target_tile=int(row["target_tile"]),
                target_slot=int(row["target_slot"]),
                trigger_tick=int(row["trigger_tick"]),
                payload=int(row.get("payload") or 0),
                seed=int(row.get("seed") or 0),
            ))
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"fault schedule line {n}: {exc}") from exc
    return FaultSchedule(tuple(faults))


def schedule_text(schedule: FaultSchedule) -> str:
    buf = io.StringIO()
    dump_schedule(schedule, buf)
    return buf.getvalue()


@dataclass(frozen=True)
class FaultOutcome:
    """What the runtime made of one injected fault."""
    spec: FaultSpec
    group: int
    expected_tick: int  # the slot's next checkpoint at or after injection
    detected_tick: int | None  # first non-Agreement verdict of the group
    identified: bool  # the target was named faulty (or the group failed)
    recovered_tick: int | None  # first Agreement after detection

    @property
    def latency(self) -> int | None:
        return None if self.detected_tick is None else self.detected_tick - self.spec.trigger_tick

    @property
    def on_time(self) -> bool:
        return self.detected_tick == self.expected_tick


def detection_report(sim) -> list[FaultOutcome]:
    """Match every applied injection in ``sim.log`` against the checkpoint verdicts."""
    from .voting import VerdictKind

    outcomes = []
    injections = [r for r in sim.log if r.event == "injection"]
    for rec in injections:
        spec = FaultSpec(**{**rec.detail, "kind": FaultKind(rec.detail["kind"])})
        group = sim.groups[rec.group]
        interval = group.period // sim.unit
        expected = -(-spec.trigger_tick // interval) * interval
        detected = recovered = None
        identified = False
        for cp in sim.log.checkpoints(group.group_id):
            if cp.tick < spec.trigger_tick:
                continue
            if detected is None:
                if cp.verdict.kind is not VerdictKind.AGREEMENT:
                    detected = cp.tick
                    identified = (cp.verdict.kind is VerdictKind.NO_MAJORITY
                                  or spec.target_tile in cp.verdict.faulty)
            elif cp.verdict.kind is VerdictKind.AGREEMENT:
                recovered = cp.tick
                break
        outcomes.append(FaultOutcome(spec, group.group_id, expected, detected, identified, recovered))
    return outcomes


def summarize_outcomes(outcomes: Sequence[FaultOutcome]) -> dict:
    detected = [o for o in outcomes if o.detected_tick is not None]
    latencies = [o.latency for o in detected]
    return {
        "injected": len(outcomes),
        "detected": len(detected),
        "on_time": sum(o.on_time for o in outcomes),
        "identified": sum(o.identified for o in outcomes),
        "recovered": sum(o.recovered_tick is not None for o in outcomes),
        "max_latency": max(latencies) if latencies else None,
    }
