"""Scenario files: INI-style key/value descriptions of a simulation.

Example::

    [scenario]
    tile_count = 3
    mode = deterministic        ; or concurrent
    seed = 7
    ticks = 60                  ; optional for miri, derived from frames
    repair_latency = 0
    broken_threshold = 3
    barrier_deadline = 30       ; seconds, concurrent mode
    protected = true
    faults = faults.csv         ; relative to this file, or "random"
    fault_rate = 0.05           ; only with faults = random
    fault_seed = 1
    fault_kinds = state_bit_flip,hang

    [workload]
    kind = miri                 ; or counter
    frames = 60
    dims = 64x64
    postproc_runs = 6000
    saturation_fraction = 0.01

    [group.0]
    members = 0,1,2
    period = 2
    replication = 3             ; optional, must equal the member count
    slot = 0
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .faults import TRANSIENT_KINDS, FaultKind, FaultSchedule, load_schedule, random_schedule
from .runtime import AppFactory, CounterApp, Simulator, SimulatorConfig, counter_factory
from .validation_memory import ThreadGroup, fold_gcd
from .workload import SATURATION_FRACTION, FrameSource, MiriApp, miri_state_bits

SEED_ENV = "TILEFT_SEED"


@dataclass
class WorkloadSpec:
    kind: str = "counter"
    frames: int = 60
    dims: tuple[int, int] = (32, 32)
    postproc_runs: int = 0
    saturation_fraction: float = SATURATION_FRACTION


@dataclass
class Scenario:
    config: SimulatorConfig
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    ticks: int = 100
    faults: FaultSchedule = field(default_factory=FaultSchedule)

    @property
    def tick_unit(self) -> int:
        return fold_gcd(g.period for g in self.config.groups) if self.config.groups else 1


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def _dims(text: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"dims must look like 256x256, got {text!r}") from None
    return h, w


def parse_scenario(text: str, base_dir: str | Path = ".", faults_path: str | Path | None = None,
                   seed_override: int | None = None) -> Scenario:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable scenario: {exc}") from exc
    if not parser.has_section("scenario"):
        raise ConfigError("scenario file needs a [scenario] section")
    sc = parser["scenario"]
    try:
        groups = []
        for name in parser.sections():
            if not name.startswith("group."):
                continue
            sec = parser[name]
            group = ThreadGroup(
                group_id=int(name.split(".", 1)[1]),
                members=_ints(sec["members"]),
                period=sec.getint("period"),
                slot=sec.getint("slot", 0),
            )
            if "replication" in sec and sec.getint("replication") != group.replication:
                raise ConfigError(f"[{name}] replication {sec['replication']} != {group.replication} members")
            groups.append(group)
        seed = sc.getint("seed", 0) if seed_override is None else seed_override
        config = SimulatorConfig(
            tile_count=sc.getint("tile_count", 3),
            groups=groups,
            mode=sc.get("mode", "deterministic"),
            barrier_deadline=sc.getfloat("barrier_deadline", 30.0),
            repair_latency=sc.getint("repair_latency", 0),
            broken_threshold=sc.getint("broken_threshold", 3),
            seed=seed,
            protected=sc.getboolean("protected", True),
            auto_rejoin=sc.getboolean("auto_rejoin", True),
        )
        wl = WorkloadSpec()
        if parser.has_section("workload"):
            w = parser["workload"]
            wl = WorkloadSpec(
                kind=w.get("kind", "counter"),
                frames=w.getint("frames", 60),
                dims=_dims(w.get("dims", "32x32")),
                postproc_runs=w.getint("postproc_runs", 0),
                saturation_fraction=w.getfloat("saturation_fraction", SATURATION_FRACTION),
            )
        if wl.kind not in ("counter", "miri"):
            raise ConfigError(f"unknown workload kind {wl.kind!r}")
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad scenario value: {exc}") from exc
    config.validate()

    scenario = Scenario(config, wl)
    unit = scenario.tick_unit
    if "ticks" in sc:
        scenario.ticks = sc.getint("ticks")
    elif wl.kind == "miri":
        if wl.frames % unit:
            raise ConfigError(f"frames ({wl.frames}) must be a multiple of the tick unit ({unit})")
        scenario.ticks = wl.frames // unit

    source = faults_path if faults_path is not None else sc.get("faults", "").strip()
    if source == "random":
        try:
            kinds = tuple(FaultKind(k) for k in _split(sc.get("fault_kinds", "")))
            fault_seed, rate = sc.getint("fault_seed", seed), sc.getfloat("fault_rate", 0.0)
        except ValueError as exc:
            raise ConfigError(f"bad random fault settings: {exc}") from exc
        scenario.faults = random_schedule(
            fault_seed, scenario.ticks, rate, groups, kinds or TRANSIENT_KINDS, tick_unit=unit,
            state_bits=miri_state_bits(wl.dims) if wl.kind == "miri" else CounterApp.WIDTH)
    elif source:
        path = Path(source)
        if not path.is_absolute():
            path = Path(base_dir) / path
        if not path.exists():
            raise ConfigError(f"fault schedule {path} not found")
        scenario.faults = load_schedule(path)
    return scenario


def _split(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def load_scenario(path: str | Path, faults_path: str | Path | None = None) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"scenario file {path} not found")
    env = os.environ.get(SEED_ENV)
    override = None
    if env:
        try:
            override = int(env, 0)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return parse_scenario(path.read_text(encoding="utf-8"), path.parent, faults_path, override)


def app_factory_for(scenario: Scenario) -> AppFactory:
    wl, seed = scenario.workload, scenario.config.seed
    if wl.kind == "counter":
        return counter_factory(seed)
    source = FrameSource(seed, wl.dims, wl.saturation_fraction)
    source.prefetch(wl.frames)
    return lambda tile, group: MiriApp(source, wl.frames, wl.postproc_runs)


def build_simulator(scenario: Scenario) -> Simulator:
    return Simulator(scenario.config, app_factory_for(scenario), scenario.faults)
