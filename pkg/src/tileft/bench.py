"""Protected-vs-reference timing harness and summary statistics.

Each experiment cell is one workload mode at one checking period.  The
protected arm runs three replicas under the tile runtime with checkpoint
voting; the reference arm runs the same three replicas without any
checkpoints, once per mode.  Only the frame-processing loop is timed.
"""
from __future__ import annotations

import csv
import gc
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np
from scipy import stats

from .errors import ConfigError, InvariantViolation, MissingReferenceArm
from .runtime import CONCURRENT, Simulator, SimulatorConfig
from .validation_memory import ThreadGroup, crc32
from .workload import DESK_DIMS, PAPER_DIMS, WORKLOAD_MODES, FrameSource, MiriApp, WorkloadMode

CSV_FIELDS = ("mode", "postproc_runs", "check_period", "protected", "run_idx", "wall_ns", "frames")

# median degradation bands of the original C harness (best, worst), for display only
PUBLISHED_MEDIAN_DEGRADATION = (0.09, 0.26)
PUBLISHED_MEAN_RELATIVE_PERFORMANCE = (0.80, 0.95)


@dataclass(frozen=True)
class Scale:
    name: str
    frames: int
    dims: tuple[int, int]


SCALES = {
    "desk": Scale("desk", 60, DESK_DIMS),
    "paper": Scale("paper", 600, PAPER_DIMS),
}


@dataclass(frozen=True)
class BenchRecord:
    mode: str
    postproc_runs: int
    check_period: int  # 0 for the reference arm
    protected: bool
    run_idx: int
    wall_ns: int
    frames: int


@dataclass(frozen=True)
class SummaryStats:
    mode: str
    postproc_runs: int
    check_period: int
    protected: bool
    n: int
    median: float
    q1: float
    q3: float
    min: float
    max: float
    reference_median: float | None = None
    degradation: float | None = None
    wall_ns: tuple[int, ...] = field(default=(), repr=False)


@dataclass
class ArmResult:
    record: BenchRecord
    output: bytes


def _simulator(mode: WorkloadMode, period: int, protected: bool, scale: Scale,
               source: FrameSource, runtime_mode: str, tile_count: int) -> Simulator:
    # the reference arm runs free: one tick spanning every frame, no barriers
    group_period = period if protected else scale.frames
    config = SimulatorConfig(
        tile_count=tile_count,
        groups=[ThreadGroup(0, tuple(range(tile_count)), group_period)],
        mode=runtime_mode,
        protected=protected,
    )
    return Simulator(config, lambda tile, group: MiriApp(source, scale.frames, mode.postprocessing_runs))


def run_arm(mode: WorkloadMode, period: int, protected: bool, run_idx: int = 0,
            scale: Scale = SCALES["desk"], seed: int = 0, runtime_mode: str = CONCURRENT,
            tile_count: int = 3, source: FrameSource | None = None) -> ArmResult:
    """Time one arm; returns the record and the replicas' common output."""
    if scale.frames % (period if protected else 1):
        raise ConfigError(f"check period {period} does not divide {scale.frames} frames")
    if source is None:
        source = FrameSource(seed, scale.dims)
    source.prefetch(scale.frames)
    sim = _simulator(mode, period, protected, scale, source, runtime_mode, tile_count)
    ticks = scale.frames // sim.unit
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        start = time.perf_counter_ns()
        sim.run(ticks)
        wall = max(1, time.perf_counter_ns() - start)
    finally:
        if gc_was_enabled:
            gc.enable()

    outputs = {out[0] for out in sim.outputs().values()}
    if len(outputs) != 1:
        raise InvariantViolation(f"replicas disagree on the final output in {mode.name}")
    record = BenchRecord(mode.name, mode.postprocessing_runs, period if protected else 0,
                         protected, run_idx, wall, scale.frames)
    return ArmResult(record, outputs.pop())


def run_experiment(modes: Sequence[WorkloadMode] = WORKLOAD_MODES, periods: Sequence[int] = (10,),
                   reps: int = 10, scale: Scale | str = "desk", seed: int = 0,
                   runtime_mode: str = CONCURRENT, tile_count: int = 3,
                   progress=None) -> list[BenchRecord]:
    """Run the mode x period matrix with a reference arm per mode.

    Repetitions are the outer loop so slow drift of the host hits both arms
    alike.  Raises :class:`InvariantViolation` if protection changes any
    output.
    """
    if isinstance(scale, str):
        if scale not in SCALES:
            raise ConfigError(f"unknown scale {scale!r}; choose from {sorted(SCALES)}")
        scale = SCALES[scale]
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    if not modes or not periods:
        raise ConfigError("need at least one mode and one period")
    for p in periods:
        if p < 1 or scale.frames % p:
            raise ConfigError(f"check period {p} must divide the {scale.frames}-frame run")

    source = FrameSource(seed, scale.dims)
    records: list[BenchRecord] = []
    reference_crc: dict[str, int] = {}
    for rep in range(reps):
        for mode in modes:
            arms = [(0, False)] + [(p, True) for p in periods]
            for period, protected in arms:
                result = run_arm(mode, period, protected, rep, scale, seed, runtime_mode, tile_count, source)
                digest = crc32(result.output)
                if reference_crc.setdefault(mode.name, digest) != digest:
                    raise InvariantViolation(
                        f"{mode.name} period {period}: protected output differs from reference")
                records.append(result.record)
                if progress:
                    progress(result.record)
    return records


def _cell_key(r: BenchRecord) -> tuple[str, int, bool]:
    return (r.mode, r.check_period, r.protected)


def _describe(values: Sequence[int]) -> dict:
    arr = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(arr, [25, 50, 75])
    return {"n": arr.size, "median": float(med), "q1": float(q1), "q3": float(q3),
            "min": float(arr.min()), "max": float(arr.max())}


def summarize(records: Iterable[BenchRecord]) -> list[SummaryStats]:
    """Per-cell statistics, reference cells first within each mode."""
    cells: dict[tuple[str, int, bool], list[BenchRecord]] = {}
    for r in records:
        cells.setdefault(_cell_key(r), []).append(r)
    reference = {mode: _describe([r.wall_ns for r in rs])["median"]
                 for (mode, _, protected), rs in cells.items() if not protected}
    out = []
    for key in sorted(cells, key=lambda k: (cells[k][0].postproc_runs, k[0], k[2], k[1])):
        rs = cells[key]
        mode, period, protected = key
        desc = _describe([r.wall_ns for r in rs])
        ref = deg = None
        if protected:
            if mode not in reference:
                raise MissingReferenceArm(f"no unprotected runs for mode {mode!r}")
            ref = reference[mode]
            deg = (desc["median"] - ref) / ref
        out.append(SummaryStats(mode, rs[0].postproc_runs, period, protected, reference_median=ref,
                                degradation=deg, wall_ns=tuple(r.wall_ns for r in rs), **desc))
    return out


def paired_degradations(records: Sequence[BenchRecord], period: int) -> dict[str, list[float]]:
    """Per-repetition degradation, pairing each protected run with its rep's reference."""
    ref = {(r.mode, r.run_idx): r.wall_ns for r in records if not r.protected}
    out: dict[str, list[float]] = {}
    for r in records:
        if r.protected and r.check_period == period:
            base = ref.get((r.mode, r.run_idx))
            if base is None:
                raise MissingReferenceArm(f"no reference run {r.run_idx} for mode {r.mode!r}")
            out.setdefault(r.mode, []).append((r.wall_ns - base) / base)
    return out


def degradation_trend(records: Sequence[BenchRecord], period: int) -> tuple[float, float]:
    """Mann-Kendall style trend of degradation against postprocessing runs.

    Pools every repetition: Kendall's tau between the mode's rank (by runs)
    and the paired degradation, tested one-sided for a decreasing trend.
    Returns ``(tau, p_value)``.
    """
    runs = {r.mode: r.postproc_runs for r in records}
    pairs = paired_degradations(records, period)
    x, y = [], []
    for mode, values in pairs.items():
        x.extend([runs[mode]] * len(values))
        y.extend(values)
    res = stats.kendalltau(x, y, alternative="less")
    return float(res.statistic), float(res.pvalue)


def write_csv(records: Iterable[BenchRecord], out: TextIO | str | Path) -> None:
    if isinstance(out, (str, Path)):
        with open(out, "w", newline="", encoding="utf-8") as fh:
            return write_csv(records, fh)
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in records:
        writer.writerow([r.mode, r.postproc_runs, r.check_period, int(r.protected), r.run_idx,
                         r.wall_ns, r.frames])


def read_csv(src: TextIO | str | Path) -> list[BenchRecord]:
    if isinstance(src, (str, Path)):
        if not Path(src).exists():
            raise ConfigError(f"results file {src} not found")
        with open(src, newline="", encoding="utf-8") as fh:
            return read_csv(fh)
    reader = csv.DictReader(src)
    if tuple(reader.fieldnames or ()) != CSV_FIELDS:
        raise ConfigError(f"unexpected CSV header {reader.fieldnames}; want {','.join(CSV_FIELDS)}")
    out = []
    for n, row in enumerate(reader, start=2):
        try:
            out.append(BenchRecord(
                mode=row["mode"],
                postproc_runs=int(row["postproc_runs"]),
                check_period=int(row["check_period"]),
                protected=row["protected"].strip().lower() in ("1", "true"),
                run_idx=int(row["run_idx"]),
                wall_ns=int(row["wall_ns"]),
                frames=int(row["frames"]),
            ))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"CSV line {n}: {exc}") from exc
    return out


def format_report(summary: Sequence[SummaryStats]) -> str:
    lines = [f"{'mode':<24}{'runs':>8}{'period':>8}{'arm':>6}{'n':>4}"
             f"{'median ms':>12}{'q1 ms':>10}{'q3 ms':>10}{'degr %':>9}"]
    for s in summary:
        deg = f"{100 * s.degradation:8.1f}" if s.degradation is not None else f"{'-':>8}"
        lines.append(f"{s.mode:<24}{s.postproc_runs:>8}{s.check_period or '-':>8}"
                     f"{'prot' if s.protected else 'ref':>6}{s.n:>4}"
                     f"{s.median / 1e6:12.2f}{s.q1 / 1e6:10.2f}{s.q3 / 1e6:10.2f} {deg}")
    degs = [s.degradation for s in summary if s.degradation is not None]
    if degs:
        lines.append(f"median degradation: best {100 * min(degs):.1f}%, worst {100 * max(degs):.1f}%")
    return "\n".join(lines)
