"""Frame-averaging workload modelled on a mid-infrared imager readout.

Three 16-bit channels are read per frame, saturated samples are rejected,
the rest are summed into a 64-bit accumulator and finally averaged with
integer division.  A tunable integer kernel ("postprocessing runs") provides
the adjustable compute load used by the benchmark.
"""
from __future__ import annotations

import functools
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyAccumulator
from .validation_memory import crc32

CHANNELS = 3
SATURATION_VALUE = 0xFFFF
SATURATION_THRESHOLD = 0xFFF0
SATURATION_FRACTION = 0.01

MASK32 = 0xFFFFFFFF
_STRIDE = 2654435761

PAPER_DIMS = (1024, 1024)
DESK_DIMS = (256, 256)


@dataclass(frozen=True)
class WorkloadMode:
    name: str
    postprocessing_runs: int


WORKLOAD_MODES = (
    WorkloadMode("very-compute-heavy", 60000),
    WorkloadMode("compute-heavy", 75000),
    WorkloadMode("balanced-compute-heavy", 90000),
    WorkloadMode("balanced-data-heavy", 105000),
    WorkloadMode("data-heavy", 135000),
    WorkloadMode("very-data-heavy", 150000),
)


def mode_by_name(name: str) -> WorkloadMode:
    for mode in WORKLOAD_MODES:
        if mode.name == name:
            return mode
    raise KeyError(f"unknown workload mode {name!r}; choose from {[m.name for m in WORKLOAD_MODES]}")


def generate_frame(seed: int, frame_index: int, dims: tuple[int, int] = DESK_DIMS,
                   saturation_fraction: float = SATURATION_FRACTION) -> np.ndarray:
    """Synthetic frame of shape ``(3, H, W)``, uint16.

    Unsaturated samples are drawn below SATURATION_THRESHOLD; each sample is
    independently forced to SATURATION_VALUE with ``saturation_fraction``.
    """
    h, w = dims
    if h < 1 or w < 1:
        raise ValueError(f"frame dims must be at least 1x1, got {dims}")
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, frame_index])
    frame = rng.integers(0, SATURATION_THRESHOLD, size=(CHANNELS, h, w), dtype=np.uint16)
    if saturation_fraction > 0:
        frame[rng.random((CHANNELS, h, w)) < saturation_fraction] = SATURATION_VALUE
    return frame


class FrameSource:
    """Shared, read-only frame provider with a byte-bounded cache."""

    def __init__(self, seed: int, dims: tuple[int, int] = DESK_DIMS,
                 saturation_fraction: float = SATURATION_FRACTION, cache_bytes: int = 256 << 20):
        self.seed = seed
        self.dims = tuple(dims)
        self.saturation_fraction = saturation_fraction
        frame_bytes = CHANNELS * dims[0] * dims[1] * 2
        self.get = functools.lru_cache(maxsize=max(4, cache_bytes // frame_bytes))(self._make)

    def _make(self, index: int) -> np.ndarray:
        frame = generate_frame(self.seed, index, self.dims, self.saturation_fraction)
        frame.setflags(write=False)
        return frame

    def prefetch(self, count: int) -> None:
        for i in range(min(count, self.get.cache_parameters()["maxsize"])):
            self.get(i)

    def __deepcopy__(self, memo):
        return self


class Accumulator:
    def __init__(self, dims: tuple[int, int] = DESK_DIMS):
        self.dims = tuple(dims)
        self.sums = np.zeros((CHANNELS, *dims), dtype=np.uint64)
        self.counts = np.zeros((CHANNELS, *dims), dtype=np.uint32)
        self.frames = 0

    def copy(self) -> "Accumulator":
        clone = Accumulator.__new__(Accumulator)
        clone.dims = self.dims
        clone.sums = self.sums.copy()
        clone.counts = self.counts.copy()
        clone.frames = self.frames
        return clone

    def checksum(self, value: int = 0) -> int:
        """Rolling CRC-32 over sums, then counts."""
        return crc32(self.counts, crc32(self.sums, value))

    def __eq__(self, other):
        if not isinstance(other, Accumulator):
            return NotImplemented
        return (self.frames == other.frames and np.array_equal(self.sums, other.sums)
                and np.array_equal(self.counts, other.counts))


def accumulate(acc: Accumulator, frame: np.ndarray,
               threshold: int = SATURATION_THRESHOLD) -> Accumulator:
    if frame.shape != acc.sums.shape:
        raise DimensionMismatch(f"frame shape {frame.shape} does not match accumulator {acc.sums.shape}")
    keep = frame < threshold
    acc.sums += frame * keep  # zeroing rejected samples beats a masked add
    acc.counts += keep
    acc.frames += 1
    return acc


def finalize_average(acc: Accumulator) -> np.ndarray:
    """Per-pixel floor(sum / count) as uint16; pixels never counted are 0."""
    if acc.frames == 0:
        raise EmptyAccumulator("no frames accumulated")
    counts = acc.counts.astype(np.uint64)
    means = np.zeros_like(acc.sums)
    np.floor_divide(acc.sums, counts, out=means, where=counts > 0)
    return means.astype(np.uint16)


def _mix(h: int, v: int) -> int:
    if v & 1:
        return (h * 31 + v) & MASK32
    return ((h ^ (v >> 3)) + 0x9E3779B9) & MASK32


def postprocess(acc: Accumulator, runs: int, digest: int | None = None, start: int = 0) -> int:
    """Run ``runs`` iterations of the integer kernel and return the digest.

    Each iteration picks an accumulator cell from the running digest, folds
    its value in and rotates on a comparison, so the result depends on every
    iteration.  ``start`` is the global iteration number of the first run,
    letting a long job be split into segments with the same outcome.
    """
    if runs < 0:
        raise ValueError("runs must be non-negative")
    h = acc.checksum() if digest is None else digest & MASK32
    sums = acc.sums.reshape(-1)
    n = sums.size
    item = sums.item
    for i in range(start, start + runs):
        h = _mix(h, item((h + i * _STRIDE) % n))
        if h > 0x7FFFFFFF:
            h = ((h << 1) | (h >> 31)) & MASK32
    return h


_STATE_LAYOUT = struct.Struct("<4sIIIQII")


def serialize_state(acc: Accumulator, frame_index: int, runs_done: int, digest: int) -> bytes:
    """Fixed 32-byte digest of application progress."""
    h, w = acc.dims
    return _STATE_LAYOUT.pack(b"MIRI", frame_index & MASK32, acc.frames & MASK32,
                              (h << 16 | w) & MASK32, runs_done, acc.checksum(), digest & MASK32)


def split_runs(total: int, frames: int) -> list[int]:
    """Spread ``total`` runs across ``frames`` as evenly as possible."""
    base, extra = divmod(total, frames)
    return [base + (1 if i < extra else 0) for i in range(frames)]


def miri_state_bits(dims: tuple[int, int]) -> int:
    """Flippable bits of a replica: 64-bit sums, 32-bit counts, 32-bit digest."""
    return 8 * 12 * CHANNELS * dims[0] * dims[1] + 32


class MiriApp:
    """One replica of the frame-averaging job; one frame per base time unit."""

    def __init__(self, source: FrameSource, frames: int, postproc_runs: int = 0):
        self.source = source
        self.frames = frames
        self.postproc_runs = postproc_runs
        self.runs_per_frame = split_runs(postproc_runs, frames) if frames else []
        self.acc = Accumulator(source.dims)
        self.frame_index = 0
        self.runs_done = 0
        self.digest = 0

    @property
    def state_bits(self) -> int:
        return miri_state_bits(self.acc.dims)

    def advance(self, units: int = 1) -> None:
        for _ in range(units):
            i = self.frame_index
            accumulate(self.acc, self.source.get(i))
            runs = self.runs_per_frame[i] if i < len(self.runs_per_frame) else 0
            self.digest = postprocess(self.acc, runs, self.digest, self.runs_done)
            self.runs_done += runs
            self.frame_index += 1

    def serialize(self) -> bytes:
        return serialize_state(self.acc, self.frame_index, self.runs_done, self.digest)

    def clone(self) -> "MiriApp":
        other = MiriApp.__new__(MiriApp)
        other.__dict__.update(self.__dict__)
        other.acc = self.acc.copy()
        return other

    def flip_bit(self, index: int) -> None:
        index %= self.state_bits
        sums_bits = 8 * self.acc.sums.nbytes
        counts_bits = 8 * self.acc.counts.nbytes
        if index < sums_bits:
            self.acc.sums.reshape(-1).view(np.uint8)[index // 8] ^= np.uint8(1 << index % 8)
        elif index < sums_bits + counts_bits:
            index -= sums_bits
            self.acc.counts.reshape(-1).view(np.uint8)[index // 8] ^= np.uint8(1 << index % 8)
        else:
            self.digest ^= 1 << (index - sums_bits - counts_bits)

    def output(self) -> np.ndarray:
        return finalize_average(self.acc)

    def output_bytes(self) -> bytes:
        return self.output().tobytes()
