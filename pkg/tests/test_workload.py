import gc
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tileft.errors import DimensionMismatch, EmptyAccumulator
from tileft.validation_memory import crc32
from tileft.workload import (
    SATURATION_THRESHOLD,
    SATURATION_VALUE,
    WORKLOAD_MODES,
    Accumulator,
    FrameSource,
    MiriApp,
    accumulate,
    finalize_average,
    generate_frame,
    miri_state_bits,
    mode_by_name,
    postprocess,
    serialize_state,
    split_runs,
)


def test_mode_table():
    assert [(m.name, m.postprocessing_runs) for m in WORKLOAD_MODES] == [
        ("very-compute-heavy", 60000), ("compute-heavy", 75000), ("balanced-compute-heavy", 90000),
        ("balanced-data-heavy", 105000), ("data-heavy", 135000), ("very-data-heavy", 150000)]
    assert mode_by_name("data-heavy").postprocessing_runs == 135000
    with pytest.raises(KeyError):
        mode_by_name("heavy")


def test_frames_are_deterministic_and_distinct():
    a = generate_frame(5, 3, (16, 16))
    assert a.shape == (3, 16, 16) and a.dtype == np.uint16
    assert np.array_equal(a, generate_frame(5, 3, (16, 16)))
    digests = {crc32(generate_frame(5, i, (8, 8))) for i in range(1000)}
    assert len(digests) == 1000
    assert generate_frame(1, 0, (1, 1)).shape == (3, 1, 1)
    with pytest.raises(ValueError):
        generate_frame(1, 0, (0, 4))


def test_saturation_fraction():
    frame = generate_frame(2, 0, (256, 256))
    frac = np.mean(frame == SATURATION_VALUE)
    assert 0.008 < frac < 0.012
    assert np.all((frame < SATURATION_THRESHOLD) | (frame == SATURATION_VALUE))


def test_constant_frames_average_to_constant():
    acc = Accumulator((4, 4))
    for _ in range(5):
        accumulate(acc, np.full((3, 4, 4), 100, dtype=np.uint16))
    assert np.all(finalize_average(acc) == 100)


def test_saturated_samples_are_excluded():
    acc = Accumulator((1, 1))
    accumulate(acc, np.full((3, 1, 1), 100, dtype=np.uint16))
    accumulate(acc, np.full((3, 1, 1), SATURATION_VALUE, dtype=np.uint16))
    assert np.all(finalize_average(acc) == 100)
    acc = Accumulator((1, 1))
    accumulate(acc, np.full((3, 1, 1), SATURATION_VALUE, dtype=np.uint16))
    assert np.all(acc.counts == 0) and np.all(finalize_average(acc) == 0)


def test_floor_division_and_identity():
    acc = Accumulator((1, 2))
    acc.sums[:] = [3, 5]
    acc.counts[:] = 2
    acc.frames = 2
    assert finalize_average(acc)[0].tolist() == [[1, 2]]
    frame = generate_frame(0, 0, (8, 8), saturation_fraction=0.0)
    acc = accumulate(Accumulator((8, 8)), frame)
    assert np.array_equal(finalize_average(acc), frame)


def test_accumulator_errors():
    with pytest.raises(EmptyAccumulator):
        finalize_average(Accumulator((2, 2)))
    with pytest.raises(DimensionMismatch):
        accumulate(Accumulator((2, 2)), np.zeros((3, 2, 3), dtype=np.uint16))


@settings(max_examples=60)
@given(st.integers(0, 2**32), st.integers(1, 6), st.integers(1, 8))
def test_accumulator_invariants_and_mean_bounds(seed, frames, side):
    stack = np.stack([generate_frame(seed, i, (side, side), 0.3) for i in range(frames)])
    acc = Accumulator((side, side))
    for f in stack:
        accumulate(acc, f)
    assert np.all(acc.counts <= frames)
    assert np.all(acc.sums <= acc.counts.astype(np.uint64) * 65535)
    means = finalize_average(acc)
    ok = stack < SATURATION_THRESHOLD
    lo = np.where(ok, stack, 0xFFFF).min(axis=0)
    hi = np.where(ok, stack, 0).max(axis=0)
    counted = acc.counts > 0
    assert np.all(means[counted] >= lo[counted]) and np.all(means[counted] <= hi[counted])


def test_postprocess_determinism_and_segments():
    acc = accumulate(Accumulator((8, 8)), generate_frame(0, 0, (8, 8)))
    assert postprocess(acc, 0) == acc.checksum()
    whole = postprocess(acc, 1000, digest=7)
    assert whole == postprocess(acc, 1000, digest=7)
    first = postprocess(acc, 400, digest=7)
    assert postprocess(acc, 600, digest=first, start=400) == whole
    with pytest.raises(ValueError):
        postprocess(acc, -1)


def test_postprocess_runtime_is_linear():
    acc = accumulate(Accumulator((64, 64)), generate_frame(0, 0, (64, 64)))
    runs = np.array([15000, 30000, 60000, 120000], dtype=float)
    times = []
    gc.disable()
    try:
        for r in runs:
            # best of several, as timeit does, to strip scheduler noise
            best = float("inf")
            for _ in range(7):
                start = time.perf_counter()
                postprocess(acc, int(r))
                best = min(best, time.perf_counter() - start)
            times.append(best)
    finally:
        gc.enable()
    slope, intercept = np.polyfit(runs, times, 1)
    fitted = slope * runs + intercept
    r2 = 1 - np.sum((times - fitted) ** 2) / np.sum((times - np.mean(times)) ** 2)
    assert r2 > 0.99


def test_serialized_state_layout_and_sensitivity():
    acc = accumulate(Accumulator((8, 8)), generate_frame(0, 0, (8, 8)))
    a = serialize_state(acc, 1, 10, 99)
    assert len(a) == 32 and a[:4] == b"MIRI"
    other = acc.copy()
    other.sums.reshape(-1)[5] ^= np.uint64(1)
    assert serialize_state(other, 1, 10, 99) != a
    assert len(serialize_state(other, 1, 10, 99)) == len(a)


def test_split_runs():
    assert split_runs(10, 3) == [4, 3, 3]
    assert sum(split_runs(150000, 60)) == 150000


def test_replicas_identical_and_flip_sensitive():
    source = FrameSource(3, (16, 16))
    apps = [MiriApp(source, 6, 600) for _ in range(3)]
    for _ in range(3):
        for app in apps:
            app.advance(2)
        assert len({app.serialize() for app in apps}) == 1
    assert apps[0].state_bits == miri_state_bits((16, 16))


def test_single_bit_flips_change_the_checkpoint():
    # CRC-32 detects every single-bit error, so no collision is possible here
    source = FrameSource(4, (8, 8))
    app = MiriApp(source, 4, 100)
    app.advance(2)
    base = app.serialize()
    rng = np.random.default_rng(0)
    for bit in rng.integers(0, app.state_bits, 1000):
        other = app.clone()
        other.flip_bit(int(bit))
        assert other.serialize() != base


def test_clone_is_independent_and_source_shared():
    import copy
    source = FrameSource(0, (4, 4))
    app = MiriApp(source, 4, 10)
    app.advance(1)
    twin = app.clone()
    app.advance(1)
    assert twin.frame_index == 1 and app.frame_index == 2
    assert copy.deepcopy(source) is source
