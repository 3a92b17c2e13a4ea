import io
import math

import pytest

from tileft.errors import ConfigError, FaultTimingError, NoSuchSlot, NoSuchTile, TargetInactive
from tileft.faults import (
    TRANSIENT_KINDS,
    FaultKind,
    FaultSchedule,
    FaultSpec,
    apply_fault,
    detection_report,
    dump_schedule,
    load_schedule,
    random_schedule,
    schedule_text,
    summarize_outcomes,
)
from tileft.runtime import DETERMINISTIC, Simulator, SimulatorConfig, counter_factory
from tileft.validation_memory import SUPERVISOR, ThreadGroup, TileStatus
from tileft.voting import VerdictKind

GROUP = ThreadGroup(0, (0, 1, 2), 1)


def make_sim(faults=(), groups=(GROUP,)):
    config = SimulatorConfig(tile_count=3, groups=list(groups), mode=DETERMINISTIC)
    return Simulator(config, counter_factory(1), FaultSchedule(tuple(faults)))


def test_spec_validation():
    with pytest.raises(ConfigError):
        FaultSpec(FaultKind.HANG, 0, 0, 0)
    with pytest.raises(ValueError):
        FaultSpec("melt", 0, 0, 1)
    assert FaultSpec("hang", 0, 0, 1).kind is FaultKind.HANG


def test_schedule_is_sorted():
    s = FaultSchedule((FaultSpec(FaultKind.HANG, 0, 0, 5), FaultSpec(FaultKind.HANG, 1, 0, 2)))
    assert [f.trigger_tick for f in s] == [2, 5]


def test_bit_flip_detected_as_minority_fault():
    sim = make_sim([FaultSpec(FaultKind.STATE_BIT_FLIP, 2, 0, 1, payload=511)])
    sim.run(1)
    rec = sim.log.checkpoints(0)[0]
    assert rec.verdict.kind is VerdictKind.MINORITY_FAULT and rec.verdict.faulty == {2}


def test_apply_fault_preconditions():
    sim = make_sim()
    sim.now = 1
    with pytest.raises(FaultTimingError):
        apply_fault(sim, FaultSpec(FaultKind.HANG, 0, 0, 2))
    with pytest.raises(NoSuchTile):
        apply_fault(sim, FaultSpec(FaultKind.HANG, 3, 0, 1))
    with pytest.raises(NoSuchSlot):
        apply_fault(sim, FaultSpec(FaultKind.HANG, 0, 1, 1))
    with pytest.raises(ConfigError):
        apply_fault(sim, FaultSpec(FaultKind.STATE_BIT_FLIP, 0, 0, 1, payload=512))
    sim.tiles[0].vm.set_status(SUPERVISOR, TileStatus.BROKEN)
    with pytest.raises(TargetInactive):
        apply_fault(sim, FaultSpec(FaultKind.HANG, 0, 0, 1))


def test_fault_on_inactive_tile_is_logged_and_skipped():
    sim = make_sim([FaultSpec(FaultKind.PERMANENT_DEATH, 0, 0, 1), FaultSpec(FaultKind.HANG, 0, 0, 3)])
    sim.config.broken_threshold = 1
    sim.config.auto_rejoin = False
    sim.run(4)
    assert [r.event for r in sim.log if r.event.startswith("injection")] == ["injection", "injection_skipped"]


def test_random_schedule_rate_zero_and_determinism():
    assert len(random_schedule(3, 1000, 0.0, [GROUP])) == 0
    a = random_schedule(3, 500, 0.1, [GROUP])
    b = random_schedule(3, 500, 0.1, [GROUP])
    assert a == b and len(a) > 0
    assert random_schedule(4, 500, 0.1, [GROUP]) != a


def test_random_schedule_count_within_three_sigma():
    n, p = 10_000, 0.01
    count = len(random_schedule(11, n, p, [GROUP]))
    sigma = math.sqrt(n * p * (1 - p))
    assert abs(count - n * p) <= 3 * sigma


def test_random_schedule_spacing():
    groups = [ThreadGroup(0, (0, 1, 2), 4, slot=0), ThreadGroup(1, (0, 1, 2), 6, slot=1)]
    horizon = 100
    sched = random_schedule(5, horizon, 0.9, groups, tick_unit=2)
    seen = set()
    for f in sched:
        g = groups[f.target_slot]
        interval = g.period // 2
        window = (f.trigger_tick - 1) // interval
        assert (g.group_id, window) not in seen
        seen.add((g.group_id, window))
        assert f.trigger_tick <= horizon // interval * interval
        assert f.kind in TRANSIENT_KINDS


def test_random_schedule_rejects_bad_rate():
    with pytest.raises(ConfigError):
        random_schedule(0, 10, 1.5, [GROUP])


def test_schedule_csv_round_trip(tmp_path):
    sched = random_schedule(9, 200, 0.2, [GROUP], kinds=list(FaultKind), state_bits=512)
    path = tmp_path / "f.csv"
    dump_schedule(sched, path)
    assert tuple(load_schedule(path)) == tuple(sched)
    text = "# comment\n" + schedule_text(sched)
    assert tuple(load_schedule(io.StringIO(text))) == tuple(sched)


def test_schedule_csv_errors():
    with pytest.raises(ConfigError):
        load_schedule(io.StringIO("kind,target_tile\nhang,0\n"))
    with pytest.raises(ConfigError):
        load_schedule(io.StringIO("trigger_tick,kind,target_tile,target_slot\n1,melt,0,0\n"))


def test_detection_report():
    groups = [ThreadGroup(0, (0, 1, 2), 1, slot=0), ThreadGroup(1, (0, 1, 2), 3, slot=1)]
    sim = make_sim([FaultSpec(FaultKind.STATE_BIT_FLIP, 1, 1, 4, payload=3)], groups)
    sim.run(9)
    (o,) = detection_report(sim)
    assert (o.expected_tick, o.detected_tick, o.recovered_tick, o.latency) == (6, 6, 9, 2)
    assert o.identified and o.on_time
    assert summarize_outcomes([o])["on_time"] == 1
