import io
import json

import pytest

from tileft import cli
from tileft.bench import (
    CSV_FIELDS,
    BenchRecord,
    Scale,
    degradation_trend,
    paired_degradations,
    read_csv,
    run_arm,
    run_experiment,
    summarize,
    write_csv,
)
from tileft.errors import ConfigError, MissingReferenceArm
from tileft.runtime import DETERMINISTIC
from tileft.scenario import build_simulator, parse_scenario
from tileft.workload import WORKLOAD_MODES, mode_by_name

TINY = Scale("tiny", 4, (8, 8))


def rec(mode="m", runs=1, period=0, protected=False, idx=0, ns=10):
    return BenchRecord(mode, runs, period, protected, idx, ns, 4)


def test_one_cell_gives_two_records():
    records = run_experiment(WORKLOAD_MODES[:1], periods=(2,), reps=1, scale=TINY, runtime_mode=DETERMINISTIC)
    assert [(r.protected, r.check_period) for r in records] == [(False, 0), (True, 2)]
    assert all(r.wall_ns > 0 and r.frames == 4 for r in records)


def test_protection_does_not_change_output():
    mode = mode_by_name("compute-heavy")
    ref = run_arm(mode, 0, False, scale=TINY, runtime_mode=DETERMINISTIC)
    for period in (1, 2, 4):
        assert run_arm(mode, period, True, scale=TINY).output == ref.output


def test_experiment_config_errors():
    with pytest.raises(ConfigError):
        run_experiment(WORKLOAD_MODES[:1], periods=(3,), reps=1, scale=TINY)
    with pytest.raises(ConfigError):
        run_experiment(WORKLOAD_MODES[:1], reps=0, scale=TINY)
    with pytest.raises(ConfigError):
        run_experiment(WORKLOAD_MODES[:1], scale="huge")


def test_degradation_arithmetic():
    (ref, prot) = summarize([rec(ns=10_000_000_000), rec(period=5, protected=True, ns=11_000_000_000)])
    assert ref.degradation is None and ref.median == 10e9 and ref.n == 1
    assert prot.degradation == pytest.approx(0.10)
    assert prot.q1 <= prot.median <= prot.q3


def test_missing_reference_arm():
    with pytest.raises(MissingReferenceArm):
        summarize([rec(period=5, protected=True)])
    with pytest.raises(MissingReferenceArm):
        paired_degradations([rec(period=5, protected=True)], 5)


def test_trend_on_synthetic_records():
    records = []
    for i, runs in enumerate((1, 2, 3, 4, 5, 6)):
        for idx in range(5):
            records.append(rec(f"m{i}", runs, 0, False, idx, 100))
            records.append(rec(f"m{i}", runs, 5, True, idx, 160 - 8 * i + idx))
    tau, p = degradation_trend(records, 5)
    assert tau < 0 and p < 0.05


def test_csv_round_trip(tmp_path):
    records = [rec(ns=10), rec(period=5, protected=True, ns=12), rec(idx=1, ns=11),
               rec(period=5, protected=True, idx=1, ns=14)]
    path = tmp_path / "r.csv"
    write_csv(records, path)
    assert path.read_text().splitlines()[0] == ",".join(CSV_FIELDS)
    assert read_csv(path) == records
    assert summarize(read_csv(path)) == summarize(records)
    with pytest.raises(ConfigError):
        read_csv(io.StringIO("mode,wall\nx,1\n"))
    with pytest.raises(ConfigError):
        read_csv(tmp_path / "missing.csv")


SCENARIO = """
[scenario]
tile_count = 3
seed = 4
ticks = 10
[group.0]
members = 0,1,2
period = 1
"""


def test_parse_scenario_defaults_and_errors(tmp_path):
    sc = parse_scenario(SCENARIO)
    assert sc.ticks == 10 and sc.config.groups[0].members == (0, 1, 2) and len(sc.faults) == 0
    with pytest.raises(ConfigError):
        parse_scenario("[group.0]\nmembers=0\nperiod=1\n")
    with pytest.raises(ConfigError):
        parse_scenario(SCENARIO + "replication = 2\n")
    with pytest.raises(ConfigError):
        parse_scenario(SCENARIO + "[workload]\nkind = video\n")
    with pytest.raises(ConfigError):
        parse_scenario(SCENARIO.replace("ticks = 10", "faults = nope.csv"), base_dir=tmp_path)


def test_miri_scenario_derives_ticks():
    text = SCENARIO.replace("ticks = 10\n", "").replace("period = 1", "period = 2")
    sc = parse_scenario(text + "[workload]\nkind = miri\nframes = 6\ndims = 8x8\npostproc_runs = 60\n")
    assert sc.ticks == 3
    sim = build_simulator(sc)
    sim.run(sc.ticks)
    assert all(r.verdict.ok for r in sim.log.checkpoints())


def test_random_faults_from_scenario():
    text = SCENARIO.replace("seed = 4", "seed = 4\nfaults = random\nfault_rate = 0.5\nfault_kinds = hang")
    sc = parse_scenario(text)
    assert len(sc.faults) > 0 and {f.kind.value for f in sc.faults} == {"hang"}
    with pytest.raises(ConfigError):
        parse_scenario(text.replace("hang", "melt"))


def test_seed_override_from_environment(tmp_path, monkeypatch):
    from tileft.scenario import load_scenario
    path = tmp_path / "s.ini"
    path.write_text(SCENARIO)
    monkeypatch.setenv("TILEFT_SEED", "99")
    assert load_scenario(path).config.seed == 99
    monkeypatch.setenv("TILEFT_SEED", "x")
    with pytest.raises(ConfigError):
        load_scenario(path)


def write_inputs(tmp_path):
    scenario = tmp_path / "s.ini"
    scenario.write_text(SCENARIO)
    faults = tmp_path / "f.csv"
    faults.write_text("trigger_tick,kind,target_tile,target_slot,payload,seed\n3,state_bit_flip,1,0,17,0\n")
    return scenario, faults


def test_cli_simulate_and_inject(tmp_path, capsys):
    scenario, faults = write_inputs(tmp_path)
    assert cli.main(["simulate", str(scenario)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 10 and json.loads(lines[0])["event"] == "checkpoint"
    assert cli.main(["inject", str(scenario), str(faults)]) == 0
    out = capsys.readouterr().out.splitlines()
    summary = json.loads(out[-1])
    assert summary["injected"] == summary["on_time"] == summary["identified"] == summary["recovered"] == 1


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["bench", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert cli.main([]) == 1
    assert cli.main(["simulate", str(tmp_path / "none.ini")]) == 1
    assert cli.main(["bench", "--modes", "nope", "--out", str(tmp_path / "x.csv")]) == 1
    assert cli.main(["report", str(tmp_path / "none.csv")]) == 1


def test_cli_invariant_violation_exit_code(monkeypatch, tmp_path):
    from tileft.errors import InvariantViolation

    def boom(args):
        raise InvariantViolation("replicas diverged")

    monkeypatch.setitem(cli.COMMANDS, "report", boom)
    assert cli.main(["report", "x.csv"]) == 2


def test_cli_bench_and_report(tmp_path, capsys, monkeypatch):
    monkeypatch.setitem(cli.SCALES, "desk", TINY)
    out = tmp_path / "r.csv"
    assert cli.main(["bench", "--modes", "very-compute-heavy,very-data-heavy", "--periods", "2,4",
                     "--reps", "2", "--out", str(out), "--quiet"]) == 0
    assert out.read_text().splitlines()[0] == "mode,postproc_runs,check_period,protected,run_idx,wall_ns,frames"
    assert len(read_csv(out)) == 2 * 2 * 3
    capsys.readouterr()
    assert cli.main(["report", str(out)]) == 0
    report = capsys.readouterr().out
    assert "degr %" in report and "very-data-heavy" in report and "trend" in report
