from __future__ import annotations

import json

import pytest

from mboxsim import cli
from mboxsim.sim.events import InvariantViolation
from mboxsim.sim.experiments import Check, ExperimentResult


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
    return tmp_path


def test_list_presets(capsys):
    assert cli.main(["list-presets"]) == 0
    text = capsys.readouterr().out
    for name in ("fig6a", "fig7", "firewall", "reconfig"):
        assert name in text


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 1
    assert cli.main(["run", "no-such-preset"]) == 1
    assert "fig6a" in capsys.readouterr().err


def test_validate_config(tmp_path, capsys):
    assert cli.main(["validate-config", "default"]) == 0
    assert cli.main(["validate-config", "default", "--set", "num_pes=5"]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("scheduler: {policy: sideways}\n")
    assert cli.main(["validate-config", str(bad)]) == 1
    good = tmp_path / "good.yaml"
    good.write_text("num_pes: 8\n")
    capsys.readouterr()
    assert cli.main(["validate-config", str(good), "--dump"]) == 0
    assert "num_pes: 8" in capsys.readouterr().out


def test_run_writes_csv_and_summary(out, capsys):
    rc = cli.main(["run", "fig7", "--sizes", "64,1500", "--packets", "20"])
    assert rc == 0
    csv_text = (out / "fig7.csv").read_text()
    assert csv_text.splitlines()[0].startswith("schema,")
    summary = json.loads((out / "fig7.summary.json").read_text())
    assert summary["passed"] is True
    assert "[PASS]" in capsys.readouterr().out


def test_run_config_preset_writes_snapshot(out):
    assert cli.main(["run", "default", "--set", "traffic.packets=50"]) == 0
    assert (out / "default.snapshot.csv").exists()


def test_threshold_failure_exits_2(out, monkeypatch):
    failing = ExperimentResult("fig6a", "throughput", rows=[],
                               checks=[Check("rate", False, "too slow")])
    monkeypatch.setattr(cli, "run_experiment", lambda *a, **k: failing)
    assert cli.main(["run", "fig6a"]) == 2


def test_invariant_violation_exits_3(out, monkeypatch):
    def boom(*a, **k):
        raise InvariantViolation("census mismatch", 0)
    monkeypatch.setattr(cli, "run_experiment", boom)
    assert cli.main(["run", "fig6a"]) == 3


def test_plot_round_trip(out):
    assert cli.main(["run", "fig7", "--sizes", "64,256,1500", "--packets", "10"]) == 0
    png = out / "fig7.png"
    assert cli.main(["plot", str(out / "fig7.csv"), "-o", str(png)]) == 0
    assert png.read_bytes()[:4] == b"\x89PNG"
    assert cli.main(["plot", str(out / "fig7.csv"), "--preset", "fig6a"]) == 1


def test_plot_rejects_bad_csv(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("schema,size\n")
    assert cli.main(["plot", str(empty)]) == 1
    alien = tmp_path / "a.csv"
    alien.write_text("schema,size\nweird.v9,64\n")
    assert cli.main(["plot", str(alien)]) == 1
    short = tmp_path / "s.csv"
    short.write_text("schema,size\nthroughput.v1,64\n")
    assert cli.main(["plot", str(short)]) == 1
    assert cli.main(["plot", str(tmp_path / "missing.csv")]) == 1


def test_ctl_session(out, capsys):
    rc = cli.main(["ctl", "--idle", "read sched CREDITS[2]; write sched DISABLE+2",
                   "counters p2", "debug p2 7", "debug p2", "irq p2 poke", "run 1",
                   "dump p2 dmem"])
    assert rc == 0
    text = capsys.readouterr().out
    assert "CREDITS[2] = 16" in text
    assert "p2 debug = 0x0" in text  # host writes go the other direction
    assert (out / "pe2-dmem.bin").exists() and (out / "pe2-dmem.json").exists()


def test_ctl_errors(out, capsys):
    assert cli.main(["ctl", "--idle", "read sched NOPE"]) == 1
    assert "CREDITS" in capsys.readouterr().err
    assert cli.main(["ctl", "--idle", "counters p99"]) == 1
    assert cli.main(["ctl", "--idle", "counters sched"]) == 1
    assert cli.main(["ctl", "--idle", "launch p1"]) == 1


def test_ctl_script_file(out, tmp_path, capsys):
    script = tmp_path / "s.ctl"
    script.write_text("# comment\nrun 2\n\ncounters p0\n")
    assert cli.main(["ctl", "--script", str(script), "--at-us", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 and lines[0].startswith("[3.000 us]")
