"""Command-line interface tests (in-process via ``main``)."""

import json

import pytest

from demotrial.cli import main

from illustration_replay import replay_config


@pytest.fixture()
def small_cfg_path(tmp_path):
    cfg = replay_config()
    cfg["mcmc"] = {"n_burn": 120, "n_keep": 120}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


# ---------------------------------------------------------------------------
# simulate

def test_simulate_writes_oc_files(tmp_path, small_cfg_path, capsys):
    out = tmp_path / "oc"
    rc = main(["simulate", "--scenario", "illustration", "--design", "demo",
               "--reps", "2", "--seed", "11", "--config",
               str(small_cfg_path), "--out", str(out)])
    assert rc == 0
    csv_lines = (out / "illustration_demo_oc.csv").read_text().splitlines()
    assert csv_lines[0] == "dose,dose_value,sel_pct,mean_pts"
    assert len(csv_lines) == 8  # six dose rows plus the none row
    assert csv_lines[-1].startswith("none,")
    summary = json.loads((out / "illustration_demo_oc.json").read_text())
    assert summary["version"] == 1
    assert summary["n_reps"] == 2
    assert summary["partial"] is False
    assert len(summary["sel_pct"]) == 6
    table = capsys.readouterr().out
    assert "scenario illustration, design demo, 2 replicates" in table
    assert "mean total N" in table


def test_simulate_unknown_design_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--scenario", "illustration", "--design", "ubar"])
    assert exc.value.code == 2
    assert "invalid choice" in capsys.readouterr().err


def test_simulate_validation_errors_exit_2(tmp_path, capsys):
    assert main(["simulate", "--scenario", "illustration",
                 "--reps", "0"]) == 2
    assert "n_reps" in capsys.readouterr().err
    assert main(["simulate", "--scenario", str(tmp_path / "nope.json"),
                 "--reps", "1"]) == 2
    assert main(["simulate", "--scenario", "illustration", "--reps", "1",
                 "--config", str(tmp_path / "nope.json")]) == 2


def test_simulate_interrupt_flushes_partial(tmp_path, monkeypatch, capsys):
    def fake_simulate(scenario, design, reps, seed, *, workers=1,
                      config=None, progress=None):
        progress({"rep": 0, "selected": 5, "n_per_dose": [3, 3, 3, 3, 3, 9],
                  "n_total": 24, "runtime_s": 0.01})
        raise KeyboardInterrupt

    monkeypatch.setattr("demotrial.cli.simulate_oc", fake_simulate)
    out = tmp_path / "oc"
    rc = main(["simulate", "--scenario", "illustration", "--reps", "50",
               "--out", str(out)])
    assert rc == 130
    captured = capsys.readouterr()
    assert "interrupted after 1 replicates" in captured.err
    summary = json.loads((out / "illustration_demo_oc.json").read_text())
    assert summary["partial"] is True
    assert summary["n_reps"] == 1
    assert summary["sel_pct"][4] == 100.0
    assert (out / "illustration_demo_oc.csv").is_file()


# ---------------------------------------------------------------------------
# conduct subcommands

def init_session(tmp_path, small_cfg_path, capsys):
    journal = tmp_path / "trial.jsonl"
    assert main(["conduct-init", "--config", str(small_cfg_path),
                 "--session", str(journal), "--id", "cli-trial"]) == 0
    capsys.readouterr()
    return journal


def test_conduct_init_refuses_overwrite(tmp_path, small_cfg_path, capsys):
    journal = init_session(tmp_path, small_cfg_path, capsys)
    assert journal.is_file()
    assert main(["conduct-init", "--config", str(small_cfg_path),
                 "--session", str(journal)]) == 2
    assert "already exists" in capsys.readouterr().err


def test_conduct_step_cold_start_then_reprint(tmp_path, small_cfg_path,
                                              capsys):
    journal = init_session(tmp_path, small_cfg_path, capsys)
    # no outcomes and no previous analysis: runs the first analysis
    assert main(["conduct-step", "--session", str(journal),
                 "--time", "0"]) == 0
    first = capsys.readouterr().out
    assert "analysis 1" in first
    assert "recommendation: enroll_at d1" in first
    before = journal.read_bytes()
    # no new outcomes now: the analysis is re-printed, nothing changes
    assert main(["conduct-step", "--session", str(journal)]) == 0
    assert capsys.readouterr().out == first
    assert journal.read_bytes() == before


def test_conduct_enroll_step_cycle(tmp_path, small_cfg_path, capsys):
    journal = init_session(tmp_path, small_cfg_path, capsys)
    assert main(["conduct-enroll", "--session", str(journal), "--dose", "1",
                 "--count", "3", "--time", "0"]) == 0
    assert "enrolled patients 1..3 at d1" in capsys.readouterr().out
    csv = tmp_path / "outcomes.csv"
    csv.write_text("patient,y_B,y_T,y_R,y_S_time,y_S_event\n"
                   "1,4.2,0,,,\n2,3.9,0,,,\n3,4.6,0,,,\n")
    assert main(["conduct-step", "--session", str(journal),
                 "--outcomes", str(csv), "--time", "1"]) == 0
    block = capsys.readouterr().out
    assert "analysis 1" in block
    assert "4.23" in block  # mean of the entered biomarker values
    assert "acceptable?" in block
    # the journal now replays to a session holding those outcomes
    assert main(["conduct-enroll", "--session", str(journal), "--dose", "9",
                 "--count", "3", "--time", "2"]) == 2
    assert "dose must be" in capsys.readouterr().err


def test_conduct_step_csv_errors_name_lines(tmp_path, small_cfg_path,
                                            capsys):
    journal = init_session(tmp_path, small_cfg_path, capsys)
    main(["conduct-enroll", "--session", str(journal), "--dose", "1",
          "--count", "3", "--time", "0"])
    capsys.readouterr()
    cases = {
        "bad,header\n1,2\n": "line 1: unexpected header",
        "patient,y_B,y_T,y_R,y_S_time,y_S_event\n1,4.2,0\n":
            "line 2: expected 6 fields",
        "patient,y_B,y_T,y_R,y_S_time,y_S_event\n1,4.2,0,,,\n"
        "42,4.0,0,,,\n": "line 3: unknown patient 42",
        "patient,y_B,y_T,y_R,y_S_time,y_S_event\n1,abc,0,,,\n":
            "line 2: could not convert",
        "patient,y_B,y_T,y_R,y_S_time,y_S_event\n2,,,,3.5,\n":
            "line 2: y_S_time and y_S_event must be recorded together",
    }
    for content, expected in cases.items():
        csv = tmp_path / "bad.csv"
        csv.write_text(content)
        assert main(["conduct-step", "--session", str(journal),
                     "--outcomes", str(csv), "--time", "1"]) == 2
        assert expected in capsys.readouterr().err
    # the failures left no events behind: a clean step still works
    csv = tmp_path / "good.csv"
    csv.write_text("patient,y_B,y_T,y_R,y_S_time,y_S_event\n"
                   "1,4.2,0,,,\n2,3.9,0,,,\n3,4.6,0,,,\n")
    assert main(["conduct-step", "--session", str(journal),
                 "--outcomes", str(csv), "--time", "1"]) == 0
    assert "analysis 1" in capsys.readouterr().out


def test_conduct_advance_accept_and_override(tmp_path, small_cfg_path,
                                             capsys):
    journal = init_session(tmp_path, small_cfg_path, capsys)
    assert main(["conduct-advance", "--session", str(journal)]) == 2
    assert "no pending recommendation" in capsys.readouterr().err
    main(["conduct-step", "--session", str(journal), "--time", "0"])
    capsys.readouterr()
    assert main(["conduct-advance", "--session", str(journal), "--reject",
                 "--action", "hold"]) == 2
    assert "justification" in capsys.readouterr().err
    assert main(["conduct-advance", "--session", str(journal), "--reject",
                 "--action", "hold",
                 "--justification", "awaiting pharmacy clearance"]) == 0
    out = capsys.readouterr().out
    assert "applied: hold" in out
    assert "operator override: awaiting pharmacy clearance" in out
    # the logged decision survives a replay of the journal
    from demotrial.conduct import ConductSession
    clone = ConductSession.from_events(journal.read_text().splitlines())
    decision = clone.state.history[-1]["decision"]
    assert decision["accepted"] is False
    assert decision["justification"] == "awaiting pharmacy clearance"


def test_conduct_step_missing_session_exits_2(tmp_path, capsys):
    assert main(["conduct-step", "--session",
                 str(tmp_path / "ghost.jsonl")]) == 2
    assert "no session file" in capsys.readouterr().err
