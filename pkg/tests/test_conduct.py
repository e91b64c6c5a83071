"""Session-layer tests: command validation, event replay, rendering."""

import json

import pytest

from demotrial.conduct import ConductError, ConductSession, render_block
from demotrial.core import (
    AcceptabilityLimits,
    DecisionCutoffs,
    DoseGrid,
    McmcConfig,
    TrialConfig,
    TrialState,
)


@pytest.fixture(scope="module")
def small_config():
    return TrialConfig(
        grid=DoseGrid((0.5, 1.0, 2.0)),
        limits=AcceptabilityLimits(pi_T_max=0.30, pi_R_min=0.15,
                                   mu_S_min=6.0, t_S=12.0),
        cutoffs=DecisionCutoffs(c_B=0.5, c_T=0.6, c_R=0.7, c_S=0.8),
        mcmc=McmcConfig(n_burn=80, n_keep=80),
    )


def make(small_config, sid="sess-1"):
    return ConductSession.create(sid, small_config)


def enroll_with_outcomes(s, dose, count, time, y_b=5.0, y_t=0):
    ids = s.add_patients(dose, count, time)
    s.record_outcomes([{"patient": p, "y_B": y_b, "y_T": y_t} for p in ids])
    return ids


# ---------------------------------------------------------------------------
# creation and snapshots

def test_create_and_snapshot(small_config):
    s = make(small_config)
    assert s.id == "sess-1"
    assert s.version == 1
    assert s.events[0]["type"] == "created"
    snap = s.snapshot()
    assert snap["version"] == 1
    assert snap["state_version"] == 1
    assert snap["n_patients"] == 0
    assert snap["pending"] is None
    assert snap["latest_posterior"] is None
    assert snap["state"]["stage"] == 1


def test_cold_start_recommends_lowest_dose(small_config):
    s = make(small_config)
    rec = s.analyze(0.0)
    assert rec["analysis"] == 1
    assert rec["posterior"] is None
    assert rec["rules"] == []
    assert rec["action"] == {"type": "enroll_at", "dose": 1}
    assert s.pending["action"] == "enroll_at" and s.pending["dose"] == 1
    assert s.version == 2


# ---------------------------------------------------------------------------
# enrollment validation

def test_add_patients_validation(small_config):
    s = make(small_config)
    with pytest.raises(ConductError, match="dose must be 1..3"):
        s.add_patients(4, 3, 0.0)
    with pytest.raises(ConductError, match="dose must be"):
        s.add_patients(0, 3, 0.0)
    with pytest.raises(ConductError, match="positive integer"):
        s.add_patients(1, 0, 0.0)
    with pytest.raises(ConductError, match="does not match current stage"):
        s.add_patients(1, 3, 0.0, stage=2)
    ids = s.add_patients(1, 3, 1.0)
    assert ids == [1, 2, 3]
    with pytest.raises(ConductError, match="precedes the session clock"):
        s.add_patients(1, 3, 0.5)
    s.state.eliminate(2, "toxic")
    with pytest.raises(ConductError, match="not currently acceptable"):
        s.add_patients(2, 3, 2.0)


def test_stage_caps(small_config):
    s = make(small_config)
    s.state.stage = 2
    cap = small_config.stages.stage2_per_dose_cap
    s.add_patients(1, cap, 0.0)
    with pytest.raises(ConductError, match="monitoring additions capped"):
        s.add_patients(1, 1, 1.0)
    s.state.stage = 3
    room = small_config.stages.M - cap
    s.add_patients(1, room, 1.0)
    with pytest.raises(ConductError, match=f"capped at {small_config.stages.M}"):
        s.add_patients(1, 1, 2.0)


def test_no_enrollment_after_done(small_config):
    s = make(small_config)
    s.state.stage = TrialState.DONE
    with pytest.raises(ConductError, match="trial is complete"):
        s.add_patients(1, 3, 0.0)


# ---------------------------------------------------------------------------
# outcome recording

def test_record_outcomes_validation(small_config):
    s = make(small_config)
    s.add_patients(1, 2, 0.0)
    err = {
        "unknown patient": {"patient": 9, "y_T": 0},
        "missing patient": {"y_T": 0},
        "no outcome fields": {"patient": 1},
        "unknown fields": {"patient": 1, "y_T": 0, "y_X": 1},
        "must be recorded together": {"patient": 1, "y_S_time": 3.0},
        "y_T must be 0 or 1": {"patient": 1, "y_T": 2},
        "y_B must be finite": {"patient": 1, "y_B": float("nan")},
        "y_S_time must be > 0": {"patient": 1, "y_S_time": 0.0,
                                 "y_S_event": 1},
    }
    for match, item in err.items():
        with pytest.raises(ConductError, match=match):
            s.record_outcomes([item])
    assert s.records[0].y_T is None  # nothing leaked through


def test_record_outcomes_atomic_and_idempotent(small_config):
    s = make(small_config)
    s.add_patients(1, 2, 0.0)
    with pytest.raises(ConductError, match="item 1"):
        s.record_outcomes([{"patient": 1, "y_T": 0},
                           {"patient": 2, "y_T": 5}])
    assert s.records[0].y_T is None  # first item rolled back with the batch
    s.record_outcomes([{"patient": 1, "y_T": 0, "y_B": 4.0}])
    s.record_outcomes([{"patient": 1, "y_T": 0}])  # same value is fine
    with pytest.raises(ConductError, match="already recorded"):
        s.record_outcomes([{"patient": 1, "y_T": 1}])


# ---------------------------------------------------------------------------
# analysis preconditions and seeding

def test_analyze_preconditions(small_config):
    s = make(small_config)
    with pytest.raises(ConductError, match="closing analyses belong"):
        s.analyze(0.0, closing=True)
    with pytest.raises(ConductError, match="final analysis belongs"):
        s.analyze(0.0, final=True)
    s.add_patients(1, 3, 1.0)
    with pytest.raises(ConductError, match="precedes the session clock"):
        s.analyze(0.5)
    with pytest.raises(ConductError, match="no toxicity outcomes"):
        s.analyze(2.0)


def test_rejected_analysis_does_not_shift_chain_seeds(small_config):
    # A rejected analyze command must not claim an analysis ordinal:
    # otherwise replaying the journal (which only holds accepted commands)
    # would seed the surviving analyses differently.
    a = make(small_config, "seed-check")
    a.add_patients(1, 3, 0.0)
    with pytest.raises(ConductError):
        a.analyze(1.0)  # no toxicity data yet
    a.record_outcomes([{"patient": p, "y_B": 5.0, "y_T": 0}
                       for p in (1, 2, 3)])
    rec_live = a.analyze(1.0)
    assert rec_live["analysis"] == 1

    b = ConductSession.from_events(a.events_jsonl().splitlines())
    assert b.state.history == a.state.history
    assert b.snapshot() == a.snapshot()


def test_same_session_id_reproduces_posterior(small_config):
    runs = []
    for _ in range(2):
        s = make(small_config, "fixed-id")
        enroll_with_outcomes(s, 1, 3, 0.0)
        runs.append(s.analyze(1.0)["posterior"])
    assert runs[0] == runs[1]
    other = make(small_config, "other-id")
    enroll_with_outcomes(other, 1, 3, 0.0)
    assert other.analyze(1.0)["posterior"] != runs[0]


# ---------------------------------------------------------------------------
# advance / overrides

def test_advance_requires_pending(small_config):
    s = make(small_config)
    with pytest.raises(ConductError, match="no pending recommendation"):
        s.advance()


def test_override_requires_justification_and_valid_action(small_config):
    s = make(small_config)
    s.analyze(0.0)
    with pytest.raises(ConductError, match="justification"):
        s.advance(accept=False, action="hold")
    with pytest.raises(ConductError, match="action"):
        s.advance(accept=False, action="explode", justification="why not")
    s.state.eliminate(3, "toxic")
    with pytest.raises(ConductError, match="not acceptable"):
        s.advance(accept=False, action="enroll_at", dose=3,
                  justification="site preference")
    applied = s.advance(accept=False, action="enroll_at", dose=2,
                        justification="site preference")
    assert applied["action"] == "enroll_at" and applied["dose"] == 2
    assert "operator override: site preference" in applied["note"]
    decision = s.state.history[-1]["decision"]
    assert decision["accepted"] is False
    assert decision["justification"] == "site preference"
    assert decision["recommended"] == {"action": "enroll_at", "dose": 1}
    assert decision["applied"] == {"action": "enroll_at", "dose": 2}


def test_override_stop_ends_trial(small_config):
    s = make(small_config)
    s.analyze(0.0)
    s.advance(accept=False, action="stop",
              justification="sponsor terminated funding")
    assert s.state.stage == TrialState.DONE
    assert s.pending is None or s.pending["action"] == "stop"


def test_accept_clears_pending(small_config):
    s = make(small_config)
    s.analyze(0.0)
    s.advance(accept=True)
    assert s.pending is None


def test_selection_requires_closing_analysis(small_config):
    s = make(small_config)
    s.state.stage = 2
    s.pending = {"action": "hold", "dose": None, "stage_complete": True,
                 "note": "monitoring complete"}
    with pytest.raises(ConductError, match="stage-closing analysis"):
        s.advance(accept=True)


# ---------------------------------------------------------------------------
# views / auto-censoring

def test_unrecorded_survival_censors_at_followup(small_config):
    s = make(small_config)
    s.add_patients(1, 2, 0.0)
    views = s._views(5.0)
    assert views[0].y_S_time == 5.0 and views[0].y_S_event == 0
    horizon = small_config.windows.followup_months
    views = s._views(horizon + 10.0)
    assert views[0].y_S_time == horizon and views[0].y_S_event == 0
    s.record_outcomes([{"patient": 1, "y_S_time": 2.5, "y_S_event": 1}])
    views = s._views(5.0)
    assert (views[0].y_S_time, views[0].y_S_event) == (2.5, 1)
    assert (views[1].y_S_time, views[1].y_S_event) == (5.0, 0)


# ---------------------------------------------------------------------------
# event journal replay

def test_journal_replay_reproduces_state(small_config):
    s = make(small_config, "replay-1")
    s.analyze(0.0)
    s.advance(accept=True)
    enroll_with_outcomes(s, 1, 3, 0.0, y_b=4.5)
    s.analyze(1.0)
    s.advance(accept=False, action="hold", justification="awaiting labs")
    s.record_outcomes([{"patient": 1, "y_S_time": 3.0, "y_S_event": 1}])

    clone = ConductSession.from_events(s.events_jsonl().splitlines())
    assert clone.version == s.version
    assert clone.snapshot() == s.snapshot()
    assert clone.state.history == s.state.history
    assert clone.events == s.events
    # journals can also be replayed from parsed dicts
    lines = [json.loads(line) for line in s.events_jsonl().splitlines()]
    clone2 = ConductSession.from_events(lines)
    assert clone2.snapshot() == s.snapshot()


def test_journal_requires_created_first(small_config):
    s = make(small_config)
    lines = s.events_jsonl().splitlines()
    with pytest.raises(ConductError, match="created"):
        ConductSession.from_events(lines[1:] if len(lines) > 1 else
                                   ['{"type": "patients", "data": {}}'])


# ---------------------------------------------------------------------------
# rendering

def test_render_block_stage1_structure(small_config):
    s = make(small_config, "render-1")
    enroll_with_outcomes(s, 1, 3, 0.0, y_b=4.2)
    rec = s.analyze(1.0)
    block = render_block(rec, s.config)
    lines = block.splitlines()
    assert lines[0].startswith("analysis 1 — stage 1 (exploration)")
    assert "rules applied: 2a, 2b" in lines[1]
    assert any(l.startswith("n ") for l in lines)
    assert any("4.20" in l for l in lines if l.startswith("mean Y_B"))
    # doses without biomarker data show a placeholder
    assert any("--" in l for l in lines if l.startswith("mean Y_B"))
    assert any(l.startswith("Pr(lowest active=dj)") for l in lines)
    assert any(l.startswith("Pr(pi_T >= 0.3)") for l in lines)
    # monitoring/survival rule rows are absent in the exploration stage
    assert not any("pi_R" in l for l in lines)
    assert not any("RMST" in l for l in lines)
    assert any(l.startswith("acceptable?") for l in lines)
    assert lines[-1].startswith("recommendation:")


def test_render_block_cold_start(small_config):
    s = make(small_config, "render-2")
    rec = s.analyze(0.0)
    block = render_block(rec, s.config)
    assert "rules applied: (none)" in block
    assert "recommendation: enroll_at d1" in block
