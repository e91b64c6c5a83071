"""Interactive trial conduct: an event-sourced session wrapping the
engine's analysis machinery for operator-driven trials.

A :class:`ConductSession` holds one live trial.  Every state change goes
through a command method (``add_patients``, ``record_outcomes``,
``analyze``, ``advance``); each accepted command appends one event to the
session journal and bumps the version.  Replaying the journal into a
fresh session reproduces the identical state, because analysis chain
seeds derive from the session id and the analysis ordinal rather than
from call history.

Unlike the simulation engine, which reveals outcomes from scenario truth
on a clock, conduct outcomes are whatever the operator has entered.  The
one derived quantity is survival follow-up: a patient with no recorded
survival entry is treated as censored at the analysis time (capped at
the follow-up window), so enrolled patients always contribute their
at-risk time without the operator typing censoring rows.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np

from .core import PatientRecord, TrialState, config_from_dict, config_to_dict, validate_config
from .engine import (
    _joint_analysis,
    _stage1_analysis,
    _survival_rules,
    boin_boundaries,
    boin_next_dose,
    select_stage3_doses,
)
from .sampler import ChainSpec
from .stage3_surv import select_otd

EVENT_SCHEMA_VERSION = 1

OUTCOME_FIELDS = ("y_B", "y_T", "y_R", "y_S_time", "y_S_event")


class ConductError(ValueError):
    """Command rejected; ``status`` is the HTTP status it maps to."""

    def __init__(self, message: str, status: int = 422):
        super().__init__(message)
        self.status = status


def _session_entropy(session_id: str) -> int:
    digest = hashlib.sha256(session_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


class _AnalysisContext:
    """Duck-typed stand-in for the engine's TrialRun inside the analysis
    helpers: provides config, state, and per-analysis chain specs."""

    def __init__(self, session: "ConductSession"):
        self._session = session
        self.config = session.config
        self.state = session.state

    def next_chain(self) -> ChainSpec:
        return self._session._next_chain()


class ConductSession:
    """One live trial driven by operator commands.

    Construct via :meth:`create` (new trial) or :meth:`from_events`
    (rebuild from a journal).  Commands raise :class:`ConductError` on
    rejection and leave the session untouched.
    """

    def __init__(self, session_id: str, config):
        validate_config(config)
        self.id = session_id
        self.config = config
        self.state = TrialState(J=config.grid.J)
        self.records: list[PatientRecord] = []
        self.version = 0
        self.clock = 0.0
        self.pending: dict | None = None
        self.events: list[dict] = []
        self._entropy = _session_entropy(session_id)
        self._analysis_index = 0
        self._chain_calls = 0
        self._stage2_summary = None

    # -- construction ----------------------------------------------------

    @classmethod
    def create(cls, session_id: str, config) -> "ConductSession":
        session = cls(session_id, config)
        session._append("created", {"id": session_id,
                                    "config": config_to_dict(config)})
        return session

    @classmethod
    def from_events(cls, lines) -> "ConductSession":
        """Rebuild a session by replaying its journal (strings or dicts)."""
        events = []
        for lineno, line in enumerate(lines, start=1):
            if isinstance(line, str):
                line = line.strip()
                if not line:
                    continue
                try:
                    line = json.loads(line)
                except json.JSONDecodeError as err:
                    raise ConductError(f"journal line {lineno}: {err}") from err
            events.append(line)
        if not events or events[0].get("type") != "created":
            raise ConductError("journal must start with a 'created' event")
        head = events[0]["data"]
        session = cls.create(head["id"], config_from_dict(head["config"]))
        for event in events[1:]:
            kind, data = event.get("type"), event.get("data", {})
            if kind == "patients":
                session.add_patients(data["dose"], data["count"],
                                     data["time"], stage=data.get("stage"))
            elif kind == "outcomes":
                session.record_outcomes(data["items"])
            elif kind == "analyzed":
                session.analyze(data["time"],
                                closing=data.get("closing", False),
                                final=data.get("final", False))
            elif kind == "advanced":
                session.advance(data.get("accept", True),
                                action=data.get("action"),
                                dose=data.get("dose"),
                                justification=data.get("justification"))
            else:
                raise ConductError(f"unknown event type {kind!r}")
        return session

    def events_jsonl(self) -> str:
        return "\n".join(json.dumps(e, sort_keys=True) for e in self.events) + "\n"

    # -- journal plumbing --------------------------------------------------

    def _append(self, kind: str, data: dict) -> dict:
        self.version += 1
        event = {"seq": len(self.events) + 1, "version": EVENT_SCHEMA_VERSION,
                 "type": kind, "data": data, "state_version": self.version}
        self.events.append(event)
        return event

    def _next_chain(self) -> ChainSpec:
        ss = np.random.SeedSequence(
            entropy=self._entropy,
            spawn_key=(self._analysis_index, self._chain_calls))
        self._chain_calls += 1
        m = self.config.mcmc
        return ChainSpec(n_burn=m.n_burn, n_keep=m.n_keep,
                         seed=int(ss.generate_state(1, np.uint64)[0]),
                         thin=m.thin)

    # -- commands ----------------------------------------------------------

    def add_patients(self, dose: int, count: int, time: float,
                     stage: int | None = None) -> list[int]:
        """Register an enrolled cohort. Returns the new patient ids."""
        st = self.state
        if st.stage == TrialState.DONE:
            raise ConductError("trial is complete; no further enrollment")
        if not isinstance(dose, int) or not 1 <= dose <= self.config.grid.J:
            raise ConductError(f"dose must be 1..{self.config.grid.J}")
        if dose not in st.acceptable:
            raise ConductError(f"dose {dose} is not currently acceptable")
        if not isinstance(count, int) or count < 1:
            raise ConductError("count must be a positive integer")
        time = float(time)
        if time < self.clock:
            raise ConductError(
                f"enrollment time {time} precedes the session clock {self.clock}")
        stage = st.stage if stage is None else int(stage)
        if stage != st.stage:
            raise ConductError(f"stage {stage} does not match current stage "
                               f"{st.stage}")
        cfg = self.config.stages
        n_now = int(st.n_per_dose[dose - 1])
        if st.stage == 2:
            added = sum(1 for r in self.records
                        if r.dose_index == dose and r.stage_enrolled == 2)
            if added + count > cfg.stage2_per_dose_cap:
                raise ConductError(
                    f"dose {dose} monitoring additions capped at "
                    f"{cfg.stage2_per_dose_cap}")
        if st.stage == 3 and n_now + count > cfg.M:
            raise ConductError(f"dose {dose} capped at {cfg.M} patients total")
        ids = []
        for _ in range(count):
            pid = len(self.records) + 1
            self.records.append(PatientRecord(
                id=pid, dose_index=dose, enroll_time=time,
                stage_enrolled=stage))
            ids.append(pid)
        st.add_patients(dose, count)
        self.clock = time
        self._append("patients", {"dose": dose, "count": count, "time": time,
                                  "stage": stage, "first_id": ids[0]})
        return ids

    def record_outcomes(self, items) -> int:
        """Record observed outcomes; each item is a dict with ``patient``
        plus any of y_B, y_T, y_R, or the y_S_time/y_S_event pair."""
        items = list(items)
        staged: list[tuple[PatientRecord, str, object]] = []
        for k, item in enumerate(items):
            if not isinstance(item, dict) or "patient" not in item:
                raise ConductError(f"outcome item {k}: missing patient id")
            pid = item["patient"]
            if not isinstance(pid, int) or not 1 <= pid <= len(self.records):
                raise ConductError(f"outcome item {k}: unknown patient {pid!r}")
            record = self.records[pid - 1]
            fields = {f: item[f] for f in OUTCOME_FIELDS
                      if item.get(f) is not None}
            if not fields:
                raise ConductError(f"outcome item {k}: no outcome fields")
            extra = set(item) - set(OUTCOME_FIELDS) - {"patient"}
            if extra:
                raise ConductError(
                    f"outcome item {k}: unknown fields {sorted(extra)}")
            if ("y_S_time" in fields) != ("y_S_event" in fields):
                raise ConductError(f"outcome item {k}: y_S_time and "
                                   "y_S_event must be recorded together")
            for name, value in fields.items():
                if name in ("y_T", "y_R", "y_S_event"):
                    if value not in (0, 1):
                        raise ConductError(
                            f"outcome item {k}: {name} must be 0 or 1")
                    value = int(value)
                else:
                    value = float(value)
                    if not math.isfinite(value):
                        raise ConductError(
                            f"outcome item {k}: {name} must be finite")
                    if name == "y_S_time" and value <= 0:
                        raise ConductError(
                            f"outcome item {k}: y_S_time must be > 0")
                current = getattr(record, name)
                if current is not None and current != value:
                    raise ConductError(
                        f"outcome item {k}: {name} for patient {pid} already "
                        f"recorded as {current}")
                staged.append((record, name, value))
        # all items validated; apply atomically
        for record, name, value in staged:
            setattr(record, name, value)
        self._append("outcomes", {"items": items})
        return len(items)

    def analyze(self, time: float, *, closing: bool = False,
                final: bool = False) -> dict:
        """Run the current stage's models and rules at ``time``; returns
        the appended decision-log record (with the recommendation)."""
        st = self.state
        if st.stage == TrialState.DONE:
            raise ConductError("trial is complete")
        time = float(time)
        if time < self.clock:
            raise ConductError(
                f"analysis time {time} precedes the session clock {self.clock}")
        if closing and st.stage != 2:
            raise ConductError("closing analyses belong to the monitoring stage")
        if final and st.stage != 3:
            raise ConductError("the final analysis belongs to the last stage")
        if (st.stage == 1 and self.records
                and not any(r.y_T is not None for r in self.records)):
            # validated before the analysis ordinal is claimed: a rejected
            # command must not shift later analyses' chain seeds, or journal
            # replays of the surviving commands would diverge
            raise ConductError("no toxicity outcomes recorded yet")
        self._analysis_index += 1
        self._chain_calls = 0
        ctx = _AnalysisContext(self)
        views = self._views(time)

        if not self.records:
            summary, elim, rules = None, {}, []
            phase = "exploration"
        elif st.stage == 1:
            phase = "exploration"
            summary, elim, rules, _ = _stage1_analysis(ctx, views, with_2a=True)
        elif st.stage == 2:
            phase = "monitoring"
            summary, elim, rules, _, _ = _joint_analysis(ctx, views,
                                                         with_2c=closing)
            if closing:
                self._stage2_summary = summary
        else:
            phase = "final" if final else "expansion_interim"
            summary, elim, rules, _, cells = _joint_analysis(ctx, views)
            mu_b = [summary.mu_B_hat[i] for i in range(self.config.grid.J)]
            elim_s, _ = _survival_rules(ctx, views, summary, cells, mu_b,
                                        use_biomarker=True)
            elim.update(elim_s)
            rules.append("2d")

        if final and st.acceptable:
            rmst_means = {j: float(summary.mean_rmst[j - 1])
                          for j in sorted(st.acceptable)
                          if not math.isnan(summary.mean_rmst[j - 1])}
            st.otd = select_otd(st.acceptable, rmst_means)
            st.stage = TrialState.DONE
            rec = {"action": "stop", "dose": st.otd, "stage_complete": False,
                   "note": f"trial complete; optimal dose d{st.otd}"}
        else:
            rec = self._recommend(closing=closing)
        self.pending = rec
        record = {
            "analysis": self._analysis_index,
            "time": round(time, 4),
            "phase": phase,
            "stage": st.stage,
            "n_per_dose": st.n_per_dose.tolist(),
            "rules": sorted(rules),
            "posterior": summary.to_jsonable() if summary is not None else None,
            "eliminated_now": {str(j): r for j, r in sorted(elim.items())},
            "acceptable": sorted(st.acceptable),
            "action": {k: v for k, v in (("type", rec["action"]),
                                         ("dose", rec.get("dose"))) if v is not None},
            "note": rec["note"],
            "observed": self._observed_stats(views),
        }
        st.log(record)
        self.clock = time
        self._append("analyzed", {"time": time, "closing": closing,
                                  "final": final})
        return record

    def advance(self, accept: bool = True, action: str | None = None,
                dose: int | None = None,
                justification: str | None = None) -> dict:
        """Accept the pending recommendation, or override it (an override
        requires a written justification, which is logged)."""
        st = self.state
        if self.pending is None:
            raise ConductError("no pending recommendation; run an analysis")
        pending = self.pending
        if accept:
            applied = dict(pending)
            if pending.get("stage_complete"):
                if st.stage == 1:
                    st.stage = 2
                elif st.stage == 2:
                    self._select_expansion_doses()
                else:
                    raise ConductError("nothing to advance in this stage")
            elif pending["action"] == "stop":
                st.stage = TrialState.DONE
        else:
            if not justification or not str(justification).strip():
                raise ConductError("an override requires a justification")
            if action is None:
                raise ConductError("an override names the action to take")
            if action not in ("enroll_at", "hold", "stop"):
                raise ConductError(f"unknown action {action!r}")
            if action == "enroll_at":
                if dose is None:
                    raise ConductError("enroll_at override needs a dose")
                if dose not in st.acceptable:
                    raise ConductError(f"dose {dose} is not acceptable")
            applied = {"action": action, "dose": dose,
                       "note": f"operator override: {justification}",
                       "stage_complete": False}
            if action == "stop":
                st.stage = TrialState.DONE
        st.log({"decision": {"accepted": bool(accept),
                             "recommended": {k: pending.get(k)
                                             for k in ("action", "dose")},
                             "applied": {k: applied.get(k)
                                         for k in ("action", "dose")},
                             "justification": justification},
                "time": round(self.clock, 4),
                "stage": st.stage})
        self.pending = (None if accept or st.stage == TrialState.DONE
                        else applied)
        self._append("advanced", {"accept": bool(accept), "action": action,
                                  "dose": dose,
                                  "justification": justification})
        return applied

    # -- derived views -------------------------------------------------

    def _views(self, time: float) -> list[PatientRecord]:
        """Records as the analysis sees them: entered outcomes, with
        unrecorded survival censored at follow-up as of ``time``."""
        out = []
        horizon = self.config.windows.followup_months
        for r in self.records:
            view = PatientRecord(id=r.id, dose_index=r.dose_index,
                                 enroll_time=r.enroll_time,
                                 y_B=r.y_B, y_T=r.y_T, y_R=r.y_R,
                                 stage_enrolled=r.stage_enrolled)
            if r.y_S_event is not None:
                view.y_S_time, view.y_S_event = r.y_S_time, r.y_S_event
            else:
                followed = min(time - r.enroll_time, horizon)
                if followed > 0:
                    view.y_S_time, view.y_S_event = followed, 0
            out.append(view)
        return out

    def _observed_stats(self, views) -> dict:
        J = self.config.grid.J
        bio = {j: [] for j in range(1, J + 1)}
        tox = [0] * J
        n_tox = [0] * J
        resp = [0] * J
        n_resp = [0] * J
        for r in views:
            j = r.dose_index
            if r.y_B is not None:
                bio[j].append(r.y_B)
            if r.y_T is not None:
                n_tox[j - 1] += 1
                tox[j - 1] += r.y_T
            if r.y_R is not None:
                n_resp[j - 1] += 1
                resp[j - 1] += r.y_R
        return {
            "mean_y_B": [round(float(np.mean(bio[j])), 4) if bio[j] else None
                         for j in range(1, J + 1)],
            "n_tox_eval": n_tox,
            "n_tox": tox,
            "n_resp_eval": n_resp,
            "n_resp": resp,
        }

    # -- recommendation ---------------------------------------------------

    def _recommend(self, *, closing: bool) -> dict:
        st = self.state
        cfg = self.config.stages
        if not st.acceptable:
            return {"action": "stop", "dose": None, "stage_complete": False,
                    "note": "all doses eliminated"}
        if st.stage == 1:
            total = int(st.n_per_dose.sum())
            if (total >= cfg.N1
                    or int(st.n_per_dose.max()) >= cfg.stage1_per_dose_stop):
                return {"action": "hold", "dose": None, "stage_complete": True,
                        "note": "exploration complete; advance to monitoring"}
            if not self.records:
                low = min(st.acceptable)
                return {"action": "enroll_at", "dose": low,
                        "stage_complete": False,
                        "note": f"start exploration at d{low}"}
            current = self.records[-1].dose_index
            n_eval = np.zeros(self.config.grid.J)
            n_tox = np.zeros(self.config.grid.J)
            for r in self.records:
                if r.y_T is not None:
                    n_eval[r.dose_index - 1] += 1
                    n_tox[r.dose_index - 1] += r.y_T
            try:
                nxt = boin_next_dose(current, n_eval, n_tox,
                                     boin_boundaries(self.config.boin_target),
                                     st.eliminated, self.config.grid.J)
            except ValueError:
                return {"action": "hold", "dose": None,
                        "stage_complete": False,
                        "note": f"record toxicity outcomes for d{current} "
                                "before the next cohort"}
            if nxt is None:
                return {"action": "stop", "dose": None,
                        "stage_complete": False,
                        "note": "all doses eliminated"}
            return {"action": "enroll_at", "dose": nxt,
                    "stage_complete": False,
                    "note": "escalation rule on observed toxicity"}
        if st.stage == 2:
            added = {j: 0 for j in range(1, self.config.grid.J + 1)}
            for r in self.records:
                if r.stage_enrolled == 2:
                    added[r.dose_index] += 1
            open_doses = [j for j in sorted(st.acceptable)
                          if added[j] < cfg.stage2_per_dose_cap]
            if not open_doses:
                if closing:
                    return {"action": "hold", "dose": None,
                            "stage_complete": True,
                            "note": "monitoring complete; advance to "
                                    "candidate selection"}
                return {"action": "hold", "dose": None,
                        "stage_complete": False,
                        "note": "monitoring caps reached; run the "
                                "stage-closing analysis (closing=true)"}
            j = min(open_doses, key=lambda j: (added[j], j))
            return {"action": "enroll_at", "dose": j, "stage_complete": False,
                    "note": "balance the monitoring round across "
                            "acceptable doses"}
        deficits = {j: cfg.M - int(st.n_per_dose[j - 1])
                    for j in sorted(st.acceptable)}
        open_doses = [j for j, d in deficits.items() if d > 0]
        if not open_doses:
            return {"action": "hold", "dose": None, "stage_complete": False,
                    "note": "expansion complete; run the final analysis "
                            "(final=true)"}
        j = max(open_doses, key=lambda j: (deficits[j], -j))
        return {"action": "enroll_at", "dose": j, "stage_complete": False,
                "note": "fill the largest remaining expansion deficit"}

    def _select_expansion_doses(self) -> None:
        st = self.state
        if self._stage2_summary is None:
            raise ConductError("run the stage-closing analysis before "
                               "advancing to selection")
        cfg = self.config.stages
        selected = select_stage3_doses(
            self._stage2_summary, cfg.L, cfg.K, cfg.kappa, st.acceptable,
            rank_by_utility=cfg.rank_by_utility)
        st.restrict_acceptable(selected)
        st.stage = 3
        st.log({"selection": {"doses": sorted(st.acceptable)},
                "time": round(self.clock, 4), "stage": 3})

    # -- snapshots -------------------------------------------------------

    def snapshot(self) -> dict:
        latest = None
        for record in reversed(self.state.history):
            if record.get("posterior") is not None:
                latest = record["posterior"]
                break
        return {
            "version": 1,
            "id": self.id,
            "state_version": self.version,
            "clock": round(self.clock, 4),
            "n_patients": len(self.records),
            "state": self.state.snapshot(),
            "pending": self.pending,
            "latest_posterior": latest,
            "config": config_to_dict(self.config),
        }


# ---------------------------------------------------------------------------
# Analysis block rendering (shared verbatim by the CLI and the service)
# ---------------------------------------------------------------------------

_LABEL_W = 22
_COL_W = 8


def _fmt_row(label: str, cells) -> str:
    return (label.ljust(_LABEL_W)
            + "".join(str(c).rjust(_COL_W) for c in cells))


def _fmt_num(value, digits: int) -> str:
    if value is None:
        return "--"
    value = float(value)
    if math.isnan(value):
        return "--"
    return f"{value:.{digits}f}"


def render_block(record: dict, config) -> str:
    """Format one analysis record as the fixed-width per-dose summary
    table used by both the CLI and the HTTP service.  Rule-probability
    rows appear only for rules that were applied at this analysis."""
    J = config.grid.J
    doses = [f"d{j}" for j in range(1, J + 1)]
    lines = [
        f"analysis {record['analysis']} — stage {record['stage']} "
        f"({record['phase']}), t = {record['time']:.2f} months",
        "rules applied: " + (", ".join(record["rules"]) or "(none)"),
        _fmt_row("", doses),
        _fmt_row("n", record["n_per_dose"]),
    ]
    obs = record.get("observed") or {}
    if obs:
        lines.append(_fmt_row("mean Y_B",
                              [_fmt_num(v, 2) for v in obs["mean_y_B"]]))
        lines.append(_fmt_row("# toxicity", obs["n_tox"]))
        lines.append(_fmt_row("# response", obs["n_resp"]))
    post = record.get("posterior") or {}
    rules = set(record["rules"])
    lim = config.limits
    prob_rows = (
        ("2a", "step_probs", "Pr(lowest active=dj)"),
        ("2b", "pr_overdose", f"Pr(pi_T >= {lim.pi_T_max:g})"),
        ("2c", "pr_futile_response", f"Pr(pi_R <= {lim.pi_R_min:g})"),
        ("2d", "pr_futile_survival",
         f"Pr(RMST <= {lim.mu_S_min:g}m)"),
    )
    for rule, field, label in prob_rows:
        if rule in rules and post.get(field) is not None:
            lines.append(_fmt_row(label,
                                  [_fmt_num(v, 2) for v in post[field]]))
    if "2d" in rules and post.get("mean_rmst") is not None:
        lines.append(_fmt_row("mean RMST (months)",
                              [_fmt_num(v, 1) for v in post["mean_rmst"]]))
    acceptable = set(record["acceptable"])
    lines.append(_fmt_row("acceptable?",
                          ["Yes" if j in acceptable else "No"
                           for j in range(1, J + 1)]))
    if record.get("eliminated_now"):
        gone = ", ".join(f"d{j} ({reason})"
                         for j, reason in sorted(record["eliminated_now"].items()))
        lines.append(f"eliminated now: {gone}")
    action = record.get("action", {})
    rec_line = action.get("type", "hold")
    if action.get("dose") is not None:
        rec_line += f" d{action['dose']}"
    note = record.get("note")
    if note:
        rec_line += f" — {note}"
    lines.append("recommendation: " + rec_line)
    return "\n".join(lines) + "\n"
