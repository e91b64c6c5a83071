"""The trial state machine.

One trial is a sequential process: a BOIN-guided exploration stage with
safety and bioactivity gating, a randomized monitoring stage over the
acceptable doses, and a capped-expansion stage over a selected dose
subset ending in final dose selection. A biomarker-free comparator
(BOIN then cohort expansion around the estimated MTD) shares the same
machinery.

The engine is deliberately ignorant of where outcomes come from: an
OutcomeSource hands back patient views as of a calendar time, so the
same state machine drives simulated trials and live conduct sessions.
Every analysis appends one JSON-ready record to the decision log;
replaying a log against the same source and seed reproduces the trial.

Timing model: cohorts enroll back to back at the configured accrual
rate, an analysis happens once the triggering cohort's relevant
outcomes are observable, and enrollment never outruns a pending
analysis. All times are months from trial start.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .bio_step import estimate_tau, posterior_model_probs
from .core import (
    PatientRecord,
    PosteriorSummary,
    TrialConfig,
    TrialState,
    mean_utility,
    validate_config,
)
from .sampler import ChainSpec
from .stage1_tox import fit_stage1, prob_overdose
from .stage2_joint import (
    fit_joint,
    fit_resp_quadratic,
    marginal_pi,
    outcome_cell_probs,
    prob_futile,
)
from .stage3_surv import fit_surv, rmst_plugin, select_otd


class OutcomeSource(Protocol):
    """Where patient outcomes come from (simulation or live entry)."""

    def enroll(self, dose_index: int, enroll_time: float, stage: int) -> int:
        """Register one patient; returns an opaque handle."""
        ...

    def view(self, handle: int, time: float) -> PatientRecord:
        """The patient's record as observable at a calendar time."""
        ...


# ---------------------------------------------------------------------------
# BOIN primitives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoinBoundaries:
    """Escalation/de-escalation boundaries for a target toxicity rate."""

    phi: float
    lambda_e: float
    lambda_d: float


def boin_boundaries(phi: float) -> BoinBoundaries:
    """Standard boundaries with phi1 = 0.6*phi, phi2 = 1.4*phi."""
    if not 0.0 < phi < 1.0:
        raise ValueError("phi must be in (0,1)")
    phi1, phi2 = 0.6 * phi, 1.4 * phi
    lam_e = (math.log((1 - phi1) / (1 - phi))
             / math.log(phi * (1 - phi1) / (phi1 * (1 - phi))))
    lam_d = (math.log((1 - phi) / (1 - phi2))
             / math.log(phi2 * (1 - phi) / (phi * (1 - phi2))))
    return BoinBoundaries(phi=phi, lambda_e=lam_e, lambda_d=lam_d)


def boin_next_dose(current: int, n_by_dose, tox_by_dose,
                   boundaries: BoinBoundaries, eliminated, J: int):
    """Next assignment: escalate/stay/de-escalate on the observed rate,
    clamped to the grid and never into an eliminated dose.

    When the preferred dose is eliminated, walk down to the nearest
    open dose, then up; returns None when every dose is eliminated.
    """
    n = n_by_dose[current - 1]
    if n < 1:
        raise ValueError(f"no evaluated patients at dose {current}")
    p_hat = tox_by_dose[current - 1] / n
    if p_hat <= boundaries.lambda_e:
        target = min(current + 1, J)
    elif p_hat >= boundaries.lambda_d:
        target = max(current - 1, 1)
    else:
        target = current
    if target not in eliminated:
        return target
    for j in range(target - 1, 0, -1):
        if j not in eliminated:
            return j
    for j in range(target + 1, J + 1):
        if j not in eliminated:
            return j
    return None


def select_mtd_isotonic(n_by_dose, tox_by_dose, phi: float):
    """MTD estimate: isotonic (pool-adjacent-violators) toxicity rates,
    then the dose closest to phi. Ties prefer the highest estimate below
    phi — at equal estimates the higher dose — and the lower dose when
    no tied estimate is below phi. Doses without patients are ignored.
    """
    tried = [j for j in range(1, len(n_by_dose) + 1) if n_by_dose[j - 1] > 0]
    if not tried:
        raise ValueError("no dose has any patients")
    rates = [tox_by_dose[j - 1] / n_by_dose[j - 1] for j in tried]
    weights = [float(n_by_dose[j - 1]) for j in tried]
    iso = _pava(rates, weights)
    best = min(abs(r - phi) for r in iso)
    candidates = [(j, r) for j, r in zip(tried, iso) if abs(r - phi) == best]
    below = [(j, r) for j, r in candidates if r < phi]
    if below:
        return max(below, key=lambda jr: (jr[1], jr[0]))[0]
    return min(j for j, _ in candidates)


def _pava(values, weights):
    """Weighted isotonic regression (nondecreasing) by pooling."""
    blocks = [[v, w, 1] for v, w in zip(values, weights)]  # value, weight, size
    i = 0
    while i + 1 < len(blocks):
        if blocks[i][0] > blocks[i + 1][0] + 1e-12:
            v1, w1, c1 = blocks[i]
            v2, w2, c2 = blocks[i + 1]
            blocks[i] = [(v1 * w1 + v2 * w2) / (w1 + w2), w1 + w2, c1 + c2]
            del blocks[i + 1]
            i = max(i - 1, 0)
        else:
            i += 1
    out = []
    for v, _, c in blocks:
        out.extend([v] * c)
    return out


# ---------------------------------------------------------------------------
# Trial run context
# ---------------------------------------------------------------------------


@dataclass
class TrialResult:
    """Outcome of one complete trial run."""

    otd: int | None
    state: TrialState
    records: list
    log: list = field(default_factory=list)

    @property
    def n_total(self) -> int:
        return int(self.state.n_per_dose.sum())


class TrialRun:
    """Mutable context threading config, source, clock, and RNG streams
    through the stage functions."""

    def __init__(self, config: TrialConfig, source: OutcomeSource, seed):
        validate_config(config)
        self.config = config
        self.source = source
        self.state = TrialState(J=config.grid.J)
        self.handles: list = []
        self.clock = 0.0  # next possible enrollment time
        self.last_enroll = 0.0
        self._root = np.random.SeedSequence(seed)
        self.rng = np.random.default_rng(self._root.spawn(1)[0])
        self.analysis_counter = 0

    # -- enrollment and observation ------------------------------------

    def enroll_cohort(self, dose_index: int, count: int, stage: int):
        """Enroll `count` patients at one dose; they share an enrollment
        time and advance the accrual clock by count/accrual_rate."""
        t = self.clock
        for _ in range(count):
            self.handles.append(self.source.enroll(dose_index, t, stage))
        self.state.add_patients(dose_index, count)
        self.last_enroll = t
        self.clock = t + count / self.config.windows.accrual_rate

    def views(self, time: float) -> list:
        return [self.source.view(h, time) for h in self.handles]

    def hold_until(self, time: float):
        """Enrollment waits for a pending analysis."""
        self.clock = max(self.clock, time)

    def next_chain(self) -> ChainSpec:
        """Fresh per-analysis chain spec on an independent substream."""
        child = self._root.spawn(1)[0]
        seed = int(child.generate_state(1, np.uint64)[0])
        m = self.config.mcmc
        return ChainSpec(n_burn=m.n_burn, n_keep=m.n_keep, seed=seed,
                         thin=m.thin)

    # -- logging ---------------------------------------------------------

    def log_analysis(self, *, time, phase, rules, summary, eliminated_now,
                     action, extra=None):
        self.analysis_counter += 1
        rec = {
            "analysis": self.analysis_counter,
            "time": round(float(time), 4),
            "phase": phase,
            "stage": self.state.stage,
            "n_per_dose": self.state.n_per_dose.tolist(),
            "rules": sorted(rules),
            "posterior": summary.to_jsonable() if summary is not None else None,
            "eliminated_now": {str(j): r for j, r in sorted(eliminated_now.items())},
            "acceptable": sorted(self.state.acceptable),
            "action": action,
        }
        if extra:
            rec.update(extra)
        self.state.log(rec)
        return rec

    def stop(self, time: float, phase: str, reason: str):
        self.state.stage = TrialState.DONE
        self.state.otd = None
        self.log_analysis(time=time, phase=phase, rules=(), summary=None,
                          eliminated_now={},
                          action={"type": "stop", "reason": reason})


def log_to_jsonl(log) -> str:
    """Serialize a decision log as JSON lines (one analysis per line)."""
    return "\n".join(json.dumps(rec, sort_keys=True) for rec in log) + "\n"


# ---------------------------------------------------------------------------
# Analysis helpers: fit current-stage models, evaluate rules, summarize.
# Doses are only ever REMOVED: each helper reports failures among doses
# still acceptable, and the caller eliminates them permanently.
# ---------------------------------------------------------------------------


def _tox_rows(records, grid):
    return [(grid.dose(r.dose_index), r.y_T) for r in records
            if r.y_T is not None]


def _resp_rows(records, grid):
    return [(grid.dose(r.dose_index), r.y_R) for r in records
            if r.y_R is not None]


def _bio_by_dose(records, J):
    out = {j: [] for j in range(1, J + 1)}
    for r in records:
        if r.y_B is not None:
            out[r.dose_index].append(r.y_B)
    return out


def _apply_rule_2a(run: TrialRun, records, summary: PosteriorSummary) -> dict:
    """Bioactivity gate: eliminate doses below the estimated lowest
    active dose. Returns the doses eliminated now."""
    cfg = run.config
    J = cfg.grid.J
    probs = posterior_model_probs(_bio_by_dose(records, J), cfg.step_hyper, J)
    tau = estimate_tau(probs, cfg.cutoffs.c_B)
    summary.step_probs = probs
    summary.tau_hat = tau
    out = {}
    for j in sorted(run.state.acceptable):
        if j < tau:
            run.state.eliminate(j, "bioinactive")
            out[j] = "bioinactive"
    return out


def _eliminate_failing(run: TrialRun, probs, cutoff: float, reason: str,
                       eligible: set | None = None) -> dict:
    """Eliminate acceptable doses whose rule probability crosses the
    cutoff (strictly above it).  When ``eligible`` is given, doses
    outside it are spared even if their probability fails."""
    out = {}
    for j in sorted(run.state.acceptable):
        if eligible is not None and j not in eligible:
            continue
        p = probs[j - 1]
        if not math.isnan(p) and p > cutoff:
            run.state.eliminate(j, reason)
            out[j] = reason
    return out


def _stage1_analysis(run: TrialRun, records, *, with_2a: bool):
    """Exploration-stage analysis: dose-only toxicity model for the
    safety rule, step-model bioactivity gate when requested."""
    cfg = run.config
    grid = cfg.grid
    fit = fit_stage1(_tox_rows(records, grid), cfg.stage1_priors,
                     run.next_chain())
    pr_over = np.array([prob_overdose(grid.dose(j), fit, cfg.limits.pi_T_max)
                        for j in range(1, grid.J + 1)])
    summary = PosteriorSummary(
        pr_overdose=pr_over,
        mean_pi_T=np.array([fit.pi_t(grid.dose(j)).mean()
                            for j in range(1, grid.J + 1)]),
    )
    # The dose-only toxicity curve has two parameters, so its posterior at a
    # dose nobody has received is pure extrapolation from lower doses.  A
    # single rough cohort below an untried dose can push that extrapolated
    # overdose probability past the cutoff, and eliminations are permanent —
    # so the safety rule only strikes an untried dose when some dosed dose
    # at or below it fails too (then monotonicity genuinely carries the
    # verdict upward, e.g. a lowest dose that proves toxic condemns
    # everything above it).  An untried dose that truly is too toxic gets
    # caught by the same rule at a later look, after the walk dosed it.
    tried = {j for j in range(1, grid.J + 1)
             if int(run.state.n_per_dose[j - 1]) > 0}
    failing_tried = [j for j in sorted(tried)
                     if not math.isnan(pr_over[j - 1])
                     and pr_over[j - 1] > cfg.cutoffs.c_T]
    eligible = set(tried)
    if failing_tried:
        eligible.update(range(min(failing_tried), grid.J + 1))
    eliminated = _eliminate_failing(run, pr_over, cfg.cutoffs.c_T, "toxic",
                                    eligible=eligible)
    rules = ["2b"]
    if with_2a:
        eliminated.update(_apply_rule_2a(run, records, summary))
        rules.append("2a")
    return summary, eliminated, rules, fit


def _joint_analysis(run: TrialRun, records, *, with_2a: bool = True,
                    with_2c: bool = True):
    """Monitoring-stage analysis: joint biomarker/toxicity/response
    model for rules (2b) and (2c), bioactivity gate for (2a).

    ``with_2c=False`` still summarizes the response posterior but does
    not eliminate on it — the response futility rule binds only where
    enough response data has matured (end of the randomized stage, the
    expansion interim, and the final analysis), while safety and
    bioactivity are checked at every monitoring round."""
    cfg = run.config
    grid = cfg.grid
    J = grid.J
    fit = fit_joint(records, grid.doses, cfg.joint_priors, run.next_chain())
    doses = [grid.dose(j) for j in range(1, J + 1)]
    pr_over = np.array([
        float(np.mean(fit.pi_t_draws(d) >= cfg.limits.pi_T_max)) for d in doses])
    pr_fut = np.array([prob_futile(d, fit, cfg.limits.pi_R_min) for d in doses])
    pr_above = np.array([
        float(np.mean(fit.pi_r_draws(d) > cfg.limits.pi_R_min)) for d in doses])
    cells = [outcome_cell_probs(d, fit) for d in doses]
    summary = PosteriorSummary(
        pr_overdose=pr_over,
        pr_futile_response=pr_fut,
        pr_response_above_min=pr_above,
        mean_pi_T=np.array([fit.pi_t_draws(d).mean() for d in doses]),
        mean_pi_R=np.array([fit.pi_r_draws(d).mean() for d in doses]),
        mean_utility=np.array([mean_utility(c, cfg.utility) for c in cells]),
        mu_B_hat=np.array([fit.mu_b_hat(d) for d in doses]),
    )
    eliminated = _eliminate_failing(run, pr_over, cfg.cutoffs.c_T, "toxic")
    rules = ["2b"]
    if with_2c:
        eliminated.update(
            _eliminate_failing(run, pr_fut, cfg.cutoffs.c_R,
                               "futile_response"))
        rules.append("2c")
    if with_2a:
        eliminated.update(_apply_rule_2a(run, records, summary))
        rules.append("2a")
    return summary, eliminated, rules, fit, cells


def _survival_rules(run: TrialRun, records, summary, cells_by_dose,
                    mu_b_hat_by_dose, *, use_biomarker: bool):
    """Rule (2d) and posterior-mean RMST for currently acceptable doses."""
    cfg = run.config
    J = cfg.grid.J
    fit = fit_surv(records, J, cfg.surv_priors, run.next_chain(),
                   use_biomarker=use_biomarker)
    pr_short = np.full(J, np.nan)
    mean_rmst = np.full(J, np.nan)
    for j in sorted(run.state.acceptable):
        draws = rmst_plugin(j, fit, cfg.limits.t_S, cells_by_dose[j - 1],
                            mu_b_hat_by_dose[j - 1])
        pr_short[j - 1] = float(np.mean(draws <= cfg.limits.mu_S_min))
        mean_rmst[j - 1] = float(draws.mean())
    summary.pr_futile_survival = pr_short
    summary.mean_rmst = mean_rmst
    eliminated = _eliminate_failing(run, pr_short, cfg.cutoffs.c_S,
                                    "futile_survival")
    return eliminated, fit


def _reduced_analysis(run: TrialRun, records, *, with_survival: bool):
    """Comparator analysis: biomarker-free toxicity and quadratic
    response models; reduced survival model when requested."""
    cfg = run.config
    grid = cfg.grid
    J = grid.J
    doses = [grid.dose(j) for j in range(1, J + 1)]
    tox_fit = fit_stage1(_tox_rows(records, grid), cfg.stage1_priors,
                         run.next_chain())
    resp_fit = fit_resp_quadratic(_resp_rows(records, grid), cfg.joint_priors,
                                  run.next_chain())
    pr_over = np.array([prob_overdose(d, tox_fit, cfg.limits.pi_T_max)
                        for d in doses])
    pr_fut = np.array([
        float(np.mean(resp_fit.pi_r_draws(d) <= cfg.limits.pi_R_min))
        for d in doses])
    summary = PosteriorSummary(
        pr_overdose=pr_over,
        pr_futile_response=pr_fut,
        mean_pi_T=np.array([tox_fit.pi_t(d).mean() for d in doses]),
        mean_pi_R=np.array([resp_fit.pi_r_draws(d).mean() for d in doses]),
    )
    eliminated = _eliminate_failing(run, pr_over, cfg.cutoffs.c_T, "toxic")
    eliminated.update(
        _eliminate_failing(run, pr_fut, cfg.cutoffs.c_R, "futile_response"))
    rules = ["2b", "2c"]
    if with_survival:
        # per-draw cell products pair the two independent chains
        cells = []
        for d in doses:
            pt = tox_fit.pi_t(d)
            pr = resp_fit.pi_r_draws(d)
            cells.append({(u, v): float(np.mean(
                pt**u * (1 - pt)**(1 - u) * pr**v * (1 - pr)**(1 - v)))
                for u in (0, 1) for v in (0, 1)})
        elim_s, _ = _survival_rules(run, records, summary, cells,
                                    [0.0] * J, use_biomarker=False)
        eliminated.update(elim_s)
        rules.append("2d")
    return summary, eliminated, rules


# ---------------------------------------------------------------------------
# Stage 1: BOIN exploration with safety and bioactivity gating
# ---------------------------------------------------------------------------


def run_stage1(run: TrialRun, *, with_2a: bool = True):
    """Explore doses with BOIN cohorts; the acceptability rules bind at
    the stage's two monitoring checkpoints — the half-sample point and
    stage end — while BOIN walks cohort-by-cohort in between.

    Doses are only ever eliminated at a checkpoint: eliminations are
    permanent, so binding them to sparse single-cohort posteriors would
    let one fluke cohort strike safe doses for good.  Between checkpoints
    the walk itself is the safety control (toxic data de-escalate).

    Leaves the surviving acceptable set in run.state; the trial is DONE
    (no selection) when everything is eliminated. The comparator runs
    the identical trajectory with the bioactivity gate disabled.
    """
    cfg = run.config
    st = run.state
    win = cfg.windows
    J = cfg.grid.J
    half_n = math.ceil(cfg.stages.N1 / 2)
    mid_done = False
    current = 1
    while True:
        run.enroll_cohort(current, cfg.stages.cohort_size, stage=1)
        total = int(st.n_per_dose.sum())
        stage_ending = (total >= cfg.stages.N1
                        or int(st.n_per_dose.max()) >= cfg.stages.stage1_per_dose_stop)
        # Everyone enrolled has an observed Y_B by one biomarker window
        # after the last enrollment, so the half-sample condition counts
        # enrollment directly.
        checkpoint = stage_ending or (not mid_done and total >= half_n)
        if checkpoint:
            t_an = run.last_enroll + max(win.toxicity, win.biomarker)
            records = run.views(t_an)
            summary, elim, rules, _ = _stage1_analysis(run, records,
                                                       with_2a=with_2a)
            mid_done = True
        else:
            t_an = run.last_enroll + win.toxicity
            records = run.views(t_an)
            summary, elim, rules = None, {}, []
        run.hold_until(t_an)
        if not st.acceptable:
            run.log_analysis(time=t_an, phase="exploration", rules=rules,
                             summary=summary, eliminated_now=elim,
                             action={"type": "stop",
                                     "reason": "all doses eliminated"})
            st.stage = TrialState.DONE
            st.otd = None
            return
        if stage_ending:
            run.log_analysis(time=t_an, phase="exploration", rules=rules,
                             summary=summary, eliminated_now=elim,
                             action={"type": "advance_stage"})
            st.stage = 2
            return
        n_tox = np.zeros(J)
        n_eval = np.zeros(J)
        for r in records:
            if r.y_T is not None:
                n_eval[r.dose_index - 1] += 1
                n_tox[r.dose_index - 1] += r.y_T
        nxt = boin_next_dose(current, n_eval, n_tox,
                             boin_boundaries(cfg.boin_target),
                             st.eliminated, J)
        run.log_analysis(time=t_an, phase="exploration", rules=rules,
                         summary=summary, eliminated_now=elim,
                         action={"type": "enroll_at", "dose": nxt})
        if nxt is None:  # unreachable while acceptable is nonempty
            st.stage = TrialState.DONE
            st.otd = None
            return
        current = nxt


# ---------------------------------------------------------------------------
# Stage 2: randomized monitoring over the acceptable set
# ---------------------------------------------------------------------------


def run_stage2(run: TrialRun):
    """Randomize monitoring cohorts to every acceptable dose, analyze at
    each round end, stop enrolling eliminated doses. Returns the final
    round's summary for stage-3 selection.

    Bioactivity (2a) and safety (2b) bind at every round; response
    futility (2c) binds once, at the stage-closing analysis, when the
    accumulated responses are worth judging.

    Accrual never pauses once randomization starts: each analysis runs
    at the moment the round's last patient enrolls and uses whatever
    outcomes have cleared their assessment windows by then, so the most
    recent enrollees contribute nothing yet and the response data mature
    round by round."""
    cfg = run.config
    st = run.state
    cap = cfg.stages.stage2_per_dose_cap
    per_round = cfg.stages.stage2_monitor_every
    added = np.zeros(cfg.grid.J, dtype=int)
    last_summary = None
    while st.acceptable and min(added[j - 1] for j in st.acceptable) < cap:
        order = [int(j) for j in run.rng.permutation(sorted(st.acceptable))]
        for j in order:
            k = min(per_round, cap - added[j - 1])
            if k > 0:
                run.enroll_cohort(j, k, stage=2)
                added[j - 1] += k
        last_round = min(added[j - 1] for j in st.acceptable) >= cap
        if last_round:
            # the stage-closing analysis is a planned gate: it decides
            # futility and the next stage's dose set, so it waits for the
            # closing round's responses to mature before judging.
            t_an = max(run.clock, run.last_enroll + cfg.windows.response)
            run.hold_until(t_an)
        else:
            t_an = run.clock
        records = run.views(t_an)
        summary, elim, rules, _, _ = _joint_analysis(run, records,
                                                     with_2c=last_round)
        done = (not st.acceptable or
                min((added[j - 1] for j in st.acceptable), default=cap) >= cap)
        if not st.acceptable:
            action = {"type": "stop", "reason": "all doses eliminated"}
        elif done:
            action = {"type": "advance_stage"}
        else:
            action = {"type": "continue"}
        run.log_analysis(time=t_an, phase="monitoring", rules=rules,
                         summary=summary, eliminated_now=elim, action=action)
        last_summary = summary
        if not st.acceptable:
            st.stage = TrialState.DONE
            st.otd = None
            return None
    st.stage = 3
    return last_summary


# ---------------------------------------------------------------------------
# Stage 3: dose-set reduction and capped expansion
# ---------------------------------------------------------------------------


def select_stage3_doses(summary: PosteriorSummary, L: int, K: int,
                        kappa: float, acceptable, *,
                        rank_by_utility: bool = False) -> set:
    """Candidates for the expansion stage: the union of (i) the best L
    acceptable doses by posterior-mean response (or mean utility) and
    (ii) the best K among the acceptable doses whose probability of a
    sufficient response rate is within a (1-kappa) factor of the maximum.
    The second group ranks by that probability; because it is a Monte
    Carlo estimate, it is compared at two-decimal resolution (its
    reporting precision) with posterior-mean response breaking ties, so
    sampling jitter between saturated probabilities cannot reshuffle the
    cut. May return fewer than L doses when few are acceptable."""
    acc = sorted(acceptable)
    if not acc:
        raise ValueError("no acceptable doses to select from")
    score = summary.mean_utility if rank_by_utility else summary.mean_pi_R
    ranked = sorted(acc, key=lambda j: (-score[j - 1], j))
    c1 = set(ranked[:L])
    q = summary.pr_response_above_min
    q_max = max(q[j - 1] for j in acc)
    qualifying = [j for j in acc if q[j - 1] >= (1 - kappa) * q_max]
    c2 = set(sorted(qualifying,
                    key=lambda j: (-round(q[j - 1], 2), -score[j - 1], j))[:K])
    return c1 | c2


def run_stage3(run: TrialRun, stage2_summary: PosteriorSummary):
    """Select the expansion set, top each dose up to the overall cap with
    one midway interim applying rules (2a)-(2d) (elimination only), then
    run the final analysis and pick the optimal dose."""
    cfg = run.config
    st = run.state
    L, K, kappa = cfg.stages.L, cfg.stages.K, cfg.stages.kappa
    selected = select_stage3_doses(
        stage2_summary, L, K, kappa, st.acceptable,
        rank_by_utility=cfg.stages.rank_by_utility)
    st.restrict_acceptable(selected)
    run.log_analysis(time=run.clock, phase="selection", rules=(),
                     summary=stage2_summary, eliminated_now={},
                     action={"type": "select_doses",
                             "doses": sorted(st.acceptable)})
    deficits = {j: max(cfg.stages.M - int(st.n_per_dose[j - 1]), 0)
                for j in sorted(st.acceptable)}
    interim_at = math.ceil(sum(deficits.values()) / 2)
    interims_left = cfg.stages.n_stage3_interims
    added = 0
    while True:
        open_doses = [j for j in sorted(st.acceptable) if deficits.get(j, 0) > 0]
        if not open_doses:
            break
        # largest remaining deficit first; ties go to the lowest dose
        j = max(open_doses, key=lambda j: (deficits[j], -j))
        k = min(cfg.stages.cohort_size, deficits[j])
        run.enroll_cohort(j, k, stage=3)
        deficits[j] -= k
        added += k
        if interims_left > 0 and added >= interim_at:
            interims_left -= 1
            t_an = run.clock
            records = run.views(t_an)
            summary, elim, rules, _, cells = _joint_analysis(run, records)
            mu_b = [summary.mu_B_hat[i] for i in range(cfg.grid.J)]
            elim_s, _ = _survival_rules(run, records, summary, cells, mu_b,
                                        use_biomarker=True)
            elim.update(elim_s)
            rules.append("2d")
            action = ({"type": "stop", "reason": "all doses eliminated"}
                      if not st.acceptable else {"type": "continue"})
            run.log_analysis(time=t_an, phase="expansion_interim",
                             rules=rules, summary=summary,
                             eliminated_now=elim, action=action)
            if not st.acceptable:
                st.stage = TrialState.DONE
                st.otd = None
                return
    _final_analysis(run, phase="final", use_biomarker=True)


def _final_analysis(run: TrialRun, *, phase: str, use_biomarker: bool):
    """Fit everything at full follow-up, apply all rules, select the OTD."""
    cfg = run.config
    st = run.state
    t_fin = run.last_enroll + cfg.windows.followup_months
    records = run.views(t_fin)
    if use_biomarker:
        summary, elim, rules, _, cells = _joint_analysis(run, records)
        mu_b = [summary.mu_B_hat[i] for i in range(cfg.grid.J)]
        elim_s, _ = _survival_rules(run, records, summary, cells, mu_b,
                                    use_biomarker=True)
        elim.update(elim_s)
        rules.append("2d")
    else:
        summary, elim, rules = _reduced_analysis(run, records,
                                                 with_survival=True)
    rmst_means = {j: float(summary.mean_rmst[j - 1])
                  for j in sorted(st.acceptable)
                  if not math.isnan(summary.mean_rmst[j - 1])}
    otd = select_otd(st.acceptable, rmst_means)
    st.otd = otd
    st.stage = TrialState.DONE
    run.log_analysis(time=t_fin, phase=phase, rules=rules, summary=summary,
                     eliminated_now=elim,
                     action={"type": "select_otd", "dose": otd})


# ---------------------------------------------------------------------------
# Comparator: BOIN then cohort expansion around the estimated MTD
# ---------------------------------------------------------------------------


def run_dfce(run: TrialRun):
    """Biomarker-free comparator: the same exploration trajectory without
    the bioactivity gate, an isotonic MTD estimate, expansion of
    {MTD-2, MTD-1, MTD} to the per-dose cap with one midway interim
    applying (2b)+(2c)+(2d), and final selection by mean RMST."""
    cfg = run.config
    st = run.state
    run_stage1(run, with_2a=False)
    if st.stage == TrialState.DONE:
        return
    t_now = run.clock
    records = run.views(t_now)
    n_eval = np.zeros(cfg.grid.J)
    n_tox = np.zeros(cfg.grid.J)
    for r in records:
        if r.y_T is not None:
            n_eval[r.dose_index - 1] += 1
            n_tox[r.dose_index - 1] += r.y_T
    if not n_eval.any():
        run.stop(t_now, "expansion", "no dose with evaluable toxicity")
        return
    # the estimate uses all toxicity data; eliminated doses are kept out
    # of the expansion set by the acceptable-set intersection below
    mtd = select_mtd_isotonic(n_eval, n_tox, cfg.boin_target)
    expansion = {j for j in (mtd - 2, mtd - 1, mtd) if j >= 1}
    st.restrict_acceptable(expansion)
    run.log_analysis(time=t_now, phase="selection", rules=(), summary=None,
                     eliminated_now={},
                     action={"type": "select_doses", "mtd": mtd,
                             "doses": sorted(st.acceptable)})
    if not st.acceptable:
        st.stage = TrialState.DONE
        st.otd = None
        return
    st.stage = 2
    deficits = {j: max(cfg.stages.M - int(st.n_per_dose[j - 1]), 0)
                for j in sorted(st.acceptable)}
    interim_at = math.ceil(sum(deficits.values()) / 2)
    interims_left = cfg.stages.n_stage3_interims
    added = 0
    while st.acceptable:
        open_doses = [j for j in sorted(st.acceptable) if deficits.get(j, 0) > 0]
        if not open_doses:
            break
        order = [int(j) for j in run.rng.permutation(open_doses)]
        for j in order:
            k = min(cfg.stages.cohort_size, deficits[j])
            if k > 0:
                run.enroll_cohort(j, k, stage=2)
                deficits[j] -= k
                added += k
        # expansion mirrors the optimization stage's cadence: enrollment
        # runs to the caps with a single midway interim, then the final
        # analysis settles selection.
        if interims_left > 0 and added >= interim_at:
            interims_left -= 1
            t_an = run.clock
            records = run.views(t_an)
            summary, elim, rules = _reduced_analysis(run, records,
                                                     with_survival=True)
            action = ({"type": "stop", "reason": "all doses eliminated"}
                      if not st.acceptable else {"type": "continue"})
            run.log_analysis(
                time=t_an, phase="expansion_interim",
                rules=rules, summary=summary, eliminated_now=elim,
                action=action)
            if not st.acceptable:
                st.stage = TrialState.DONE
                st.otd = None
                return
    _final_analysis(run, phase="final", use_biomarker=False)


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


def run_trial(config: TrialConfig, source: OutcomeSource, seed,
              design: str = "demo") -> TrialResult:
    """Run one complete trial and return its outcome with the full
    decision log. `design` is "demo" (three-stage biomarker design) or
    "dfce" (BOIN + cohort expansion comparator)."""
    if design not in ("demo", "dfce"):
        raise ValueError(f"unknown design {design!r}")
    run = TrialRun(config, source, seed)
    if design == "dfce":
        run_dfce(run)
    else:
        run_stage1(run)
        if run.state.stage != TrialState.DONE:
            summary = run_stage2(run)
            if run.state.stage != TrialState.DONE:
                run_stage3(run, summary)
    records = run.views(run.last_enroll + config.windows.followup_months)
    return TrialResult(otd=run.state.otd, state=run.state, records=records,
                       log=run.state.history)
