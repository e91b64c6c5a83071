"""Virtual trials: scenario truth, patient generation, operating characteristics.

A :class:`Scenario` is one simulated world — per-dose biomarker means,
toxicity/response rates, and target restricted mean survival, plus the
generation knobs (Weibull shape, covariate log-hazard effects, accrual
rate, follow-up horizon).  Weibull scales are back-solved by bisection so
every dose hits its target RMST; :class:`SimulatedSource` then feeds a
trial run by revealing each patient's latent outcomes as the assessment
windows pass.  :func:`simulate_oc` runs independent replicates, optionally
across processes, and aggregates selection percentages and patient counts.

Replicate randomness derives only from ``(base_seed, replicate index)``,
never from worker scheduling, so an operating-characteristics table is
reproducible bit-for-bit at any worker count.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from . import _kernels
from .core import (
    AcceptabilityLimits,
    DecisionCutoffs,
    DoseGrid,
    ObservationWindows,
    PatientRecord,
    StageConfig,
    TrialConfig,
    config_from_dict,
    config_to_dict,
    validate_config,
)
from .engine import run_trial
from .stage3_surv import RMST_ABS_TOL, RMST_MAX_DEPTH

# Bisection bracket for the Weibull scale, on the log scale.
LOG_LAMBDA_LO = -30.0
LOG_LAMBDA_HI = 10.0

DESIGNS = ("demo", "dfce")


# ---------------------------------------------------------------------------
# Scenario: the assumed truth of one simulated world


@dataclass(frozen=True)
class Scenario:
    """Per-dose truth and generation settings for one simulated world.

    ``target_rmst`` entries are restricted means over ``[0, t_S]`` months.
    If ``lambdas`` is None the Weibull scales are back-solved so each dose
    hits its target exactly; a fixed tuple pins them instead (the target
    values are then descriptive).  ``horizon`` caps each patient's
    follow-up (administrative censoring only).
    """

    name: str
    dose_values: tuple
    mu_B: tuple
    pi_T: tuple
    pi_R: tuple
    target_rmst: tuple
    sigma_b_sq: float = 1.0
    gen_rho: float = 1.5
    gen_eta1: float = 3.0
    gen_eta2: float = -2.0
    gen_eta3: float = 0.0
    t_S: float = 12.0
    horizon: float = 24.0
    accrual_rate: float = 3.0
    tox_resp_odds_ratio: float = 1.0
    lambdas: tuple | None = None

    def __post_init__(self):
        for name in ("dose_values", "mu_B", "pi_T", "pi_R", "target_rmst"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        if self.lambdas is not None:
            object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        J = len(self.dose_values)
        if J == 0:
            raise ValueError("scenario needs at least one dose")
        for name in ("mu_B", "pi_T", "pi_R", "target_rmst"):
            if len(getattr(self, name)) != J:
                raise ValueError(f"{name} must have one entry per dose ({J})")
        if any(d2 <= d1 for d1, d2 in zip(self.dose_values, self.dose_values[1:])):
            raise ValueError("dose_values must be strictly increasing")
        for name in ("pi_T", "pi_R"):
            if any(not 0.0 <= p <= 1.0 for p in getattr(self, name)):
                raise ValueError(f"{name} entries must lie in [0, 1]")
        if any(not 0.0 < m <= self.t_S for m in self.target_rmst):
            raise ValueError("target_rmst entries must lie in (0, t_S]")
        if self.sigma_b_sq < 0.0:
            raise ValueError("sigma_b_sq must be >= 0")
        if self.gen_rho <= 0.0:
            raise ValueError("gen_rho must be > 0")
        if self.t_S <= 0.0 or self.horizon <= 0.0 or self.accrual_rate <= 0.0:
            raise ValueError("t_S, horizon, and accrual_rate must be > 0")
        if self.tox_resp_odds_ratio <= 0.0:
            raise ValueError("tox_resp_odds_ratio must be > 0")
        if self.lambdas is not None:
            if len(self.lambdas) != J:
                raise ValueError(f"lambdas must have one entry per dose ({J})")
            if any(lam <= 0.0 for lam in self.lambdas):
                raise ValueError("lambdas entries must be > 0")

    @property
    def J(self) -> int:
        return len(self.dose_values)


_SCENARIO_FIELDS = (
    "name", "dose_values", "mu_B", "pi_T", "pi_R", "target_rmst",
    "sigma_b_sq", "gen_rho", "gen_eta1", "gen_eta2", "gen_eta3",
    "t_S", "horizon", "accrual_rate", "tox_resp_odds_ratio", "lambdas",
)


def scenario_to_dict(scenario: Scenario) -> dict:
    out = {"version": 1}
    for name in _SCENARIO_FIELDS:
        value = getattr(scenario, name)
        out[name] = list(value) if isinstance(value, tuple) else value
    if out["lambdas"] is None:
        del out["lambdas"]
    return out


def scenario_from_dict(d: dict) -> Scenario:
    if d.get("version", 1) != 1:
        raise ValueError(f"unsupported scenario version {d.get('version')!r}")
    kwargs = {name: d[name] for name in _SCENARIO_FIELDS if name in d}
    return Scenario(**kwargs)


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(scenario), fh, indent=2)
        fh.write("\n")


def bundled_scenarios() -> tuple:
    """Names of the scenario files shipped with the package."""
    root = resources.files(__package__) / "scenarios"
    return tuple(sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json")))


def load_scenario(name_or_path) -> Scenario:
    """Load a scenario by bundled name (e.g. ``"s1"``) or from a JSON file."""
    name = str(name_or_path)
    if name.isidentifier():
        candidate = resources.files(__package__) / "scenarios" / f"{name}.json"
        if candidate.is_file():
            return scenario_from_dict(json.loads(candidate.read_text()))
    with open(name_or_path, encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Outcome-cell law and Weibull-scale back-solving


def joint_outcome_cells(p_t: float, p_r: float, odds_ratio: float = 1.0) -> dict:
    """Joint law of (y_T, y_R) with the given marginals, keyed ``(u, v)``.

    ``odds_ratio=1`` gives independence (the default generator); any other
    positive value picks the 2x2 table from the Plackett family, whose
    (1,1) mass is the admissible root of the odds-ratio quadratic.
    """
    if not (0.0 <= p_t <= 1.0 and 0.0 <= p_r <= 1.0):
        raise ValueError("marginals must lie in [0, 1]")
    if odds_ratio <= 0.0:
        raise ValueError("odds_ratio must be > 0")
    if abs(odds_ratio - 1.0) < 1e-12:
        p11 = p_t * p_r
    else:
        s = 1.0 + (p_t + p_r) * (odds_ratio - 1.0)
        disc = s * s - 4.0 * odds_ratio * (odds_ratio - 1.0) * p_t * p_r
        p11 = (s - math.sqrt(max(disc, 0.0))) / (2.0 * (odds_ratio - 1.0))
    # Guard rounding: the (1,1) mass is bounded by the Frechet limits.
    p11 = min(max(p11, max(0.0, p_t + p_r - 1.0)), min(p_t, p_r))
    return {
        (1, 1): p11,
        (1, 0): p_t - p11,
        (0, 1): p_r - p11,
        (0, 0): 1.0 - p_t - p_r + p11,
    }


def mixture_rmst(lam: float, rho: float, eta, pi_joint: dict, t_S: float,
                 b_gen: float = 0.0) -> float:
    """Restricted mean over [0, t_S] of the Weibull outcome mixture.

    ``eta = (eta1, eta2, eta3)`` scale the hazard by
    ``exp(eta1*u + eta2*v + eta3*b_gen)`` in each (u, v) cell.
    """
    eta1, eta2, eta3 = (float(e) for e in eta)
    total = 0.0
    for (u, v), p in pi_joint.items():
        if p <= 0.0:
            continue
        lam_eff = lam * math.exp(eta1 * u + eta2 * v + eta3 * b_gen)
        total += p * _kernels.rmst_integral(lam_eff, rho, t_S, RMST_ABS_TOL,
                                            RMST_MAX_DEPTH)
    return total


def solve_lambda(target_rmst: float, rho: float, eta, pi_joint: dict,
                 t_S: float, b_gen: float = 0.0) -> float:
    """Back-solve the Weibull scale whose mixture RMST hits ``target_rmst``.

    The mixture RMST is strictly decreasing in the scale, so bisection on
    log(lambda) over [-30, 10] converges; the bracket is driven far below
    the 1e-4-month accuracy the result is used at.
    """
    if target_rmst >= t_S:
        raise ValueError(f"target RMST {target_rmst} must be < t_S={t_S}")
    if target_rmst <= 0.0:
        raise ValueError(f"target RMST {target_rmst} must be > 0")
    lo, hi = LOG_LAMBDA_LO, LOG_LAMBDA_HI

    def deficit(loglam):
        return mixture_rmst(math.exp(loglam), rho, eta, pi_joint, t_S, b_gen) - target_rmst

    if deficit(lo) < 0.0 or deficit(hi) > 0.0:
        raise ValueError(
            f"target RMST {target_rmst} not reachable for any scale in "
            f"[e^{LOG_LAMBDA_LO}, e^{LOG_LAMBDA_HI}]")
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        if deficit(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return math.exp(0.5 * (lo + hi))


@lru_cache(maxsize=64)
def scenario_lambdas(scenario: Scenario) -> tuple:
    """Per-dose Weibull scales: the fixed ones, or back-solved from targets.

    For ``gen_eta3 != 0`` the solve plugs in the dose's biomarker mean, so
    targets hold at the mean biomarker level rather than marginally.
    """
    if scenario.lambdas is not None:
        return scenario.lambdas
    eta = (scenario.gen_eta1, scenario.gen_eta2, scenario.gen_eta3)
    out = []
    for j in range(scenario.J):
        cells = joint_outcome_cells(scenario.pi_T[j], scenario.pi_R[j],
                                    scenario.tox_resp_odds_ratio)
        out.append(solve_lambda(scenario.target_rmst[j], scenario.gen_rho, eta,
                                cells, scenario.t_S, b_gen=scenario.mu_B[j]))
    return tuple(out)


# ---------------------------------------------------------------------------
# Patient generation


def generate_patient(scenario: Scenario, dose_index: int, enroll_time: float,
                     rng: np.random.Generator, *, patient_id: int = 0,
                     stage: int = 1, lam: float | None = None) -> PatientRecord:
    """Draw one patient's complete latent record at a dose.

    The survival field holds the latent event time with ``y_S_event=1``;
    administrative censoring belongs to whoever views the record at an
    analysis time.  Draw order is fixed (biomarker normal, outcome-cell
    uniform, survival exponential) so a given stream replays identically.
    """
    if not 1 <= dose_index <= scenario.J:
        raise ValueError(f"dose index {dose_index} outside 1..{scenario.J}")
    j = dose_index - 1
    if lam is None:
        lam = scenario_lambdas(scenario)[j]

    y_b = scenario.mu_B[j] + math.sqrt(scenario.sigma_b_sq) * rng.standard_normal()
    cells = joint_outcome_cells(scenario.pi_T[j], scenario.pi_R[j],
                                scenario.tox_resp_odds_ratio)
    u01 = rng.random()
    y_t = y_r = 1  # fall through to the last cell if rounding leaves a sliver
    acc = 0.0
    for cell in ((0, 0), (0, 1), (1, 0), (1, 1)):
        acc += cells[cell]
        if u01 < acc:
            y_t, y_r = cell
            break
    lam_eff = lam * math.exp(scenario.gen_eta1 * y_t + scenario.gen_eta2 * y_r
                             + scenario.gen_eta3 * y_b)
    latent = (rng.exponential() / lam_eff) ** (1.0 / scenario.gen_rho)
    return PatientRecord(
        id=patient_id, dose_index=dose_index, enroll_time=enroll_time,
        y_B=y_b, y_T=y_t, y_R=y_r, y_S_time=latent, y_S_event=1,
        stage_enrolled=stage)


class SimulatedSource:
    """Outcome source backed by scenario truth.

    ``enroll`` draws the patient's complete latent record up front;
    ``view`` reveals each outcome once its assessment window has passed
    and censors survival at the follow-up time, capped at the scenario
    horizon.
    """

    def __init__(self, scenario: Scenario, windows: ObservationWindows,
                 rng: np.random.Generator):
        self.scenario = scenario
        self.windows = windows
        self.rng = rng
        self.lambdas = scenario_lambdas(scenario)
        self._records: list[PatientRecord] = []

    def enroll(self, dose_index: int, enroll_time: float, stage: int) -> int:
        handle = len(self._records)
        record = generate_patient(
            self.scenario, dose_index, enroll_time, self.rng,
            patient_id=handle + 1, stage=stage, lam=self.lambdas[dose_index - 1])
        self._records.append(record)
        return handle

    def view(self, handle: int, time: float) -> PatientRecord:
        latent = self._records[handle]
        followed = time - latent.enroll_time
        out = PatientRecord(
            id=latent.id, dose_index=latent.dose_index,
            enroll_time=latent.enroll_time, stage_enrolled=latent.stage_enrolled)
        if followed >= self.windows.biomarker:
            out.y_B = latent.y_B
        if followed >= self.windows.toxicity:
            out.y_T = latent.y_T
        if followed >= self.windows.response:
            out.y_R = latent.y_R
        surv_followed = min(followed, self.scenario.horizon)
        if surv_followed > 0.0:
            if latent.y_S_time <= surv_followed:
                out.y_S_time, out.y_S_event = latent.y_S_time, 1
            else:
                out.y_S_time, out.y_S_event = surv_followed, 0
        return out

    @property
    def latent_records(self) -> tuple:
        return tuple(self._records)


# ---------------------------------------------------------------------------
# Trial configuration matching the benchmark protocol


def default_sim_config(scenario: Scenario, *, limits: AcceptabilityLimits | None = None,
                       cutoffs: DecisionCutoffs | None = None,
                       boin_target: float = 0.30, **overrides) -> TrialConfig:
    """Benchmark trial configuration for a scenario.

    Defaults: limits (0.30, 0.20, 3 months at the scenario's RMST horizon),
    rule cutoffs (0.50, 0.60, 0.70, 0.80), stage caps 30/9/24, 1/1/2-month
    assessment windows.  Keyword overrides pass through to TrialConfig.
    """
    grid = DoseGrid(scenario.dose_values)
    if limits is None:
        limits = AcceptabilityLimits(pi_T_max=0.30, pi_R_min=0.20,
                                     mu_S_min=3.0, t_S=scenario.t_S)
    if cutoffs is None:
        cutoffs = DecisionCutoffs(c_B=0.50, c_T=0.60, c_R=0.70, c_S=0.80)
    if "stages" not in overrides:
        lkk = StageConfig.default_lkk(grid.J)
        overrides["stages"] = StageConfig(L=lkk[0], K=lkk[1], kappa=lkk[2])
    if "windows" not in overrides:
        overrides["windows"] = ObservationWindows(
            accrual_rate=scenario.accrual_rate, followup_months=scenario.horizon)
    config = TrialConfig(grid=grid, limits=limits, cutoffs=cutoffs,
                         boin_target=boin_target, **overrides)
    return validate_config(config)


# ---------------------------------------------------------------------------
# Operating characteristics


@dataclass(frozen=True)
class OcTable:
    """Aggregate of independent replicates, one row per dose plus none."""

    scenario: str
    design: str
    n_reps: int
    dose_values: tuple
    sel_pct: tuple
    none_pct: float
    mean_pts: tuple
    mean_total: float
    runtime_mean_s: float
    runtime_min_s: float
    runtime_max_s: float
    partial: bool = False

    def __post_init__(self):
        if self.n_reps >= 1 and not self.partial:
            total = sum(self.sel_pct) + self.none_pct
            if abs(total - 100.0) > 0.1:
                raise ValueError(f"selection percentages sum to {total}, not 100")
        if any(m < 0 for m in self.mean_pts):
            raise ValueError("mean patient counts must be nonnegative")


def _one_rep(payload: tuple) -> dict:
    scenario_d, config_d, design, base_seed, rep = payload
    scenario = scenario_from_dict(scenario_d)
    config = config_from_dict(config_d)
    # Child seeds come from (base_seed, rep) alone: spawn_key=(rep,) is what
    # SeedSequence(base_seed).spawn(n)[rep] would produce, without needing
    # the other replicates' sequences in this process.
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(rep,))
    ss_source, ss_engine = ss.spawn(2)
    rng = np.random.default_rng(ss_source)
    engine_seed = int(ss_engine.generate_state(1, np.uint64)[0])
    started = time.perf_counter()
    result = run_trial(config, SimulatedSource(scenario, config.windows, rng),
                       engine_seed, design=design)
    return {
        "rep": rep,
        "selected": result.otd,
        "n_per_dose": [int(n) for n in result.state.n_per_dose],
        "n_total": int(result.n_total),
        "runtime_s": time.perf_counter() - started,
    }


def aggregate_oc(scenario_name: str, design: str, dose_values, rows,
                 partial: bool = False) -> OcTable:
    """Reduce per-replicate rows (any order) to an OcTable."""
    rows = sorted(rows, key=lambda r: r["rep"])
    n = len(rows)
    J = len(dose_values)
    sel = np.zeros(J)
    none = 0
    pts = np.zeros(J)
    runtimes = np.array([r["runtime_s"] for r in rows]) if rows else np.zeros(1)
    for r in rows:
        if r["selected"] is None:
            none += 1
        else:
            sel[r["selected"] - 1] += 1
        pts += np.asarray(r["n_per_dose"], dtype=float)
    scale = 100.0 / n if n else 0.0
    return OcTable(
        scenario=scenario_name, design=design, n_reps=n,
        dose_values=tuple(dose_values),
        sel_pct=tuple(s * scale for s in sel),
        none_pct=none * scale,
        mean_pts=tuple(p / n if n else 0.0 for p in pts),
        mean_total=float(sum(r["n_total"] for r in rows) / n) if n else 0.0,
        runtime_mean_s=float(runtimes.mean()),
        runtime_min_s=float(runtimes.min()),
        runtime_max_s=float(runtimes.max()),
        partial=partial,
    )


def simulate_oc(scenario: Scenario, design: str, n_reps: int, base_seed: int,
                *, workers: int = 1, config: TrialConfig | None = None,
                progress=None) -> OcTable:
    """Run ``n_reps`` independent virtual trials and aggregate them.

    ``progress``, if given, is called with each completed replicate's row
    (completion order).  The result is identical for any ``workers``.
    """
    design = str(design).lower()
    if design not in DESIGNS:
        raise ValueError(f"unknown design {design!r}; expected one of {DESIGNS}")
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    if config is None:
        config = default_sim_config(scenario)
    else:
        validate_config(config)
        if config.grid.doses != scenario.dose_values:
            raise ValueError("config dose grid does not match the scenario")
    payloads = [(scenario_to_dict(scenario), config_to_dict(config), design,
                 int(base_seed), rep) for rep in range(n_reps)]
    rows = []
    if workers <= 1:
        for payload in payloads:
            row = _one_rep(payload)
            rows.append(row)
            if progress is not None:
                progress(row)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_one_rep, p) for p in payloads]
            for future in as_completed(futures):
                row = future.result()
                rows.append(row)
                if progress is not None:
                    progress(row)
    return aggregate_oc(scenario.name, design, scenario.dose_values, rows)


def oc_to_csv(table: OcTable) -> str:
    """Dose rows then a ``none`` row carrying (none %, mean total N)."""
    lines = ["dose,dose_value,sel_pct,mean_pts"]
    for j in range(len(table.dose_values)):
        lines.append(f"{j + 1},{table.dose_values[j]:g},"
                     f"{table.sel_pct[j]:.1f},{table.mean_pts[j]:.1f}")
    lines.append(f"none,,{table.none_pct:.1f},{table.mean_total:.1f}")
    return "\n".join(lines) + "\n"


def oc_to_json(table: OcTable) -> dict:
    return {
        "version": 1,
        "scenario": table.scenario,
        "design": table.design,
        "n_reps": table.n_reps,
        "dose_values": list(table.dose_values),
        "sel_pct": [round(x, 4) for x in table.sel_pct],
        "none_pct": round(table.none_pct, 4),
        "mean_pts": [round(x, 4) for x in table.mean_pts],
        "mean_total": round(table.mean_total, 4),
        "runtime_s": {
            "mean": round(table.runtime_mean_s, 4),
            "min": round(table.runtime_min_s, 4),
            "max": round(table.runtime_max_s, 4),
        },
        "partial": table.partial,
    }
