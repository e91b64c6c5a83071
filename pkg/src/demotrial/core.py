"""Shared domain types for the three-stage dose optimization engine.

Everything here is plain data: the dose grid, acceptability limits and
decision cutoffs, per-patient records, the utility table used by the
comparator criterion, prior hyperparameter bundles for each model, the
stage/enrollment configuration, and the mutable trial state with its
permanent elimination ledger.

Conventions used throughout the package:

* dose indices are 1-based (``dose_index`` in 1..J) to match the way
  dose levels are usually reported; arrays indexed by dose are 0-based.
* binary outcomes are 0/1 ints; ``None`` means "not yet observed".
* times are months from trial start.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np

ELIMINATION_REASONS = ("bioinactive", "toxic", "futile_response", "futile_survival")


@dataclass(frozen=True)
class DoseGrid:
    """Ordered dose values d_1 < ... < d_J (raw units, e.g. mg/kg)."""

    doses: tuple

    def __post_init__(self):
        object.__setattr__(self, "doses", tuple(float(d) for d in self.doses))

    @property
    def J(self) -> int:
        return len(self.doses)

    def dose(self, index: int) -> float:
        """Dose value for a 1-based dose index."""
        if not 1 <= index <= self.J:
            raise ValueError(f"dose index {index} outside 1..{self.J}")
        return self.doses[index - 1]


@dataclass(frozen=True)
class AcceptabilityLimits:
    """Fixed clinical limits: max toxicity rate, min response rate,
    min restricted mean survival, and the RMST horizon t_S (months)."""

    pi_T_max: float
    pi_R_min: float
    mu_S_min: float
    t_S: float


@dataclass(frozen=True)
class DecisionCutoffs:
    """Posterior-probability cutoffs for the four acceptability rules."""

    c_B: float
    c_T: float
    c_R: float
    c_S: float


@dataclass
class PatientRecord:
    """One enrolled patient; outcomes fill in as they are observed.

    y_S_time/y_S_event describe the survival observation: event=1 means
    the event occurred at y_S_time, event=0 means censored then.
    """

    id: int
    dose_index: int
    enroll_time: float
    y_B: float | None = None
    y_T: int | None = None
    y_R: int | None = None
    y_S_time: float | None = None
    y_S_event: int | None = None
    stage_enrolled: int = 1

    def set_outcome(self, name, value):
        """Outcomes only move from absent to present; re-setting differs -> error."""
        current = getattr(self, name)
        if current is not None and current != value:
            raise ValueError(f"outcome {name} for patient {self.id} already recorded")
        setattr(self, name, value)


# CSV export/import for patient records (columns fixed by the external
# interface contract).
PATIENT_CSV_COLUMNS = (
    "id", "dose_index", "enroll_time", "y_B", "y_T", "y_R",
    "y_S_time", "y_S_event", "stage",
)


def patients_to_csv_rows(records):
    yield ",".join(PATIENT_CSV_COLUMNS)
    for r in records:
        vals = [r.id, r.dose_index, r.enroll_time, r.y_B, r.y_T, r.y_R,
                r.y_S_time, r.y_S_event, r.stage_enrolled]
        yield ",".join("" if v is None else str(v) for v in vals)


def patients_from_csv_rows(rows):
    """Parse records written by :func:`patients_to_csv_rows`.

    Raises ValueError mentioning the 1-based line number on a bad row.
    """
    rows = iter(rows)
    header = next(rows).strip()
    if header.split(",") != list(PATIENT_CSV_COLUMNS):
        raise ValueError(f"line 1: unexpected header {header!r}")
    out = []
    for lineno, row in enumerate(rows, start=2):
        row = row.strip()
        if not row:
            continue
        parts = row.split(",")
        if len(parts) != len(PATIENT_CSV_COLUMNS):
            raise ValueError(f"line {lineno}: expected {len(PATIENT_CSV_COLUMNS)} fields")
        def opt(s, conv):
            return None if s == "" else conv(s)
        try:
            out.append(PatientRecord(
                id=int(parts[0]), dose_index=int(parts[1]),
                enroll_time=float(parts[2]),
                y_B=opt(parts[3], float), y_T=opt(parts[4], int),
                y_R=opt(parts[5], int), y_S_time=opt(parts[6], float),
                y_S_event=opt(parts[7], int), stage_enrolled=int(parts[8]),
            ))
        except (TypeError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out


@dataclass(frozen=True)
class UtilityTable:
    """Utility of the joint binary outcome, keyed (y_R, y_T).

    By convention u(1,0)=100 (response, no toxicity) and u(0,1)=0.
    The default interior values are the comparator setting (0, 5, 95, 100)
    for ((0,1), (0,0), (1,1), (1,0)).
    """

    u: dict = field(default_factory=lambda: {(0, 1): 0.0, (0, 0): 5.0,
                                             (1, 1): 95.0, (1, 0): 100.0})

    def value(self, y_R: int, y_T: int) -> float:
        return self.u[(y_R, y_T)]

    def validate(self):
        errors = []
        if set(self.u) != {(0, 0), (0, 1), (1, 0), (1, 1)}:
            errors.append("utility table must have the four (y_R,y_T) cells")
            return errors
        u = self.u
        if not (u[(1, 0)] >= u[(0, 0)] >= u[(0, 1)]):
            errors.append("utility ordering violated: u(1,0) >= u(0,0) >= u(0,1)")
        if not (u[(1, 0)] >= u[(1, 1)] >= u[(0, 1)]):
            errors.append("utility ordering violated: u(1,0) >= u(1,1) >= u(0,1)")
        if u[(1, 0)] != 100.0 or u[(0, 1)] != 0.0:
            errors.append("utility convention requires u(1,0)=100 and u(0,1)=0")
        return errors


def mean_utility(pi_joint: dict, table: UtilityTable) -> float:
    """Expected utility of a joint (y_R, y_T) outcome distribution.

    Params:
    pi_joint -- map (y_R, y_T) -> probability, summing to 1 within 1e-9.
    table -- UtilityTable with the same key order.
    """
    total = sum(pi_joint.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"pi_joint sums to {total}, expected 1")
    return sum(table.value(*k) * p for k, p in pi_joint.items())


# ---------------------------------------------------------------------------
# Prior hyperparameter bundles (defaults are the package's operating values).
# All Gamma(a, b) priors are shape/rate: density ∝ x^(a-1) exp(-b x).
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepModelHyper:
    """Hyperparameters of the step-function biomarker screening model."""

    m_mu_minus: float = 0.0
    m_mu_plus: float = 0.5
    n0: float = 0.1
    a_sigma: float = 0.01
    b_sigma: float = 0.01
    model_prior: tuple | None = None  # None -> uniform over the J step models

    def prior_for(self, J: int) -> np.ndarray:
        if self.model_prior is None:
            return np.full(J, 1.0 / J)
        p = np.asarray(self.model_prior, dtype=float)
        if p.shape != (J,):
            raise ValueError(f"model_prior has length {p.size}, expected {J}")
        return p

    def validate(self):
        errors = []
        if not self.m_mu_minus < self.m_mu_plus:
            errors.append("step model requires m_mu_minus < m_mu_plus")
        if self.n0 <= 0:
            errors.append("step model n0 must be > 0")
        if self.a_sigma <= 0 or self.b_sigma <= 0:
            errors.append("step model a_sigma, b_sigma must be > 0")
        if self.model_prior is not None:
            if any(p < 0 for p in self.model_prior):
                errors.append("model_prior entries must be >= 0")
            elif abs(sum(self.model_prior) - 1.0) > 1e-9:
                errors.append("model_prior must sum to 1")
        return errors


@dataclass(frozen=True)
class Stage1Priors:
    """Two-parameter logistic toxicity model: alpha0 ~ N(m, v^2),
    log(alpha1) ~ N(m, v^2) so the slope is positive."""

    m_alpha0: float = -2.0
    v_alpha0_sq: float = 10.0
    m_alpha1: float = -0.693
    v_alpha1_sq: float = 5.0

    def validate(self):
        errors = []
        if self.v_alpha0_sq <= 0 or self.v_alpha1_sq <= 0:
            errors.append("stage-1 prior variances must be > 0")
        return errors


@dataclass(frozen=True)
class JointPriors:
    """Priors for the saturating-mean biomarker model plus the two
    mediated logistic regressions (toxicity and response).

    gamma_l ~ Gamma(a, b) for l=1,2,3; sigma_B^-2 ~ Gamma(a_sigma, b_sigma);
    log(alpha_1), log(alpha_2) normal; beta_1..3 normal; the two intercepts
    (alpha_0, beta_0) share a bivariate normal prior with correlation rho0.
    """

    m_gamma: float = 0.0
    v_gamma_sq: float = 10.0
    a_gamma1: float = 1.0
    b_gamma1: float = 0.25
    a_gamma2: float = 0.1
    b_gamma2: float = 0.25
    a_gamma3: float = 0.75
    b_gamma3: float = 0.25
    a_sigma: float = 0.1
    b_sigma: float = 0.1
    m_alpha1: float = -0.693
    v_alpha1_sq: float = 5.0
    m_alpha2: float = -2.302
    v_alpha2_sq: float = 5.0
    m_beta1: float = 0.0
    v_beta1_sq: float = 5.0
    m_beta2: float = 0.0
    v_beta2_sq: float = 5.0
    m_beta3: float = 0.0
    v_beta3_sq: float = 5.0
    mu_alpha0: float = -2.0
    mu_beta0: float = 0.0
    v_alpha0_sq: float = 10.0
    v_beta0_sq: float = 5.0
    rho0: float = 0.2

    def validate(self):
        errors = []
        for name in ("v_gamma_sq", "a_gamma1", "b_gamma1", "a_gamma2", "b_gamma2",
                     "a_gamma3", "b_gamma3", "a_sigma", "b_sigma", "v_alpha1_sq",
                     "v_alpha2_sq", "v_beta1_sq", "v_beta2_sq", "v_beta3_sq",
                     "v_alpha0_sq", "v_beta0_sq"):
            if getattr(self, name) <= 0:
                errors.append(f"joint prior {name} must be > 0")
        if not -1.0 < self.rho0 < 1.0:
            errors.append("joint prior rho0 must be in (-1, 1)")
        return errors


@dataclass(frozen=True)
class SurvPriors:
    """Weibull survival model: rho ~ Gamma(a_rho, b_rho),
    log(lambda_j) ~ N(0, v_lambda_sq), eta_k ~ N(0, v_eta_sq)."""

    a_rho: float = 0.1
    b_rho: float = 0.1
    v_lambda_sq: float = 100.0
    v_eta_sq: float = 100.0

    def validate(self):
        errors = []
        for name in ("a_rho", "b_rho", "v_lambda_sq", "v_eta_sq"):
            if getattr(self, name) <= 0:
                errors.append(f"survival prior {name} must be > 0")
        return errors


@dataclass(frozen=True)
class StageConfig:
    """Stage sizes, caps, and the stage-3 dose-selection knobs (L, K, kappa)."""

    N1: int = 30
    stage1_per_dose_stop: int = 9
    cohort_size: int = 3
    stage2_per_dose_cap: int = 9
    stage2_monitor_every: int = 3
    M: int = 24
    L: int = 3
    K: int = 4
    kappa: float = 0.3
    n_stage3_interims: int = 1
    rank_by_utility: bool = False  # rank stage-3 candidates by mean utility instead of mean response rate

    @staticmethod
    def default_lkk(J: int):
        """Recommended (L, K, kappa): (3,4,0.3) for J >= 6, (2,3,0.3) for J <= 5."""
        return (3, 4, 0.3) if J >= 6 else (2, 3, 0.3)

    def validate(self):
        errors = []
        if self.N1 < self.cohort_size:
            errors.append("N1 must be at least one cohort")
        if self.cohort_size < 1:
            errors.append("cohort_size must be >= 1")
        if self.stage1_per_dose_stop < self.cohort_size:
            errors.append("stage1_per_dose_stop must be >= cohort_size")
        if self.L > self.K:
            errors.append("stage-3 selection requires L <= K")
        if not 0.0 <= self.kappa <= 1.0:
            errors.append("kappa must be in [0, 1]")
        if self.M < self.stage2_per_dose_cap:
            errors.append("M must be >= stage2_per_dose_cap")
        if self.stage2_monitor_every < 1:
            errors.append("stage2_monitor_every must be >= 1")
        return errors


@dataclass(frozen=True)
class McmcConfig:
    """Chain lengths used for in-trial analyses."""

    n_burn: int = 2000
    n_keep: int = 2000
    thin: int = 1

    def validate(self):
        errors = []
        if self.n_burn <= 0 or self.n_keep <= 0:
            errors.append("n_burn and n_keep must be > 0")
        if self.thin < 1:
            errors.append("thin must be >= 1")
        return errors


@dataclass(frozen=True)
class ObservationWindows:
    """Trial timing: months after enrollment at which each outcome becomes
    observable, the accrual rate, and the per-patient follow-up cap."""

    biomarker: float = 1.0
    toxicity: float = 1.0
    response: float = 2.0
    accrual_rate: float = 3.0  # patients/month; one cohort of 3 per month
    followup_months: float = 24.0  # administrative censoring horizon

    def validate(self):
        errors = []
        if min(self.biomarker, self.toxicity, self.response) < 0:
            errors.append("observation windows must be >= 0")
        if self.accrual_rate <= 0:
            errors.append("accrual_rate must be > 0")
        if self.followup_months <= self.response:
            errors.append("followup_months must exceed the response window")
        return errors


@dataclass(frozen=True)
class TrialConfig:
    """Everything a trial run needs besides the outcome source."""

    grid: DoseGrid
    limits: AcceptabilityLimits
    cutoffs: DecisionCutoffs
    stages: StageConfig = field(default_factory=StageConfig)
    step_hyper: StepModelHyper = field(default_factory=StepModelHyper)
    stage1_priors: Stage1Priors = field(default_factory=Stage1Priors)
    joint_priors: JointPriors = field(default_factory=JointPriors)
    surv_priors: SurvPriors = field(default_factory=SurvPriors)
    utility: UtilityTable = field(default_factory=UtilityTable)
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    windows: ObservationWindows = field(default_factory=ObservationWindows)
    boin_target: float = 0.30


def validate_config(config: TrialConfig) -> TrialConfig:
    """Check every config invariant; raise ValueError listing all violations.

    Returns the config unchanged when valid, so validating twice is a no-op.
    """
    errors = []
    doses = config.grid.doses
    if len(doses) < 1:
        errors.append("dose grid is empty")
    if any(b <= a for a, b in zip(doses, doses[1:])):
        errors.append("dose grid must be strictly increasing")
    lim = config.limits
    for name, p in (("pi_T_max", lim.pi_T_max), ("pi_R_min", lim.pi_R_min)):
        if not 0.0 < p < 1.0:
            errors.append(f"limit {name}={p} must be in (0,1)")
    if not 0.0 < lim.mu_S_min < lim.t_S:
        errors.append(f"mu_S_min={lim.mu_S_min} must be in (0, t_S={lim.t_S})")
    for name in ("c_B", "c_T", "c_R", "c_S"):
        c = getattr(config.cutoffs, name)
        if not 0.0 < c < 1.0:
            errors.append(f"cutoff {name}={c} must be in (0,1)")
    if not 0.0 < config.boin_target < 1.0:
        errors.append("boin_target must be in (0,1)")
    errors += config.stages.validate()
    errors += config.step_hyper.validate()
    if config.step_hyper.model_prior is not None and len(config.step_hyper.model_prior) != config.grid.J:
        errors.append("step model_prior length must equal number of doses")
    errors += config.stage1_priors.validate()
    errors += config.joint_priors.validate()
    errors += config.surv_priors.validate()
    errors += config.utility.validate()
    errors += config.mcmc.validate()
    errors += config.windows.validate()
    if errors:
        raise ValueError("invalid trial configuration:\n- " + "\n- ".join(errors))
    return config


# ---------------------------------------------------------------------------
# Config JSON round trip. Files carry a top-level version field.
# ---------------------------------------------------------------------------

CONFIG_SCHEMA_VERSION = 1


def config_to_dict(config: TrialConfig) -> dict:
    d = {
        "version": CONFIG_SCHEMA_VERSION,
        "doses": list(config.grid.doses),
        "limits": asdict(config.limits),
        "cutoffs": asdict(config.cutoffs),
        "stages": asdict(config.stages),
        "step_hyper": asdict(config.step_hyper),
        "stage1_priors": asdict(config.stage1_priors),
        "joint_priors": asdict(config.joint_priors),
        "surv_priors": asdict(config.surv_priors),
        "utility": {f"{k[0]}{k[1]}": v for k, v in config.utility.u.items()},
        "mcmc": asdict(config.mcmc),
        "windows": asdict(config.windows),
        "boin_target": config.boin_target,
    }
    if d["step_hyper"]["model_prior"] is not None:
        d["step_hyper"]["model_prior"] = list(d["step_hyper"]["model_prior"])
    return d


def config_from_dict(d: dict) -> TrialConfig:
    """Build a validated TrialConfig from a JSON-shaped dict.

    Omitted sections/fields take the package defaults.
    """
    version = d.get("version")
    if version != CONFIG_SCHEMA_VERSION:
        raise ValueError(f"unsupported config version {version!r}")
    if "doses" not in d or "limits" not in d or "cutoffs" not in d:
        raise ValueError("config requires doses, limits, and cutoffs")

    def build(cls, payload):
        return cls(**payload) if payload else cls()

    step = dict(d.get("step_hyper") or {})
    if step.get("model_prior") is not None:
        step["model_prior"] = tuple(step["model_prior"])
    utility = UtilityTable()
    if "utility" in d:
        utility = UtilityTable({(int(k[0]), int(k[1])): float(v)
                                for k, v in d["utility"].items()})
    config = TrialConfig(
        grid=DoseGrid(tuple(d["doses"])),
        limits=AcceptabilityLimits(**d["limits"]),
        cutoffs=DecisionCutoffs(**d["cutoffs"]),
        stages=build(StageConfig, d.get("stages")),
        step_hyper=StepModelHyper(**step) if step else StepModelHyper(),
        stage1_priors=build(Stage1Priors, d.get("stage1_priors")),
        joint_priors=build(JointPriors, d.get("joint_priors")),
        surv_priors=build(SurvPriors, d.get("surv_priors")),
        utility=utility,
        mcmc=build(McmcConfig, d.get("mcmc")),
        windows=build(ObservationWindows, d.get("windows")),
        boin_target=d.get("boin_target", 0.30),
    )
    return validate_config(config)


def config_to_json(config: TrialConfig) -> str:
    return json.dumps(config_to_dict(config), indent=2)


def config_from_json(text: str) -> TrialConfig:
    return config_from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Trial state
# ---------------------------------------------------------------------------


@dataclass
class TrialState:
    """Mutable state of one trial: stage, counts, acceptable set,
    elimination ledger, decision history, and the final selection.

    Eliminations are permanent under all four rules: once a dose enters
    the ledger it can never re-enter the acceptable set.
    """

    J: int
    stage: int = 1  # 1, 2, 3, or DONE
    n_per_dose: np.ndarray = None
    acceptable: set = None
    eliminated: dict = None
    history: list = None
    otd: int | None = None

    DONE = 4

    def __post_init__(self):
        if self.n_per_dose is None:
            self.n_per_dose = np.zeros(self.J, dtype=int)
        if self.acceptable is None:
            self.acceptable = set(range(1, self.J + 1))
        if self.eliminated is None:
            self.eliminated = {}
        if self.history is None:
            self.history = []

    def eliminate(self, dose_index: int, reason: str):
        if reason not in ELIMINATION_REASONS:
            raise ValueError(f"unknown elimination reason {reason!r}")
        # first reason wins; the dose never comes back either way
        self.eliminated.setdefault(dose_index, reason)
        self.acceptable.discard(dose_index)

    def restrict_acceptable(self, keep):
        """Shrink the acceptable set; never re-admits an eliminated dose."""
        self.acceptable = {j for j in keep if j not in self.eliminated} & self.acceptable

    def add_patients(self, dose_index: int, count: int):
        if dose_index in self.eliminated:
            raise ValueError(f"dose {dose_index} is eliminated")
        self.n_per_dose[dose_index - 1] += count

    def log(self, record: dict):
        self.history.append(record)

    def snapshot(self) -> dict:
        return {
            "stage": self.stage,
            "n_per_dose": self.n_per_dose.tolist(),
            "acceptable": sorted(self.acceptable),
            "eliminated": {str(k): v for k, v in sorted(self.eliminated.items())},
            "otd": self.otd,
        }


@dataclass
class PosteriorSummary:
    """Per-dose posterior quantities backing the acceptability rules.

    Arrays are length J, indexed by dose-1. Fields that a stage's model
    cannot provide yet are None.
    """

    step_probs: np.ndarray | None = None        # Pr(step model at d_j | data)
    tau_hat: int | None = None
    pr_overdose: np.ndarray | None = None       # Pr(pi_T >= pi_T_max | data)
    pr_futile_response: np.ndarray | None = None  # Pr(pi_R <= pi_R_min | data)
    pr_futile_survival: np.ndarray | None = None  # Pr(mu_S <= mu_S_min | data)
    pr_response_above_min: np.ndarray | None = None  # Pr(pi_R > pi_R_min | data)
    mean_pi_T: np.ndarray | None = None
    mean_pi_R: np.ndarray | None = None
    mean_rmst: np.ndarray | None = None
    mean_utility: np.ndarray | None = None
    mu_B_hat: np.ndarray | None = None

    def to_jsonable(self) -> dict:
        out = {}
        for name, val in self.__dict__.items():
            if val is None:
                out[name] = None
            elif isinstance(val, np.ndarray):
                # NaN marks a dose the analysis skipped (e.g. already
                # eliminated); JSON has no NaN, so emit null
                out[name] = [None if math.isnan(float(x)) else round(float(x), 6)
                             for x in val]
            else:
                out[name] = val
        return out
