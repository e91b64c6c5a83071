"""Joint biomarker/toxicity/response model and the response futility rule.

The biomarker mean follows a saturating (Emax-type) curve in dose,
mu_B(d) = gamma0 + gamma1 * d^gamma3 / (gamma2^gamma3 + d^gamma3),
with Y_B ~ Normal(mu_B(d), sigma_B^2). Toxicity and response are
logistic in dose and the observed biomarker:

    logit pi_T = alpha0 + alpha1*d + alpha2*Y_B      (alpha1, alpha2 > 0)
    logit pi_R = beta0 + beta1*d + beta2*d^2 + beta3*Y_B

The likelihood factorizes as p(Y_B|d) * p(Y_T|Y_B,d) * p(Y_R|Y_B,d), so
patients contribute exactly the factors whose outcomes are observed.

Dose-level probabilities are obtained by the plug-in rule: the posterior
mean of mu_B(d) is substituted for Y_B inside each draw's logistic,
giving cheap per-draw pi_T(d), pi_R(d) vectors for the tail rules.

fit_resp_quadratic is the biomarker-free reduced response model
(logit pi_R = beta0 + beta1*d + beta2*d^2) used by the comparator design.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import _kernels
from .core import JointPriors
from .sampler import ChainSpec


def emax_mean(d: float, gamma) -> float:
    """Saturating dose-response mean; gamma = (gamma0, gamma1, gamma2, gamma3)."""
    g0, g1, g2, g3 = gamma
    if d < 0:
        raise ValueError("dose must be >= 0")
    if d == 0:
        return float(g0)
    # logistic form of d^g3 / (g2^g3 + d^g3): the raw powers underflow
    # together (0/0) for tiny g2 or large g3
    t = g3 * (math.log(d) - math.log(g2))
    if t > 0:
        frac = 1.0 / (1.0 + math.exp(-t))
    else:
        et = math.exp(t)
        frac = et / (1.0 + et)
    return float(g0 + g1 * frac)


@dataclass
class JointFit:
    gamma0: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    gamma3: np.ndarray
    sigma_b_sq: np.ndarray
    alpha0: np.ndarray
    alpha1: np.ndarray
    alpha2: np.ndarray
    beta0: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    beta3: np.ndarray
    _mu_b_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_draws(self) -> int:
        return len(self.gamma0)

    def mu_b_draws(self, dose: float) -> np.ndarray:
        """Per-draw biomarker mean at a dose value."""
        if dose == 0:
            return self.gamma0.copy()
        with np.errstate(divide="ignore"):  # gamma2 may underflow to 0
            t = self.gamma3 * (math.log(dose) - np.log(self.gamma2))
        return self.gamma0 + self.gamma1 * expit(t)

    def mu_b_hat(self, dose: float) -> float:
        """Posterior-mean biomarker level used as the plug-in for Y_B."""
        if dose not in self._mu_b_cache:
            self._mu_b_cache[dose] = float(self.mu_b_draws(dose).mean())
        return self._mu_b_cache[dose]

    def pi_t_draws(self, dose: float) -> np.ndarray:
        return marginal_pi(dose, self, "T")

    def pi_r_draws(self, dose: float) -> np.ndarray:
        return marginal_pi(dose, self, "R")


def _rows(records, dose_values):
    bio_d, bio_y = [], []
    tox_d, tox_b, tox_y = [], [], []
    res_d, res_b, res_y = [], [], []
    for r in records:
        if r.y_B is None:
            continue
        d = dose_values[r.dose_index - 1]
        bio_d.append(d)
        bio_y.append(r.y_B)
        if r.y_T is not None:
            tox_d.append(d)
            tox_b.append(r.y_B)
            tox_y.append(float(r.y_T))
        if r.y_R is not None:
            res_d.append(d)
            res_b.append(r.y_B)
            res_y.append(float(r.y_R))
    return tuple(np.array(a, dtype=float) for a in
                 (bio_d, bio_y, tox_d, tox_b, tox_y, res_d, res_b, res_y))


def _prior_vec(p: JointPriors) -> np.ndarray:
    return np.array([
        p.m_gamma, p.v_gamma_sq, p.a_gamma1, p.b_gamma1, p.a_gamma2,
        p.b_gamma2, p.a_gamma3, p.b_gamma3, p.a_sigma, p.b_sigma,
        p.mu_alpha0, p.v_alpha0_sq, p.mu_beta0, p.v_beta0_sq, p.rho0,
        p.m_alpha1, p.v_alpha1_sq, p.m_alpha2, p.v_alpha2_sq,
        p.m_beta1, p.v_beta1_sq, p.m_beta2, p.v_beta2_sq,
        p.m_beta3, p.v_beta3_sq,
    ])


def fit_joint(records, dose_values, priors: JointPriors, chain: ChainSpec) -> JointFit:
    """Fit the joint model on patient records.

    dose_values maps each record's 1-based dose_index to its dose. Only
    records with an observed y_B enter; their toxicity/response factors
    are included exactly when those outcomes are observed too.
    """
    arrays = _rows(records, dose_values)
    if arrays[0].size == 0:
        raise ValueError("no biomarker observations yet")
    return _run_joint(arrays, priors, chain)


def fit_joint_prior(priors: JointPriors, chain: ChainSpec) -> JointFit:
    """Sample the joint prior (zero-data chain); used for prior checks."""
    empty = tuple(np.empty(0) for _ in range(8))
    return _run_joint(empty, priors, chain)


def _run_joint(arrays, priors, chain) -> JointFit:
    chain.validate()
    bio_d, bio_y, tox_d, tox_b, tox_y, res_d, res_b, res_y = arrays
    n_iter = chain.n_burn + chain.n_keep * chain.thin
    normals, uniforms = _kernels.predraw(chain.seed, n_iter, 12, 11)
    z0 = np.array([
        priors.m_gamma,
        math.log(priors.a_gamma1 / priors.b_gamma1),
        math.log(priors.a_gamma2 / priors.b_gamma2),
        math.log(priors.a_gamma3 / priors.b_gamma3),
        math.log(priors.a_sigma / priors.b_sigma),
        priors.mu_alpha0, priors.mu_beta0,
        priors.m_alpha1, priors.m_alpha2,
        priors.m_beta1, priors.m_beta2, priors.m_beta3,
    ])
    draws, _, _ = _kernels.joint_chain(
        bio_d, bio_y, tox_d, tox_b, tox_y, res_d, res_b, res_y,
        _prior_vec(priors), z0, np.ones(11),
        chain.n_burn, chain.n_keep, chain.thin, chain.target_accept,
        normals, uniforms,
    )
    return JointFit(
        gamma0=draws[:, 0],
        gamma1=np.exp(draws[:, 1]),
        gamma2=np.exp(draws[:, 2]),
        gamma3=np.exp(draws[:, 3]),
        sigma_b_sq=np.exp(-draws[:, 4]),
        alpha0=draws[:, 5],
        beta0=draws[:, 6],
        alpha1=np.exp(draws[:, 7]),
        alpha2=np.exp(draws[:, 8]),
        beta1=draws[:, 9],
        beta2=draws[:, 10],
        beta3=draws[:, 11],
    )


def marginal_pi(dose: float, fit: JointFit, endpoint: str) -> np.ndarray:
    """Per-draw dose-level probability with the posterior-mean biomarker
    plugged in for Y_B. endpoint 'T' for toxicity, 'R' for response."""
    b_hat = fit.mu_b_hat(dose)
    if endpoint == "T":
        lin = fit.alpha0 + fit.alpha1 * dose + fit.alpha2 * b_hat
    elif endpoint == "R":
        lin = (fit.beta0 + fit.beta1 * dose + fit.beta2 * dose * dose
               + fit.beta3 * b_hat)
    else:
        raise ValueError("endpoint must be 'T' or 'R'")
    return 1.0 / (1.0 + np.exp(-lin))


def prob_futile(dose: float, fit, pi_r_min: float) -> float:
    """Pr{pi_R(dose) <= pi_r_min | data} from any fit with pi_r_draws."""
    return float(np.mean(fit.pi_r_draws(dose) <= pi_r_min))


def rule_2c(dose_values, fit, pi_r_min: float, c_r: float) -> set:
    """Response-futility rule: keep 1-based dose indices whose posterior
    probability of a futile response rate stays at or below c_R."""
    return {j for j, d in enumerate(dose_values, start=1)
            if prob_futile(d, fit, pi_r_min) <= c_r}


def outcome_cell_probs(dose: float, fit) -> dict:
    """Posterior joint outcome-cell probabilities at a dose.

    Keys are (y_T, y_R) pairs; each value is the posterior mean of the
    per-draw product pi_T^u (1-pi_T)^(1-u) * pi_R^v (1-pi_R)^(1-v),
    treating toxicity and response as independent given dose and the
    plugged-in biomarker level. Sums to 1 exactly.
    """
    pt = fit.pi_t_draws(dose)
    pr = fit.pi_r_draws(dose)
    out = {}
    for u in (0, 1):
        for v in (0, 1):
            cell = (pt if u else 1.0 - pt) * (pr if v else 1.0 - pr)
            out[(u, v)] = float(cell.mean())
    return out


# ---------------------------------------------------------------------------
# Biomarker-free reduced response model (comparator design)
# ---------------------------------------------------------------------------


@dataclass
class QuadRespFit:
    beta0: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray

    @property
    def n_draws(self) -> int:
        return len(self.beta0)

    def pi_r_draws(self, dose: float) -> np.ndarray:
        lin = self.beta0 + self.beta1 * dose + self.beta2 * dose * dose
        return 1.0 / (1.0 + np.exp(-lin))


def fit_resp_quadratic(data, priors: JointPriors, chain: ChainSpec) -> QuadRespFit:
    """Fit logit pi_R = beta0 + beta1*d + beta2*d^2 on (dose, y_R) pairs,
    using the marginal response-coefficient priors of the joint model."""
    rows = [(float(d), int(y)) for d, y in data]
    if not rows:
        raise ValueError("no response observations yet")
    chain.validate()
    X = np.array([[1.0, d, d * d] for d, _ in rows])
    y = np.array([float(r) for _, r in rows])
    n_iter = chain.n_burn + chain.n_keep * chain.thin
    normals, uniforms = _kernels.predraw(chain.seed, n_iter, 3, 3)
    pm = np.array([priors.mu_beta0, priors.m_beta1, priors.m_beta2])
    pv = np.array([priors.v_beta0_sq, priors.v_beta1_sq, priors.v_beta2_sq])
    draws, _, _ = _kernels.logistic_chain(
        X, y, np.zeros(3, dtype=np.int64), pm, pv,
        pm.copy(), np.sqrt(pv),
        chain.n_burn, chain.n_keep, chain.thin, chain.target_accept,
        normals, uniforms,
    )
    return QuadRespFit(beta0=draws[:, 0], beta1=draws[:, 1], beta2=draws[:, 2])
