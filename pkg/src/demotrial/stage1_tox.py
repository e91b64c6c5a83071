"""Dose-only toxicity model and the safety rule.

During exploration the toxicity risk at dose d is modeled as
logit pi_T(d) = alpha0 + alpha1 * d with alpha1 > 0, so risk is
nondecreasing in dose for every posterior draw. The safety rule keeps a
dose only while Pr{pi_T(d) >= pi_T_max | data} stays at or below c_T.

The same two-parameter fit doubles as the toxicity model of the
biomarker-free comparator design.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import Stage1Priors
from .sampler import ChainSpec


@dataclass
class Stage1Fit:
    alpha0: np.ndarray
    alpha1: np.ndarray

    def pi_t(self, dose: float) -> np.ndarray:
        """Per-draw toxicity probability at a dose value."""
        lin = self.alpha0 + self.alpha1 * dose
        return 1.0 / (1.0 + np.exp(-lin))

    @property
    def n_draws(self) -> int:
        return len(self.alpha0)


def fit_stage1(data, priors: Stage1Priors, chain: ChainSpec) -> Stage1Fit:
    """Fit the dose-only toxicity model on (dose, y_T) pairs.

    data: iterable of (dose_value, y_T) with y_T in {0, 1}. Patients whose
    toxicity outcome is still pending must not be passed in. An empty
    dataset is allowed only for prior sampling via fit_stage1_prior (the
    trial never evaluates the safety rule before any y_T is observed).
    """
    rows = [(float(d), int(y)) for d, y in data]
    if not rows:
        raise ValueError("no toxicity observations yet")
    if any(y not in (0, 1) for _, y in rows):
        raise ValueError("y_T must be 0 or 1")
    return _run(np.array([[1.0, d] for d, _ in rows]),
                np.array([float(y) for _, y in rows]), priors, chain)


def fit_stage1_prior(priors: Stage1Priors, chain: ChainSpec) -> Stage1Fit:
    """Sample the prior (zero-data chain); used for prior checks."""
    return _run(np.empty((0, 2)), np.empty(0), priors, chain)


def _run(X, y, priors, chain):
    chain.validate()
    n_iter = chain.n_burn + chain.n_keep * chain.thin
    normals, uniforms = _kernels.predraw(chain.seed, n_iter, 2, 2)
    draws, _, _ = _kernels.logistic_chain(
        X, y,
        np.array([0, 1], dtype=np.int64),
        np.array([priors.m_alpha0, priors.m_alpha1]),
        np.array([priors.v_alpha0_sq, priors.v_alpha1_sq]),
        np.array([priors.m_alpha0, priors.m_alpha1]),
        np.array([np.sqrt(priors.v_alpha0_sq), np.sqrt(priors.v_alpha1_sq)]),
        chain.n_burn, chain.n_keep, chain.thin, chain.target_accept,
        normals, uniforms,
    )
    return Stage1Fit(alpha0=draws[:, 0], alpha1=np.exp(draws[:, 1]))


def prob_overdose(dose: float, fit: Stage1Fit, pi_t_max: float) -> float:
    """Posterior probability that toxicity risk at this dose reaches the limit."""
    if fit.n_draws == 0:
        raise ValueError("no posterior draws")
    return float(np.mean(fit.pi_t(dose) >= pi_t_max))


def rule_2b(dose_values, fit: Stage1Fit, pi_t_max: float, c_t: float) -> set:
    """Safe-dose set: 1-based indices with Pr{pi_T >= limit} <= c_T.

    Downward-closed in dose: a positive slope per draw makes exceedance
    probabilities nondecreasing in dose.
    """
    return {j for j, d in enumerate(dose_values, start=1)
            if prob_overdose(d, fit, pi_t_max) <= c_t}
