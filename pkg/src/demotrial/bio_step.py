"""Step-function biomarker screening: closed-form model evidence,
posterior model probabilities, the lowest-active-dose estimate, and the
biological-activity acceptability rule.

Model space: one candidate model per dose index j. Under model j the
biomarker mean is a single upward step at dose j — observations at doses
below j form the "inactive" partition (mean mu_minus), observations at
doses j and above form the "active" partition (mean mu_plus), sharing a
common precision zeta = 1/sigma_B^2 with prior Gamma(a_sigma, b_sigma).
The conditional prior for each partition mean is normal with precision
n0 * zeta, so the marginal likelihood of model j has a closed form:

    evidence_j  ∝  prior_j * (|L_j|+n0)^-1/2 * (|R_j|+n0)^-1/2
                   * Gamma(a~) / b~^a~

with a~ = a_sigma + N/2 and b~ collecting the partition sums of squares
plus the two shrinkage terms. Everything is computed in log space.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln

from .core import StepModelHyper


def _partition_moments(data_by_dose: dict, j: int, J: int):
    """Counts, means and population variances of the two partitions under
    model j: L = observations at doses < j, R = at doses >= j.

    Empty partitions get mean 0 and variance 0 (their terms vanish).
    """
    left, right = [], []
    for dose_index, values in data_by_dose.items():
        if not 1 <= int(dose_index) <= J:
            raise ValueError(f"dose index {dose_index} outside 1..{J}")
        target = left if dose_index < j else right
        target.extend(float(v) for v in values)
    out = []
    for vals in (left, right):
        n = len(vals)
        if n == 0:
            out.append((0, 0.0, 0.0))
            continue
        arr = np.asarray(vals)
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite biomarker observation")
        out.append((n, float(arr.mean()), float(arr.var())))  # population variance
    return out[0], out[1]


def log_evidence(j: int, data_by_dose: dict, hyper: StepModelHyper, J: int) -> float:
    """Log marginal likelihood of step model j, up to a constant shared by
    all j (so only differences across j are meaningful).

    Params:
    j -- candidate step location, 1..J.
    data_by_dose -- map dose_index -> iterable of biomarker values.
    hyper -- StepModelHyper.
    J -- number of doses / models.
    """
    if not 1 <= j <= J:
        raise ValueError(f"model index {j} outside 1..{J}")
    prior = hyper.prior_for(J)
    (nL, mL, vL), (nR, mR, vR) = _partition_moments(data_by_dose, j, J)
    N = nL + nR
    a_tilde = hyper.a_sigma + 0.5 * N
    b_tilde = (hyper.b_sigma
               + 0.5 * nL * vL + 0.5 * nR * vR
               + 0.5 * (nL * hyper.n0 / (nL + hyper.n0)) * (mL - hyper.m_mu_minus) ** 2
               + 0.5 * (nR * hyper.n0 / (nR + hyper.n0)) * (mR - hyper.m_mu_plus) ** 2)
    log_prior = -math.inf if prior[j - 1] == 0.0 else math.log(prior[j - 1])
    return (log_prior
            - 0.5 * math.log(nL + hyper.n0)
            - 0.5 * math.log(nR + hyper.n0)
            + gammaln(a_tilde) - a_tilde * math.log(b_tilde))


def posterior_model_probs(data_by_dose: dict, hyper: StepModelHyper, J: int) -> np.ndarray:
    """Posterior probability of each step model, normalized over j = 1..J."""
    logs = np.array([log_evidence(j, data_by_dose, hyper, J) for j in range(1, J + 1)])
    if np.all(np.isneginf(logs)):
        raise ValueError("model prior assigns zero mass everywhere")
    shifted = logs - logs.max()
    w = np.exp(shifted)
    return w / w.sum()


def estimate_tau(probs, c_B: float) -> int:
    """Lowest dose index whose model probability exceeds c_B (strictly);
    falls back to dose 1 when none qualifies."""
    for j, p in enumerate(probs, start=1):
        if p > c_B:
            return j
    return 1


def rule_2a(probs, c_B: float) -> set:
    """Biologically active doses: everything at or above the estimated
    lowest active dose. Equivalently: doses j such that no higher dose
    still has model probability above c_B."""
    tau = estimate_tau(probs, c_B)
    return set(range(tau, len(probs) + 1))
