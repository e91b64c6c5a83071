import math

import numpy as np
import pytest
from scipy import stats

from demotrial._kernels import predraw, surv_chain
from demotrial.core import JointPriors, PatientRecord, SurvPriors
from demotrial.sampler import ChainSpec
from demotrial.stage2_joint import fit_joint
from demotrial.stage3_surv import (
    SurvFit,
    SurvParams,
    fit_full,
    fit_surv,
    fit_surv_prior,
    prob_short_survival,
    rmst_plugin,
    rule_2d,
    select_otd,
    surv_prob,
)
from oracles import rmst_mixture_oracle, rmst_oracle
from samplecheck import quantile_rows

GRID = (0.05, 0.10, 0.20, 0.45, 0.65, 0.85)

TRUE = dict(rho=1.5, lam=(0.11, 0.10, 0.09, 0.07, 0.06, 0.08),
            eta=(3.0, -2.0, 0.5))


def simulate_surv_records(n, rng, censor_at=6.0):
    rho = TRUE["rho"]
    e1, e2, e3 = TRUE["eta"]
    recs = []
    for i in range(n):
        j = 1 + i % 6
        yb = rng.normal(3.0, 1.0)
        yt = int(rng.random() < 0.2)
        yr = int(rng.random() < 0.3)
        lam_eff = TRUE["lam"][j - 1] * math.exp(e1 * yt + e2 * yr + e3 * yb)
        t = (rng.exponential() / lam_eff) ** (1.0 / rho)
        rec = PatientRecord(id=i, dose_index=j, enroll_time=0.0,
                            y_B=yb, y_T=yt, y_R=yr)
        rec.y_S_time = min(t, censor_at)
        rec.y_S_event = int(t <= censor_at)
        recs.append(rec)
    return recs


def _fit_from_draws(rho, lam, eta1, eta2, eta3=None):
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    n = lam.shape[0]
    z = np.zeros(n)
    return SurvFit(rho=np.asarray(rho, dtype=float), lam=lam,
                   eta1=np.asarray(eta1, dtype=float),
                   eta2=np.asarray(eta2, dtype=float),
                   eta3=z if eta3 is None else np.asarray(eta3, dtype=float))


# ---------------------------------------------------------------------------
# survival function
# ---------------------------------------------------------------------------


def test_surv_prob_at_time_zero_is_one():
    p = SurvParams(rho=1.5, lam=(0.1, 0.2), eta1=3.0, eta2=-2.0)
    assert surv_prob(0.0, 1, p, 1, 1, 5.0) == 1.0


def test_surv_prob_exponential_value():
    p = SurvParams(rho=1.0, lam=(0.1,), eta1=0.0, eta2=0.0)
    assert math.isclose(surv_prob(10.0, 1, p, 0, 0, 0.0),
                        math.exp(-1.0), rel_tol=1e-12)


def test_surv_prob_covariates_shift_hazard():
    p = SurvParams(rho=1.2, lam=(0.1,), eta1=3.0, eta2=-2.0, eta3=0.5)
    base = surv_prob(5.0, 1, p, 0, 0, 0.0)
    assert surv_prob(5.0, 1, p, 1, 0, 0.0) < base  # toxicity raises hazard
    assert surv_prob(5.0, 1, p, 0, 1, 0.0) > base  # response lowers it
    assert surv_prob(5.0, 1, p, 0, 0, 1.0) < base  # biomarker raises it here


def test_surv_prob_rejects_negative_time():
    p = SurvParams(rho=1.0, lam=(0.1,), eta1=0.0, eta2=0.0)
    with pytest.raises(ValueError):
        surv_prob(-1.0, 1, p, 0, 0, 0.0)


# ---------------------------------------------------------------------------
# prior recovery and fitting
# ---------------------------------------------------------------------------


def test_prior_recovery_quantiles():
    p = SurvPriors()
    fit = fit_surv_prior(3, p, ChainSpec(n_burn=4000, n_keep=30000, seed=401))
    rows = []
    shape_dist = stats.gamma(p.a_rho, scale=1.0 / p.b_rho)
    rows += quantile_rows(
        "shape prior", np.log(fit.rho),
        ppf=lambda q: math.log(shape_dist.ppf(q)),
        pdf=lambda q: math.exp(q) * shape_dist.pdf(math.exp(q)))
    sd_lam = math.sqrt(p.v_lambda_sq)
    for j in range(3):
        rows += quantile_rows(
            f"log scale prior (dose {j + 1})", np.log(fit.lam[:, j]),
            ppf=lambda q: stats.norm.ppf(q, 0.0, sd_lam),
            pdf=lambda q: stats.norm.pdf(q, 0.0, sd_lam))
    sd_eta = math.sqrt(p.v_eta_sq)
    for name in ("eta1", "eta2", "eta3"):
        rows += quantile_rows(
            f"{name} prior", getattr(fit, name),
            ppf=lambda q: stats.norm.ppf(q, 0.0, sd_eta),
            pdf=lambda q: stats.norm.pdf(q, 0.0, sd_eta))
    for label, err, tol in rows:
        assert err <= tol, f"{label}: {err:.4f} > {tol:.4f}"


def test_parameter_recovery():
    rng = np.random.default_rng(409)
    recs = simulate_surv_records(600, rng)
    censored = sum(1 for r in recs if r.y_S_event == 0)
    assert 0.05 < censored / len(recs) < 0.4  # mixed events and censorings
    fit = fit_surv(recs, 6, SurvPriors(),
                   ChainSpec(n_burn=4000, n_keep=8000, seed=419))
    checks = [("rho", fit.rho, TRUE["rho"]),
              ("eta1", fit.eta1, TRUE["eta"][0]),
              ("eta2", fit.eta2, TRUE["eta"][1]),
              ("eta3", fit.eta3, TRUE["eta"][2])]
    checks += [(f"lam{j + 1}", np.log(fit.lam[:, j]), math.log(TRUE["lam"][j]))
               for j in range(6)]
    for name, draws, truth in checks:
        err = abs(draws.mean() - truth)
        assert err <= 3 * draws.std(), (
            f"{name}: mean {draws.mean():.3f}, truth {truth:.3f}, "
            f"sd {draws.std():.3f}")


def test_all_censored_pulls_scale_down():
    recs = []
    for i in range(40):
        rec = PatientRecord(id=i, dose_index=1, enroll_time=0.0,
                            y_B=0.0, y_T=0, y_R=0)
        rec.y_S_time = 5.0
        rec.y_S_event = 0
        recs.append(rec)
    fit = fit_surv(recs, 1, SurvPriors(), ChainSpec(2000, 4000, seed=421))
    # prior median of each scale is 1; forty event-free follow-ups of
    # length 5 must push it well below that
    assert np.median(fit.lam[:, 0]) < 0.1


def test_fit_skips_rows_missing_covariates():
    rng = np.random.default_rng(431)
    recs = simulate_surv_records(30, rng)
    for r in recs[:10]:
        r.y_R = None
    kept = fit_surv(recs, 6, SurvPriors(), ChainSpec(100, 100, seed=1))
    assert kept.n_doses == 6  # fits fine on the 20 complete rows
    for r in recs[10:]:
        r.y_B = None
    with pytest.raises(ValueError, match="no survival"):
        fit_surv(recs, 6, SurvPriors(), ChainSpec(100, 100, seed=1))


def test_fit_rejects_bad_dose_index():
    rec = PatientRecord(id=0, dose_index=7, enroll_time=0.0,
                        y_B=0.0, y_T=0, y_R=0)
    rec.y_S_time = 1.0
    rec.y_S_event = 1
    with pytest.raises(ValueError, match="dose index"):
        fit_surv([rec], 6, SurvPriors(), ChainSpec(100, 100, seed=1))


def test_reduced_model_excludes_biomarker_term():
    rng = np.random.default_rng(433)
    recs = simulate_surv_records(60, rng)
    fit = fit_surv(recs, 6, SurvPriors(), ChainSpec(500, 1000, seed=439),
                   use_biomarker=False)
    assert (fit.eta3 == 0.0).all()
    assert fit.lam.shape == (1000, 6)


def test_fit_determinism_and_seed_sensitivity():
    rng = np.random.default_rng(443)
    recs = simulate_surv_records(60, rng)
    f1 = fit_surv(recs, 6, SurvPriors(), ChainSpec(500, 800, seed=449))
    f2 = fit_surv(recs, 6, SurvPriors(), ChainSpec(500, 800, seed=449))
    f3 = fit_surv(recs, 6, SurvPriors(), ChainSpec(500, 800, seed=457))
    assert np.array_equal(f1.lam, f2.lam) and np.array_equal(f1.rho, f2.rho)
    assert not np.array_equal(f1.lam, f3.lam)


def test_kernel_jit_matches_pure_python():
    rng = np.random.default_rng(461)
    recs = simulate_surv_records(30, rng)
    from demotrial.stage3_surv import _surv_rows
    rows = _surv_rows(recs, 6)
    prior_vec = np.array([0.1, 0.1, 100.0, 100.0])
    normals, uniforms = predraw(17, 150, 10, 10)
    args = (*rows, 6, 1, prior_vec, np.zeros(10), np.ones(10),
            100, 50, 1, 0.44, normals, uniforms)
    jit_draws, _, _ = surv_chain(*args)
    py_draws, _, _ = surv_chain.py_func(*args)
    assert np.array_equal(jit_draws, py_draws)


# ---------------------------------------------------------------------------
# combined fit
# ---------------------------------------------------------------------------


def _records_with_biomarkers(n, rng):
    recs = simulate_surv_records(n, rng)
    return recs


def test_full_fit_is_deterministic_and_factorizes():
    rng = np.random.default_rng(463)
    recs = _records_with_biomarkers(60, rng)
    spec = ChainSpec(n_burn=500, n_keep=800, seed=467)
    full1 = fit_full(recs, GRID, JointPriors(), SurvPriors(), spec)
    full2 = fit_full(recs, GRID, JointPriors(), SurvPriors(), spec)
    assert np.array_equal(full1.joint.gamma0, full2.joint.gamma0)
    assert np.array_equal(full1.surv.lam, full2.surv.lam)

    # the posterior factorizes: each block equals its standalone fit run
    # on the matching substream
    seed_joint, seed_surv = np.random.SeedSequence(467).spawn(2)
    joint_alone = fit_joint(recs, GRID, JointPriors(),
                            ChainSpec(500, 800, seed_joint))
    surv_alone = fit_surv(recs, 6, SurvPriors(), ChainSpec(500, 800, seed_surv))
    assert np.array_equal(full1.joint.beta3, joint_alone.beta3)
    assert np.array_equal(full1.surv.rho, surv_alone.rho)


def test_full_fit_requires_survival_data():
    rec = PatientRecord(id=0, dose_index=1, enroll_time=0.0, y_B=1.0,
                        y_T=0, y_R=1)
    with pytest.raises(ValueError, match="no survival"):
        fit_full([rec], GRID, JointPriors(), SurvPriors(),
                 ChainSpec(100, 100, seed=1))


# ---------------------------------------------------------------------------
# restricted mean survival time
# ---------------------------------------------------------------------------


def test_rmst_tiny_hazard_approaches_horizon():
    fit = _fit_from_draws([1.0], [[1e-12]], [0.0], [0.0])
    got = rmst_plugin(1, fit, 12.0, {(0, 0): 1.0}, 0.0)
    assert abs(got[0] - 12.0) < 1e-4


def test_rmst_exponential_closed_form_grid():
    # rho = 1 gives RMST = (1 - exp(-lam*t)) / lam exactly
    for lam in (1e-4, 1e-3, 0.01, 0.1, 0.3, 1.0, 3.0):
        for t_s in (1.0, 6.0, 12.0, 24.0, 60.0):
            fit = _fit_from_draws([1.0], [[lam]], [0.0], [0.0])
            got = rmst_plugin(1, fit, t_s, {(0, 0): 1.0}, 0.0)[0]
            want = (1.0 - math.exp(-lam * t_s)) / lam
            assert abs(got - want) <= 1e-8, (lam, t_s)


def test_rmst_exponential_with_covariate_shift():
    lam, e1, e2, e3, b = 0.08, 3.0, -2.0, 0.4, 1.5
    fit = _fit_from_draws([1.0], [[lam]], [e1], [e2], [e3])
    got = rmst_plugin(1, fit, 12.0, {(1, 1): 1.0}, b)[0]
    lam_eff = lam * math.exp(e1 + e2 + e3 * b)  # u = v = 1
    want = (1.0 - math.exp(-lam_eff * 12.0)) / lam_eff
    assert abs(got - want) <= 1e-8


def test_rmst_weibull_mixture_matches_quadrature():
    fit = _fit_from_draws([1.5], [[0.05]], [3.0], [-2.0])
    pi = {(0, 1): 0.5, (0, 0): 0.5}
    got = rmst_plugin(1, fit, 12.0, pi, 0.0)[0]
    want = rmst_mixture_oracle(0.05, 1.5, 3.0, -2.0, 0.0, pi, 12.0)
    assert abs(got - want) <= 1e-6
    # and per-cell against the single-arm oracle
    cell = rmst_oracle(0.05, 1.5, -2.0, 12.0)
    base = rmst_oracle(0.05, 1.5, 0.0, 12.0)
    assert abs(got - 0.5 * (cell + base)) <= 1e-6


def test_rmst_bounded_and_monotone_in_scale():
    fit = _fit_from_draws([1.5, 1.5, 1.5], [[0.01], [0.1], [1.0]],
                          [0.0] * 3, [0.0] * 3)
    vals = rmst_plugin(1, fit, 12.0, {(0, 0): 1.0}, 0.0)
    assert (vals > 0).all() and (vals <= 12.0).all()
    assert vals[0] > vals[1] > vals[2]


def test_rmst_varies_across_draws_with_fixed_cells():
    rng = np.random.default_rng(479)
    recs = simulate_surv_records(60, rng)
    fit = fit_surv(recs, 6, SurvPriors(), ChainSpec(500, 500, seed=487))
    draws = rmst_plugin(3, fit, 12.0, {(0, 0): 0.6, (1, 1): 0.4}, 2.0)
    assert draws.shape == (500,)
    assert np.unique(draws).size > 400


def test_rmst_rejects_unnormalized_cells():
    fit = _fit_from_draws([1.0], [[0.1]], [0.0], [0.0])
    with pytest.raises(ValueError, match="sums to"):
        rmst_plugin(1, fit, 12.0, {(0, 0): 0.7, (0, 1): 0.2}, 0.0)


def test_rmst_rejects_bad_cell_and_horizon():
    fit = _fit_from_draws([1.0], [[0.1]], [0.0], [0.0])
    with pytest.raises(ValueError, match="cell"):
        rmst_plugin(1, fit, 12.0, {(2, 0): 1.0}, 0.0)
    with pytest.raises(ValueError, match="t_s"):
        rmst_plugin(1, fit, 0.0, {(0, 0): 1.0}, 0.0)


# ---------------------------------------------------------------------------
# survival futility rule and final selection
# ---------------------------------------------------------------------------


def test_prob_short_survival_counts_inclusive():
    draws = np.array([1.0, 2.0, 3.0, 4.0])
    assert prob_short_survival(draws, 2.0) == 0.5
    assert prob_short_survival(draws, 0.5) == 0.0
    with pytest.raises(ValueError):
        prob_short_survival(np.array([]), 1.0)


def test_rule_2d_thresholds():
    healthy = np.full(1000, 8.0)
    risky = np.concatenate([np.full(300, 2.0), np.full(700, 8.0)])
    by_dose = {1: healthy, 2: risky}
    assert rule_2d(by_dose, 3.0, 0.8) == {1, 2}
    assert rule_2d(by_dose, 3.0, 0.2) == {1}
    assert rule_2d(by_dose, 3.0, 0.0) == {1}
    assert rule_2d({}, 3.0, 0.8) == set()


def test_select_otd_examples():
    means = {4: 13.9, 5: 14.9, 6: 12.1}
    assert select_otd({4, 5, 6}, means) == 5
    assert select_otd(set(), means) is None
    assert select_otd({2, 3}, {2: 10.0, 3: 10.0}) == 2  # tie -> lowest
    # selection only needs the ordering of the means
    assert select_otd({4, 5, 6}, {j: math.exp(m) for j, m in means.items()}) == 5
    with pytest.raises(ValueError, match="no RMST mean"):
        select_otd({1, 2}, {1: 5.0})
