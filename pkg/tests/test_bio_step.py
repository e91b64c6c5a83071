import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from demotrial.bio_step import estimate_tau, log_evidence, posterior_model_probs, rule_2a
from demotrial.core import StepModelHyper

from oracles import step_model_probs_oracle

HYPER = StepModelHyper()


def random_dataset(rng, J=None, max_per_dose=10):
    J = J or int(rng.integers(3, 7))
    data = {}
    while True:
        for j in range(1, J + 1):
            n = int(rng.integers(0, max_per_dose + 1))
            data[j] = rng.normal(loc=rng.uniform(-1, 3), scale=rng.uniform(0.3, 2.0),
                                 size=n).tolist()
        if sum(len(v) for v in data.values()) >= 2:
            return J, data


def test_empty_data_returns_model_prior():
    probs = posterior_model_probs({j: [] for j in range(1, 7)}, HYPER, J=6)
    assert probs == pytest.approx(np.full(6, 1 / 6), abs=1e-15)


def test_empty_data_log_evidences_all_equal():
    evidences = [log_evidence(j, {}, HYPER, J=4) for j in range(1, 5)]
    assert max(evidences) - min(evidences) == pytest.approx(0.0, abs=1e-12)


def test_single_model_normalizes_to_one():
    probs = posterior_model_probs({1: [0.3, 1.2]}, HYPER, J=1)
    assert probs == pytest.approx([1.0])


def test_degenerate_model_prior_returned_unchanged():
    hyper = StepModelHyper(model_prior=(1.0, 0.0, 0.0))
    data = {1: [5.0, 5.5], 2: [0.1], 3: [9.0]}
    probs = posterior_model_probs(data, hyper, J=3)
    assert probs == pytest.approx([1.0, 0.0, 0.0], abs=1e-300)


def test_evidence_matches_oracle_on_reference_dataset():
    data = {1: [0.1, -0.2], 2: [1.9, 2.1], 3: [2.0, 2.2]}
    probs = posterior_model_probs(data, HYPER, J=3)
    oracle = step_model_probs_oracle(data, HYPER, J=3)
    np.testing.assert_allclose(probs, oracle, rtol=1e-6)
    # clearly separated data: the step is at dose 2
    assert probs.argmax() == 1


def test_strong_separation_concentrates_on_the_step():
    rng = np.random.default_rng(11)
    data = {j: (rng.normal(0.0, 1.0, 8) + (10.0 if j >= 3 else 0.0)).tolist()
            for j in range(1, 7)}
    probs = posterior_model_probs(data, HYPER, J=6)
    assert probs[2] > 0.99
    oracle = step_model_probs_oracle(data, HYPER, J=6)
    np.testing.assert_allclose(probs, oracle, rtol=1e-6)


def test_oracle_agreement_on_random_small_datasets():
    rng = np.random.default_rng(2024)
    for _ in range(25):
        J, data = random_dataset(rng)
        probs = posterior_model_probs(data, HYPER, J=J)
        oracle = step_model_probs_oracle(data, HYPER, J=J)
        np.testing.assert_allclose(probs, oracle, rtol=1e-6, atol=1e-200)


def test_normalization_on_random_inputs():
    rng = np.random.default_rng(5)
    for _ in range(200):
        J, data = random_dataset(rng, J=int(rng.integers(2, 9)), max_per_dose=8)
        probs = posterior_model_probs(data, HYPER, J=J)
        assert abs(probs.sum() - 1.0) < 1e-12
        assert np.all(probs >= 0)


def test_evidence_depends_only_on_sufficient_statistics():
    data = {1: [0.4, -0.1, 0.2], 2: [1.0, 2.0, 1.5]}
    shuffled = {1: [0.2, 0.4, -0.1], 2: [1.5, 1.0, 2.0]}
    for j in (1, 2):
        assert log_evidence(j, data, HYPER, J=2) == log_evidence(j, shuffled, HYPER, J=2)


def test_rejects_bad_inputs():
    with pytest.raises(ValueError, match="outside"):
        log_evidence(5, {1: [0.0]}, HYPER, J=3)
    with pytest.raises(ValueError, match="outside"):
        log_evidence(1, {9: [0.0]}, HYPER, J=3)
    with pytest.raises(ValueError, match="non-finite"):
        log_evidence(1, {1: [float("nan")]}, HYPER, J=2)


def test_estimate_tau_reference_vector():
    probs = (0.05, 0.89, 0.04, 0.03, 0.02, 0.02)
    assert estimate_tau(probs, c_B=0.5) == 2


def test_estimate_tau_fallback_is_lowest_dose():
    assert estimate_tau([1 / 6] * 6, c_B=0.5) == 1


def test_estimate_tau_point_mass_at_top():
    assert estimate_tau([0, 0, 0, 0, 0, 1], c_B=0.5) == 6


def test_estimate_tau_threshold_is_strict():
    assert estimate_tau([0.5, 0.5], c_B=0.5) == 1


def test_rule_2a_reference_vector():
    probs = (0.05, 0.89, 0.04, 0.03, 0.02, 0.02)
    assert rule_2a(probs, c_B=0.5) == {2, 3, 4, 5, 6}


def test_rule_2a_fallback_full_set():
    assert rule_2a([1 / 6] * 6, c_B=0.5) == {1, 2, 3, 4, 5, 6}


def test_rule_2a_point_mass_top_dose_only():
    assert rule_2a([0, 0, 0, 0, 0, 1], c_B=0.5) == {6}


@given(st.lists(st.floats(0, 1), min_size=2, max_size=8),
       st.floats(0.5, 0.95))
@settings(max_examples=300, deadline=None)
def test_rule_2a_dual_characterization(raw, c_B):
    """The lowest-qualifying-dose form and the no-higher-dose-exceeds form
    coincide whenever at most one model can exceed the cutoff, which is
    guaranteed for cutoffs >= 1/2 (probabilities sum to one)."""
    total = sum(raw)
    if total == 0:
        probs = [1.0 / len(raw)] * len(raw)
    else:
        probs = [p / total for p in raw]
    J = len(probs)
    via_tau = rule_2a(probs, c_B)
    via_max = {j for j in range(1, J + 1)
               if max([probs[r - 1] for r in range(j + 1, J + 1)], default=0.0) <= c_B}
    assert via_tau == via_max
