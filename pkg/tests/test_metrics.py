import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.exceptions import NotFittedError

from crosscare.metrics import (
    IsotonicCalibrator,
    auroc,
    calibration_curve,
    isotonic_fit,
    wilcoxon_paired,
)

from oracles import oracle_auroc, oracle_isotonic_group_values, oracle_wilcoxon


# ------------------------------------------------------------ AUROC


def test_auroc_hand_example():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auroc_perfect_separation():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_auroc_constant_scores():
    assert auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5


def test_auroc_single_class_rejected():
    with pytest.raises(ValueError, match="undefined AUROC"):
        auroc([0.1, 0.2], [1, 1])


def test_auroc_matches_pair_counting():
    rng = np.random.default_rng(31)
    for _ in range(100):
        n = int(rng.integers(2, 200))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # Coarse score grid provokes plenty of ties.
        scores = np.round(rng.random(n), 1)
        assert auroc(scores, labels) == pytest.approx(
            oracle_auroc(scores, labels), abs=1e-12
        )


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.floats(min_value=-3, max_value=3), st.integers(min_value=0, max_value=1)
        ),
        min_size=2,
        max_size=60,
    )
)
def test_auroc_invariant_under_monotone_transforms(pairs):
    # Scores sit on a 0.01 grid in [-3, 3] so each transform stays
    # strictly monotone in floating point (no two scores collapse).
    scores = np.round(np.array([s for s, _ in pairs]), 2)
    labels = np.array([y for _, y in pairs])
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    base = auroc(scores, labels)
    for transform in (lambda x: 3 * x + 7, np.tanh, lambda x: np.exp(x / 100)):
        assert auroc(transform(scores), labels) == pytest.approx(base, abs=1e-12)


# ------------------------------------------------------------ isotonic


def test_isotonic_two_point_violation_pools():
    model = isotonic_fit([0.2, 0.8], [1.0, 0.0])
    assert model.values.tolist() == [0.5]
    assert model.predict([0.1, 0.5, 0.9]).tolist() == [0.5, 0.5, 0.5]


def test_isotonic_monotone_input_is_identity_step():
    model = isotonic_fit([0.1, 0.5, 0.9], [0.0, 0.0, 1.0])
    assert model.breakpoints.tolist() == [0.1, 0.5, 0.9]
    assert model.values.tolist() == [0.0, 0.0, 1.0]


def test_isotonic_single_point_constant():
    model = isotonic_fit([0.4], [1.0])
    assert model.predict([0.0, 0.4, 1.0]).tolist() == [1.0, 1.0, 1.0]


def test_isotonic_equal_scores_pool_before_fitting():
    model = isotonic_fit([0.3, 0.3, 0.7], [0.0, 1.0, 1.0])
    assert model.predict([0.3])[0] == pytest.approx(0.5)
    assert model.predict([0.7])[0] == pytest.approx(1.0)


def test_isotonic_matches_exhaustive_partition_search():
    rng = np.random.default_rng(37)
    for _ in range(120):
        n = int(rng.integers(1, 9))
        scores = np.round(rng.random(n), 1)
        labels = rng.integers(0, 2, size=n).astype(float)
        model = isotonic_fit(scores, labels)
        keys, expected = oracle_isotonic_group_values(scores, labels)
        got = model.predict(np.array(keys))
        assert np.allclose(got, expected, atol=1e-9), (scores, labels)


def test_isotonic_output_non_decreasing_and_idempotent():
    rng = np.random.default_rng(41)
    for _ in range(20):
        n = int(rng.integers(2, 120))
        scores = rng.random(n)
        labels = (rng.random(n) < scores).astype(float)
        model = isotonic_fit(scores, labels)
        assert np.all(np.diff(model.values) >= 0)
        calibrated = model.predict(scores)
        again = isotonic_fit(calibrated, calibrated).predict(calibrated)
        assert np.allclose(again, calibrated, atol=1e-12)


def test_isotonic_strictly_increasing_fit_preserves_auroc():
    rng = np.random.default_rng(43)
    scores = rng.random(300)
    labels = (rng.random(300) < scores).astype(float)
    model = isotonic_fit(scores, labels)
    calibrated = model.predict(scores)
    # Pooling can only introduce ties; the rank metric moves at most a
    # little and an exactly strict fit would leave it untouched.
    assert auroc(calibrated, labels) == pytest.approx(auroc(scores, labels), abs=0.05)


def test_isotonic_calibrator_estimator():
    est = IsotonicCalibrator()
    with pytest.raises(NotFittedError):
        est.transform([0.5])
    est.fit([0.2, 0.8], [0.0, 1.0])
    assert est.predict([0.9])[0] == 1.0


# ------------------------------------------------------------ calibration


def test_calibrated_probs_hug_the_diagonal():
    rng = np.random.default_rng(47)
    probs = rng.random(20000)
    labels = (rng.random(20000) < probs).astype(float)
    curve = calibration_curve(probs, labels, n_bins=10)
    assert len(curve) == 10
    for mean_pred, frac_pos, n in curve:
        # 4-sigma binomial envelope
        assert abs(frac_pos - mean_pred) < 4 * np.sqrt(0.25 / n)


def test_constant_probs_single_point():
    curve = calibration_curve([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0], n_bins=10)
    assert curve == [(0.5, 0.5, 4)]


def test_winsorisation_caps_the_grid():
    probs = np.concatenate([np.full(999, 0.1), [0.9]])
    labels = np.zeros(1000)
    labels[:100] = 1
    full = calibration_curve(probs, labels, n_bins=10, winsor_q=1.0)
    assert max(p for p, _, _ in full) == pytest.approx(0.9)
    capped = calibration_curve(probs, labels, n_bins=10, winsor_q=0.5)
    assert max(p for p, _, _ in capped) == pytest.approx(0.1)


def test_calibration_rejects_bad_arguments():
    with pytest.raises(ValueError, match="winsor_q"):
        calibration_curve([0.5], [1], winsor_q=0.0)
    with pytest.raises(ValueError, match="n_bins"):
        calibration_curve([0.5], [1], n_bins=0)


# ------------------------------------------------------------ Wilcoxon


def test_wilcoxon_identical_vectors():
    assert wilcoxon_paired([0.7, 0.8, 0.9, 0.6, 0.5], [0.7, 0.8, 0.9, 0.6, 0.5]) == 1.0


def test_wilcoxon_five_positive_differences():
    a = [0.8, 0.82, 0.84, 0.86, 0.88]
    b = [0.7, 0.71, 0.72, 0.73, 0.74]
    assert wilcoxon_paired(a, b) == pytest.approx(2 / 32)


def test_wilcoxon_zero_difference_dropped():
    a = [0.8, 0.82, 0.84, 0.86, 0.5]
    b = [0.7, 0.71, 0.72, 0.73, 0.5]
    assert wilcoxon_paired(a, b) == pytest.approx(2 / 16)


def test_wilcoxon_matches_enumeration_oracle():
    rng = np.random.default_rng(53)
    for _ in range(200):
        n = int(rng.integers(2, 7))
        a = np.round(rng.random(n), 1)
        b = np.round(rng.random(n), 1)
        assert wilcoxon_paired(a, b) == pytest.approx(oracle_wilcoxon(a, b), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(min_value=0, max_value=1), min_size=5, max_size=5),
    st.lists(st.floats(min_value=0, max_value=1), min_size=5, max_size=5),
)
def test_wilcoxon_symmetric(a, b):
    assert wilcoxon_paired(a, b) == pytest.approx(wilcoxon_paired(b, a), abs=1e-12)
