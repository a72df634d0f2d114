"""Confidence strategies, weighted aggregation, and multi-view fitting."""

import json

import numpy as np
import pytest

from conftest import lit_coefficients
from morphfit.errors import ContractViolation, FitError
from morphfit.fit import (
    FitResult,
    FitSchedule,
    Observation,
    canonical_translation,
)
from morphfit.model import CoefficientVector
from morphfit.multiview import (
    RESIDUAL_EPS,
    ConfidenceVector,
    ViewSet,
    aggregate_alpha,
    fit_multi_view,
    save_multi_view_result,
    set_loss,
    view_confidence,
)
from morphfit.render import render_view


def fake_fit(basis, rmse, alpha=None):
    c = CoefficientVector.zeros(basis)
    if alpha is not None:
        c.alpha[:] = alpha
    return FitResult(
        coefficients=c,
        loss_breakdown={"landmark": rmse ** 2},
        iterations=1,
        converged=True,
        final_landmark_rmse=rmse,
    )


# ---------------------------------------------------------------------------
# Confidence


def test_uniform_confidence_all_ones(small_basis):
    conf = view_confidence(fake_fit(small_basis, 0.7), strategy="uniform")
    assert np.array_equal(conf.c, np.ones(small_basis.d_id))


def test_residual_confidence_zero_rmse(small_basis):
    conf = view_confidence(fake_fit(small_basis, 0.0), strategy="residual")
    assert np.allclose(conf.c, 1000.0, atol=0)


def test_residual_confidence_ratio(small_basis):
    lo = view_confidence(fake_fit(small_basis, 0.5), strategy="residual")
    hi = view_confidence(fake_fit(small_basis, 2.0), strategy="residual")
    expected = (2.0 + RESIDUAL_EPS) / (0.5 + RESIDUAL_EPS)
    assert lo.c[0] / hi.c[0] == pytest.approx(expected, rel=1e-12)
    assert lo.c[0] / hi.c[0] == pytest.approx(3.994, abs=1e-3)


def test_unknown_strategy_rejected(small_basis):
    with pytest.raises(ContractViolation):
        view_confidence(fake_fit(small_basis, 0.1), strategy="oracle")


def test_confidence_vector_validation():
    with pytest.raises(ContractViolation):
        ConfidenceVector(np.array([1.0, 0.0]))
    with pytest.raises(ContractViolation):
        ConfidenceVector(np.array([1.0, -2.0]))
    with pytest.raises(ContractViolation):
        ConfidenceVector(np.array([1.0, np.inf]))


def test_nonfinite_fit_loss_rejected(small_basis):
    bad = fake_fit(small_basis, 0.1)
    bad.loss_breakdown["landmark"] = np.nan
    with pytest.raises(ContractViolation):
        view_confidence(bad)


# ---------------------------------------------------------------------------
# Aggregation


def test_aggregate_worked_example():
    alphas = [np.array([1.0, 3.0]), np.array([5.0, 7.0])]
    confs = [np.array([1.0, 1.0]), np.array([3.0, 1.0])]
    got = aggregate_alpha(alphas, confs)
    assert np.allclose(got, [4.0, 5.0], atol=1e-12)


def test_aggregate_single_view_identity():
    a = np.array([0.3, -1.2, 4.0])
    got = aggregate_alpha([a], [np.array([7.0, 7.0, 7.0])])
    assert np.allclose(got, a, atol=0)


def test_aggregate_equal_confidence_is_mean():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = rng.integers(2, 6)
        d = rng.integers(1, 9)
        alphas = [rng.standard_normal(d) for _ in range(k)]
        c = rng.uniform(0.5, 2.0)
        confs = [np.full(d, c) for _ in range(k)]
        got = aggregate_alpha(alphas, confs)
        assert np.allclose(got, np.mean(alphas, axis=0), atol=1e-12)


def test_aggregate_within_envelope():
    rng = np.random.default_rng(1)
    alphas = [rng.standard_normal(6) for _ in range(4)]
    confs = [rng.uniform(0.1, 5.0, size=6) for _ in range(4)]
    got = aggregate_alpha(alphas, confs)
    stack = np.stack(alphas)
    assert np.all(got >= stack.min(axis=0) - 1e-12)
    assert np.all(got <= stack.max(axis=0) + 1e-12)


def test_aggregate_confidence_rescale_invariant():
    rng = np.random.default_rng(2)
    alphas = [rng.standard_normal(5) for _ in range(3)]
    confs = [rng.uniform(0.1, 2.0, size=5) for _ in range(3)]
    base = aggregate_alpha(alphas, confs)
    scaled = aggregate_alpha(alphas, [17.0 * c for c in confs])
    assert np.allclose(scaled, base, atol=1e-12)


def test_aggregate_permutation_invariant():
    rng = np.random.default_rng(3)
    alphas = [rng.standard_normal(4) for _ in range(5)]
    confs = [rng.uniform(0.1, 2.0, size=4) for _ in range(5)]
    base = aggregate_alpha(alphas, confs)
    perm = [4, 2, 0, 3, 1]
    again = aggregate_alpha([alphas[i] for i in perm], [confs[i] for i in perm])
    assert np.allclose(again, base, atol=1e-12)


def test_aggregate_accepts_confidence_vectors():
    alphas = [np.array([2.0]), np.array([4.0])]
    confs = [ConfidenceVector(np.array([1.0])), ConfidenceVector(np.array([1.0]))]
    assert aggregate_alpha(alphas, confs)[0] == pytest.approx(3.0, abs=0)


def test_aggregate_error_cases():
    with pytest.raises(ContractViolation):
        aggregate_alpha([], [])
    with pytest.raises(ContractViolation):
        aggregate_alpha([np.zeros(2)], [])
    with pytest.raises(ContractViolation):
        aggregate_alpha([np.zeros(2), np.zeros(3)],
                        [np.ones(2), np.ones(3)])
    with pytest.raises(ContractViolation):
        aggregate_alpha([np.zeros(2)], [np.array([1.0, 0.0])])


# ---------------------------------------------------------------------------
# Set loss and ViewSet


def test_set_loss_cases():
    assert set_loss([0.7]) == 0.7
    assert set_loss([1.0, 3.0]) == 2.0
    assert set_loss([3.0, 1.0, 2.0]) == set_loss([1.0, 2.0, 3.0])
    with pytest.raises(ContractViolation):
        set_loss([])


def test_view_set_requires_views():
    with pytest.raises(ContractViolation):
        ViewSet(views=[])


# ---------------------------------------------------------------------------
# fit_multi_view (small renders, landmark-only schedule for speed)


def multi_view_observations(basis, intrinsics, yaws, seed=10, alpha_scale=1.0):
    rng = np.random.default_rng(seed)
    alpha = alpha_scale * rng.standard_normal(basis.d_id)
    obs = []
    for yaw in yaws:
        coeffs = lit_coefficients(
            basis, translation=canonical_translation(basis, intrinsics))
        coeffs.alpha[:] = alpha
        coeffs.pose[1] = yaw
        view = render_view(basis, coeffs, intrinsics)
        obs.append(Observation(image=view.image, landmarks=view.landmarks))
    return obs, alpha


def quick_schedule():
    return FitSchedule(stage1_max_iters=120, stage2_max_iters=0)


def test_fit_multi_view_single_view_matches_alpha(small_basis, small_intrinsics):
    obs, _ = multi_view_observations(small_basis, small_intrinsics, [0.0])
    result = fit_multi_view(obs, small_basis, small_intrinsics,
                            schedule=quick_schedule())
    assert np.allclose(result.aggregated.coefficients.alpha,
                       result.per_view[0].coefficients.alpha, atol=1e-14)
    assert result.failed_views == []


def test_fit_multi_view_duplicated_views_uniform(small_basis, small_intrinsics):
    obs, _ = multi_view_observations(small_basis, small_intrinsics, [0.0])
    result = fit_multi_view(obs * 3, small_basis, small_intrinsics,
                            schedule=quick_schedule(), strategy="uniform")
    single = result.per_view[0].coefficients.alpha
    for f in result.per_view[1:]:
        assert np.array_equal(f.coefficients.alpha, single)
    assert np.allclose(result.aggregated.coefficients.alpha, single, atol=1e-12)
    assert result.aggregated.iterations == sum(
        f.iterations for f in result.per_view)


def test_fit_multi_view_drops_failed_views(small_basis, small_intrinsics):
    obs, _ = multi_view_observations(small_basis, small_intrinsics, [0.0, 0.3])
    bad = Observation(image=np.zeros((64, 64, 3)), landmarks=np.zeros((5, 2)))
    result = fit_multi_view(obs + [bad], small_basis, small_intrinsics,
                            schedule=quick_schedule())
    assert len(result.per_view) == 2
    assert len(result.failed_views) == 1
    assert result.failed_views[0][0] == 2


def test_fit_multi_view_all_fail(small_basis, small_intrinsics):
    bad = Observation(image=np.zeros((64, 64, 3)), landmarks=np.zeros((5, 2)))
    with pytest.raises(FitError):
        fit_multi_view([bad, bad], small_basis, small_intrinsics,
                       schedule=quick_schedule())


def test_fit_multi_view_empty_rejected(small_basis, small_intrinsics):
    with pytest.raises(ContractViolation):
        fit_multi_view([], small_basis, small_intrinsics)


def test_fit_multi_view_set_loss_finite(small_basis, small_intrinsics):
    obs, _ = multi_view_observations(small_basis, small_intrinsics,
                                     [-0.3, 0.0, 0.3], seed=11)
    result = fit_multi_view(obs, small_basis, small_intrinsics,
                            schedule=quick_schedule())
    assert np.isfinite(result.set_loss)
    assert result.set_loss >= 0.0
    assert len(result.confidences) == 3


def test_save_multi_view_result(small_basis, small_intrinsics, tmp_path):
    obs, _ = multi_view_observations(small_basis, small_intrinsics, [0.0])
    result = fit_multi_view(obs, small_basis, small_intrinsics,
                            schedule=quick_schedule())
    path = str(tmp_path / "mv.json")
    save_multi_view_result(result, path)
    with open(path) as f:
        payload = json.load(f)
    assert "alpha" in payload
    assert "set_loss" in payload
    assert len(payload["per_view"]) == 1
    assert payload["failed_views"] == []
