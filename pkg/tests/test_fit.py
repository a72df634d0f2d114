"""Loss terms, finite-difference gradients, and the single-view fit loop."""

import numpy as np
import pytest

from conftest import lit_coefficients
from morphfit.errors import ContractViolation
from morphfit.fit import (
    FitSchedule,
    LossWeights,
    Observation,
    SkinRegion,
    canonical_translation,
    coef_regularization,
    default_skin_region,
    fit_result_to_dict,
    fit_single_view,
    landmark_loss,
    load_coefficients,
    loss_gradient,
    pack_coefficients,
    parameter_names,
    perceptual_loss,
    photometric_loss,
    save_coefficients,
    texture_flatness_loss,
    total_loss,
    unpack_coefficients,
)
from morphfit.fit import _make_objective
from morphfit.model import CoefficientVector
from morphfit.render import RenderedView, render_view


def make_view(image, mask):
    h, w = mask.shape
    depth = np.where(mask, 1.0, np.inf)
    return RenderedView(image=image, face_mask=mask, depth=depth,
                        landmarks=np.zeros((1, 2)))


# ---------------------------------------------------------------------------
# Photometric loss


def test_photometric_identical_images_zero():
    img = np.random.default_rng(0).uniform(0, 1, size=(4, 4, 3))
    mask = np.ones((4, 4), dtype=bool)
    view = make_view(img, mask)
    assert photometric_loss(img, view, np.ones((4, 4))) == 0.0


def test_photometric_single_pixel_345_norm():
    rendered = np.zeros((2, 2, 3))
    observed = np.zeros((2, 2, 3))
    observed[0, 0] = [0.3, 0.0, 0.4]
    mask = np.zeros((2, 2), dtype=bool)
    mask[0, 0] = True
    view = make_view(rendered, mask)
    assert photometric_loss(observed, view, np.ones((2, 2))) == pytest.approx(0.5, abs=1e-15)


def test_photometric_ignores_pixels_outside_mask():
    rng = np.random.default_rng(1)
    rendered = rng.uniform(0, 1, size=(4, 4, 3))
    observed = rendered.copy()
    mask = np.zeros((4, 4), dtype=bool)
    mask[1, 1] = True
    view = make_view(rendered, mask)
    base = photometric_loss(observed, view, np.ones((4, 4)))
    observed[3, 3] = [1.0, 1.0, 1.0]
    assert photometric_loss(observed, view, np.ones((4, 4))) == base


def test_photometric_attention_weighting():
    rendered = np.zeros((1, 2, 3))
    observed = np.zeros((1, 2, 3))
    observed[0, 0, 0] = 1.0     # distance 1 at pixel 0
    observed[0, 1, 0] = 0.5     # distance 0.5 at pixel 1
    mask = np.ones((1, 2), dtype=bool)
    attention = np.array([[1.0, 0.2]])
    view = make_view(rendered, mask)
    expected = (1.0 * 1.0 + 0.2 * 0.5) / 1.2
    assert photometric_loss(observed, view, attention) == pytest.approx(expected, abs=1e-15)


def test_photometric_empty_mask_warns_and_returns_zero():
    img = np.zeros((2, 2, 3))
    view = make_view(img, np.zeros((2, 2), dtype=bool))
    with pytest.warns(RuntimeWarning):
        assert photometric_loss(img, view, np.ones((2, 2))) == 0.0


def test_photometric_size_mismatch():
    view = make_view(np.zeros((2, 2, 3)), np.ones((2, 2), dtype=bool))
    with pytest.raises(ContractViolation):
        photometric_loss(np.zeros((3, 3, 3)), view, np.ones((2, 2)))


# ---------------------------------------------------------------------------
# Landmark, perceptual, regularization, texture losses


def test_landmark_perfect_alignment_zero():
    q = np.random.default_rng(2).uniform(0, 64, size=(68, 2))
    assert landmark_loss(q, q) == 0.0


def test_landmark_squared_345_case():
    assert landmark_loss(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])) == 25.0


def test_landmark_linear_in_weights():
    rng = np.random.default_rng(3)
    q = rng.uniform(0, 10, size=(5, 2))
    qp = rng.uniform(0, 10, size=(5, 2))
    w = rng.uniform(0.1, 2.0, size=5)
    assert landmark_loss(q, qp, 3.0 * w) == pytest.approx(
        3.0 * landmark_loss(q, qp, w), rel=1e-12)


def test_landmark_length_mismatch():
    with pytest.raises(ContractViolation):
        landmark_loss(np.zeros((3, 2)), np.zeros((4, 2)))


def test_perceptual_cases():
    a = np.array([1.0, 0.0])
    assert perceptual_loss(a, a) == 0.0
    assert perceptual_loss(a, np.array([0.0, 1.0])) == pytest.approx(1.0, abs=1e-15)
    assert perceptual_loss(a, -a) == pytest.approx(2.0, abs=1e-15)
    with pytest.raises(ContractViolation):
        perceptual_loss(a, np.zeros(2))


def test_coef_regularization_cases(small_basis):
    c = CoefficientVector.zeros(small_basis)
    w = LossWeights()
    assert coef_regularization(c, w) == 0.0
    c.alpha[:2] = [3.0, 4.0]
    assert coef_regularization(c, LossWeights(w_alpha=1.0, w_beta=0.0,
                                              w_delta=0.0)) == 25.0
    c2 = c.copy()
    c2.alpha *= 2.0
    assert coef_regularization(c2, w) == pytest.approx(4.0 * coef_regularization(c, w))


def test_texture_flatness_cases():
    region = SkinRegion(indices=np.array([0, 1]))
    constant = np.tile([0.5, 0.5, 0.5], 2)
    assert texture_flatness_loss(constant, region) == 0.0
    two = np.array([0.0, 0.2, 0.3, 1.0, 0.2, 0.3])
    assert texture_flatness_loss(two, region) == pytest.approx(0.25, abs=1e-15)
    shifted = two.copy()
    shifted[1::3] += 0.4   # constant green shift
    assert texture_flatness_loss(shifted, region) == pytest.approx(
        texture_flatness_loss(two, region), abs=1e-12)


def test_skin_region_nonempty():
    with pytest.raises(ContractViolation):
        SkinRegion(indices=np.array([], dtype=int))


def test_default_skin_region_valid(small_basis):
    region = default_skin_region(small_basis)
    assert len(region.indices) > 0
    assert np.all(region.indices < small_basis.vertex_count)


# ---------------------------------------------------------------------------
# Total loss


def test_total_loss_self_consistency(small_basis, small_intrinsics):
    coeffs = lit_coefficients(
        small_basis, translation=canonical_translation(small_basis, small_intrinsics))
    coeffs.alpha[:] = np.random.default_rng(4).standard_normal(small_basis.d_id)
    view = render_view(small_basis, coeffs, small_intrinsics)
    obs = Observation(image=view.image, landmarks=view.landmarks)
    weights = LossWeights(w_reg=0.0, w_tex=0.0)
    total, _ = total_loss(obs, coeffs, small_basis, small_intrinsics, weights)
    assert total < 1e-8


def test_total_loss_all_weights_zero(small_basis, small_intrinsics):
    coeffs = lit_coefficients(small_basis, translation=(0, 0, 4.0))
    obs = Observation(image=np.zeros((64, 64, 3)), landmarks=np.zeros((68, 2)))
    weights = LossWeights(w_photo=0, w_lan=0, w_per=0, w_reg=0, w_tex=0)
    total, _ = total_loss(obs, coeffs, small_basis, small_intrinsics, weights)
    assert total == 0.0


def test_total_loss_breakdown_recombines(small_basis, small_intrinsics):
    rng = np.random.default_rng(5)
    coeffs = lit_coefficients(
        small_basis, translation=canonical_translation(small_basis, small_intrinsics))
    coeffs.alpha[:] = rng.standard_normal(small_basis.d_id)
    coeffs.delta[:] = 0.5 * rng.standard_normal(small_basis.d_tex)
    view = render_view(small_basis, coeffs, small_intrinsics)
    obs = Observation(image=rng.uniform(0, 1, size=view.image.shape),
                      landmarks=view.landmarks + 1.0)
    weights = LossWeights()
    total, bd = total_loss(obs, coeffs, small_basis, small_intrinsics, weights)
    recombined = (weights.w_photo * bd["photometric"]
                  + weights.w_lan * bd["landmark"]
                  + weights.w_per * bd["perceptual"]
                  + weights.w_reg * bd["coef_reg"]
                  + weights.w_tex * bd["texture_flatness"])
    assert total == pytest.approx(recombined, abs=1e-12)
    assert all(v >= 0 for v in bd.values())


# ---------------------------------------------------------------------------
# Gradients


def forward_difference_oracle(fn, theta, h=1e-6):
    """Independently coded forward-difference gradient."""
    base = fn(theta)
    grad = np.zeros_like(theta)
    for i in range(len(theta)):
        probe = theta.copy()
        probe[i] += h
        grad[i] = (fn(probe) - base) / h
    return grad


def landmark_objective(small_basis, small_intrinsics, seed=6, noise=1.0):
    rng = np.random.default_rng(seed)
    coeffs = lit_coefficients(
        small_basis, translation=canonical_translation(small_basis, small_intrinsics))
    coeffs.alpha[:] = rng.standard_normal(small_basis.d_id)
    view = render_view(small_basis, coeffs, small_intrinsics)
    obs = Observation(image=view.image,
                      landmarks=view.landmarks + noise * rng.standard_normal(view.landmarks.shape))
    weights = LossWeights(w_photo=0.0, w_per=0.0)
    objective = _make_objective(obs, small_basis, small_intrinsics, weights)
    return obs, coeffs, weights, objective


def test_gradient_matches_forward_difference_oracle(small_basis, small_intrinsics):
    obs, coeffs, weights, objective = landmark_objective(small_basis, small_intrinsics)
    grad = loss_gradient(obs, coeffs, small_basis, small_intrinsics, weights)
    oracle = forward_difference_oracle(objective, pack_coefficients(coeffs))
    sig = np.abs(oracle) > 1e-6
    rel = np.abs(grad[sig] - oracle[sig]) / np.abs(oracle[sig])
    assert rel.max() < 1e-3


def test_gradient_two_step_sizes_agree(small_basis, small_intrinsics):
    obs, coeffs, weights, objective = landmark_objective(small_basis, small_intrinsics, seed=7)
    theta = pack_coefficients(coeffs)
    grad = loss_gradient(obs, coeffs, small_basis, small_intrinsics, weights)
    # second, independently implemented central difference at h = 1e-5
    other = np.zeros_like(theta)
    for i in range(len(theta)):
        hi, lo = theta.copy(), theta.copy()
        hi[i] += 1e-5
        lo[i] -= 1e-5
        other[i] = (objective(hi) - objective(lo)) / 2e-5
    sig = np.abs(other) > 1e-6
    rel = np.abs(grad[sig] - other[sig]) / np.abs(other[sig])
    assert rel.max() < 1e-2


def test_gradient_stationary_at_landmark_minimum(small_basis, small_intrinsics):
    # exact ground truth with zero regularizers is a strict minimum
    obs, coeffs, _, _ = landmark_objective(small_basis, small_intrinsics,
                                           seed=8, noise=0.0)
    weights = LossWeights(w_photo=0.0, w_per=0.0, w_reg=0.0, w_tex=0.0)
    grad = loss_gradient(obs, coeffs, small_basis, small_intrinsics, weights)
    assert np.linalg.norm(grad) < 1e-3


def test_gradient_zero_weight_components_exactly_zero(small_basis, small_intrinsics):
    obs, coeffs, weights, _ = landmark_objective(small_basis, small_intrinsics, seed=9)
    # landmark-only weights: texture and lighting cannot affect the loss
    w = LossWeights(w_photo=0.0, w_per=0.0, w_tex=0.0, w_reg=0.0)
    grad = loss_gradient(obs, coeffs, small_basis, small_intrinsics, w)
    names = parameter_names(small_basis)
    for i, name in enumerate(names):
        if name.startswith(("delta", "gamma")):
            assert grad[i] == 0.0, name


def test_pack_unpack_round_trip(small_basis):
    rng = np.random.default_rng(10)
    c = CoefficientVector(
        alpha=rng.standard_normal(small_basis.d_id),
        beta=rng.standard_normal(small_basis.d_exp),
        delta=rng.standard_normal(small_basis.d_tex),
        gamma=rng.standard_normal((3, 9)),
        pose=rng.standard_normal(6))
    back = unpack_coefficients(pack_coefficients(c), small_basis)
    for name in ("alpha", "beta", "delta", "gamma", "pose"):
        assert np.array_equal(getattr(c, name), getattr(back, name))


# ---------------------------------------------------------------------------
# fit_single_view


def synthetic_observation(small_basis, small_intrinsics, seed=11):
    rng = np.random.default_rng(seed)
    coeffs = lit_coefficients(
        small_basis, translation=canonical_translation(small_basis, small_intrinsics))
    coeffs.alpha[:] = rng.standard_normal(small_basis.d_id)
    coeffs.beta[:] = 0.3 * rng.standard_normal(small_basis.d_exp)
    view = render_view(small_basis, coeffs, small_intrinsics)
    return Observation(image=view.image, landmarks=view.landmarks), coeffs


def test_fit_initialized_at_ground_truth_converges(small_basis, small_intrinsics):
    obs, truth = synthetic_observation(small_basis, small_intrinsics)
    schedule = FitSchedule(stage1_max_iters=50, stage2_max_iters=0)
    weights = LossWeights(w_reg=0.0, w_tex=0.0)
    result = fit_single_view(obs, small_basis, small_intrinsics, weights,
                             schedule, init=truth)
    assert result.converged
    assert result.iterations <= 2
    assert np.allclose(result.coefficients.alpha, truth.alpha, atol=1e-9)


def test_fit_round_trip_landmark_stage(small_basis, small_intrinsics):
    obs, truth = synthetic_observation(small_basis, small_intrinsics, seed=12)
    schedule = FitSchedule(stage1_max_iters=200, stage2_max_iters=0)
    result = fit_single_view(obs, small_basis, small_intrinsics, schedule=schedule)
    assert result.final_landmark_rmse < 1.0


def test_fit_deterministic(small_basis, small_intrinsics):
    obs, _ = synthetic_observation(small_basis, small_intrinsics, seed=13)
    schedule = FitSchedule(stage1_max_iters=40, stage2_max_iters=0)
    r1 = fit_single_view(obs, small_basis, small_intrinsics, schedule=schedule)
    r2 = fit_single_view(obs, small_basis, small_intrinsics, schedule=schedule)
    assert np.array_equal(pack_coefficients(r1.coefficients),
                          pack_coefficients(r2.coefficients))
    assert r1.iterations == r2.iterations
    assert r1.final_landmark_rmse == r2.final_landmark_rmse


def test_fit_never_exceeds_initial_loss(small_basis, small_intrinsics):
    obs, _ = synthetic_observation(small_basis, small_intrinsics, seed=14)
    weights = LossWeights()
    schedule = FitSchedule(stage1_max_iters=60, stage2_max_iters=0)
    init = CoefficientVector.zeros(
        small_basis, translation=canonical_translation(small_basis, small_intrinsics))
    stage1 = LossWeights(w_photo=0.0, w_per=0.0, w_tex=0.0)
    initial, _ = total_loss(obs, init, small_basis, small_intrinsics, stage1)
    result = fit_single_view(obs, small_basis, small_intrinsics, weights, schedule)
    bd = result.loss_breakdown
    final = (stage1.w_lan * bd["landmark"] + stage1.w_reg * bd["coef_reg"])
    assert final <= initial + 1e-12


def test_fit_two_stage_runs_photometric(small_basis, small_intrinsics):
    obs, _ = synthetic_observation(small_basis, small_intrinsics, seed=15)
    schedule = FitSchedule(stage1_max_iters=40, stage2_max_iters=2)
    result = fit_single_view(obs, small_basis, small_intrinsics, schedule=schedule)
    assert result.loss_breakdown["photometric"] > 0.0
    assert result.iterations <= 42


def test_fit_manual_block_scales_supported(small_basis, small_intrinsics):
    obs, _ = synthetic_observation(small_basis, small_intrinsics, seed=16)
    schedule = FitSchedule(stage1_max_iters=10, stage2_max_iters=0,
                           step_size=0.05,
                           scales={"alpha": 1.0, "beta": 1.0, "delta": 1.0,
                                   "gamma": 0.1, "rot": 2e-4, "trans": 2e-4})
    result = fit_single_view(obs, small_basis, small_intrinsics, schedule=schedule)
    assert result.iterations <= 10


def test_fit_landmark_count_mismatch(small_basis, small_intrinsics):
    obs = Observation(image=np.zeros((64, 64, 3)), landmarks=np.zeros((10, 2)))
    with pytest.raises(ContractViolation):
        fit_single_view(obs, small_basis, small_intrinsics)


def test_fit_degenerate_coincident_landmarks(small_basis, small_intrinsics):
    obs = Observation(image=np.zeros((64, 64, 3)),
                      landmarks=np.full((68, 2), 32.0))
    schedule = FitSchedule(stage1_max_iters=15, stage2_max_iters=0)
    result = fit_single_view(obs, small_basis, small_intrinsics, schedule=schedule)
    assert result.iterations <= 15   # proceeds without special casing


# ---------------------------------------------------------------------------
# Serialization


def test_coefficients_json_round_trip(small_basis, tmp_path):
    rng = np.random.default_rng(17)
    c = CoefficientVector(
        alpha=rng.standard_normal(small_basis.d_id),
        beta=rng.standard_normal(small_basis.d_exp),
        delta=rng.standard_normal(small_basis.d_tex),
        gamma=rng.standard_normal((3, 9)),
        pose=np.array([0.1, 0.2, 0.3, 0.0, 0.0, 4.0]))
    path = str(tmp_path / "c.json")
    save_coefficients(c, path)
    back = load_coefficients(path)
    for name in ("alpha", "beta", "delta", "gamma", "pose"):
        assert np.allclose(getattr(c, name), getattr(back, name), atol=0)
    assert back.gamma.shape == (3, 9)


def test_fit_result_serialization(small_basis, small_intrinsics):
    obs, _ = synthetic_observation(small_basis, small_intrinsics, seed=18)
    schedule = FitSchedule(stage1_max_iters=5, stage2_max_iters=0)
    result = fit_single_view(obs, small_basis, small_intrinsics, schedule=schedule)
    d = fit_result_to_dict(result)
    assert set(d) >= {"coefficients", "loss_breakdown", "iterations",
                      "converged", "final_landmark_rmse"}


def test_canonical_translation_positive_depth(small_basis, small_intrinsics):
    trans = canonical_translation(small_basis, small_intrinsics)
    assert trans[2] > 0
