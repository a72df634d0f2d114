"""Hybrid loss terms and the analysis-by-synthesis fitting loop.

A coefficient vector is recovered from one observed view by direct
first-order minimization of the combined photometric / landmark / perceptual
/ regularization / texture-flatness objective. Gradients are central finite
differences over the real-valued render path.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractViolation, FitError
from .model import (
    BasisSet,
    CameraIntrinsics,
    CoefficientVector,
    SH_BAND_COUNT,
    camera_transform,
    project_points,
    synthesize_shape,
    synthesize_texture,
)
from .render import RenderedView, SkinModel, attention_mask, render_view, skin_probability


@dataclass
class LossWeights:
    """Outer term weights, inner regularizer weights, and per-landmark weights.

    The defaults follow common analysis-by-synthesis practice tuned on the toy
    basis; they are configuration, not ground truth.
    """

    w_photo: float = 1.9
    w_lan: float = 1.6e-3 * 68
    w_per: float = 0.0
    w_reg: float = 3e-4
    w_tex: float = 5.0
    w_alpha: float = 1.0
    w_beta: float = 0.8
    w_delta: float = 1.7e-3
    landmark_weights: np.ndarray | None = None  # defaults to all ones

    def __post_init__(self):
        for name in ("w_photo", "w_lan", "w_per", "w_reg", "w_tex",
                     "w_alpha", "w_beta", "w_delta"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ContractViolation(f"{name} must be finite and >= 0")
        if self.landmark_weights is not None:
            lw = np.asarray(self.landmark_weights, dtype=float)
            if np.any(lw < 0) or not np.all(np.isfinite(lw)):
                raise ContractViolation("landmark weights must be finite and >= 0")
            self.landmark_weights = lw


@dataclass
class FitResult:
    coefficients: CoefficientVector
    loss_breakdown: dict
    iterations: int
    converged: bool
    final_landmark_rmse: float


@dataclass(frozen=True)
class SkinRegion:
    """Vertex indices of the smooth-skin patch used by the flatness loss."""

    indices: np.ndarray

    def __post_init__(self):
        if len(self.indices) == 0:
            raise ContractViolation("skin region must be nonempty")


def default_skin_region(basis: BasisSet) -> SkinRegion:
    """Front-central patch of the toy head (cheeks/nose/forehead analog)."""
    pts = basis.mean_shape.reshape(-1, 3)
    z_extent = pts[:, 2].min()
    sel = np.nonzero(pts[:, 2] < 0.45 * z_extent)[0]
    if len(sel) == 0:
        sel = np.array([int(np.argmin(pts[:, 2]))])
    return SkinRegion(indices=sel)


@dataclass
class Observation:
    """One observed view: image plus detected landmarks.

    The attention map is derived once from the image via the skin model. A
    feature extractor may be attached to enable the perceptual term.
    """

    image: np.ndarray
    landmarks: np.ndarray
    skin_model: SkinModel | None = None
    feature_extractor: object | None = None
    _attention: np.ndarray | None = field(default=None, repr=False)

    @property
    def attention(self) -> np.ndarray:
        if self._attention is None:
            prob = skin_probability(self.image, self.skin_model)
            self._attention = attention_mask(prob)
        return self._attention


# ---------------------------------------------------------------------------
# Loss terms


def photometric_loss(observed: np.ndarray, rendered: RenderedView,
                     attention: np.ndarray) -> float:
    """Attention-weighted mean color distance over the rendered face region."""
    obs = np.asarray(observed, dtype=float)
    if obs.shape != rendered.image.shape:
        raise ContractViolation("observed and rendered images differ in size")
    if attention.shape != rendered.image.shape[:2]:
        raise ContractViolation("attention map size mismatch")
    mask = rendered.face_mask
    if not mask.any():
        warnings.warn("photometric loss over empty face region", RuntimeWarning)
        return 0.0
    diff = np.linalg.norm(obs[mask] - rendered.image[mask], axis=1)
    a = attention[mask]
    return float((a * diff).sum() / a.sum())


def landmark_loss(detected: np.ndarray, projected: np.ndarray,
                  weights: np.ndarray | None = None) -> float:
    """Mean weighted squared pixel distance between landmark sets."""
    q = np.asarray(detected, dtype=float).reshape(-1, 2)
    qp = np.asarray(projected, dtype=float).reshape(-1, 2)
    if q.shape != qp.shape:
        raise ContractViolation("landmark count mismatch")
    n = len(q)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ContractViolation("landmark weight count mismatch")
    sq = np.sum((q - qp) ** 2, axis=1)
    return float((w * sq).sum() / n)


def perceptual_loss(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    """One minus the cosine similarity of two feature vectors."""
    a = np.asarray(feat_a, dtype=float).ravel()
    b = np.asarray(feat_b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ContractViolation("feature vectors differ in length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractViolation("zero-norm feature vector")
    return float(1.0 - (a @ b) / (na * nb))


def coef_regularization(coeffs: CoefficientVector, weights: LossWeights) -> float:
    return float(weights.w_alpha * np.sum(coeffs.alpha**2)
                 + weights.w_beta * np.sum(coeffs.beta**2)
                 + weights.w_delta * np.sum(coeffs.delta**2))


def texture_flatness_loss(vertex_colors: np.ndarray, region: SkinRegion) -> float:
    """Summed per-channel population variance over the skin-region vertices."""
    colors = np.asarray(vertex_colors, dtype=float).reshape(-1, 3)
    patch = colors[region.indices]
    return float(np.sum(np.var(patch, axis=0)))


def total_loss(observation: Observation, coeffs: CoefficientVector,
               basis: BasisSet, intrinsics: CameraIntrinsics,
               weights: LossWeights,
               skin_region: SkinRegion | None = None):
    """Weighted combination of all terms; returns (total, unweighted breakdown)."""
    breakdown = {"photometric": 0.0, "landmark": 0.0, "perceptual": 0.0,
                 "coef_reg": 0.0, "texture_flatness": 0.0}

    need_render = weights.w_photo > 0 or weights.w_per > 0
    if need_render:
        view = render_view(basis, coeffs, intrinsics)
        if weights.w_photo > 0:
            breakdown["photometric"] = photometric_loss(
                observation.image, view, observation.attention)
        if weights.w_per > 0:
            if observation.feature_extractor is None:
                raise ContractViolation(
                    "perceptual weight > 0 but no feature extractor attached")
            fa = observation.feature_extractor(observation.image)
            fb = observation.feature_extractor(view.image)
            breakdown["perceptual"] = perceptual_loss(fa, fb)
        projected = view.landmarks
    else:
        shape = synthesize_shape(basis, coeffs.alpha, coeffs.beta)
        lm_pos = shape.reshape(-1, 3)[basis.landmark_indices].ravel()
        cam = camera_transform(lm_pos, coeffs.pose)
        if np.any(cam[:, 2] <= 0):
            raise FitError("landmark at non-positive camera depth")
        projected = project_points(cam, intrinsics)

    breakdown["landmark"] = landmark_loss(
        observation.landmarks, projected, weights.landmark_weights)
    breakdown["coef_reg"] = coef_regularization(coeffs, weights)
    if weights.w_tex > 0:
        region = skin_region if skin_region is not None else default_skin_region(basis)
        breakdown["texture_flatness"] = texture_flatness_loss(
            synthesize_texture(basis, coeffs.delta), region)

    total = (weights.w_photo * breakdown["photometric"]
             + weights.w_lan * breakdown["landmark"]
             + weights.w_per * breakdown["perceptual"]
             + weights.w_reg * breakdown["coef_reg"]
             + weights.w_tex * breakdown["texture_flatness"])
    return total, breakdown


# ---------------------------------------------------------------------------
# Parameter packing and finite-difference gradient

_BLOCKS = ("alpha", "beta", "delta", "gamma", "rot", "trans")


def pack_coefficients(coeffs: CoefficientVector) -> np.ndarray:
    return np.concatenate([coeffs.alpha, coeffs.beta, coeffs.delta,
                           coeffs.gamma.ravel(), coeffs.pose])


def unpack_coefficients(theta: np.ndarray, basis: BasisSet) -> CoefficientVector:
    d_id, d_exp, d_tex = basis.d_id, basis.d_exp, basis.d_tex
    n_gamma = 3 * SH_BAND_COUNT**2
    i0 = 0
    alpha = theta[i0:i0 + d_id]; i0 += d_id
    beta = theta[i0:i0 + d_exp]; i0 += d_exp
    delta = theta[i0:i0 + d_tex]; i0 += d_tex
    gamma = theta[i0:i0 + n_gamma].reshape(3, -1); i0 += n_gamma
    pose = theta[i0:i0 + 6]
    return CoefficientVector(alpha=alpha.copy(), beta=beta.copy(),
                             delta=delta.copy(), gamma=gamma.copy(),
                             pose=pose.copy())


def parameter_names(basis: BasisSet) -> list:
    names = [f"alpha[{i}]" for i in range(basis.d_id)]
    names += [f"beta[{i}]" for i in range(basis.d_exp)]
    names += [f"delta[{i}]" for i in range(basis.d_tex)]
    names += [f"gamma[{i}]" for i in range(3 * SH_BAND_COUNT**2)]
    names += [f"pose[{i}]" for i in range(6)]
    return names


def block_slices(basis: BasisSet) -> dict:
    d_id, d_exp, d_tex = basis.d_id, basis.d_exp, basis.d_tex
    n_gamma = 3 * SH_BAND_COUNT**2
    o = 0
    out = {}
    for name, width in (("alpha", d_id), ("beta", d_exp), ("delta", d_tex),
                        ("gamma", n_gamma), ("rot", 3), ("trans", 3)):
        out[name] = slice(o, o + width)
        o += width
    return out


def finite_difference_gradient(fn, theta: np.ndarray, names=None,
                               indices=None) -> np.ndarray:
    """Central differences with per-parameter step h = max(1e-4, 1e-4*|x|)."""
    grad = np.zeros_like(theta)
    idx = range(len(theta)) if indices is None else indices
    for i in idx:
        h = max(1e-4, 1e-4 * abs(theta[i]))
        probe = theta.copy()
        probe[i] = theta[i] + h
        hi = fn(probe)
        probe[i] = theta[i] - h
        lo = fn(probe)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            name = names[i] if names is not None else f"theta[{i}]"
            raise FitError(f"non-finite loss while probing parameter {name}")
        grad[i] = (hi - lo) / (2 * h)
    return grad


def loss_gradient(observation: Observation, coeffs: CoefficientVector,
                  basis: BasisSet, intrinsics: CameraIntrinsics,
                  weights: LossWeights,
                  skin_region: SkinRegion | None = None) -> np.ndarray:
    """Finite-difference gradient of the total loss over all free parameters.

    Order: alpha, beta, delta, gamma (row-major), pose.
    """
    objective = _make_objective(observation, basis, intrinsics, weights, skin_region)
    theta = pack_coefficients(coeffs)
    return finite_difference_gradient(objective, theta, names=parameter_names(basis))


def _make_objective(observation, basis, intrinsics, weights, skin_region=None):
    """Scalar objective over the packed parameter vector.

    When the photometric and perceptual terms are disabled, only the landmark
    vertices are synthesized, which makes finite differencing cheap.
    """
    fast = weights.w_photo == 0 and weights.w_per == 0
    if not fast:
        def objective(theta):
            c = unpack_coefficients(theta, basis)
            return total_loss(observation, c, basis, intrinsics, weights,
                              skin_region)[0]
        return objective

    lm = basis.landmark_indices
    rows = (3 * lm[:, None] + np.arange(3)).ravel()
    mean_lm = basis.mean_shape[rows]
    b_id_lm = basis.identity_basis[rows]
    b_exp_lm = basis.expression_basis[rows]
    sl = block_slices(basis)
    detected = np.asarray(observation.landmarks, dtype=float).reshape(-1, 2)
    lw = weights.landmark_weights
    region = None
    if weights.w_tex > 0:
        region = skin_region if skin_region is not None else default_skin_region(basis)

    def objective(theta):
        alpha = theta[sl["alpha"]]
        beta = theta[sl["beta"]]
        delta = theta[sl["delta"]]
        pose = theta[sl["rot"].start:]
        lm_pos = mean_lm + b_id_lm @ alpha + b_exp_lm @ beta
        cam = camera_transform(lm_pos, pose)
        if np.any(cam[:, 2] <= 0):
            return np.inf
        projected = project_points(cam, intrinsics)
        lan = landmark_loss(detected, projected, lw)
        reg = (weights.w_alpha * np.sum(alpha**2)
               + weights.w_beta * np.sum(beta**2)
               + weights.w_delta * np.sum(delta**2))
        out = weights.w_lan * lan + weights.w_reg * reg
        if region is not None:
            tex = synthesize_texture(basis, delta)
            out += weights.w_tex * texture_flatness_loss(tex, region)
        return out

    return objective


# ---------------------------------------------------------------------------
# Fitting loop


@dataclass
class FitSchedule:
    """Optimizer configuration for the two-stage fit.

    scales may be the string "auto" (per-parameter steps from a one-time
    diagonal curvature estimate at the stage's starting point) or a dict of
    per-block multipliers.
    """

    stage1_max_iters: int = 600
    stage2_max_iters: int = 3
    step_size: float = 1.0
    max_halvings: int = 20
    plateau_window: int = 10
    plateau_rtol: float = 1e-6
    fail_limit: int = 5
    gradient_tol: float = 1e-7
    init_translation: tuple | None = None
    scales: object = "auto"


def canonical_translation(basis: BasisSet, intrinsics: CameraIntrinsics) -> tuple:
    """Depth that puts the mean face at roughly 75% of the image height."""
    size = min(intrinsics.image_size)
    z = basis.diameter * intrinsics.focal / (0.75 * size)
    return (0.0, 0.0, float(z))


def _scale_vector(basis: BasisSet, scales: dict) -> np.ndarray:
    out = np.empty(basis.d_id + basis.d_exp + basis.d_tex + 3 * SH_BAND_COUNT**2 + 6)
    for name, sl in block_slices(basis).items():
        out[sl] = scales.get(name, 1.0)
    return out


def _auto_scales(objective, theta, free_idx) -> np.ndarray:
    """Per-parameter step sizes from a diagonal curvature estimate.

    Second differences of the objective along each free axis; this is a
    fixed reparameterization computed once per stage, so the descent itself
    remains plain fixed-step gradient descent with backtracking.
    """
    f0 = objective(theta)
    diag = np.zeros(len(theta))
    for i in free_idx:
        h = 1e-3 * max(1.0, abs(theta[i]))
        probe = theta.copy()
        probe[i] = theta[i] + h
        hi = objective(probe)
        probe[i] = theta[i] - h
        lo = objective(probe)
        if np.isfinite(hi) and np.isfinite(lo) and np.isfinite(f0):
            diag[i] = (hi - 2 * f0 + lo) / (h * h)
    positive = diag[diag > 0]
    fallback = float(np.median(positive)) if len(positive) else 1.0
    scale = np.zeros(len(theta))
    for i in free_idx:
        d = diag[i] if diag[i] > 0 else fallback
        scale[i] = 1.0 / max(d, 1e-10 * fallback)
    return scale


def _descend(objective, theta, free_idx, scale_vec, schedule, names, max_iters):
    """Fixed-step gradient descent with backtracking halving.

    Returns (theta, loss, iterations, converged).
    """
    loss = objective(theta)
    if not np.isfinite(loss):
        raise FitError("objective is non-finite at the initial point")
    history = [loss]
    fails = 0
    iters = 0
    converged = False
    for it in range(max_iters):
        iters += 1
        grad = finite_difference_gradient(objective, theta, names=names,
                                          indices=free_idx)
        gnorm = np.linalg.norm(grad)
        if gnorm < schedule.gradient_tol * (1.0 + abs(loss)):
            converged = True
            break
        step = schedule.step_size
        improved = False
        for _ in range(schedule.max_halvings + 1):
            candidate = theta - step * scale_vec * grad
            cand_loss = objective(candidate)
            if np.isfinite(cand_loss) and cand_loss < loss:
                theta, loss = candidate, cand_loss
                improved = True
                break
            step *= 0.5
        if improved:
            fails = 0
        else:
            fails += 1
            if fails >= schedule.fail_limit:
                converged = False
                break
        history.append(loss)
        if len(history) > schedule.plateau_window:
            prev = history[-schedule.plateau_window - 1]
            if prev - loss < schedule.plateau_rtol * max(abs(prev), 1e-30):
                converged = True
                break
    else:
        converged = False
    return theta, loss, iters, converged


def fit_single_view(observation: Observation, basis: BasisSet,
                    intrinsics: CameraIntrinsics,
                    weights: LossWeights | None = None,
                    schedule: FitSchedule | None = None,
                    init: CoefficientVector | None = None,
                    skin_region: SkinRegion | None = None) -> FitResult:
    """Recover a coefficient vector from one view.

    Stage 1 optimizes pose + alpha + beta against the landmark and
    regularization terms; stage 2 adds the photometric and texture-flatness
    terms and optimizes all parameters. Deterministic given its inputs.
    """
    weights = weights if weights is not None else LossWeights()
    schedule = schedule if schedule is not None else FitSchedule()
    if len(np.asarray(observation.landmarks).reshape(-1, 2)) != len(basis.landmark_indices):
        raise ContractViolation("observation landmark count does not match basis")

    if init is not None:
        coeffs = init.copy()
    else:
        trans = schedule.init_translation
        if trans is None:
            trans = canonical_translation(basis, intrinsics)
        coeffs = CoefficientVector.zeros(basis, translation=trans)

    theta = pack_coefficients(coeffs)
    names = parameter_names(basis)
    sl = block_slices(basis)
    auto = isinstance(schedule.scales, str)
    if auto and schedule.scales != "auto":
        raise ContractViolation(f"unknown scales mode {schedule.scales!r}")
    scale_vec = None if auto else _scale_vector(basis, schedule.scales)

    stage1_weights = replace(weights, w_photo=0.0, w_per=0.0, w_tex=0.0)
    stage1_idx = list(range(sl["alpha"].start, sl["beta"].stop)) \
        + list(range(sl["rot"].start, sl["trans"].stop))
    objective1 = _make_objective(observation, basis, intrinsics, stage1_weights,
                                 skin_region)
    stage1_scales = _auto_scales(objective1, theta, stage1_idx) if auto else scale_vec
    theta, loss, it1, converged = _descend(objective1, theta, stage1_idx,
                                           stage1_scales, schedule, names,
                                           schedule.stage1_max_iters)
    iterations = it1

    run_stage2 = (schedule.stage2_max_iters > 0
                  and (weights.w_photo > 0 or weights.w_tex > 0 or weights.w_per > 0))
    final_weights = weights if run_stage2 else stage1_weights
    if run_stage2:
        objective2 = _make_objective(observation, basis, intrinsics, weights,
                                     skin_region)
        all_idx = list(range(len(theta)))
        stage2_scales = _auto_scales(objective2, theta, all_idx) if auto else scale_vec
        theta, loss, it2, converged = _descend(objective2, theta, all_idx,
                                               stage2_scales, schedule, names,
                                               schedule.stage2_max_iters)
        iterations += it2

    coeffs = unpack_coefficients(theta, basis)
    _, breakdown = total_loss(observation, coeffs, basis, intrinsics,
                              final_weights, skin_region)
    shape = synthesize_shape(basis, coeffs.alpha, coeffs.beta)
    lm_pos = shape.reshape(-1, 3)[basis.landmark_indices].ravel()
    projected = project_points(camera_transform(lm_pos, coeffs.pose), intrinsics)
    detected = np.asarray(observation.landmarks, dtype=float).reshape(-1, 2)
    rmse = float(np.sqrt(np.mean(np.sum((detected - projected) ** 2, axis=1))))
    return FitResult(coefficients=coeffs, loss_breakdown=breakdown,
                     iterations=iterations, converged=converged,
                     final_landmark_rmse=rmse)


# ---------------------------------------------------------------------------
# Serialization


def coefficients_to_dict(coeffs: CoefficientVector) -> dict:
    return {
        "alpha": coeffs.alpha.tolist(),
        "beta": coeffs.beta.tolist(),
        "delta": coeffs.delta.tolist(),
        "gamma": coeffs.gamma.ravel().tolist(),
        "pose": coeffs.pose.tolist(),
    }


def coefficients_from_dict(d: dict) -> CoefficientVector:
    return CoefficientVector(
        alpha=np.array(d["alpha"], dtype=float),
        beta=np.array(d["beta"], dtype=float),
        delta=np.array(d["delta"], dtype=float),
        gamma=np.array(d["gamma"], dtype=float).reshape(3, -1),
        pose=np.array(d["pose"], dtype=float),
    )


def save_coefficients(coeffs: CoefficientVector, path: str):
    with open(path, "w") as f:
        json.dump(coefficients_to_dict(coeffs), f)


def load_coefficients(path: str) -> CoefficientVector:
    with open(path) as f:
        return coefficients_from_dict(json.load(f))


def fit_result_to_dict(result: FitResult) -> dict:
    return {
        "coefficients": coefficients_to_dict(result.coefficients),
        "loss_breakdown": result.loss_breakdown,
        "iterations": result.iterations,
        "converged": result.converged,
        "final_landmark_rmse": result.final_landmark_rmse,
    }


def save_fit_result(result: FitResult, path: str):
    with open(path, "w") as f:
        json.dump(fit_result_to_dict(result), f, indent=2)
