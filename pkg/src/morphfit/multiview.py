"""Confidence-weighted aggregation of per-view identity coefficients.

Each view of a subject is fitted independently; the identity coefficients are
then combined by an element-wise weighted mean where the weights come from a
pluggable, deterministic confidence strategy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, FitError
from .fit import (
    FitResult,
    FitSchedule,
    LossWeights,
    Observation,
    coefficients_to_dict,
    fit_result_to_dict,
    fit_single_view,
    total_loss,
)
from .model import BasisSet, CameraIntrinsics

RESIDUAL_EPS = 1e-3


@dataclass
class ViewSet:
    views: list                      # sequence of (image, landmarks, FitResult)
    subject_id: str = ""

    def __post_init__(self):
        if len(self.views) == 0:
            raise ContractViolation("a view set needs at least one view")


@dataclass(frozen=True)
class ConfidenceVector:
    c: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.c, dtype=float)
        if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
            raise ContractViolation("confidence entries must be positive and finite")


def _uniform_confidence(fit: FitResult, d_id: int) -> np.ndarray:
    return np.ones(d_id)


def _residual_confidence(fit: FitResult, d_id: int) -> np.ndarray:
    return np.full(d_id, 1.0 / (RESIDUAL_EPS + fit.final_landmark_rmse))


CONFIDENCE_STRATEGIES = {
    "uniform": _uniform_confidence,
    "residual": _residual_confidence,
}


def view_confidence(fit: FitResult, strategy: str = "residual") -> ConfidenceVector:
    """Per-entry confidence for one fitted view, by registered strategy name."""
    if strategy not in CONFIDENCE_STRATEGIES:
        raise ContractViolation(
            f"unknown confidence strategy {strategy!r}; "
            f"known: {sorted(CONFIDENCE_STRATEGIES)}")
    if not all(np.isfinite(v) for v in fit.loss_breakdown.values()):
        raise ContractViolation("fit has non-finite loss breakdown")
    d_id = len(fit.coefficients.alpha)
    return ConfidenceVector(CONFIDENCE_STRATEGIES[strategy](fit, d_id))


def aggregate_alpha(alphas, confidences) -> np.ndarray:
    """Element-wise confidence-weighted mean of identity coefficients."""
    if len(alphas) == 0:
        raise ContractViolation("no views to aggregate")
    if len(alphas) != len(confidences):
        raise ContractViolation("alphas and confidences differ in length")
    alphas = [np.asarray(a, dtype=float) for a in alphas]
    cs = [np.asarray(c.c if isinstance(c, ConfidenceVector) else c, dtype=float)
          for c in confidences]
    d = alphas[0].shape
    num = np.zeros(d)
    den = np.zeros(d)
    # fixed view-index summation order for reproducibility
    for a, c in zip(alphas, cs):
        if a.shape != d or c.shape != d:
            raise ContractViolation("dimension mismatch across views")
        if np.any(c <= 0):
            raise ContractViolation("confidence entries must be positive")
        num += c * a
        den += c
    return num / den


def set_loss(per_view_losses) -> float:
    """Arithmetic mean of the per-view losses."""
    losses = np.asarray(list(per_view_losses), dtype=float)
    if losses.size == 0:
        raise ContractViolation("set loss over empty view set")
    return float(losses.mean())


@dataclass
class MultiViewResult:
    aggregated: FitResult
    per_view: list
    confidences: list
    set_loss: float
    failed_views: list = field(default_factory=list)


def fit_multi_view(observations, basis: BasisSet, intrinsics: CameraIntrinsics,
                   weights: LossWeights | None = None,
                   schedule: FitSchedule | None = None,
                   strategy: str = "residual") -> MultiViewResult:
    """Fit each view independently, then aggregate the identity coefficients.

    Expression, texture, lighting, and pose stay per-view. Failed views are
    dropped and recorded; aggregation proceeds over the remainder. The set
    loss re-evaluates each surviving view with its alpha replaced by the
    aggregate.
    """
    if len(observations) == 0:
        raise ContractViolation("need at least one view")
    weights = weights if weights is not None else LossWeights()
    fits = []
    failed = []
    for j, obs in enumerate(observations):
        try:
            fits.append((j, obs, fit_single_view(obs, basis, intrinsics,
                                                 weights, schedule)))
        except (FitError, ContractViolation) as exc:
            failed.append((j, str(exc)))
    if not fits:
        raise FitError(f"all {len(observations)} views failed to fit: {failed}")

    confidences = [view_confidence(f, strategy) for _, _, f in fits]
    alpha_aggr = aggregate_alpha([f.coefficients.alpha for _, _, f in fits],
                                 confidences)

    per_view_losses = []
    for (_, obs, f) in fits:
        c = f.coefficients.copy()
        c.alpha = alpha_aggr.copy()
        per_view_losses.append(total_loss(obs, c, basis, intrinsics, weights)[0])
    mean_loss = set_loss(per_view_losses)

    # the aggregate keeps the non-identity parameters of the best view
    best_idx = int(np.argmin([f.final_landmark_rmse for _, _, f in fits]))
    best = fits[best_idx][2]
    agg_coeffs = best.coefficients.copy()
    agg_coeffs.alpha = alpha_aggr.copy()
    aggregated = FitResult(
        coefficients=agg_coeffs,
        loss_breakdown=dict(best.loss_breakdown),
        iterations=sum(f.iterations for _, _, f in fits),
        converged=all(f.converged for _, _, f in fits),
        final_landmark_rmse=best.final_landmark_rmse,
    )
    return MultiViewResult(
        aggregated=aggregated,
        per_view=[f for _, _, f in fits],
        confidences=confidences,
        set_loss=mean_loss,
        failed_views=failed,
    )


def save_multi_view_result(result: MultiViewResult, path: str):
    payload = coefficients_to_dict(result.aggregated.coefficients)
    payload["set_loss"] = result.set_loss
    payload["per_view"] = [fit_result_to_dict(f) for f in result.per_view]
    payload["failed_views"] = result.failed_views
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
