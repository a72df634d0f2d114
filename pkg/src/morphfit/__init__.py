"""Morphable face model synthesis, fitting, aggregation, and classification."""

from .model import (
    BasisSet,
    CameraIntrinsics,
    CoefficientVector,
    ToyBasisConfig,
    generate_toy_basis,
    load_basis,
    save_basis,
    synthesize_shape,
    synthesize_texture,
)
from .render import RenderedView, SkinModel, attention_mask, render_view, skin_probability
from .fit import (
    FitResult,
    FitSchedule,
    LossWeights,
    Observation,
    fit_single_view,
    loss_gradient,
    total_loss,
)
from .multiview import aggregate_alpha, fit_multi_view, set_loss, view_confidence
from .classify import (
    ClassifierModel,
    LabeledDataset,
    TrainSchedule,
    init_model,
    predict,
    train,
)
from .harness import ExperimentConfig, confusion_matrix, run_experiment

__version__ = "0.1.0"
