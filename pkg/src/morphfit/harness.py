"""Synthetic-data generation, experiment protocols, and report emission.

Stands in for the licensed photo corpora: identities are seeded draws in
coefficient space, views are rendered with sampled yaw and noisy landmarks,
and the three experiment protocols (recognition, expression, gender) run the
full generate -> render -> fit -> aggregate -> train -> evaluate pipeline.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from . import classify
from .errors import ConfigError, ContractViolation
from .fit import FitSchedule, LossWeights, Observation, fit_single_view
from .model import (
    BasisSet,
    CameraIntrinsics,
    CoefficientVector,
    SH_BAND_COUNT,
    generate_toy_basis,
    ToyBasisConfig,
)
from .multiview import aggregate_alpha
from .render import render_view
from .fit import canonical_translation

EXPRESSION_CLASSES = ["AF", "AN", "DI", "HA", "NE", "SA", "SU"]

# ambient plus a gentle frontal light; front-facing normals have negative z
_DEFAULT_GAMMA_ROW = [3.2, 0.0, -0.45, 0.15, 0.0, 0.0, 0.0, 0.0, 0.0]


def default_gamma() -> np.ndarray:
    return np.array([_DEFAULT_GAMMA_ROW] * 3, dtype=float)


@dataclass
class SyntheticIdentity:
    label: str
    alpha: np.ndarray
    attribute: int        # binary gender surrogate
    seed: int
    score: float = 0.0    # value of the attribute functional at alpha


@dataclass
class ConfusionMatrix:
    """Row-normalized percentage table of true class vs predicted class."""

    matrix: np.ndarray
    class_names: list

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if np.any(m < 0):
            raise ContractViolation("confusion matrix entries must be >= 0")
        if np.any(np.abs(m.sum(axis=1) - 100.0) > 1e-9):
            raise ContractViolation("confusion matrix rows must sum to 100")
        self.matrix = m


@dataclass
class ExperimentConfig:
    """Desk-scale experiment bookkeeping. All counts and seeds are explicit."""

    task: str = "recognition"            # recognition | expression | gender
    input_mode: str = "coefficients"     # coefficients | raw_pixels
    seed: int = 0

    # toy basis (small enough that the landmarks identify the coefficients)
    vertex_count: int = 300
    d_id: int = 32
    d_exp: int = 16
    d_tex: int = 16

    # view synthesis
    image_size: int = 224
    pose_range_deg: float = 30.0
    landmark_noise_px: float = 0.3
    expression_cluster_sigma: float = 0.3
    expression_noise: float = 0.3

    # recognition protocol
    identity_count: int = 10
    train_views_per_subject: int = 6
    val_views_per_subject: int = 5
    subset_size: int = 3
    subset_cap: int = 5000

    # expression protocol
    expression_identity_count: int = 3
    expression_train_views: int = 2
    expression_val_views: int = 2

    # gender protocol (paper split shape: 50/50 per split by default)
    gender_train_per_class: int = 50
    gender_val_per_class: int = 50

    # attribute margin: gender identities are drawn with |functional value|
    # at least this large, the analog of visually unambiguous subjects
    gender_margin: float = 2.5

    # fitting
    fit_stage1_iters: int = 250
    fit_stage2_iters: int = 0

    # classifier
    classifier_blocks: int = 2
    classifier_hidden: int = 64
    epochs: int = 40
    batch_size: int = 32
    base_lr: float = 0.02
    jitter_sigma: float = 0.02

    raw_pixel_size: int = 64

    def validate(self):
        if self.task not in ("recognition", "expression", "gender"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.input_mode not in ("coefficients", "raw_pixels"):
            raise ConfigError(f"unknown input_mode {self.input_mode!r}")
        if self.subset_size < 1:
            raise ConfigError("subset_size must be >= 1")
        if self.subset_size > min(self.train_views_per_subject,
                                  self.val_views_per_subject):
            raise ConfigError("subset_size exceeds the per-subject view pools")


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Synthetic identities and views


def generate_identities(n: int, basis: BasisSet, seed: int = 0):
    """n seeded identities with alpha ~ N(0, 1) and a sign-functional gender
    surrogate attribute."""
    if n < 1:
        raise ContractViolation("need at least one identity")
    functional = np.random.default_rng(seed + 7919).standard_normal(basis.d_id)
    out = []
    for i in range(n):
        id_seed = seed * 100_003 + i
        alpha = np.random.default_rng(id_seed).standard_normal(basis.d_id)
        score = float(functional @ alpha)
        out.append(SyntheticIdentity(
            label=f"id{i:03d}", alpha=alpha,
            attribute=int(score > 0), seed=id_seed, score=score))
    return out


def expression_centers(d_exp: int, cluster_sigma: float, seed: int = 0) -> np.ndarray:
    """Seven seeded cluster centers with pairwise distance >= 3 * sigma."""
    rng = np.random.default_rng(seed + 104_729)
    centers = []
    while len(centers) < len(EXPRESSION_CLASSES):
        cand = rng.standard_normal(d_exp)
        if all(np.linalg.norm(cand - c) >= 3 * cluster_sigma for c in centers):
            centers.append(cand)
    return np.stack(centers)


@dataclass
class ViewRecord:
    """One synthetic view: rendered image plus noisy 'detected' landmarks."""

    image: np.ndarray
    landmarks: np.ndarray
    identity_label: str
    expression_class: str
    pool: str                      # 'train' or 'val' provenance tag
    true_beta: np.ndarray
    true_pose: np.ndarray


def sample_views(identity: SyntheticIdentity, basis: BasisSet,
                 intrinsics: CameraIntrinsics, count: int,
                 expression_class: str, pose_range_deg: float,
                 landmark_noise_px: float, seed: int,
                 centers: np.ndarray | None = None,
                 expression_noise: float = 0.3,
                 cluster_sigma: float = 0.3,
                 pool: str = "train"):
    """Render ``count`` views of one identity with sampled yaw and noisy
    landmarks. Deterministic per seed."""
    if count < 1:
        raise ContractViolation("count must be >= 1")
    if centers is None:
        centers = expression_centers(basis.d_exp, cluster_sigma, seed=0)
    class_idx = EXPRESSION_CLASSES.index(expression_class)
    rng = np.random.default_rng(seed)
    trans = canonical_translation(basis, intrinsics)
    records = []
    for _ in range(count):
        yaw = np.deg2rad(rng.uniform(-pose_range_deg, pose_range_deg)) \
            if pose_range_deg > 0 else 0.0
        beta = centers[class_idx] + (
            rng.standard_normal(basis.d_exp) * expression_noise
            if expression_noise > 0 else 0.0)
        pose = np.array([0.0, yaw, 0.0, *trans])
        coeffs = CoefficientVector(
            alpha=identity.alpha.copy(), beta=np.asarray(beta, dtype=float),
            delta=np.zeros(basis.d_tex), gamma=default_gamma(), pose=pose)
        view = render_view(basis, coeffs, intrinsics)
        landmarks = view.landmarks.copy()
        if landmark_noise_px > 0:
            landmarks = landmarks + rng.normal(scale=landmark_noise_px,
                                               size=landmarks.shape)
        records.append(ViewRecord(
            image=view.image, landmarks=landmarks,
            identity_label=identity.label, expression_class=expression_class,
            pool=pool, true_beta=np.asarray(beta, dtype=float), true_pose=pose))
    return records


# ---------------------------------------------------------------------------
# k-subset combinations


def _unrank_combination(n: int, k: int, rank: int):
    """Lexicographic unranking via the combinatorial number system."""
    out = []
    start = 0
    for slot in range(k, 0, -1):
        for v in range(start, n):
            block = math.comb(n - 1 - v, slot - 1)
            if rank < block:
                out.append(v)
                start = v + 1
                break
            rank -= block
    return tuple(out)


def k_subset_combinations(items, k: int, cap: int | None = None, seed: int = 0):
    """All k-element subsets in lexicographic index order.

    If the combination count exceeds ``cap``, a seeded uniform subsample of
    exactly ``cap`` subsets is returned (still in lexicographic order).
    """
    items = list(items)
    n = len(items)
    if not (1 <= k <= n):
        raise ContractViolation(f"k={k} out of range for {n} items")
    total = math.comb(n, k)
    if cap is not None and total > cap:
        rng = np.random.default_rng(seed)
        ranks = np.sort(rng.choice(total, size=cap, replace=False))
        index_sets = [_unrank_combination(n, k, int(r)) for r in ranks]
    else:
        import itertools
        index_sets = itertools.combinations(range(n), k)
    return [tuple(items[i] for i in idx) for idx in index_sets]


# ---------------------------------------------------------------------------
# Dataset builders


@dataclass
class FittedView:
    """Provenance-tagged coefficients recovered from one view."""

    alpha: np.ndarray
    beta: np.ndarray
    identity_label: str
    expression_class: str
    attribute: int
    pool: str


def _assert_pool(fits, pool: str):
    bad = [f.identity_label for f in fits if f.pool != pool]
    if bad:
        raise ContractViolation(f"pool leakage: expected {pool!r} fits, got {bad}")


def build_recognition_dataset(train_pool: dict, val_pool: dict, k: int,
                              cap: int = 5000, seed: int = 0):
    """Aggregate every k-subset of each identity's fitted alphas (uniform
    confidences) into one labeled input. Returns (train, val) datasets."""
    labels = sorted(train_pool)
    if sorted(val_pool) != labels:
        raise ContractViolation("train and val pools cover different identities")

    def build(pool, tag):
        inputs, ys = [], []
        for ci, label in enumerate(labels):
            fits = pool[label]
            if len(fits) < k:
                raise ContractViolation(
                    f"identity {label} pool smaller than k={k}")
            if fits and isinstance(fits[0], FittedView):
                _assert_pool(fits, tag)
                alphas = [f.alpha for f in fits]
            else:
                alphas = [np.asarray(a, dtype=float) for a in fits]
            for subset in k_subset_combinations(alphas, k, cap=cap, seed=seed):
                ones = [np.ones_like(subset[0])] * len(subset)
                inputs.append(aggregate_alpha(list(subset), ones))
                ys.append(ci)
        return classify.LabeledDataset(np.array(inputs), np.array(ys), labels)

    return build(train_pool, "train"), build(val_pool, "val")


def build_expression_dataset(train_fits, val_fits):
    """Per-view beta vectors labeled by expression class."""

    def build(fits, tag):
        if fits and isinstance(fits[0], FittedView):
            _assert_pool(fits, tag)
        by_class = {c: [] for c in EXPRESSION_CLASSES}
        for f in fits:
            by_class[f.expression_class].append(f.beta)
        empty = [c for c, v in by_class.items() if not v]
        if empty:
            raise ContractViolation(f"expression classes with no samples: {empty}")
        inputs, ys = [], []
        for ci, c in enumerate(EXPRESSION_CLASSES):
            for b in by_class[c]:
                inputs.append(np.asarray(b, dtype=float))
                ys.append(ci)
        return classify.LabeledDataset(np.array(inputs), np.array(ys),
                                       list(EXPRESSION_CLASSES))

    return build(train_fits, "train"), build(val_fits, "val")


def build_gender_dataset(train_fits, val_fits):
    """Binary-labeled alpha inputs; errors if either class is absent."""

    def build(fits, tag):
        _assert_pool(fits, tag)
        labels = [f.attribute for f in fits]
        if len(set(labels)) < 2:
            raise ContractViolation("gender dataset needs both classes present")
        inputs = np.array([f.alpha for f in fits])
        return classify.LabeledDataset(inputs, np.array(labels),
                                       ["class0", "class1"])

    return build(train_fits, "train"), build(val_fits, "val")


# ---------------------------------------------------------------------------
# Evaluation artifacts


def confusion_matrix(predictions, labels, class_names) -> ConfusionMatrix:
    """Entry (i, j) = 100 * count(true i, predicted j) / count(true i)."""
    preds = np.asarray(predictions, dtype=int)
    ys = np.asarray(labels, dtype=int)
    if preds.shape != ys.shape:
        raise ContractViolation("predictions and labels differ in length")
    k = len(class_names)
    counts = np.zeros((k, k))
    for t, p in zip(ys, preds):
        counts[t, p] += 1
    row_sums = counts.sum(axis=1)
    empty = np.nonzero(row_sums == 0)[0]
    if len(empty):
        raise ContractViolation(
            f"no samples for true classes {[class_names[i] for i in empty]}")
    return ConfusionMatrix(matrix=100.0 * counts / row_sums[:, None],
                           class_names=list(class_names))


def measure_per_input_time(history) -> float:
    """Total training wall time divided by total samples processed."""
    total_time = sum(row["wall_seconds"] for row in history)
    total_samples = sum(row["samples"] for row in history)
    if total_samples == 0:
        raise ContractViolation("no samples in training history")
    return total_time / total_samples


def _downsample_gray(image: np.ndarray, size: int) -> np.ndarray:
    gray = np.asarray(image, dtype=float).mean(axis=2)
    img = Image.fromarray((gray * 255).astype(np.uint8), mode="L")
    small = img.resize((size, size), Image.BILINEAR)
    return np.asarray(small, dtype=float).ravel() / 255.0


# ---------------------------------------------------------------------------
# Experiment driver


def _fit_views(records, basis, intrinsics, config, identities_by_label):
    weights = LossWeights()
    schedule = FitSchedule(stage1_max_iters=config.fit_stage1_iters,
                           stage2_max_iters=config.fit_stage2_iters)
    out = []
    for rec in records:
        obs = Observation(image=rec.image, landmarks=rec.landmarks)
        result = fit_single_view(obs, basis, intrinsics, weights, schedule)
        ident = identities_by_label[rec.identity_label]
        out.append(FittedView(
            alpha=result.coefficients.alpha, beta=result.coefficients.beta,
            identity_label=rec.identity_label,
            expression_class=rec.expression_class,
            attribute=ident.attribute, pool=rec.pool))
    return out


def _pixel_inputs(records, config):
    return np.array([_downsample_gray(r.image, config.raw_pixel_size)
                     for r in records])


def _records_to_pixel_dataset(train_records, val_records, label_fn, class_names,
                              config):
    def build(records):
        inputs = _pixel_inputs(records, config)
        ys = np.array([label_fn(r) for r in records])
        return classify.LabeledDataset(inputs, ys, class_names)
    return build(train_records), build(val_records)


def run_experiment(config: ExperimentConfig) -> dict:
    """Execute one full experiment and return a report dictionary.

    Everything outside the report's "timing" section is deterministic for a
    fixed config (including its seeds).
    """
    config.validate()
    t_start = time.perf_counter()
    basis = generate_toy_basis(ToyBasisConfig(
        vertex_count=config.vertex_count, d_id=config.d_id,
        d_exp=config.d_exp, d_tex=config.d_tex, seed=config.seed))
    intrinsics = CameraIntrinsics.default(config.image_size)
    centers = expression_centers(config.d_exp, config.expression_cluster_sigma,
                                 seed=config.seed)

    stage = "generate"
    try:
        if config.task == "recognition":
            train_records, val_records, identities = _recognition_views(
                config, basis, intrinsics, centers)
        elif config.task == "expression":
            train_records, val_records, identities = _expression_views(
                config, basis, intrinsics, centers)
        else:
            train_records, val_records, identities = _gender_views(
                config, basis, intrinsics, centers)

        by_label = {i.label: i for i in identities}
        t_fit_start = time.perf_counter()
        if config.input_mode == "coefficients":
            stage = "fit"
            train_fits = _fit_views(train_records, basis, intrinsics, config,
                                    by_label)
            val_fits = _fit_views(val_records, basis, intrinsics, config,
                                  by_label)
            stage = "aggregate"
            train_ds, val_ds = _coefficient_datasets(config, train_fits,
                                                     val_fits)
        else:
            stage = "pixels"
            train_ds, val_ds = _raw_pixel_datasets(config, train_records,
                                                   val_records, identities)
        t_fit = time.perf_counter() - t_fit_start

        stage = "train"
        model = classify.init_model(
            input_dim=train_ds.inputs.shape[1],
            class_count=len(train_ds.class_names),
            block_count=config.classifier_blocks,
            hidden_dim=config.classifier_hidden, seed=config.seed)
        train_schedule = classify.TrainSchedule(
            epochs=config.epochs, batch_size=config.batch_size,
            base_lr=config.base_lr, jitter_sigma=config.jitter_sigma,
            seed=config.seed)
        model, history = classify.train(model, train_ds, train_schedule)

        stage = "evaluate"
        accuracy, preds = classify.evaluate(model, val_ds)
        cm = confusion_matrix(preds, val_ds.labels, val_ds.class_names)
    except Exception as exc:
        raise RuntimeError(f"experiment failed during stage {stage!r}: {exc}") from exc

    per_input = measure_per_input_time(history)
    report = {
        "task": config.task,
        "input_mode": config.input_mode,
        "config": asdict(config),
        "config_hash": config_hash(config),
        "seeds": {"master": config.seed},
        "n_train": int(len(train_ds.inputs)),
        "n_val": int(len(val_ds.inputs)),
        "input_dim": int(train_ds.inputs.shape[1]),
        "accuracy": float(accuracy),
        "class_names": list(val_ds.class_names),
        "confusion_matrix": cm.matrix.tolist(),
        "history": [{"epoch": h["epoch"], "loss": h["loss"],
                     "accuracy": h["accuracy"], "lr": h["lr"]}
                    for h in history],
        "timing": {
            "per_input_seconds": per_input,
            "fit_seconds": t_fit,
            "epoch_wall_seconds": [h["wall_seconds"] for h in history],
            "total_seconds": time.perf_counter() - t_start,
        },
    }
    return report


def _recognition_views(config, basis, intrinsics, centers):
    identities = generate_identities(config.identity_count, basis, config.seed)
    train_records, val_records = [], []
    for i, ident in enumerate(identities):
        common = dict(basis=basis, intrinsics=intrinsics,
                      expression_class="NE",
                      pose_range_deg=config.pose_range_deg,
                      landmark_noise_px=config.landmark_noise_px,
                      centers=centers,
                      expression_noise=config.expression_noise,
                      cluster_sigma=config.expression_cluster_sigma)
        train_records += sample_views(
            ident, count=config.train_views_per_subject,
            seed=config.seed * 31 + 2 * i, pool="train", **common)
        val_records += sample_views(
            ident, count=config.val_views_per_subject,
            seed=config.seed * 31 + 2 * i + 1, pool="val", **common)
    return train_records, val_records, identities


def _expression_views(config, basis, intrinsics, centers):
    identities = generate_identities(config.expression_identity_count, basis,
                                     config.seed)
    train_records, val_records = [], []
    for i, ident in enumerate(identities):
        for ci, cls in enumerate(EXPRESSION_CLASSES):
            common = dict(basis=basis, intrinsics=intrinsics,
                          expression_class=cls,
                          pose_range_deg=config.pose_range_deg,
                          landmark_noise_px=config.landmark_noise_px,
                          centers=centers,
                          expression_noise=config.expression_noise,
                          cluster_sigma=config.expression_cluster_sigma)
            base = config.seed * 101 + 20 * i + 2 * ci
            train_records += sample_views(
                ident, count=config.expression_train_views, seed=base,
                pool="train", **common)
            val_records += sample_views(
                ident, count=config.expression_val_views, seed=base + 1,
                pool="val", **common)
    return train_records, val_records, identities


def _gender_views(config, basis, intrinsics, centers):
    # draw identities until both attribute classes reach the requested count
    per_class = config.gender_train_per_class
    need = {0: per_class, 1: per_class}
    identities = []
    batch = 0
    while min(need.values()) > -1 and (need[0] > 0 or need[1] > 0):
        pool = generate_identities(4 * per_class, basis,
                                   config.seed + 1000 * batch)
        for ident in pool:
            if abs(ident.score) < config.gender_margin:
                continue
            if need[ident.attribute] > 0:
                need[ident.attribute] -= 1
                ident.label = f"id{len(identities):03d}"
                identities.append(ident)
            if need[0] == 0 and need[1] == 0:
                break
        batch += 1
        if batch > 50:
            raise RuntimeError("could not balance gender attributes")
    train_records, val_records = [], []
    for i, ident in enumerate(identities):
        common = dict(basis=basis, intrinsics=intrinsics,
                      expression_class="NE",
                      pose_range_deg=config.pose_range_deg,
                      landmark_noise_px=config.landmark_noise_px,
                      centers=centers,
                      expression_noise=config.expression_noise,
                      cluster_sigma=config.expression_cluster_sigma)
        recs = sample_views(ident, count=2, seed=config.seed * 57 + i,
                            pool="train", **common)
        recs[1].pool = "val"
        train_records.append(recs[0])
        val_records.append(recs[1])
    return train_records, val_records, identities


def _coefficient_datasets(config, train_fits, val_fits):
    if config.task == "recognition":
        train_pool, val_pool = {}, {}
        for f in train_fits:
            train_pool.setdefault(f.identity_label, []).append(f)
        for f in val_fits:
            val_pool.setdefault(f.identity_label, []).append(f)
        return build_recognition_dataset(train_pool, val_pool,
                                         config.subset_size,
                                         cap=config.subset_cap,
                                         seed=config.seed)
    if config.task == "expression":
        return build_expression_dataset(train_fits, val_fits)
    return build_gender_dataset(train_fits, val_fits)


def _raw_pixel_datasets(config, train_records, val_records, identities):
    if config.task == "recognition":
        labels = sorted({r.identity_label for r in train_records})
        label_fn = lambda r: labels.index(r.identity_label)
        class_names = labels
    elif config.task == "expression":
        label_fn = lambda r: EXPRESSION_CLASSES.index(r.expression_class)
        class_names = list(EXPRESSION_CLASSES)
    else:
        by_label = {i.label: i.attribute for i in identities}
        label_fn = lambda r: by_label[r.identity_label]
        class_names = ["class0", "class1"]
    return _records_to_pixel_dataset(train_records, val_records, label_fn,
                                     class_names, config)


# ---------------------------------------------------------------------------
# Report emission


def report_without_timing(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timing"}


def emit_report(report: dict, out_dir: str):
    """Write report.json, report.csv, and confusion_matrix.csv."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)

    metrics = {
        "task": report["task"],
        "input_mode": report["input_mode"],
        "accuracy": report["accuracy"],
        "n_train": report["n_train"],
        "n_val": report["n_val"],
        "input_dim": report["input_dim"],
        "per_input_seconds": report["timing"]["per_input_seconds"],
        "config_hash": report["config_hash"],
    }
    with open(os.path.join(out_dir, "report.csv"), "w") as f:
        f.write("metric,value\n")
        for k, v in metrics.items():
            f.write(f"{k},{v}\n")

    names = report["class_names"]
    with open(os.path.join(out_dir, "confusion_matrix.csv"), "w") as f:
        f.write("true\\pred," + ",".join(names) + "\n")
        for name, row in zip(names, report["confusion_matrix"]):
            f.write(name + "," + ",".join(f"{v:.6f}" for v in row) + "\n")
