"""Residual fully-connected classifier over coefficient vectors.

The network is an affine embedding followed by residual blocks of two affine
layers with a tanh nonlinearity and an identity skip, then an affine head.
With block_count = 0 it degenerates to a single affine map. Training is
plain SGD with momentum, seeded shuffling, Gaussian input jitter, and a
step learning-rate decay. Everything is deterministic per seed.

Parameter count:
    block_count == 0:  input_dim*C + C
    otherwise:         (input_dim*H + H)
                       + block_count * 2*(H*H + H)
                       + (H*C + C)
with H = hidden_dim and C = class_count.
"""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

MODEL_MAGIC = b"MFC1"


@dataclass
class LabeledDataset:
    inputs: np.ndarray           # (n, input_dim)
    labels: np.ndarray           # (n,) class indices
    class_names: list

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.inputs) != len(self.labels):
            raise ContractViolation("inputs and labels differ in length")
        if len(self.labels) and self.labels.max() >= len(self.class_names):
            raise ContractViolation("label index out of range for class_names")

    def save(self, path: str):
        with open(path, "w") as f:
            json.dump({"inputs": self.inputs.tolist(),
                       "labels": self.labels.tolist(),
                       "class_names": list(self.class_names)}, f)

    @classmethod
    def load(cls, path: str) -> "LabeledDataset":
        with open(path) as f:
            d = json.load(f)
        return cls(inputs=np.array(d["inputs"], dtype=float),
                   labels=np.array(d["labels"], dtype=int),
                   class_names=d["class_names"])


@dataclass
class TrainSchedule:
    epochs: int = 60
    batch_size: int = 32
    base_lr: float = 0.01
    momentum: float = 0.9
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 20
    jitter_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractViolation("epochs and batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ContractViolation("base_lr must be positive")
        if not (0 < self.lr_decay_factor <= 1):
            raise ContractViolation("lr_decay_factor must lie in (0, 1]")


@dataclass
class ClassifierModel:
    input_dim: int
    block_count: int
    hidden_dim: int
    class_count: int
    parameters: np.ndarray
    seed: int
    input_mean: np.ndarray = None
    input_std: np.ndarray = None

    def __post_init__(self):
        if self.input_mean is None:
            self.input_mean = np.zeros(self.input_dim)
        if self.input_std is None:
            self.input_std = np.ones(self.input_dim)

    @property
    def parameter_count(self) -> int:
        return expected_parameter_count(self.input_dim, self.block_count,
                                        self.hidden_dim, self.class_count)


def expected_parameter_count(input_dim: int, block_count: int,
                             hidden_dim: int, class_count: int) -> int:
    if block_count == 0:
        return input_dim * class_count + class_count
    h = hidden_dim
    return (input_dim * h + h
            + block_count * 2 * (h * h + h)
            + h * class_count + class_count)


def _layer_shapes(model: ClassifierModel):
    """Yield (name, shape) for every parameter tensor in packing order."""
    d, h, c = model.input_dim, model.hidden_dim, model.class_count
    if model.block_count == 0:
        yield "W_out", (d, c)
        yield "b_out", (c,)
        return
    yield "W_in", (d, h)
    yield "b_in", (h,)
    for k in range(model.block_count):
        yield f"block{k}.W1", (h, h)
        yield f"block{k}.b1", (h,)
        yield f"block{k}.W2", (h, h)
        yield f"block{k}.b2", (h,)
    yield "W_out", (h, c)
    yield "b_out", (c,)


def _unpack(model: ClassifierModel) -> dict:
    out = {}
    o = 0
    p = model.parameters
    for name, shape in _layer_shapes(model):
        size = int(np.prod(shape))
        out[name] = p[o:o + size].reshape(shape)
        o += size
    return out


def init_model(input_dim: int, class_count: int, block_count: int = 8,
               hidden_dim: int = 128, seed: int = 0) -> ClassifierModel:
    """Seeded scaled-uniform initialization (biases zero)."""
    if min(input_dim, class_count, hidden_dim) < 1 or block_count < 0:
        raise ContractViolation("dimensions must be >= 1 and block_count >= 0")
    rng = np.random.default_rng(seed)
    model = ClassifierModel(input_dim=input_dim, block_count=block_count,
                            hidden_dim=hidden_dim, class_count=class_count,
                            parameters=np.empty(0), seed=seed)
    chunks = []
    for name, shape in _layer_shapes(model):
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            chunks.append(rng.uniform(-bound, bound, size=shape).ravel())
        else:
            chunks.append(np.zeros(shape))
    model.parameters = np.concatenate(chunks)
    assert len(model.parameters) == model.parameter_count
    return model


def _normalize(model: ClassifierModel, x: np.ndarray) -> np.ndarray:
    return (x - model.input_mean) / model.input_std


def forward(model: ClassifierModel, x: np.ndarray) -> np.ndarray:
    """Logits for one input (input_dim,) or a batch (n, input_dim)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.shape[1] != model.input_dim:
        raise ContractViolation(
            f"input has {batch.shape[1]} entries, expected {model.input_dim}")
    logits, _ = _forward_cached(model, batch)
    return logits[0] if single else logits


def _forward_cached(model: ClassifierModel, batch: np.ndarray):
    p = _unpack(model)
    cache = {"x": _normalize(model, batch)}
    if model.block_count == 0:
        logits = cache["x"] @ p["W_out"] + p["b_out"]
        return logits, cache
    h = cache["x"] @ p["W_in"] + p["b_in"]
    cache["h0"] = h
    for k in range(model.block_count):
        pre = h @ p[f"block{k}.W1"] + p[f"block{k}.b1"]
        act = np.tanh(pre)
        cache[f"act{k}"] = act
        cache[f"in{k}"] = h
        h = h + act @ p[f"block{k}.W2"] + p[f"block{k}.b2"]
    cache["h_final"] = h
    logits = h @ p["W_out"] + p["b_out"]
    return logits, cache


def softmax(logits: np.ndarray) -> np.ndarray:
    """Shift-invariant softmax along the last axis."""
    z = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ContractViolation("logits must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p: np.ndarray, q: np.ndarray) -> float:
    """Cross entropy -sum p_i log q_i (natural log), q clamped at 1e-12."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    for name, dist in (("p", p), ("q", q)):
        if np.any(dist < 0) or abs(dist.sum() - 1.0) > 1e-9:
            raise ContractViolation(f"{name} is not a probability distribution")
    return float(-(p * np.log(np.maximum(q, 1e-12))).sum())


def batch_loss(model: ClassifierModel, inputs: np.ndarray,
               labels: np.ndarray) -> float:
    """Mean cross-entropy of softmax predictions over a batch."""
    logits, _ = _forward_cached(model, np.atleast_2d(inputs))
    probs = softmax(logits)
    n = len(probs)
    picked = np.maximum(probs[np.arange(n), labels], 1e-12)
    return float(-np.log(picked).mean())


def model_gradient(model: ClassifierModel, inputs: np.ndarray,
                   labels: np.ndarray) -> np.ndarray:
    """Exact gradient of the mean cross-entropy via reverse-mode accumulation."""
    batch = np.atleast_2d(np.asarray(inputs, dtype=float))
    labels = np.asarray(labels, dtype=int)
    if len(batch) == 0:
        raise ContractViolation("gradient over empty batch")
    n = len(batch)
    p = _unpack(model)
    logits, cache = _forward_cached(model, batch)
    probs = softmax(logits)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    grads = {}
    if model.block_count == 0:
        grads["W_out"] = cache["x"].T @ dlogits
        grads["b_out"] = dlogits.sum(axis=0)
    else:
        grads["W_out"] = cache["h_final"].T @ dlogits
        grads["b_out"] = dlogits.sum(axis=0)
        dh = dlogits @ p["W_out"].T
        for k in reversed(range(model.block_count)):
            act = cache[f"act{k}"]
            h_in = cache[f"in{k}"]
            grads[f"block{k}.W2"] = act.T @ dh
            grads[f"block{k}.b2"] = dh.sum(axis=0)
            dact = dh @ p[f"block{k}.W2"].T
            dpre = dact * (1.0 - act * act)
            grads[f"block{k}.W1"] = h_in.T @ dpre
            grads[f"block{k}.b1"] = dpre.sum(axis=0)
            dh = dh + dpre @ p[f"block{k}.W1"].T
        grads["W_in"] = cache["x"].T @ dh
        grads["b_in"] = dh.sum(axis=0)

    flat = np.concatenate([grads[name].ravel() for name, _ in _layer_shapes(model)])
    return flat


def predict(model: ClassifierModel, x: np.ndarray):
    """Class index with the highest logit; ties go to the lowest index."""
    logits = forward(model, x)
    return int(np.argmax(logits)) if logits.ndim == 1 else np.argmax(logits, axis=1)


def augment_coefficients(x: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Seeded zero-mean Gaussian jitter; sigma = 0 is the identity."""
    if sigma < 0:
        raise ContractViolation("sigma must be >= 0")
    x = np.asarray(x, dtype=float)
    if sigma == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    return x + rng.normal(scale=sigma, size=x.shape)


def fit_standardizer(model: ClassifierModel, inputs: np.ndarray):
    """Per-dimension standardization statistics from the training set."""
    inputs = np.asarray(inputs, dtype=float)
    model.input_mean = inputs.mean(axis=0)
    std = inputs.std(axis=0)
    std[std < 1e-12] = 1.0
    model.input_std = std


def train(model: ClassifierModel, dataset: LabeledDataset,
          schedule: TrainSchedule):
    """SGD with momentum over the dataset; returns (model, history).

    History rows carry per-epoch loss, training accuracy, learning rate, wall
    time, and per-input time. Deterministic given (seed, schedule, dataset).
    """
    if len(dataset.inputs) == 0:
        raise ContractViolation("dataset is empty")
    fit_standardizer(model, dataset.inputs)
    rng = np.random.default_rng(schedule.seed)
    velocity = np.zeros_like(model.parameters)
    lr = schedule.base_lr
    history = []
    n = len(dataset.inputs)
    for epoch in range(schedule.epochs):
        if epoch > 0 and epoch % schedule.lr_decay_every == 0:
            lr *= schedule.lr_decay_factor
        start = time.perf_counter()
        order = rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, schedule.batch_size):
            idx = order[lo:lo + schedule.batch_size]
            batch = dataset.inputs[idx]
            if schedule.jitter_sigma > 0:
                batch = batch + rng.normal(scale=schedule.jitter_sigma,
                                           size=batch.shape)
            labels = dataset.labels[idx]
            try:
                grad = model_gradient(model, batch, labels)
                loss = batch_loss(model, batch, labels)
            except ContractViolation as exc:
                raise ArithmeticError(
                    f"non-finite loss at epoch {epoch}, "
                    f"batch {lo // schedule.batch_size}: {exc}") from exc
            if not np.isfinite(loss):
                raise ArithmeticError(
                    f"non-finite loss at epoch {epoch}, batch {lo // schedule.batch_size}")
            velocity = schedule.momentum * velocity - lr * grad
            model.parameters = model.parameters + velocity
            epoch_losses.append(loss)
        elapsed = time.perf_counter() - start
        preds = predict(model, dataset.inputs)
        acc = float(np.mean(preds == dataset.labels))
        history.append({
            "epoch": epoch,
            "loss": float(np.mean(epoch_losses)),
            "accuracy": acc,
            "lr": lr,
            "wall_seconds": elapsed,
            "samples": n,
            "per_input_seconds": elapsed / n,
        })
    return model, history


def evaluate(model: ClassifierModel, dataset: LabeledDataset):
    """Validation accuracy and per-sample predictions."""
    preds = predict(model, dataset.inputs)
    acc = float(np.mean(preds == dataset.labels))
    return acc, preds


def history_to_csv(history, path: str):
    with open(path, "w") as f:
        f.write("epoch,loss,accuracy,lr,per_input_seconds\n")
        for row in history:
            f.write(f"{row['epoch']},{row['loss']},{row['accuracy']},"
                    f"{row['lr']},{row['per_input_seconds']}\n")


# ---------------------------------------------------------------------------
# Model file format: magic + length-prefixed JSON manifest + float32 blob


def save_model(model: ClassifierModel, path: str):
    manifest = {
        "format": MODEL_MAGIC.decode(),
        "input_dim": model.input_dim,
        "block_count": model.block_count,
        "hidden_dim": model.hidden_dim,
        "class_count": model.class_count,
        "seed": model.seed,
    }
    blob = json.dumps(manifest).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(model.parameters.astype("<f4").tobytes())
        f.write(model.input_mean.astype("<f4").tobytes())
        f.write(model.input_std.astype("<f4").tobytes())
    os.replace(tmp, path)


def load_model(path: str) -> ClassifierModel:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MODEL_MAGIC:
        raise ContractViolation(
            f"unsupported model format {data[:4]!r}, expected {MODEL_MAGIC!r}")
    (mlen,) = struct.unpack("<Q", data[4:12])
    manifest = json.loads(data[12:12 + mlen].decode("utf-8"))
    model = ClassifierModel(
        input_dim=manifest["input_dim"], block_count=manifest["block_count"],
        hidden_dim=manifest["hidden_dim"], class_count=manifest["class_count"],
        parameters=np.empty(0), seed=manifest["seed"])
    count = expected_parameter_count(model.input_dim, model.block_count,
                                     model.hidden_dim, model.class_count)
    o = 12 + mlen
    model.parameters = np.frombuffer(data, dtype="<f4", count=count,
                                     offset=o).astype(np.float64)
    o += 4 * count
    model.input_mean = np.frombuffer(data, dtype="<f4", count=model.input_dim,
                                     offset=o).astype(np.float64)
    o += 4 * model.input_dim
    model.input_std = np.frombuffer(data, dtype="<f4", count=model.input_dim,
                                    offset=o).astype(np.float64)
    return model
