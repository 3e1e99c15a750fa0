"""Losses, optimizers, dataset ingestion and the training loop.

Datasets are desk-scale: synthetic two-moons / XOR blobs plus an IDX reader
for MNIST-format files.  Training follows the small-Adam regime (batch 32,
learning rate halved on a fixed epoch period), with all shuffling driven by
one seed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .errors import ContractError, FormatError, NumericError
from .models import Classifier, classifier_forward, softmax
from .netcore import GradientTape

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Inputs (n, d), integer labels (n,), and the value range of the inputs."""

    inputs: np.ndarray
    labels: np.ndarray
    value_range: tuple[float, float]

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ContractError("inputs must be a (n, d) array")
        if len(self.inputs) != len(self.labels):
            raise FormatError(
                f"{len(self.inputs)} inputs vs {len(self.labels)} labels"
            )
        lo, hi = self.value_range
        if not lo < hi:
            raise ContractError("value_range must satisfy lo < hi")
        if len(self.inputs) and (
            self.inputs.min() < lo - 1e-12 or self.inputs.max() > hi + 1e-12
        ):
            raise ContractError("inputs fall outside value_range")
        if len(self.labels) and self.labels.min() < 0:
            raise ContractError("labels must be non-negative")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def class_count(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def span(self) -> float:
        return self.value_range[1] - self.value_range[0]

    def subset(self, indices) -> "Dataset":
        return Dataset(self.inputs[indices], self.labels[indices], self.value_range)

    def split(self, first_n: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(slice(None, first_n)), self.subset(slice(first_n, None))


def _finish_dataset(points, labels, rng) -> Dataset:
    order = rng.permutation(len(points))
    points = points[order]
    labels = labels[order]
    lo = float(points.min())
    hi = float(points.max())
    return Dataset(points, labels, (lo, hi))


def make_two_moons(n: int, noise: float, seed: int) -> Dataset:
    """Two interleaved half-circles with Gaussian coordinate noise."""
    if n % 2 != 0:
        raise ContractError("two-moons needs an even sample count")
    rng = np.random.default_rng(seed)
    half = n // 2
    t = np.linspace(0.0, math.pi, half)
    outer = np.stack([np.cos(t), np.sin(t)], axis=1)
    inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    points = np.concatenate([outer, inner], axis=0)
    points = points + rng.normal(0.0, noise, size=points.shape)
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    return _finish_dataset(points, labels, rng)


def make_xor_blobs(n: int, noise: float, seed: int) -> Dataset:
    """Four Gaussian blobs at (+-1, +-1); class = XOR of the quadrant signs.

    The best linear classifier sits at chance here, which makes this the
    right probe for architectures that degenerate to a linear map.
    """
    if n % 4 != 0:
        raise ContractError("xor blobs need a sample count divisible by 4")
    rng = np.random.default_rng(seed)
    per = n // 4
    centers = [(1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0)]
    blob_labels = [0, 0, 1, 1]
    points = []
    labels = []
    for (cx, cy), lab in zip(centers, blob_labels):
        blob = rng.normal(0.0, noise, size=(per, 2)) + np.array([cx, cy])
        points.append(blob)
        labels.append(np.full(per, lab, dtype=np.int64))
    return _finish_dataset(np.concatenate(points), np.concatenate(labels), rng)


def load_idx(images_path, labels_path, limit=None, scale_to=(0.0, 1.0)) -> Dataset:
    """Read IDX-format image/label files (big-endian, u8 pixels)."""
    lo, hi = float(scale_to[0]), float(scale_to[1])
    if not lo < hi:
        raise ContractError("scale_to must satisfy lo < hi")

    with open(images_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise OSError(f"truncated IDX image file {images_path!r}")
    magic, count, rows, cols = struct.unpack(">IIII", blob[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(
            f"bad image magic 0x{magic:08x} in {images_path!r}"
        )
    if len(blob) < 16 + count * rows * cols:
        raise OSError(f"truncated IDX image file {images_path!r}")

    with open(labels_path, "rb") as fh:
        lblob = fh.read()
    if len(lblob) < 8:
        raise OSError(f"truncated IDX label file {labels_path!r}")
    lmagic, lcount = struct.unpack(">II", lblob[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"bad label magic 0x{lmagic:08x} in {labels_path!r}")
    if len(lblob) < 8 + lcount:
        raise OSError(f"truncated IDX label file {labels_path!r}")
    if lcount != count:
        raise FormatError(
            f"image count {count} != label count {lcount}"
        )

    take = count if limit is None else min(int(limit), count)
    pixels = np.frombuffer(
        blob, dtype=np.uint8, count=take * rows * cols, offset=16
    ).reshape(take, rows * cols)
    labels = np.frombuffer(lblob, dtype=np.uint8, count=take, offset=8).astype(np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() >= 10):
        raise FormatError("labels outside [0, 10)")
    inputs = lo + (hi - lo) * (pixels.astype(np.float64) / 255.0)
    return Dataset(inputs, labels, (lo, hi))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def _logsumexp(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    return np.squeeze(m, axis=-1) + np.log(np.sum(np.exp(logits - m), axis=-1))


def cross_entropy(logits, label: int) -> float:
    """-log softmax(logits)[label], stabilized with log-sum-exp."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ContractError("cross_entropy expects one logits vector")
    if not 0 <= label < logits.shape[0]:
        raise ContractError(f"label {label} out of range [0, {logits.shape[0]})")
    return float(_logsumexp(logits) - logits[label])


def cross_entropy_node(tape: GradientTape, logits, labels, reduction="mean"):
    """Batched cross-entropy as a recorded scalar node.

    ``reduction="sum"`` keeps per-sample gradients independent of the batch
    size (used by attacks); ``"mean"`` is the training loss.
    """
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction {reduction!r}")
    labels = np.asarray(labels, dtype=np.int64)
    lv = logits.value
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise ContractError("cross_entropy_node expects (n, k) logits and (n,) labels")
    if labels.min() < 0 or labels.max() >= lv.shape[1]:
        raise ContractError("labels out of range")
    n = lv.shape[0]
    rows = np.arange(n)

    def compute(values):
        losses = _logsumexp(values) - values[rows, labels]
        total = float(np.sum(losses))
        return np.float64(total / n) if reduction == "mean" else np.float64(total)

    def vjp(g):
        p = softmax(lv)
        p[rows, labels] -= 1.0
        if reduction == "mean":
            p /= n
        return (g * p,)

    return tape.record(compute(lv), (logits,), vjp, compute)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("betas must lie in [0, 1)")


@dataclass
class SGDConfig:
    lr: float = 1e-2

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")


@dataclass
class AdamState:
    step: int
    m: list
    v: list

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, config: AdamConfig, lr=None) -> None:
    """One bias-corrected Adam update, in place."""
    if len(params) != len(grads):
        raise ContractError("params/grads length mismatch")
    if lr is None:
        lr = config.lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ContractError("gradient shape mismatch")
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps_hat)


def sgd_step(params, grads, config: SGDConfig, lr=None) -> None:
    if lr is None:
        lr = config.lr
    for p, g in zip(params, grads):
        p -= lr * g


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    optimizer: AdamConfig | SGDConfig = dataclass_field(default_factory=AdamConfig)
    epochs: int = 200
    batch_size: int = 32
    lr_halving_period: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.lr_halving_period < 1:
            raise ContractError("lr_halving_period must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    train_accuracy: float
    eval_accuracy: float | None = None


def _grads_for(model: Classifier, tape: GradientTape, param_arrays):
    _, tape_grads = tape.backward(1.0)
    by_id = {
        id(arr): g for (_, arr), g in zip(tape.parameter_items(), tape_grads)
    }
    return [by_id.get(id(p), np.zeros_like(p)) for p in param_arrays]


def accuracy(model: Classifier, data: Dataset) -> float:
    """Batched top-1 accuracy."""
    if len(data) == 0:
        return 0.0
    logits = classifier_forward(model, data.inputs)
    return float(np.mean(np.argmax(logits, axis=-1) == data.labels))


def train(
    model: Classifier,
    data: Dataset,
    config: TrainConfig,
    eval_data: Dataset | None = None,
) -> tuple[Classifier, list[EpochStats]]:
    """Mini-batch training; deterministic given ``config.seed``.

    The learning rate halves every ``lr_halving_period`` epochs.  Training
    accuracy is the running accuracy of pre-update batch predictions.
    """
    rng = np.random.default_rng(config.seed)
    params = [arr for _, arr in model.parameters()]
    opt = config.optimizer
    adam_state = AdamState.for_params(params) if isinstance(opt, AdamConfig) else None
    history: list[EpochStats] = []
    n = len(data)
    if n == 0 and config.epochs > 0:
        raise ContractError("cannot train on an empty dataset")
    for epoch in range(config.epochs):
        lr = opt.lr * 0.5 ** (epoch // config.lr_halving_period)
        perm = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb = data.inputs[idx]
            yb = data.labels[idx]
            tape = GradientTape()
            try:
                logits = classifier_forward(model, xb, tape)
            except NumericError as exc:
                raise type(exc)(
                    f"epoch {epoch}, samples {idx.tolist()}: {exc}",
                    stage=getattr(exc, "stage", None),
                ) from exc
            loss = cross_entropy_node(tape, logits, yb, reduction="mean")
            tape.finalize(loss)
            correct += int(np.sum(np.argmax(logits.value, axis=-1) == yb))
            total_loss += float(loss.value) * len(idx)
            grads = _grads_for(model, tape, params)
            if adam_state is not None:
                adam_step(params, grads, adam_state, opt, lr=lr)
            else:
                sgd_step(params, grads, opt, lr=lr)
        stats = EpochStats(
            epoch=epoch,
            lr=lr,
            loss=total_loss / n,
            train_accuracy=correct / n,
            eval_accuracy=accuracy(model, eval_data) if eval_data is not None else None,
        )
        history.append(stats)
    return model, history


def history_to_csv(history, target) -> None:
    """Columns: epoch, lr, loss, train_acc, test_acc (blank if not evaluated)."""
    close = False
    if isinstance(target, (str, bytes)) or hasattr(target, "__fspath__"):
        target = open(target, "w", newline="")
        close = True
    try:
        target.write("epoch,lr,loss,train_acc,test_acc\n")
        for s in history:
            test = "" if s.eval_accuracy is None else repr(float(s.eval_accuracy))
            target.write(
                f"{s.epoch},{repr(float(s.lr))},{repr(float(s.loss))},"
                f"{repr(float(s.train_accuracy))},{test}\n"
            )
    finally:
        if close:
            target.close()
