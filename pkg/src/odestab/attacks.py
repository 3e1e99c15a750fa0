"""White-box (FGSM, PGD, DI2-FGSM) and black-box (Boundary, transfer) attacks.

Gradient attacks work in the L-infinity norm and accept batched inputs; the
Boundary attack is decision-based (label oracle only) and works in L2.
Every attack clips into the data box and is reproducible from its rng/seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .errors import BudgetError, ContractError, DimensionError
from .models import Classifier, classifier_forward, predict
from .netcore import GradientTape
from .training import Dataset, cross_entropy_node


# ---------------------------------------------------------------------------
# Configurations
# ---------------------------------------------------------------------------


def _check_clip(clip):
    lo, hi = float(clip[0]), float(clip[1])
    if not lo < hi:
        raise ContractError("clip range must satisfy lo < hi")
    return (lo, hi)


@dataclass
class FgsmConfig:
    epsilon: float
    clip: tuple[float, float]
    kind: str = dataclass_field(default="fgsm", init=False)

    def __post_init__(self):
        self.clip = _check_clip(self.clip)
        if self.epsilon < 0:
            raise ContractError("epsilon must be >= 0")
        if self.epsilon > self.clip[1] - self.clip[0]:
            raise ContractError("epsilon exceeds the clip span")


@dataclass
class PgdConfig:
    epsilon: float
    step: float
    iters: int = 40
    random_start: bool = True
    clip: tuple[float, float] = (0.0, 1.0)
    kind: str = dataclass_field(default="pgd", init=False)

    def __post_init__(self):
        self.clip = _check_clip(self.clip)
        if self.epsilon < 0:
            raise ContractError("epsilon must be >= 0")
        if self.epsilon > self.clip[1] - self.clip[0]:
            raise ContractError("epsilon exceeds the clip span")
        if self.step <= 0:
            raise ContractError("step must be positive")
        if self.iters < 1:
            raise ContractError("iters must be >= 1")


@dataclass
class Di2FgsmConfig:
    epsilon: float
    step: float
    iters: int = 40
    transform_prob: float = 0.5
    pad_fraction: float = 0.1
    clip: tuple[float, float] = (0.0, 1.0)
    kind: str = dataclass_field(default="di2_fgsm", init=False)

    def __post_init__(self):
        self.clip = _check_clip(self.clip)
        if self.epsilon < 0:
            raise ContractError("epsilon must be >= 0")
        if self.epsilon > self.clip[1] - self.clip[0]:
            raise ContractError("epsilon exceeds the clip span")
        if self.step <= 0:
            raise ContractError("step must be positive")
        if self.iters < 1:
            raise ContractError("iters must be >= 1")
        if not 0.0 <= self.transform_prob <= 1.0:
            raise ContractError("transform_prob must lie in [0, 1]")
        if not 0.0 <= self.pad_fraction < 1.0:
            raise ContractError("pad_fraction must lie in [0, 1)")


@dataclass
class BoundaryConfig:
    queries: int = 1000
    init_step: float = 0.1
    orth_step: float = 0.1
    clip: tuple[float, float] = (0.0, 1.0)
    kind: str = dataclass_field(default="boundary", init=False)

    def __post_init__(self):
        self.clip = _check_clip(self.clip)
        if self.queries < 1:
            raise ContractError("queries must be >= 1")
        if self.init_step <= 0 or self.orth_step <= 0:
            raise ContractError("step sizes must be positive")


def config_echo(config) -> dict:
    doc = {"kind": config.kind}
    for key, value in vars(config).items():
        if key == "kind":
            continue
        doc[key] = list(value) if isinstance(value, tuple) else value
    return doc


# ---------------------------------------------------------------------------
# Gradient machinery
# ---------------------------------------------------------------------------


def _as_batch(x, labels):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
        labels = np.asarray([labels], dtype=np.int64)
    else:
        labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise DimensionError("labels do not match the batch")
    return x, labels, single


def loss_input_gradient(model: Classifier, x, labels) -> np.ndarray:
    """Gradient of the summed cross-entropy w.r.t. the input batch."""
    tape = GradientTape()
    logits = classifier_forward(model, x, tape)
    loss = cross_entropy_node(tape, logits, labels, reduction="sum")
    tape.finalize(loss)
    grad, _ = tape.backward(1.0)
    return grad


def _project(x_adv, x0, epsilon, clip):
    lo, hi = clip
    x_adv = np.minimum(np.maximum(x_adv, x0 - epsilon), x0 + epsilon)
    return np.minimum(np.maximum(x_adv, lo), hi)


def fgsm(model: Classifier, x, label, config: FgsmConfig):
    """x_adv = clip(x + eps * sign(grad_x loss)); sign(0) is 0."""
    xb, labels, single = _as_batch(x, label)
    grad = loss_input_gradient(model, xb, labels)
    x_adv = np.clip(xb + config.epsilon * np.sign(grad), *config.clip)
    return x_adv[0] if single else x_adv


def pgd(model: Classifier, x, label, config: PgdConfig, rng=None):
    """Iterated projected sign steps inside the eps-ball and the clip box."""
    if rng is None:
        rng = np.random.default_rng(0)
    xb, labels, single = _as_batch(x, label)
    x_adv = xb.copy()
    if config.random_start and config.epsilon > 0:
        x_adv = x_adv + rng.uniform(-config.epsilon, config.epsilon, size=xb.shape)
        x_adv = _project(x_adv, xb, config.epsilon, config.clip)
    for _ in range(config.iters):
        grad = loss_input_gradient(model, x_adv, labels)
        x_adv = x_adv + config.step * np.sign(grad)
        x_adv = _project(x_adv, xb, config.epsilon, config.clip)
    return x_adv[0] if single else x_adv


def _diversity_indices(side, rng, pad_fraction):
    """Gather map for one resize-to-random-fraction + random zero-pad copy."""
    frac = rng.uniform(1.0 - pad_fraction, 1.0)
    new = max(1, int(round(side * frac)))
    src = (np.arange(new) * side // new).astype(np.int64)
    top = int(rng.integers(0, side - new + 1))
    left = int(rng.integers(0, side - new + 1))
    gather = np.zeros((side, side), dtype=np.int64)
    mask = np.zeros((side, side), dtype=bool)
    rr, cc = np.meshgrid(src, src, indexing="ij")
    gather[top : top + new, left : left + new] = rr * side + cc
    mask[top : top + new, left : left + new] = True
    return gather.ravel(), mask.ravel()


def _transform_op(tape, x_node, gather, mask):
    """Per-row gather with zero padding; vjp scatter-adds back."""
    xv = x_node.value
    n = xv.shape[0]
    rows = np.arange(n)[:, None]

    def compute(values):
        return np.where(mask, values[rows, gather], 0.0)

    def vjp(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, (rows, gather), np.where(mask, g, 0.0))
        return (gx,)

    return tape.record(compute(xv), (x_node,), vjp, compute)


def di2_fgsm(model: Classifier, x, label, config: Di2FgsmConfig, rng=None):
    """Iterative FGSM with input-diversity transforms on the gradient pass."""
    if rng is None:
        rng = np.random.default_rng(0)
    xb, labels, single = _as_batch(x, label)
    d = xb.shape[1]
    side = math.isqrt(d)
    if config.transform_prob > 0 and side * side != d:
        raise ContractError(
            f"input dimension {d} is not a square grid; diversity transform "
            "needs one"
        )
    x_adv = xb.copy()
    n = xb.shape[0]
    for _ in range(config.iters):
        apply_t = rng.uniform(size=n) < config.transform_prob
        if np.any(apply_t):
            gather = np.tile(np.arange(d, dtype=np.int64), (n, 1))
            mask = np.ones((n, d), dtype=bool)
            for i in np.nonzero(apply_t)[0]:
                gather[i], mask[i] = _diversity_indices(side, rng, config.pad_fraction)
            tape = GradientTape()
            x_node = tape.watch_input(x_adv)
            transformed = _transform_op(tape, x_node, gather, mask)
            logits = classifier_forward(model, transformed, tape)
            loss = cross_entropy_node(tape, logits, labels, reduction="sum")
            tape.finalize(loss)
            grad, _ = tape.backward(1.0)
        else:
            grad = loss_input_gradient(model, x_adv, labels)
        x_adv = x_adv + config.step * np.sign(grad)
        x_adv = _project(x_adv, xb, config.epsilon, config.clip)
    return x_adv[0] if single else x_adv


# ---------------------------------------------------------------------------
# Boundary attack (decision-based, L2)
# ---------------------------------------------------------------------------


def _label_oracle(model_or_fn):
    if isinstance(model_or_fn, Classifier):
        return lambda v: predict(model_or_fn, v)[0]
    if callable(model_or_fn):
        return model_or_fn
    raise ContractError("boundary attack needs a classifier or a label callable")


def boundary_attack(model_decision_only, x, label, config: BoundaryConfig, seed: int):
    """Walk the decision boundary, shrinking ||x_adv - x||_2 while adversarial.

    The model is consulted only through its predicted label.  Exactly
    ``config.queries`` oracle calls are spent after initialization; the
    returned trace holds the best distance after each query and is
    non-increasing.
    """
    oracle = _label_oracle(model_decision_only)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractError("boundary attack runs one sample at a time")
    rng = np.random.default_rng(seed)
    lo, hi = config.clip

    start = None
    for _ in range(100):
        candidate = rng.uniform(lo, hi, size=x.shape)
        if oracle(candidate) != label:
            start = candidate
            break
    if start is None:
        raise BudgetError("no adversarial starting point within 100 uniform draws")

    best = start
    best_dist = float(np.linalg.norm(best - x))
    orth_scale = config.orth_step
    toward_scale = config.init_step
    successes = 0
    failures = 0
    trace = np.empty(config.queries)
    for q in range(config.queries):
        direction = best - x
        dist = float(np.linalg.norm(direction))
        if dist == 0.0:
            trace[q:] = 0.0
            break
        unit = direction / dist
        noise = rng.standard_normal(x.shape)
        noise -= np.dot(noise, unit) * unit
        nn = np.linalg.norm(noise)
        if nn > 0:
            noise *= orth_scale * dist / nn
        candidate = best + noise
        radial = candidate - x
        rn = np.linalg.norm(radial)
        if rn > 0:
            candidate = x + radial * (dist / rn)
        candidate = x + (candidate - x) * (1.0 - toward_scale)
        candidate = np.clip(candidate, lo, hi)
        cand_dist = float(np.linalg.norm(candidate - x))
        if oracle(candidate) != label and cand_dist < best_dist:
            best = candidate
            best_dist = cand_dist
            successes += 1
            failures = 0
            if successes >= 10:
                orth_scale *= 1.1
                toward_scale *= 1.1
                successes = 0
        else:
            failures += 1
            successes = 0
            if failures >= 10:
                orth_scale *= 0.5
                toward_scale *= 0.5
                failures = 0
        trace[q] = best_dist
    return best, trace


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class SampleOutcome:
    index: int
    true_label: int
    clean_label: int
    adversarial_label: int
    success: bool
    perturbation_norm: float
    iterations: int


@dataclass
class AttackReport:
    attack: str
    model: str
    epsilon: float | None
    norm: str
    samples: list[SampleOutcome]
    clean_accuracy: float
    adversarial_accuracy: float
    config: dict

    def to_csv(self, target) -> None:
        close = False
        if isinstance(target, (str, bytes)) or hasattr(target, "__fspath__"):
            target = open(target, "w", newline="")
            close = True
        try:
            target.write(f"# attack: {self.attack}\n")
            target.write(f"# model: {self.model}\n")
            eps = "" if self.epsilon is None else repr(float(self.epsilon))
            target.write(f"# epsilon: {eps}\n")
            target.write(f"# norm: {self.norm}\n")
            target.write(f"# config: {json.dumps(self.config, sort_keys=True)}\n")
            target.write(
                "row,index,true_label,clean_label,adversarial_label,success,"
                "perturbation_norm,iterations,clean_accuracy,adversarial_accuracy\n"
            )
            for s in self.samples:
                target.write(
                    f"sample,{s.index},{s.true_label},{s.clean_label},"
                    f"{s.adversarial_label},{s.success},"
                    f"{repr(float(s.perturbation_norm))},{s.iterations},,\n"
                )
            target.write(
                f"aggregate,,,,,,,,{repr(float(self.clean_accuracy))},"
                f"{repr(float(self.adversarial_accuracy))}\n"
            )
        finally:
            if close:
                target.close()

    def to_json(self, target) -> None:
        doc = {
            "attack": self.attack,
            "model": self.model,
            "epsilon": self.epsilon,
            "norm": self.norm,
            "sample_count": len(self.samples),
            "clean_accuracy": self.clean_accuracy,
            "adversarial_accuracy": self.adversarial_accuracy,
            "config": self.config,
        }
        close = False
        if isinstance(target, (str, bytes)) or hasattr(target, "__fspath__"):
            target = open(target, "w")
            close = True
        try:
            json.dump(doc, target, indent=1, sort_keys=True)
            target.write("\n")
        finally:
            if close:
                target.close()


def _assemble_report(
    attack, model_label, epsilon, norm, data, x_adv, clean_labels, adv_labels,
    iterations, config,
) -> AttackReport:
    samples = []
    for i in range(len(data)):
        delta = x_adv[i] - data.inputs[i]
        if norm == "linf":
            pnorm = float(np.max(np.abs(delta))) if delta.size else 0.0
        else:
            pnorm = float(np.linalg.norm(delta))
        samples.append(
            SampleOutcome(
                index=i,
                true_label=int(data.labels[i]),
                clean_label=int(clean_labels[i]),
                adversarial_label=int(adv_labels[i]),
                success=bool(adv_labels[i] != data.labels[i]),
                perturbation_norm=pnorm,
                iterations=int(iterations[i]),
            )
        )
    clean_acc = float(np.mean(clean_labels == data.labels)) if len(data) else 0.0
    adv_acc = float(np.mean(adv_labels == data.labels)) if len(data) else 0.0
    return AttackReport(
        attack=attack,
        model=model_label,
        epsilon=epsilon,
        norm=norm,
        samples=samples,
        clean_accuracy=clean_acc,
        adversarial_accuracy=adv_acc,
        config=config,
    )


def _predict_each(model: Classifier, xs) -> np.ndarray:
    return np.array([predict(model, x)[0] for x in xs], dtype=np.int64)


def attack_dataset(
    model: Classifier,
    data: Dataset,
    config,
    rng=None,
    model_label="model",
    seed: int = 0,
) -> AttackReport:
    """Run one configured attack over a dataset and pack an AttackReport.

    Gradient attacks are crafted in one batch; final predictions (clean and
    adversarial) are evaluated per sample.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    clean_labels = _predict_each(model, data.inputs)
    if isinstance(config, FgsmConfig):
        x_adv = fgsm(model, data.inputs, data.labels, config)
        iters = np.ones(len(data), dtype=np.int64)
        attack, norm, eps = "fgsm", "linf", config.epsilon
    elif isinstance(config, PgdConfig):
        x_adv = pgd(model, data.inputs, data.labels, config, rng)
        iters = np.full(len(data), config.iters, dtype=np.int64)
        attack, norm, eps = "pgd", "linf", config.epsilon
    elif isinstance(config, Di2FgsmConfig):
        x_adv = di2_fgsm(model, data.inputs, data.labels, config, rng)
        iters = np.full(len(data), config.iters, dtype=np.int64)
        attack, norm, eps = "di2_fgsm", "linf", config.epsilon
    elif isinstance(config, BoundaryConfig):
        x_adv = np.empty_like(data.inputs)
        iters = np.full(len(data), config.queries, dtype=np.int64)
        for i in range(len(data)):
            sample_seed = int(rng.integers(0, 2**63 - 1))
            x_adv[i], _ = boundary_attack(
                model, data.inputs[i], int(data.labels[i]), config, sample_seed
            )
        attack, norm, eps = "boundary", "l2", None
    else:
        raise ContractError(f"unknown attack config {type(config).__name__}")
    adv_labels = _predict_each(model, x_adv)
    return _assemble_report(
        attack, model_label, eps, norm, data, x_adv, clean_labels, adv_labels,
        iters, config_echo(config),
    )


def transfer_attack(
    surrogate: Classifier,
    target: Classifier,
    data: Dataset,
    config: FgsmConfig,
    model_label="target",
) -> AttackReport:
    """FGSM examples crafted on the surrogate, evaluated on the target."""
    if surrogate.input_dim != target.input_dim:
        raise DimensionError("surrogate and target input spaces differ")
    x_adv = fgsm(surrogate, data.inputs, data.labels, config)
    clean_labels = _predict_each(target, data.inputs)
    adv_labels = _predict_each(target, x_adv)
    iters = np.ones(len(data), dtype=np.int64)
    report = _assemble_report(
        "transfer_fgsm", model_label, config.epsilon, "linf", data, x_adv,
        clean_labels, adv_labels, iters, config_echo(config),
    )
    return report
