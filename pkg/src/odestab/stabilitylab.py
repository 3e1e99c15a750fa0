"""Empirical certification of the perturbation bounds and the desk-scale
robustness experiments.

``certify_bound`` integrates paired clean/perturbed trajectories and checks
the measured worst-case deviation against c = exp((t1 - t0) * K), where K
covers both the field and the solver's stage combination.  The sweep and
gap experiments reproduce the step-size and robustness comparisons at toy
scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from . import attacks as attacks_mod
from .attacks import AttackReport, FgsmConfig, attack_dataset, transfer_attack
from .models import BlockSpec, Classifier, build_classifier, classifier_forward
from .netcore import RELU, VectorField, relu_contractivity_check
from .solvers import (
    ButcherTableau,
    SolverConfig,
    integrate_adaptive,
    integrate_fixed,
    integrate_on_grid,
)
from .training import Dataset, TrainConfig, train


# ---------------------------------------------------------------------------
# Bound certification
# ---------------------------------------------------------------------------


def solver_stage_lipschitz(tableau: ButcherTableau, h: float, field_k: float) -> float:
    """Lipschitz constant of the tableau-weighted stage combination.

    Per stage: L_i = K (1 + h * sum_j |a_ij| L_j); the combined slope map has
    constant sum_i |b_i| L_i.  For Euler this collapses to K itself.
    """
    stage_l = []
    for i in range(tableau.stages):
        inner = sum(abs(a) * stage_l[j] for j, a in enumerate(tableau.a[i]))
        stage_l.append(field_k * (1.0 + h * inner))
    return float(sum(abs(b) * l for b, l in zip(tableau.b, stage_l)))


@dataclass
class BoundCertificate:
    """Outcome of one paired-trajectory certification run."""

    lipschitz: float              # constant entering c (field + stage combination)
    field_lipschitz: float        # Lipschitz bound of f itself
    interval: tuple[float, float]
    c: float                      # exp((t1 - t0) * lipschitz)
    empirical_max_deviation: float
    epsilon_norm: float
    holds: bool
    method: str
    trials: int
    fixed_step_bound: float | None = None  # (1 + h K)^N for fixed-step configs

    def as_dict(self) -> dict:
        return {
            "lipschitz": self.lipschitz,
            "field_lipschitz": self.field_lipschitz,
            "interval": list(self.interval),
            "c": self.c,
            "empirical_max_deviation": self.empirical_max_deviation,
            "epsilon_norm": self.epsilon_norm,
            "holds": self.holds,
            "method": self.method,
            "trials": self.trials,
            "fixed_step_bound": self.fixed_step_bound,
        }

    def to_json(self, target) -> None:
        close = False
        if isinstance(target, (str, bytes)) or hasattr(target, "__fspath__"):
            target = open(target, "w")
            close = True
        try:
            json.dump(self.as_dict(), target, indent=1, sort_keys=True)
            target.write("\n")
        finally:
            if close:
                target.close()


def certify_bound(
    field,
    config: SolverConfig,
    y0,
    eps_norm: float,
    trials: int,
    rng=None,
    lipschitz: float | None = None,
) -> BoundCertificate:
    """Integrate clean and perturbed trajectories; check max_n |z_n - y_n|.

    Perturbations are ``trials`` random directions of fixed L2 norm
    ``eps_norm``.  Adaptive runs replay the perturbed problem on the clean
    accepted grid so deviations are compared at matched times.
    """
    if eps_norm <= 0:
        raise ContractError("certification needs a nonzero perturbation norm")
    if trials < 1:
        raise ContractError("trials must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    y0 = np.asarray(y0, dtype=np.float64)
    if y0.ndim != 1:
        raise ContractError("certify_bound expects one unbatched initial state")
    field_k = float(lipschitz) if lipschitz is not None else field.lipschitz_bound()

    directions = rng.standard_normal((trials, y0.shape[0]))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    z0 = y0 + eps_norm * directions / norms

    if config.is_adaptive:
        clean = integrate_adaptive(field, config, y0)
        noisy = integrate_on_grid(field, config.tableau, clean.times, z0)
        h_used = max(clean.accepted_step_sizes)
        fixed_step_bound = None
    else:
        clean = integrate_fixed(field, config, y0)
        noisy = integrate_fixed(field, config, z0)
        h_used = config.h
    k_eff = solver_stage_lipschitz(config.tableau, h_used, field_k)
    if not config.is_adaptive:
        fixed_step_bound = (1.0 + config.h * k_eff) ** config.step_count()

    max_dev = 0.0
    for ys, zs in zip(clean.states, noisy.states):
        dev = float(np.max(np.linalg.norm(zs - ys[None, :], axis=1)))
        max_dev = max(max_dev, dev)

    span = config.span
    c = math.exp(span * k_eff)
    return BoundCertificate(
        lipschitz=k_eff,
        field_lipschitz=field_k,
        interval=(config.t0, config.t1),
        c=c,
        empirical_max_deviation=max_dev,
        epsilon_norm=float(eps_norm),
        holds=bool(max_dev <= c * eps_norm + 1e-9),
        method=config.method,
        trials=trials,
        fixed_step_bound=fixed_step_bound,
    )


# ---------------------------------------------------------------------------
# Step-size sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    h: float
    clean_accuracy: float
    adv_accuracy: dict[float, float]
    converged: bool


@dataclass
class SweepResult:
    rows: list[SweepRow]
    eps_list: list[float]
    chance: float

    def __post_init__(self):
        hs = [row.h for row in self.rows]
        if any(b >= a for a, b in zip(hs, hs[1:])):
            raise ContractError("sweep step sizes must be strictly decreasing")

    def to_csv(self, target) -> None:
        close = False
        if isinstance(target, (str, bytes)) or hasattr(target, "__fspath__"):
            target = open(target, "w", newline="")
            close = True
        try:
            target.write("# sweep: step_size\n")
            cols = ["h", "clean_acc"]
            cols += [f"adv_acc@{repr(float(e))}" for e in self.eps_list]
            cols.append("converged")
            target.write(",".join(cols) + "\n")
            for row in self.rows:
                cells = [repr(float(row.h)), repr(float(row.clean_accuracy))]
                cells += [repr(float(row.adv_accuracy[e])) for e in self.eps_list]
                cells.append(str(row.converged))
                target.write(",".join(cells) + "\n")
        finally:
            if close:
                target.close()


def step_size_sweep(
    template: BlockSpec,
    data: Dataset,
    step_sizes,
    surrogate: Classifier,
    eps_list,
    budget: TrainConfig,
    test_data: Dataset,
    seed: int = 0,
) -> SweepResult:
    """Train one residual model per h under a fixed epoch budget.

    Each model is evaluated on clean test data and on transfer-FGSM examples
    crafted on the (fixed, pre-trained) surrogate at each epsilon.  A model
    counts as converged when its clean accuracy beats chance by 10 points.
    """
    if template.kind != "residual":
        raise ContractError("the sweep template must be a residual block")
    step_sizes = [float(h) for h in step_sizes]
    if any(h <= 0 for h in step_sizes):
        raise ContractError("step sizes must be positive")
    eps_list = [float(e) for e in eps_list]
    class_count = max(data.class_count, test_data.class_count)
    chance = 1.0 / class_count
    clip = data.value_range

    rows = []
    for j, h in enumerate(sorted(step_sizes, reverse=True)):
        spec = BlockSpec(
            kind="residual",
            depth=template.depth,
            h=h,
            width=template.width,
            time_mode=template.time_mode,
        )
        rng = np.random.default_rng(np.random.SeedSequence([seed, j]))
        model = build_classifier(data.inputs.shape[1], class_count, [spec], rng)
        cfg = TrainConfig(
            optimizer=budget.optimizer,
            epochs=budget.epochs,
            batch_size=budget.batch_size,
            lr_halving_period=budget.lr_halving_period,
            seed=budget.seed,
        )
        train(model, data, cfg)
        clean_acc = _batch_accuracy(model, test_data)
        adv = {}
        for eps in eps_list:
            report = transfer_attack(
                surrogate, model, test_data, FgsmConfig(epsilon=eps, clip=clip)
            )
            adv[eps] = report.adversarial_accuracy
        rows.append(
            SweepRow(
                h=h,
                clean_accuracy=clean_acc,
                adv_accuracy=adv,
                converged=bool(clean_acc >= chance + 0.1),
            )
        )
    return SweepResult(rows=rows, eps_list=eps_list, chance=chance)


def _batch_accuracy(model: Classifier, data: Dataset) -> float:
    labels = attacks_mod._predict_each(model, data.inputs)
    return float(np.mean(labels == data.labels)) if len(data) else 0.0


# ---------------------------------------------------------------------------
# Robustness gap
# ---------------------------------------------------------------------------


@dataclass
class GapRow:
    attack: str
    epsilon: float
    accuracy_a: float
    accuracy_b: float

    @property
    def gap(self) -> float:
        return self.accuracy_a - self.accuracy_b


@dataclass
class GapTable:
    name_a: str
    name_b: str
    rows: list[GapRow]

    def to_csv(self, target) -> None:
        close = False
        if isinstance(target, (str, bytes)) or hasattr(target, "__fspath__"):
            target = open(target, "w", newline="")
            close = True
        try:
            target.write(
                f"attack,epsilon,acc_{self.name_a},acc_{self.name_b},gap\n"
            )
            for r in self.rows:
                target.write(
                    f"{r.attack},{repr(float(r.epsilon))},{repr(float(r.accuracy_a))},"
                    f"{repr(float(r.accuracy_b))},{repr(float(r.gap))}\n"
                )
        finally:
            if close:
                target.close()


def robustness_gap(
    model_a: Classifier,
    model_b: Classifier,
    data: Dataset,
    attack_configs,
    names=("model_a", "model_b"),
    seed: int = 0,
) -> GapTable:
    """Adversarial accuracy of both models per attack/epsilon, plus clean row."""
    rows = [
        GapRow(
            attack="clean",
            epsilon=0.0,
            accuracy_a=_batch_accuracy(model_a, data),
            accuracy_b=_batch_accuracy(model_b, data),
        )
    ]
    for config in attack_configs:
        rng_a = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        rng_b = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        rep_a = attack_dataset(model_a, data, config, rng_a, names[0])
        rep_b = attack_dataset(model_b, data, config, rng_b, names[1])
        rows.append(
            GapRow(
                attack=config.kind,
                epsilon=getattr(config, "epsilon", 0.0) or 0.0,
                accuracy_a=rep_a.adversarial_accuracy,
                accuracy_b=rep_b.adversarial_accuracy,
            )
        )
    return GapTable(name_a=names[0], name_b=names[1], rows=rows)


# ---------------------------------------------------------------------------
# Layer-wise contractivity survey
# ---------------------------------------------------------------------------


@dataclass
class LayerSurveyRow:
    layer: str
    trials: int
    holds_fraction: float
    mean_tightness: float


def model_relu_layers(model: Classifier):
    """Named ReLU layers of every field in the model, plus the head if ReLU."""
    layers = []
    for i, block in enumerate(model.blocks):
        for field_name, fld in block.fields():
            for j, layer in enumerate(fld.layers):
                if layer.activation == RELU:
                    layers.append((f"blocks.{i}.{field_name}.layers.{j}", layer))
    if model.head.activation == RELU:
        layers.append(("head", model.head))
    return layers


def relu_bound_survey(model: Classifier, samples, trials: int, seed: int = 0):
    """Check the ReLU contractivity inequality layer-by-layer on real inputs.

    For each ReLU layer, draws ``trials`` (input, perturbation) pairs where
    the input is the layer's actual input for a random sample pushed through
    the model.  Reports the fraction of trials where the inequality holds
    (soundness demands 1.0) and the mean tightness lhs/rhs.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or len(samples) == 0:
        raise ContractError("survey needs a (n, d) sample array")
    rng = np.random.default_rng(seed)
    named = model_relu_layers(model)
    by_layer_inputs: dict[int, list[np.ndarray]] = {id(l): [] for _, l in named}
    layer_ids = set(by_layer_inputs)
    probe_count = min(len(samples), 64)
    for i in range(probe_count):
        probe: list = []
        classifier_forward(model, samples[i], probe=probe)
        for layer, x_in in probe:
            if id(layer) in layer_ids:
                by_layer_inputs[id(layer)].append(x_in)

    rows = []
    for name, layer in named:
        pool = by_layer_inputs[id(layer)]
        if not pool:
            continue
        holds_count = 0
        tightness = 0.0
        for _ in range(trials):
            x = pool[int(rng.integers(0, len(pool)))]
            direction = rng.standard_normal(x.shape)
            nd = np.linalg.norm(direction)
            if nd == 0.0:
                continue
            scale = rng.uniform(0.01, 0.1) * (1.0 + float(np.linalg.norm(x)))
            eps = direction / nd * scale
            lhs, rhs, holds = relu_contractivity_check(layer, x, eps)
            holds_count += int(holds)
            tightness += lhs / rhs if rhs > 0 else 0.0
        rows.append(
            LayerSurveyRow(
                layer=name,
                trials=trials,
                holds_fraction=holds_count / trials,
                mean_tightness=tightness / trials,
            )
        )
    return rows
