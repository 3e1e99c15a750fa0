"""Classifier architectures assembled from vector fields and solver blocks.

A classifier is a chain of shape-preserving feature blocks topped by a
linear head.  Feature blocks are discretizations of the same underlying
continuous picture: residual chains (Euler with step h), adaptive-solver
blocks, PolyInception, Fractal and reversible-coupling variants.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .errors import ContractError, DimensionError, FormatError, NumericError
from . import netcore
from .netcore import (
    DenseLayer,
    GradientTape,
    IDENTITY,
    TIME_APPEND,
    TIME_IGNORE,
    VectorField,
    check_finite,
    make_dense,
    make_mlp_field,
    value_of,
)
from . import solvers
from .solvers import (
    EULER,
    SolverConfig,
    Trajectory,
    integrate_adaptive,
    integrate_fixed,
    integrate_on_grid,
    poly_inception_apply,
    fractal_expand,
    revnet_couple,
)

BLOCK_KINDS = ("residual", "neural_ode", "poly", "fractal", "rev")

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class BlockSpec:
    """Hyper-shape of one feature block (parameters live in the block)."""

    kind: str
    depth: int = 1
    h: float = 1.0
    columns: int = 1
    width: int = 32
    time_mode: str | None = None
    solver: SolverConfig | None = None

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ContractError(f"unknown block kind {self.kind!r}")
        if self.depth < 1:
            raise ContractError("depth must be >= 1")
        if self.kind == "residual" and self.h <= 0:
            raise ContractError("residual step size h must be positive")
        if self.kind == "fractal" and self.columns < 1:
            raise ContractError("fractal columns must be >= 1")
        if self.kind == "neural_ode":
            if self.solver is None:
                raise ContractError("neural_ode blocks need a SolverConfig")
            if not self.solver.is_adaptive:
                raise ContractError("neural_ode blocks need an adaptive solver")
        if self.time_mode is None:
            self.time_mode = TIME_APPEND if self.kind == "neural_ode" else TIME_IGNORE
        if self.kind == "poly" and self.time_mode != TIME_IGNORE:
            raise ContractError("poly blocks require autonomous fields")


def _solver_to_dict(config: SolverConfig | None):
    if config is None:
        return None
    return {
        "method": config.method,
        "t0": config.t0,
        "t1": config.t1,
        "h": config.h,
        "rtol": config.rtol,
        "atol": config.atol,
        "max_steps": config.max_steps,
        "h_min": config.h_min,
        "h_max": config.h_max,
    }


def _solver_from_dict(data):
    if data is None:
        return None
    return SolverConfig(**data)


def _spec_to_dict(spec: BlockSpec):
    return {
        "kind": spec.kind,
        "depth": spec.depth,
        "h": spec.h,
        "columns": spec.columns,
        "width": spec.width,
        "time_mode": spec.time_mode,
        "solver": _solver_to_dict(spec.solver),
    }


def _spec_from_dict(data):
    data = dict(data)
    data["solver"] = _solver_from_dict(data.get("solver"))
    return BlockSpec(**data)


# ---------------------------------------------------------------------------
# Feature blocks
# ---------------------------------------------------------------------------


class ResidualBlock:
    """depth repeats of y <- y + h * f(y): forward Euler with step h."""

    def __init__(self, spec: BlockSpec, field: VectorField):
        self.spec = spec
        self.field = field

    @property
    def dim(self):
        return self.field.state_dim

    def _config(self):
        return SolverConfig(
            method="euler",
            t0=0.0,
            t1=self.spec.depth * self.spec.h,
            h=self.spec.h,
        )

    def forward(self, x, tape=None, probe=None):
        traj = integrate_fixed(self.field, self._config(), x, tape)
        if probe is not None:
            self.field.forward(0.0, value_of(x), probe=probe)
        return traj.output_node if tape is not None else traj.final_state

    def paired_states(self, y, z):
        cfg = self._config()
        clean = integrate_fixed(self.field, cfg, y)
        noisy = integrate_fixed(self.field, cfg, z)
        return clean.states, noisy.states

    def fields(self):
        return [("field", self.field)]


class NeuralODEBlock:
    """Adaptive-solver integration of f over [t0, t1]."""

    def __init__(self, spec: BlockSpec, field: VectorField):
        self.spec = spec
        self.field = field

    @property
    def dim(self):
        return self.field.state_dim

    def forward(self, x, tape=None, probe=None):
        traj = integrate_adaptive(self.field, self.spec.solver, x, tape)
        if probe is not None:
            self.field.forward(self.spec.solver.t0, value_of(x), probe=probe)
        return traj.output_node if tape is not None else traj.final_state

    def paired_states(self, y, z):
        clean = integrate_adaptive(self.field, self.spec.solver, y)
        noisy = integrate_on_grid(
            self.field, self.spec.solver.tableau, clean.times, z
        )
        return clean.states, noisy.states

    def fields(self):
        return [("field", self.field)]


class PolyBlock:
    """depth repeats of the PolyInception combination y + F(y) + F(F(y))."""

    def __init__(self, spec: BlockSpec, field: VectorField):
        self.spec = spec
        self.field = field

    @property
    def dim(self):
        return self.field.state_dim

    def forward(self, x, tape=None, probe=None):
        y = x
        for _ in range(self.spec.depth):
            y = poly_inception_apply(self.field, y, tape)
        if probe is not None:
            self.field.forward(0.0, value_of(x), probe=probe)
        return y

    def paired_states(self, y, z):
        ys, zs = [np.asarray(y)], [np.asarray(z)]
        for _ in range(self.spec.depth):
            ys.append(poly_inception_apply(self.field, ys[-1]))
            zs.append(poly_inception_apply(self.field, zs[-1]))
        return ys, zs

    def fields(self):
        return [("field", self.field)]


class FractalBlock:
    """One application of the C-column fractal expansion."""

    def __init__(self, spec: BlockSpec, field: VectorField):
        self.spec = spec
        self.field = field

    @property
    def dim(self):
        return self.field.state_dim

    def forward(self, x, tape=None, probe=None):
        out = fractal_expand(self.field, self.spec.columns, x, tape)
        if probe is not None:
            self.field.forward(0.0, value_of(x), probe=probe)
        return out

    def paired_states(self, y, z):
        return (
            [np.asarray(y), fractal_expand(self.field, self.spec.columns, y)],
            [np.asarray(z), fractal_expand(self.field, self.spec.columns, z)],
        )

    def fields(self):
        return [("field", self.field)]


class RevBlock:
    """depth additive-coupling steps on the two halves of the state."""

    def __init__(self, spec: BlockSpec, f1: VectorField, f2: VectorField):
        self.spec = spec
        self.f1 = f1
        self.f2 = f2

    @property
    def dim(self):
        return self.f1.state_dim * 2

    def forward(self, x, tape=None, probe=None):
        a, b = netcore.split_half_op(tape, x)
        for _ in range(self.spec.depth):
            a, b = revnet_couple(self.f1, self.f2, a, b, tape)
        if probe is not None:
            xv = value_of(x)
            half = xv.shape[-1] // 2
            self.f1.forward(0.0, xv[..., half:], probe=probe)
        return netcore.concat_op(tape, a, b)

    def inverse(self, out):
        """Reconstruct the block input from its output (primal values)."""
        out = np.asarray(out, dtype=np.float64)
        half = out.shape[-1] // 2
        a, b = out[..., :half].copy(), out[..., half:].copy()
        for _ in range(self.spec.depth):
            a, b = solvers.revnet_invert(self.f1, self.f2, a, b)
        return np.concatenate([a, b], axis=-1)

    def paired_states(self, y, z):
        def run(v):
            states = [np.asarray(v)]
            a, b = netcore.split_half_op(None, np.asarray(v, dtype=np.float64))
            for _ in range(self.spec.depth):
                a, b = revnet_couple(self.f1, self.f2, a, b)
                states.append(np.concatenate([a, b], axis=-1))
            return states

        return run(y), run(z)

    def fields(self):
        return [("f1", self.f1), ("f2", self.f2)]


def instantiate_block(spec: BlockSpec, dim: int, rng: np.random.Generator):
    if spec.kind == "rev":
        if dim % 2 != 0:
            raise DimensionError("rev blocks need an even state dimension")
        half = dim // 2
        return RevBlock(
            spec,
            make_mlp_field(rng, half, spec.width, TIME_IGNORE),
            make_mlp_field(rng, half, spec.width, TIME_IGNORE),
        )
    field = make_mlp_field(rng, dim, spec.width, spec.time_mode)
    if spec.kind == "residual":
        return ResidualBlock(spec, field)
    if spec.kind == "neural_ode":
        return NeuralODEBlock(spec, field)
    if spec.kind == "poly":
        return PolyBlock(spec, field)
    if spec.kind == "fractal":
        return FractalBlock(spec, field)
    raise ContractError(f"unknown block kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------


@dataclass
class Classifier:
    """Feature blocks plus a linear logits head."""

    input_dim: int
    blocks: list
    head: DenseLayer
    class_count: int

    def __post_init__(self):
        if self.head.out_dim != self.class_count:
            raise DimensionError("head output must equal class_count")
        dim = self.input_dim
        for i, block in enumerate(self.blocks):
            if block.dim != dim:
                raise DimensionError(f"block {i} dimension {block.dim} != {dim}")
        if self.head.in_dim != dim:
            raise DimensionError("head input does not match feature dimension")

    def forward(self, x, tape=None, probe=None):
        return classifier_forward(self, x, tape, probe)

    def predict(self, x):
        return predict(self, x)

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        items = []
        for i, block in enumerate(self.blocks):
            for field_name, fld in block.fields():
                items.extend(fld.parameters(f"blocks.{i}.{field_name}"))
        items.append(("head.weights", self.head.weights))
        items.append(("head.bias", self.head.bias))
        return items


def classifier_forward(model: Classifier, x, tape: GradientTape | None = None, probe=None):
    """Logits for one sample (d,) or a batch (n, d)."""
    xv = value_of(x)
    if xv.shape[-1] != model.input_dim:
        raise DimensionError(
            f"input dimension {xv.shape[-1]} != model input {model.input_dim}"
        )
    check_finite(xv, "classifier input")
    y = x
    if tape is not None and not isinstance(y, netcore.Node):
        y = tape.watch_input(xv)
    for i, block in enumerate(model.blocks):
        try:
            y = block.forward(y, tape=tape, probe=probe)
        except NumericError as exc:
            raise type(exc)(
                f"feature block {i}: {exc}", stage=getattr(exc, "stage", None)
            ) from exc
    logits = model.head.apply(y, tape=tape, name="head", probe=probe)
    check_finite(value_of(logits), "logits")
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def predict(model: Classifier, x):
    """Label (argmax, ties to the lowest index) and softmax probabilities."""
    logits = classifier_forward(model, x)
    probs = softmax(logits)
    return int(np.argmax(logits)), probs


def predict_batch(model: Classifier, xs):
    logits = classifier_forward(model, np.asarray(xs, dtype=np.float64))
    return np.argmax(logits, axis=-1), softmax(logits)


def amplification(target, x, eps) -> float:
    """max_n ||z_n - y_n||_2 / ||eps||_2 along paired clean/perturbed runs.

    ``target`` is a Classifier (feature blocks only) or a single block.
    Adaptive blocks replay the perturbed problem on the clean accepted grid
    so states are compared at matched times.
    """
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if float(np.linalg.norm(eps)) == 0.0:
        raise ContractError("amplification needs a nonzero perturbation")
    blocks = target.blocks if isinstance(target, Classifier) else [target]
    y = x
    z = x + eps
    # the deviation that actually seeds the pair is z0 - y0 as realized
    eps_norm = float(np.linalg.norm(z - y))
    if eps_norm == 0.0:
        raise ContractError("perturbation vanished at float precision")
    ratio = 1.0
    for block in blocks:
        clean_states, noisy_states = block.paired_states(y, z)
        for cs, ns in zip(clean_states, noisy_states):
            ratio = max(ratio, float(np.linalg.norm(ns - cs)) / eps_norm)
        y = clean_states[-1]
        z = noisy_states[-1]
    return ratio


# ---------------------------------------------------------------------------
# Construction and checkpoints
# ---------------------------------------------------------------------------


def build_classifier(
    input_dim: int,
    class_count: int,
    specs: list[BlockSpec],
    rng: np.random.Generator,
) -> Classifier:
    blocks = [instantiate_block(spec, input_dim, rng) for spec in specs]
    head = make_dense(rng, input_dim, class_count, IDENTITY)
    return Classifier(input_dim, blocks, head, class_count)


def _tensor_to_json(arr: np.ndarray):
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}


def save_checkpoint(model: Classifier, path, seed: int) -> None:
    """Single JSON document; float values round-trip bit-exactly."""
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "seed": int(seed),
        "input_dim": model.input_dim,
        "class_count": model.class_count,
        "blocks": [_spec_to_dict(b.spec) for b in model.blocks],
        "tensors": {name: _tensor_to_json(arr) for name, arr in model.parameters()},
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[Classifier, int]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(
            f"unsupported checkpoint format {doc.get('format_version')!r}"
        )
    specs = [_spec_from_dict(d) for d in doc["blocks"]]
    rng = np.random.default_rng(0)  # placeholder values, overwritten below
    model = build_classifier(doc["input_dim"], doc["class_count"], specs, rng)
    tensors = doc["tensors"]
    for name, arr in model.parameters():
        if name not in tensors:
            raise FormatError(f"checkpoint missing tensor {name!r}")
        entry = tensors[name]
        data = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if data.shape != arr.shape:
            raise FormatError(f"tensor {name!r} shape mismatch")
        arr[...] = data
    return model, int(doc["seed"])
