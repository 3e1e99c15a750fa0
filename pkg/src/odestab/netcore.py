"""Minimal differentiable numeric core.

Dense/ReLU layers compose into vector fields f(t, y; theta).  A reverse-mode
gradient tape records one forward pass (weight-tied re-evaluations of the
same layer accumulate into a single parameter gradient), and power-iteration
operator norms combine into Lipschitz upper bounds for whole fields.

Everything is float64.  Arrays may carry a leading batch axis; the state
axis is always the last one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, NumericError, StateError

Tensor = np.ndarray

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)

TIME_IGNORE = "ignore"
TIME_APPEND = "append_scalar"
TIME_MODES = (TIME_IGNORE, TIME_APPEND)

_POWER_ITERATION_SEED = 0x5EED


def tensor(data, shape=None) -> Tensor:
    """Build a finite float64 array (row-major), rejecting NaN/Inf."""
    arr = np.array(data, dtype=np.float64, order="C")
    if shape is not None:
        arr = arr.reshape(shape)
    return check_finite(arr, "tensor construction")


def check_finite(arr: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------

class Node:
    """One recorded operation; ``value`` is the primal result."""

    __slots__ = ("value", "parents", "vjp", "recompute")

    def __init__(self, value, parents=(), vjp=None, recompute=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp              # g -> tuple of parent cotangents
        self.recompute = recompute  # (*parent values) -> value


def value_of(x):
    """Primal array behind either a plain array or a tape node."""
    return x.value if isinstance(x, Node) else x


class GradientTape:
    """Records one forward pass for reverse-mode differentiation.

    Parameter arrays are registered identity-keyed, so a layer evaluated
    many times (residual iterations, solver stages) owns exactly one leaf
    node and its gradient contributions accumulate.  The tape must be
    finalized with the output node before ``backward``/``replay``, and
    parameters must not be mutated in between.
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self._param_nodes: dict[int, Node] = {}
        self._param_order: list[tuple[str, np.ndarray]] = []
        self._input_node: Node | None = None
        self._output_node: Node | None = None

    # -- recording ---------------------------------------------------------

    def record(self, value, parents=(), vjp=None, recompute=None) -> Node:
        node = Node(value, parents, vjp, recompute)
        self._nodes.append(node)
        return node

    def constant(self, array) -> Node:
        return self.record(np.asarray(array, dtype=np.float64))

    def watch_input(self, x) -> Node:
        if self._input_node is not None:
            raise StateError("tape already has a watched input")
        self._input_node = self.constant(x)
        return self._input_node

    def param(self, name: str, array: np.ndarray) -> Node:
        node = self._param_nodes.get(id(array))
        if node is None:
            node = self.record(array)
            self._param_nodes[id(array)] = node
            self._param_order.append((name, array))
        return node

    def finalize(self, output: Node):
        if self._output_node is not None:
            raise StateError("tape already finalized")
        if not isinstance(output, Node):
            raise ContractError("finalize() expects a recorded node")
        self._output_node = output

    @property
    def finalized(self) -> bool:
        return self._output_node is not None

    @property
    def output_value(self):
        if not self.finalized:
            raise StateError("tape not finalized")
        return self._output_node.value

    def parameter_items(self) -> list[tuple[str, np.ndarray]]:
        return list(self._param_order)

    # -- evaluation ----------------------------------------------------------

    def replay(self):
        """Re-run every recorded op from its parents; bit-identical output."""
        if not self.finalized:
            raise StateError("tape not finalized")
        values: dict[int, np.ndarray] = {}
        for node in self._nodes:
            if node.recompute is None:
                values[id(node)] = node.value
            else:
                values[id(node)] = node.recompute(
                    *(values[id(p)] for p in node.parents)
                )
        return values[id(self._output_node)]

    def backward(self, upstream):
        """Cotangents of the output w.r.t. the watched input and parameters.

        Returns ``(input_grad, param_grads)`` where ``param_grads`` follows
        parameter registration order (see ``parameter_items``).
        """
        if not self.finalized:
            raise StateError("backward() called on an unfinalized tape")
        out_val = self._output_node.value
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != np.shape(out_val):
            raise DimensionError(
                f"upstream shape {upstream.shape} != output shape {np.shape(out_val)}"
            )
        grads: dict[int, np.ndarray] = {id(self._output_node): upstream}
        for node in reversed(self._nodes):
            g = grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        input_grad = None
        if self._input_node is not None:
            input_grad = grads.get(id(self._input_node))
            if input_grad is None:
                input_grad = np.zeros_like(self._input_node.value)
        param_grads = []
        for _, array in self._param_order:
            pg = grads.get(id(self._param_nodes[id(array)]))
            param_grads.append(np.zeros_like(array) if pg is None else pg)
        return input_grad, param_grads


def backward(tape: GradientTape, upstream):
    """Module-level alias for ``tape.backward(upstream)``."""
    return tape.backward(upstream)


# ---------------------------------------------------------------------------
# Primitive ops (tape-aware: pass tape=None for plain numpy)
# ---------------------------------------------------------------------------

def _combine(base, coeffs, terms):
    acc = coeffs[0] * terms[0]
    for c, t in zip(coeffs[1:], terms[1:]):
        acc = acc + c * t
    if base is not None:
        acc = base + acc
    return acc


def lincomb(tape, base, coeffs, terms):
    """``base + sum(c_i * term_i)`` (base may be None)."""
    coeffs = tuple(float(c) for c in coeffs)
    if tape is None:
        return _combine(base, coeffs, terms)
    parents = tuple(terms) if base is None else (base, *terms)

    def vjp(g):
        term_grads = tuple(c * g for c in coeffs)
        return term_grads if base is None else (g, *term_grads)

    def recompute(*vals):
        if base is None:
            return _combine(None, coeffs, vals)
        return _combine(vals[0], coeffs, vals[1:])

    value = recompute(*(p.value for p in parents))
    return tape.record(value, parents, vjp, recompute)


def add(tape, a, b):
    return lincomb(tape, a, (1.0,), (b,))


def _affine(x, weights, bias):
    return x @ weights.T + bias


def affine_op(tape, x, layer, name):
    if tape is None:
        return _affine(x, layer.weights, layer.bias)
    w_node = tape.param(f"{name}.weights", layer.weights)
    b_node = tape.param(f"{name}.bias", layer.bias)
    xv = x.value
    weights = layer.weights
    if xv.ndim == 1:
        def vjp(g):
            return (weights.T @ g, np.outer(g, xv), g)
    else:
        def vjp(g):
            return (g @ weights, g.T @ xv, g.sum(axis=0))

    value = _affine(xv, weights, layer.bias)
    return tape.record(value, (x, w_node, b_node), vjp, _affine)


def relu_op(tape, x):
    if tape is None:
        return np.maximum(x, 0.0)
    xv = x.value
    mask = xv > 0.0  # subgradient at 0 is 0
    return tape.record(
        np.maximum(xv, 0.0),
        (x,),
        lambda g: (g * mask,),
        lambda v: np.maximum(v, 0.0),
    )


def _append_time(t, y):
    if y.ndim == 1:
        return np.concatenate([y, np.array([t])])
    return np.concatenate([y, np.full((y.shape[0], 1), t)], axis=1)


def append_time_op(tape, t, y):
    t = float(t)
    if tape is None:
        return _append_time(t, y)
    yv = y.value
    if yv.ndim == 1:
        vjp = lambda g: (g[:-1],)
    else:
        vjp = lambda g: (g[:, :-1],)
    return tape.record(
        _append_time(t, yv), (y,), vjp, lambda v: _append_time(t, v)
    )


def split_half_op(tape, x):
    """Split the last axis into two equal halves."""
    xv = value_of(x)
    d = xv.shape[-1]
    if d % 2 != 0:
        raise DimensionError(f"cannot split odd dimension {d} in half")
    half = d // 2
    if tape is None:
        return x[..., :half].copy(), x[..., half:].copy()
    left = tape.record(
        xv[..., :half].copy(),
        (x,),
        lambda g: (np.concatenate(
            [g, np.zeros_like(g)], axis=-1),),
        lambda v: v[..., :half].copy(),
    )
    right = tape.record(
        xv[..., half:].copy(),
        (x,),
        lambda g: (np.concatenate(
            [np.zeros_like(g), g], axis=-1),),
        lambda v: v[..., half:].copy(),
    )
    return left, right


def concat_op(tape, a, b):
    """Concatenate along the last axis."""
    if tape is None:
        return np.concatenate([a, b], axis=-1)
    av, bv = a.value, b.value
    da = av.shape[-1]
    return tape.record(
        np.concatenate([av, bv], axis=-1),
        (a, b),
        lambda g: (g[..., :da], g[..., da:]),
        lambda x, y: np.concatenate([x, y], axis=-1),
    )


# ---------------------------------------------------------------------------
# Layers and fields
# ---------------------------------------------------------------------------

@dataclass
class DenseLayer:
    """Affine map with an optional ReLU: act(W x + b)."""

    weights: Tensor
    bias: Tensor
    activation: str = RELU

    def __post_init__(self):
        self.weights = tensor(self.weights)
        self.bias = tensor(self.bias)
        if self.weights.ndim != 2:
            raise DimensionError("weights must be a (out, in) matrix")
        if self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match "
                f"{self.weights.shape[0]} outputs"
            )
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def apply(self, x, tape=None, name="layer", probe=None):
        if probe is not None:
            probe.append((self, np.array(value_of(x), copy=True)))
        z = affine_op(tape, x, self, name)
        if self.activation == RELU:
            z = relu_op(tape, z)
        return z

    def operator_norm(self) -> float:
        return operator_norm(self.weights)


@dataclass
class VectorField:
    """Parametric map f(t, y; theta) built from a chain of dense layers.

    ``time_mode`` controls how t enters: "ignore" for autonomous fields,
    "append_scalar" to concatenate t as one extra input feature.  The output
    dimension must equal the state dimension so that y + h*f(t, y) is
    well-formed.
    """

    layers: list[DenseLayer]
    time_mode: str = TIME_IGNORE

    def __post_init__(self):
        if not self.layers:
            raise ContractError("vector field needs at least one layer")
        if self.time_mode not in TIME_MODES:
            raise ContractError(f"unknown time_mode {self.time_mode!r}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.in_dim != prev.out_dim:
                raise DimensionError(
                    f"layer input {nxt.in_dim} != previous output {prev.out_dim}"
                )
        extra = 1 if self.time_mode == TIME_APPEND else 0
        state_dim = self.layers[0].in_dim - extra
        if state_dim <= 0:
            raise DimensionError("field input dimension too small for time_mode")
        if self.layers[-1].out_dim != state_dim:
            raise DimensionError(
                f"field output dimension {self.layers[-1].out_dim} "
                f"must equal state dimension {state_dim}"
            )

    @property
    def state_dim(self) -> int:
        extra = 1 if self.time_mode == TIME_APPEND else 0
        return self.layers[0].in_dim - extra

    def forward(self, t, y, tape=None, name="field", probe=None):
        t = float(t)
        if not math.isfinite(t):
            raise NumericError("non-finite time passed to field")
        yv = value_of(y)
        if yv.shape[-1] != self.state_dim:
            raise DimensionError(
                f"state dimension {yv.shape[-1]} != field dimension {self.state_dim}"
            )
        check_finite(yv, "field input")
        h = y
        if self.time_mode == TIME_APPEND:
            h = append_time_op(tape, t, h)
        for i, layer in enumerate(self.layers):
            h = layer.apply(h, tape=tape, name=f"{name}.layers.{i}", probe=probe)
        return h

    def parameters(self, prefix="field") -> list[tuple[str, Tensor]]:
        items = []
        for i, layer in enumerate(self.layers):
            items.append((f"{prefix}.layers.{i}.weights", layer.weights))
            items.append((f"{prefix}.layers.{i}.bias", layer.bias))
        return items

    def lipschitz_bound(self) -> float:
        return lipschitz_upper_bound(self).bound


class CallableField:
    """Adapter exposing a plain ``f(t, y)`` callable as a vector field.

    Used by the stability lab for analytic fields (sin, linear maps) whose
    Lipschitz constant is known in closed form.  Not differentiable.
    """

    def __init__(self, fn, state_dim, lipschitz=None, name="callable"):
        self._fn = fn
        self._state_dim = int(state_dim)
        self._lipschitz = lipschitz
        self.name = name
        self.time_mode = TIME_IGNORE

    @property
    def state_dim(self) -> int:
        return self._state_dim

    def forward(self, t, y, tape=None, name=None, probe=None):
        if tape is not None:
            raise ContractError("callable fields are not differentiable")
        yv = value_of(y)
        if yv.shape[-1] != self._state_dim:
            raise DimensionError(
                f"state dimension {yv.shape[-1]} != field dimension {self._state_dim}"
            )
        return np.asarray(self._fn(float(t), yv), dtype=np.float64)

    def lipschitz_bound(self) -> float:
        if self._lipschitz is None:
            raise ContractError(
                f"field {self.name!r} has no declared Lipschitz constant"
            )
        return float(self._lipschitz)


def forward(field, t, y):
    """Evaluate f(t, y); deterministic for fixed inputs."""
    return field.forward(t, y)


# ---------------------------------------------------------------------------
# Operator norms and Lipschitz bounds
# ---------------------------------------------------------------------------

def operator_norm(matrix, iterations=50, tol=1e-8) -> float:
    """Largest singular value of ``matrix`` by power iteration.

    Runs at most ``iterations`` rounds, stopping early once the estimate's
    relative change drops below ``tol``.  The start vector is drawn from a
    fixed seed, so the result is deterministic.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise DimensionError("operator_norm expects a matrix")
    rng = np.random.default_rng(_POWER_ITERATION_SEED)
    v = rng.standard_normal(matrix.shape[1])
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return 0.0
    v /= nv
    estimate = 0.0
    for _ in range(iterations):
        w = matrix @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        u = matrix.T @ w
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return float(nw)
        new_estimate = nu / nw
        v = u / nu
        if estimate > 0.0 and abs(new_estimate - estimate) <= tol * estimate:
            estimate = new_estimate
            break
        estimate = new_estimate
    return float(estimate)


@dataclass(frozen=True)
class LipschitzEstimate:
    """Per-layer operator norms and their product bound K."""

    layer_norms: tuple[float, ...]
    bound: float

    def __post_init__(self):
        prod = math.prod(self.layer_norms)
        if not math.isclose(prod, self.bound, rel_tol=1e-12, abs_tol=1e-300):
            raise ContractError("bound must equal the product of layer norms")


def lipschitz_upper_bound(field: VectorField) -> LipschitzEstimate:
    """Product-of-operator-norms bound: ||f(t,a)-f(t,b)|| <= K ||a-b||.

    ReLU is 1-Lipschitz, so each layer contributes at most its weight
    matrix's spectral norm.  For time-appending fields the first layer's
    time column is constant in y and is excluded.
    """
    norms = []
    for i, layer in enumerate(field.layers):
        w = layer.weights
        if i == 0 and field.time_mode == TIME_APPEND:
            w = w[:, : field.state_dim]
        norms.append(operator_norm(w))
    return LipschitzEstimate(tuple(norms), math.prod(norms))


def relu_contractivity_check(layer: DenseLayer, x: Tensor, eps: Tensor):
    """Check ||g(x) - g(x+eps)|| <= ||W|| * ||eps|| for a ReLU layer.

    Returns ``(lhs, rhs, holds)``.
    """
    if layer.activation != RELU:
        raise ContractError("contractivity check applies to ReLU layers only")
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    clean = np.maximum(_affine(x, layer.weights, layer.bias), 0.0)
    noisy = np.maximum(_affine(x + eps, layer.weights, layer.bias), 0.0)
    lhs = float(np.linalg.norm(clean - noisy))
    rhs = float(layer.operator_norm() * np.linalg.norm(eps))
    return lhs, rhs, lhs <= rhs + 1e-12


# ---------------------------------------------------------------------------
# Initialization helpers
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> Tensor:
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


def make_dense(rng, in_dim, out_dim, activation=RELU) -> DenseLayer:
    return DenseLayer(
        weights=glorot_uniform(rng, out_dim, in_dim),
        bias=np.zeros(out_dim),
        activation=activation,
    )


def make_mlp_field(rng, state_dim, width, time_mode=TIME_IGNORE) -> VectorField:
    """Two-layer field: state -> width (ReLU) -> state (identity)."""
    extra = 1 if time_mode == TIME_APPEND else 0
    return VectorField(
        layers=[
            make_dense(rng, state_dim + extra, width, RELU),
            make_dense(rng, width, state_dim, IDENTITY),
        ],
        time_mode=time_mode,
    )
