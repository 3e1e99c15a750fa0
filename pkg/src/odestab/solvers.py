"""Runge-Kutta integrators over vector fields.

Fixed-step Euler/Heun/RK4, embedded adaptive pairs (RKF45, DOPRI5), and the
three skip-connection discretization schemes: PolyInception truncation of
backward Euler, the Fractal expansion rule, and reversible additive coupling.

Both embedded pairs propagate the lower-order member of the pair, so the
h * sum((b_i - bhat_i) * k_i) estimate tracks the true local error of the
solution that is actually advanced.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .errors import BudgetError, ContractError, DimensionError, NumericError, StiffnessError
from .netcore import GradientTape, Node, check_finite, lincomb, add, value_of

# ---------------------------------------------------------------------------
# Butcher tableaus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ButcherTableau:
    """Explicit Runge-Kutta coefficients.

    ``a[i]`` holds exactly i entries (strictly lower triangular), ``b`` the
    propagated weights, ``b_hat`` the optional companion weights used for the
    embedded error estimate.
    """

    name: str
    a: tuple[tuple[float, ...], ...]
    b: tuple[float, ...]
    c: tuple[float, ...]
    order: int
    b_hat: tuple[float, ...] | None = None
    embedded_order: int | None = None

    def __post_init__(self):
        s = len(self.b)
        if len(self.a) != s or len(self.c) != s:
            raise ContractError(f"{self.name}: a, b, c must share the stage count")
        for i, row in enumerate(self.a):
            if len(row) != i:
                raise ContractError(
                    f"{self.name}: stage {i} must have exactly {i} coefficients "
                    "(explicit tableau)"
                )
        if abs(math.fsum(self.b) - 1.0) > 1e-12:
            raise ContractError(f"{self.name}: propagated weights must sum to 1")
        if self.b_hat is not None:
            if len(self.b_hat) != s:
                raise ContractError(f"{self.name}: b_hat length mismatch")
            if abs(math.fsum(self.b_hat) - 1.0) > 1e-12:
                raise ContractError(f"{self.name}: embedded weights must sum to 1")
            if self.embedded_order is None:
                raise ContractError(f"{self.name}: embedded order missing")
        for i, row in enumerate(self.a):
            if abs(math.fsum(row) - self.c[i]) > 1e-12:
                raise ContractError(
                    f"{self.name}: node c[{i}] != row sum of a[{i}]"
                )

    @property
    def stages(self) -> int:
        return len(self.b)

    @property
    def is_embedded(self) -> bool:
        return self.b_hat is not None


EULER = ButcherTableau(
    name="euler",
    a=((),),
    b=(1.0,),
    c=(0.0,),
    order=1,
)

HEUN = ButcherTableau(
    name="heun",
    a=((), (1.0,)),
    b=(0.5, 0.5),
    c=(0.0, 1.0),
    order=2,
)

RK4 = ButcherTableau(
    name="rk4",
    a=((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
    b=(1 / 6, 1 / 3, 1 / 3, 1 / 6),
    c=(0.0, 0.5, 0.5, 1.0),
    order=4,
)

# Fehlberg 4(5): fourth-order solution advanced, fifth-order companion.
RKF45 = ButcherTableau(
    name="rkf45",
    a=(
        (),
        (1 / 4,),
        (3 / 32, 9 / 32),
        (1932 / 2197, -7200 / 2197, 7296 / 2197),
        (439 / 216, -8.0, 3680 / 513, -845 / 4104),
        (-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40),
    ),
    b=(25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0),
    c=(0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2),
    order=4,
    b_hat=(16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55),
    embedded_order=5,
)

# Dormand-Prince 5(4): fourth-order row advanced, fifth-order companion.
DOPRI5 = ButcherTableau(
    name="dopri5",
    a=(
        (),
        (1 / 5,),
        (3 / 40, 9 / 40),
        (44 / 45, -56 / 15, 32 / 9),
        (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
        (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
        (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
    ),
    b=(5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40),
    c=(0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0),
    order=4,
    b_hat=(35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0),
    embedded_order=5,
)

TABLEAUS = {t.name: t for t in (EULER, HEUN, RK4, RKF45, DOPRI5)}
FIXED_METHODS = ("euler", "heun", "rk4")
ADAPTIVE_METHODS = ("rkf45", "dopri5")


# ---------------------------------------------------------------------------
# Solver configuration and trajectories
# ---------------------------------------------------------------------------


@dataclass
class SolverConfig:
    """Integration method, interval and step/tolerance settings."""

    method: str
    t0: float = 0.0
    t1: float = 1.0
    h: float | None = None
    rtol: float | None = None
    atol: float | None = None
    max_steps: int = 100_000
    h_min: float = 1e-12
    h_max: float | None = None

    def __post_init__(self):
        if self.method not in TABLEAUS:
            raise ContractError(f"unknown method {self.method!r}")
        self.t0 = float(self.t0)
        self.t1 = float(self.t1)
        if not (self.t1 > self.t0):
            raise ContractError("t1 must exceed t0")
        if self.max_steps < 1:
            raise ContractError("max_steps must be positive")
        if self.h_min <= 0:
            raise ContractError("h_min must be positive")
        if self.h_max is not None and self.h_max <= 0:
            raise ContractError("h_max must be positive")
        if self.is_adaptive:
            if self.rtol is None or self.atol is None:
                raise ContractError(f"{self.method} needs rtol and atol")
            if self.rtol <= 0 or self.atol <= 0:
                raise ContractError("rtol and atol must be positive")
        else:
            if self.h is None:
                raise ContractError(f"{self.method} needs a step size h")
            if self.h <= 0:
                raise ContractError("h must be positive")
            if self.h > self.span:
                raise ContractError("h must not exceed the interval length")

    @property
    def span(self) -> float:
        return self.t1 - self.t0

    @property
    def is_adaptive(self) -> bool:
        return self.method in ADAPTIVE_METHODS

    @property
    def tableau(self) -> ButcherTableau:
        return TABLEAUS[self.method]

    def step_count(self) -> int:
        """N(h) = ceil(span / h), robust to float ratios a hair above an integer."""
        if self.is_adaptive:
            raise ContractError("step_count is defined for fixed-step configs")
        ratio = self.span / self.h
        return max(1, int(math.ceil(ratio - 1e-12 * max(1.0, ratio))))


@dataclass
class Trajectory:
    """Discrete states y_n at strictly increasing times t_n."""

    times: list[float]
    states: list[np.ndarray]
    accepted_step_sizes: list[float]
    rejected_step_count: int = 0
    output_node: Node | None = None

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def final_time(self) -> float:
        return self.times[-1]

    def to_csv(self, target) -> None:
        """Write columns t, state_0..state_{d-1}, h_accepted.

        The h column carries the step size that produced each row; the
        initial row gets 0.0.
        """
        if self.states[0].ndim != 1:
            raise ContractError("CSV export requires unbatched (1-d) states")
        close = False
        if isinstance(target, (str, bytes)) or hasattr(target, "__fspath__"):
            target = open(target, "w", newline="")
            close = True
        try:
            d = self.states[0].shape[0]
            header = ["t"] + [f"state_{i}" for i in range(d)] + ["h_accepted"]
            target.write(",".join(header) + "\n")
            steps = [0.0] + list(self.accepted_step_sizes)
            for t, y, h in zip(self.times, self.states, steps):
                row = [repr(float(t))] + [repr(float(v)) for v in y] + [repr(float(h))]
                target.write(",".join(row) + "\n")
        finally:
            if close:
                target.close()


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------


def rk_step(tableau: ButcherTableau, field, t, y, h, tape: GradientTape | None = None):
    """One explicit RK step.

    Returns ``(y_next, err_estimate)``; the estimate is None unless the
    tableau carries companion weights, in which case it equals
    h * sum((b_i - bhat_i) * k_i), computed on primal values only.
    """
    h = float(h)
    if h <= 0:
        raise ContractError("step size must be positive")
    stages = []
    for i in range(tableau.stages):
        if i == 0:
            yi = y
        else:
            coeffs = []
            terms = []
            for j, aij in enumerate(tableau.a[i]):
                if aij != 0.0:
                    coeffs.append(h * aij)
                    terms.append(stages[j])
            yi = lincomb(tape, y, coeffs, terms) if coeffs else y
        k = field.forward(t + tableau.c[i] * h, yi, tape=tape)
        kv = value_of(k)
        if not np.all(np.isfinite(kv)):
            raise NumericError(f"non-finite value in stage {i}", stage=i)
        stages.append(k)
    coeffs = []
    terms = []
    for i, bi in enumerate(tableau.b):
        if bi != 0.0:
            coeffs.append(h * bi)
            terms.append(stages[i])
    y_next = lincomb(tape, y, coeffs, terms) if coeffs else y
    err = None
    if tableau.is_embedded:
        err = np.zeros_like(value_of(stages[0]))
        for bi, bhi, k in zip(tableau.b, tableau.b_hat, stages):
            diff = bi - bhi
            if diff != 0.0:
                err = err + diff * value_of(k)
        err = h * err
    return y_next, err


def _wrap_initial(y0, tape):
    y0v = value_of(y0)
    check_finite(y0v, "initial state")
    if tape is not None and not isinstance(y0, Node):
        return tape.constant(y0)
    return y0


def integrate_fixed(field, config: SolverConfig, y0, tape: GradientTape | None = None) -> Trajectory:
    """Equidistant steps from t0 to t1; the last step is shortened to land on t1."""
    if config.is_adaptive:
        raise ContractError(f"{config.method} is not a fixed-step method")
    n = config.step_count()
    if n > config.max_steps:
        raise BudgetError(f"{n} steps exceed max_steps={config.max_steps}")
    tableau = config.tableau
    y = _wrap_initial(y0, tape)
    times = [config.t0]
    states = [np.array(value_of(y), copy=True)]
    steps: list[float] = []
    for i in range(n):
        t_i = config.t0 + i * config.h
        if i == n - 1:
            h_i = config.t1 - t_i
            t_next = config.t1
        else:
            h_i = config.h
            t_next = config.t0 + (i + 1) * config.h
        y, _ = rk_step(tableau, field, t_i, y, h_i, tape)
        times.append(t_next)
        states.append(np.array(value_of(y), copy=True))
        steps.append(h_i)
    return Trajectory(times, states, steps, 0, y if tape is not None else None)


def _scaled_error(err, yv, ynv, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(yv), np.abs(ynv))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def integrate_adaptive(field, config: SolverConfig, y0, tape: GradientTape | None = None) -> Trajectory:
    """Embedded-pair integration with accept/shrink/grow step control.

    Accepted steps always satisfy the mixed-tolerance contract
    RMS(err / (atol + rtol * max(|y|, |y_next|))) <= 1.
    """
    if not config.is_adaptive:
        raise ContractError(f"{config.method} is not an adaptive method")
    tableau = config.tableau
    exponent = 1.0 / (tableau.embedded_order + 1.0)
    span = config.span
    h_cap = min(config.h_max, span) if config.h_max is not None else span
    h = min(max(span / 100.0, config.h_min), h_cap)
    y = _wrap_initial(y0, tape)
    t = config.t0
    times = [config.t0]
    states = [np.array(value_of(y), copy=True)]
    steps: list[float] = []
    rejected = 0
    attempts = 0
    while t < config.t1:
        attempts += 1
        if attempts > config.max_steps:
            raise BudgetError(
                f"adaptive integration exceeded max_steps={config.max_steps}"
            )
        remaining = config.t1 - t
        last = h >= remaining
        h_try = remaining if last else h
        y_next, err = rk_step(tableau, field, t, y, h_try, tape)
        scaled = _scaled_error(err, value_of(y), value_of(y_next), config.rtol, config.atol)
        if scaled == 0.0:
            factor = 5.0
        else:
            factor = min(5.0, max(0.2, 0.9 * (1.0 / scaled) ** exponent))
        if scaled <= 1.0:
            t = config.t1 if last else t + h_try
            times.append(t)
            states.append(np.array(value_of(y_next), copy=True))
            steps.append(h_try)
            y = y_next
            h = min(max(h_try * factor, config.h_min), h_cap)
        else:
            rejected += 1
            h_new = h_try * factor
            if h_new < config.h_min:
                raise StiffnessError(
                    f"step size {h_new:.3e} fell below h_min={config.h_min:.3e} "
                    f"at t={t:.6g}"
                )
            h = h_new
    return Trajectory(times, states, steps, rejected, y if tape is not None else None)


def integrate_on_grid(field, tableau: ButcherTableau, times, y0, tape: GradientTape | None = None) -> Trajectory:
    """Integrate on a prescribed strictly-increasing time grid (no error control).

    Used to replay a perturbed problem on the accepted grid of a clean
    trajectory, and to differentiate through a frozen step sequence.
    """
    times = [float(t) for t in times]
    if len(times) < 2:
        raise ContractError("grid needs at least two times")
    for a, b in zip(times, times[1:]):
        if not b > a:
            raise ContractError("grid times must be strictly increasing")
    y = _wrap_initial(y0, tape)
    states = [np.array(value_of(y), copy=True)]
    steps = []
    for t_cur, t_next in zip(times, times[1:]):
        y, _ = rk_step(tableau, field, t_cur, y, t_next - t_cur, tape)
        states.append(np.array(value_of(y), copy=True))
        steps.append(t_next - t_cur)
    return Trajectory(list(times), states, steps, 0, y if tape is not None else None)


def integrate(field, config: SolverConfig, y0, tape: GradientTape | None = None) -> Trajectory:
    if config.is_adaptive:
        return integrate_adaptive(field, config, y0, tape)
    return integrate_fixed(field, config, y0, tape)


# ---------------------------------------------------------------------------
# Skip-connection discretization schemes
# ---------------------------------------------------------------------------


def _require_autonomous(field, what):
    if getattr(field, "time_mode", None) != "ignore":
        raise ContractError(f"{what} requires an autonomous (time-ignoring) field")


def poly_inception_apply(field, y, tape: GradientTape | None = None):
    """PolyInception combination y + F(y) + F(F(y)) (unit step, no h)."""
    _require_autonomous(field, "poly_inception_apply")
    if tape is not None and not isinstance(y, Node):
        y = tape.constant(y)
    fy = field.forward(0.0, y, tape=tape)
    ffy = field.forward(0.0, fy, tape=tape)
    return lincomb(tape, y, (1.0, 1.0), (fy, ffy))


def backward_euler_linear(A, y, h):
    """Solve one backward-Euler step (I - hA) y_next = y for a linear field."""
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError("A must be square")
    if y.shape[-1] != A.shape[0] and y.shape[0] != A.shape[0]:
        raise DimensionError("state dimension does not match A")
    system = np.eye(A.shape[0]) - float(h) * A
    try:
        y_next = np.linalg.solve(system, y)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular backward-Euler system: {exc}") from exc
    residual = float(np.max(np.abs(system @ y_next - y)))
    if residual > 1e-10:
        raise NumericError(f"backward-Euler residual {residual:.3e} exceeds 1e-10")
    return y_next


def fractal_expand(f1, columns: int, y, tape: GradientTape | None = None):
    """Fractal expansion rule f_{C+1} = (f_C o f_C)/2 + f_1/2, base f_1.

    Evaluates f_1 exactly 2^C - 1 times; depth is capped because the cost is
    exponential in C.
    """
    if columns < 1:
        raise ContractError("columns must be >= 1")
    if columns > 16:
        raise BudgetError(f"fractal depth {columns} exceeds the supported 16")
    _require_autonomous(f1, "fractal_expand")
    if tape is not None and not isinstance(y, Node):
        y = tape.constant(y)

    def expand(c, v):
        if c == 1:
            return f1.forward(0.0, v, tape=tape)
        inner = expand(c - 1, v)
        outer = expand(c - 1, inner)
        base = f1.forward(0.0, v, tape=tape)
        return lincomb(tape, None, (0.5, 0.5), (outer, base))

    return expand(columns, y)


def revnet_couple(f1, f2, x, y, tape: GradientTape | None = None):
    """Additive coupling x' = x + f1(y); y' = y + f2(x')."""
    if tape is not None:
        if not isinstance(x, Node):
            x = tape.constant(x)
        if not isinstance(y, Node):
            y = tape.constant(y)
    x_next = add(tape, x, f1.forward(0.0, y, tape=tape))
    y_next = add(tape, y, f2.forward(0.0, x_next, tape=tape))
    return x_next, y_next


def revnet_invert(f1, f2, x_next, y_next):
    """Exact inverse of ``revnet_couple`` (primal values only)."""
    y = y_next - f2.forward(0.0, x_next)
    x = x_next - f1.forward(0.0, y)
    return x, y
