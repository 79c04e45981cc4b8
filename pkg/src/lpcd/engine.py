"""Layer-projected coordinate descent over a tuple of constrained blocks.

Each block update relaxes its feasibility constraint, minimizes the global
loss in that block with the others held at their latest values, and projects
the continuous minimizer back through a layer-wise projector.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Literal, Protocol

import numpy as np

from lpcd.grid import QuantizedMatrix, QuantParams, QuantScheme, dequantize, fit_scheme, project_direct
from lpcd.projectors import Hessian, project_activation_aware, project_oracle

BlockKind = Literal["weight", "activation", "rotation", "low_rank"]
BLOCK_KINDS = ("weight", "activation", "rotation", "low_rank")
Values = dict[str, np.ndarray]


class RelaxationWarning(RuntimeWarning):
    """A gradient relaxation stopped on its epoch budget before converging."""


class Objective(Protocol):
    def loss(self, values: Values) -> float: ...

    def grad(self, name: str, values: Values, rows: np.ndarray | None = None) -> np.ndarray: ...


# ---------------------------------------------------------------- projectors


@dataclass
class DirectProjector:
    """Entrywise-nearest rounding. With ``params`` set the grid is fixed;
    otherwise it is refit to each candidate."""

    scheme: QuantScheme
    params: QuantParams | None = None
    last: QuantizedMatrix | None = field(default=None, repr=False)

    def __call__(self, candidate: np.ndarray, values: Values | None = None) -> np.ndarray:
        params = self.params if self.params is not None else fit_scheme(candidate, self.scheme)
        self.last = project_direct(candidate, params)
        return self.last.dequantize()


@dataclass
class ActivationAwareProjector:
    """Hessian-weighted rounding (GPTQ, or exact enumeration with ``exact=True``).

    ``hessian`` may be a fixed :class:`Hessian` or a callable building one
    from the current block values (e.g. from a quantized activation block).
    """

    scheme: QuantScheme
    hessian: Hessian | Callable[[Values], Hessian]
    params: QuantParams | None = None
    exact: bool = False
    last: QuantizedMatrix | None = field(default=None, repr=False)

    def hessian_for(self, values: Values | None) -> Hessian:
        return self.hessian if isinstance(self.hessian, Hessian) else self.hessian(values)

    def __call__(self, candidate: np.ndarray, values: Values | None = None) -> np.ndarray:
        params = self.params if self.params is not None else fit_scheme(candidate, self.scheme)
        H = self.hessian_for(values)
        solver = project_oracle if self.exact else project_activation_aware
        self.last = solver(candidate, H, params)
        return self.last.dequantize()


@dataclass
class OrthogonalProjector:
    proper: bool = False

    def __call__(self, candidate: np.ndarray, values: Values | None = None) -> np.ndarray:
        from lpcd.extensions import rotation_project

        return rotation_project(candidate, proper=self.proper)


@dataclass
class LowRankProjector:
    rank: int
    hessian: np.ndarray | Callable[[Values], np.ndarray]
    damping: float = 0.0

    def __call__(self, candidate: np.ndarray, values: Values | None = None) -> np.ndarray:
        from lpcd.extensions import lora_project

        H = self.hessian if isinstance(self.hessian, np.ndarray) else self.hessian(values)
        return lora_project(candidate, H, self.rank, floor=self.damping)[0]


_COMPATIBLE = {
    "weight": (DirectProjector, ActivationAwareProjector),
    "activation": (DirectProjector, ActivationAwareProjector),
    "rotation": (OrthogonalProjector,),
    "low_rank": (LowRankProjector,),
}


def project_block(kind: BlockKind, candidate: np.ndarray, projector, values: Values | None = None) -> np.ndarray:
    """Map a relaxed candidate back onto the block's feasible set.

    Activation blocks always use entrywise-nearest rounding, whatever
    projector is bound to them.
    """
    if kind not in _COMPATIBLE:
        raise ValueError(f"unknown block kind {kind!r}")
    if not isinstance(projector, _COMPATIBLE[kind]):
        raise TypeError(f"{type(projector).__name__} cannot project a {kind} block")
    if kind == "activation" and isinstance(projector, ActivationAwareProjector):
        direct = DirectProjector(projector.scheme, projector.params)
        out = direct(candidate, values)
        projector.last = direct.last
        return out
    return projector(candidate, values)


def is_feasible(kind: BlockKind, value: np.ndarray, projector=None, atol: float = 1e-10) -> bool:
    if kind in ("weight", "activation"):
        last = getattr(projector, "last", None)
        params = last.params if last is not None else getattr(projector, "params", None)
        if params is None:
            return False
        return bool(np.array_equal(dequantize(project_direct(value, params)), value))
    if kind == "rotation":
        return bool(np.linalg.norm(value.T @ value - np.eye(value.shape[0])) <= atol)
    if kind == "low_rank":
        return bool(np.linalg.matrix_rank(value) <= projector.rank)
    return False


# ---------------------------------------------------------------- blocks and config


@dataclass
class BlockVar:
    """One coordinate block: its kind, current feasible value, and bindings.

    ``closed_form`` maps the current values to the exact block minimizer; when
    absent the block is relaxed with the gradient solver.
    """

    id: str
    kind: BlockKind
    value: np.ndarray
    projector: object
    closed_form: Callable[[Values], np.ndarray] | None = None
    frozen: bool = False

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        self.value = np.asarray(self.value, dtype=np.float64)


@dataclass(frozen=True)
class GradientSettings:
    """Adam with cosine-decayed step size over mini-batches of samples."""

    lr: float = 1e-5
    epochs: int = 40
    batch_size: int = 8
    grad_tol: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass(frozen=True)
class SweepConfig:
    sweeps: int = 1
    order: tuple[str, ...] | None = None
    relax_solver: Literal["closed_form", "gradient"] = "closed_form"
    gradient: GradientSettings = GradientSettings()
    seed: int = 0

    def __post_init__(self):
        if self.sweeps < 0:
            raise ValueError("sweeps must be >= 0")
        if self.relax_solver not in ("closed_form", "gradient"):
            raise ValueError(f"unknown relax_solver {self.relax_solver!r}")


@dataclass(frozen=True)
class RelaxResult:
    value: np.ndarray
    converged: bool
    grad_norm: float
    epochs: int
    solver: str


@dataclass(frozen=True)
class LogEntry:
    sweep: int
    block_id: str
    loss: float


@dataclass
class SweepResult:
    blocks: list[BlockVar]
    log: list[LogEntry]
    initial_loss: float
    relaxations: list[RelaxResult]

    def values(self) -> Values:
        return {b.id: b.value for b in self.blocks}

    def to_csv(self) -> str:
        return objective_log_csv(self.log)


def objective_log_csv(log: list[LogEntry], extra: dict[str, object] | None = None) -> str:
    buf = io.StringIO()
    extra = extra or {}
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([*extra.keys(), "sweep", "block_id", "loss"])
    for e in log:
        writer.writerow([*extra.values(), e.sweep, e.block_id, repr(float(e.loss))])
    return buf.getvalue()


# ---------------------------------------------------------------- relaxation


def adam_minimize(
    loss_fn: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray, np.ndarray | None], np.ndarray],
    x0: np.ndarray,
    n_samples: int,
    settings: GradientSettings,
    rng: np.random.Generator,
) -> RelaxResult:
    """Mini-batch Adam with cosine step decay; stops early on the full-batch
    gradient norm and returns the best iterate seen at an epoch boundary."""
    x = np.array(x0, dtype=np.float64)
    g_full = grad_fn(x, None)
    g0 = float(np.linalg.norm(g_full))
    tol = settings.grad_tol * (1.0 + g0)
    best_x, best_loss, best_g = x.copy(), loss_fn(x), g0
    if g0 <= tol:
        return RelaxResult(x, True, g0, 0, "gradient")
    batch = max(1, min(settings.batch_size, n_samples))
    steps_per_epoch = math.ceil(n_samples / batch)
    total = max(1, settings.epochs * steps_per_epoch)
    b1, b2 = settings.betas
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    t = 0
    gnorm = g0
    for epoch in range(1, settings.epochs + 1):
        perm = rng.permutation(n_samples)
        for start in range(0, n_samples, batch):
            rows = None if batch >= n_samples else np.sort(perm[start : start + batch])
            g = grad_fn(x, rows)
            lr = settings.lr * 0.5 * (1.0 + math.cos(math.pi * t / total))
            t += 1
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            x = x - lr * mhat / (np.sqrt(vhat) + settings.eps)
        loss = loss_fn(x)
        gnorm = float(np.linalg.norm(grad_fn(x, None)))
        if loss < best_loss:
            best_x, best_loss, best_g = x.copy(), loss, gnorm
        if gnorm <= tol:
            return RelaxResult(x, True, gnorm, epoch, "gradient")
    warnings.warn(
        f"gradient relaxation hit its {settings.epochs}-epoch budget "
        f"with gradient norm {gnorm:.3e} (tolerance {tol:.3e})",
        RelaxationWarning,
        stacklevel=3,
    )
    return RelaxResult(best_x, False, best_g, settings.epochs, "gradient")


def _n_samples(objective, values: Values) -> int:
    n = getattr(objective, "n_samples", None)
    return int(n) if n is not None else 1


def relax_block(
    block: BlockVar,
    values: Values,
    objective: Objective,
    config: SweepConfig = SweepConfig(),
    rng: np.random.Generator | None = None,
) -> RelaxResult:
    """Continuous minimizer of the objective in ``block`` with the other
    blocks fixed at ``values``."""
    if block.closed_form is not None and config.relax_solver == "closed_form":
        return RelaxResult(np.asarray(block.closed_form(values), dtype=np.float64), True, 0.0, 0, "closed_form")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    trial = dict(values)

    def loss_fn(u):
        trial[block.id] = u
        return objective.loss(trial)

    def grad_fn(u, rows):
        trial[block.id] = u
        return objective.grad(block.id, trial, rows)

    return adam_minimize(loss_fn, grad_fn, values[block.id], _n_samples(objective, values), config.gradient, rng)


def run_sweeps(blocks: list[BlockVar], objective: Objective, config: SweepConfig = SweepConfig()) -> SweepResult:
    """Cyclic block updates; every update is a relaxation followed by a projection.

    Blocks later in the order see the values already updated in the current
    sweep. The global loss is logged after every block update.
    """
    by_id = {b.id: b for b in blocks}
    if len(by_id) != len(blocks):
        raise ValueError("block ids must be unique")
    order = list(config.order) if config.order is not None else [b.id for b in blocks]
    if sorted(order) != sorted(by_id):
        raise ValueError(f"order {order} is not a permutation of block ids {list(by_id)}")
    values = {b.id: b.value for b in blocks}
    initial = objective.loss(values)
    log: list[LogEntry] = []
    relaxations: list[RelaxResult] = []
    rng = np.random.default_rng(config.seed)
    for sweep in range(1, config.sweeps + 1):
        for bid in order:
            block = by_id[bid]
            if not block.frozen:
                res = relax_block(block, values, objective, config, rng)
                relaxations.append(res)
                block.value = project_block(block.kind, res.value, block.projector, values)
                values[bid] = block.value
            log.append(LogEntry(sweep, bid, objective.loss(values)))
    return SweepResult(blocks, log, initial, relaxations)


def finite_diff_gradient(
    loss_fn: Callable[[np.ndarray], float], x: np.ndarray, epsilon: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, entry by entry."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + epsilon
        fp = loss_fn(x)
        x[idx] = orig - epsilon
        fm = loss_fn(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * epsilon)
    return g


def block_finite_diff(objective: Objective, name: str, values: Values, epsilon: float = 1e-5) -> np.ndarray:
    trial = dict(values)

    def f(u):
        trial[name] = u
        return objective.loss(trial)

    return finite_diff_gradient(f, values[name], epsilon)


# ---------------------------------------------------------------- layer objectives


class LinearLayerObjective:
    """``||X_hat W_hat - X W||^2`` (plus residual streams when given).

    Blocks are named ``"W"`` (weight) and ``"X"`` (activation) and, for the
    residual variant, ``"R"``.
    """

    def __init__(self, X: np.ndarray, W: np.ndarray, R: np.ndarray | None = None):
        self.X = np.asarray(X, dtype=np.float64)
        self.W = np.asarray(W, dtype=np.float64)
        self.R = None if R is None else np.asarray(R, dtype=np.float64)
        self.reference = self.X @ self.W + (0 if self.R is None else self.R)
        self.n_samples = self.X.shape[0]

    def residual(self, values: Values) -> np.ndarray:
        out = values["X"] @ values["W"]
        if self.R is not None:
            out = out + values["R"]
        return out - self.reference

    def loss(self, values: Values) -> float:
        return float(np.sum(self.residual(values) ** 2))

    def grad(self, name: str, values: Values, rows: np.ndarray | None = None) -> np.ndarray:
        E = self.residual(values)
        if name == "W":
            Xh = values["X"]
            if rows is not None:
                Xh, E = Xh[rows], E[rows]
            return 2 * Xh.T @ E
        if name == "X":
            return 2 * E @ values["W"].T
        if name == "R":
            return 2 * E
        raise KeyError(name)

    def weight_closed_form(self, values: Values) -> np.ndarray:
        """Least-squares weight given the current activation (and residual)."""
        from lpcd._linalg import lstsq

        target = self.reference - (0 if self.R is None else values["R"])
        return lstsq(values["X"], target)

    def activation_closed_form(self, values: Values) -> np.ndarray:
        from lpcd.extensions import qep_activation_relax

        return qep_activation_relax(self.X, self.W, values["W"])
