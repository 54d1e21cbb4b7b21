"""
Losses, reverse-mode gradients, gradient descent with optional step halving,
the Stiefel projection for the orthogonal output map, a central-difference
gradient oracle, and a small architecture grid search.

Losses are sums over every record in the stack they are given; the trainer
averages them over a batch. Component stacks have shape (M, ..., N).
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from rrcnn_core import (Architecture, BlockParams, ModelParams, RecursionParams, ShapeError,
                        cascade_forward, conv1d_filter_grad, conv1d_same, init_params,
                        load_weights, save_weights)
from signal_lab import SampleSet, format_value, read_keyvalue, write_keyvalue

logger = logging.getLogger(__name__)

RANK_TOL = 1e-12
FAULT_SIZE = 1e-3
# training stops once halving has cut the step to this fraction of cfg.lr
MIN_LR_FRACTION = 2.0 ** -20


class LossError(ValueError):
    pass


class ProjectionError(RuntimeError):
    """The gradient step left the orthogonal matrix rank deficient."""


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss {loss})")
        self.epoch = epoch
        self.loss = loss


class GradientError(ValueError):
    def __init__(self, coordinate: str):
        super().__init__(f"non-finite gradient at {coordinate}")
        self.coordinate = coordinate


class LossKind(Enum):
    MSE = "mse"
    MSE_QTV = "mse_qtv"
    ORTHO_CONSTRAINED = "ortho_constrained"
    ORTHO_PENALTY = "ortho_penalty"


@dataclass(frozen=True)
class LossSpec:
    """Which loss applies. omega1 lists smooth components, omega2 orthogonal
    pairs; both 0-based."""

    kind: LossKind = LossKind.MSE
    eta: float = 0.0
    gamma: float = 0.0
    omega1: tuple = ()
    omega2: tuple = ()

    def __post_init__(self):
        kind = self.kind if isinstance(self.kind, LossKind) else LossKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "omega1", tuple(int(i) for i in self.omega1))
        object.__setattr__(self, "omega2", tuple((int(i), int(j)) for i, j in self.omega2))
        if self.eta < 0 or self.gamma < 0:
            raise LossError("eta and gamma must be non-negative")
        if self.eta and kind is not LossKind.MSE_QTV:
            raise LossError("eta only applies to the mse_qtv loss")
        if self.gamma and kind is not LossKind.ORTHO_PENALTY:
            raise LossError("gamma only applies to the ortho_penalty loss")
        if len(set(self.omega2)) != len(self.omega2) or any(i == j for i, j in self.omega2):
            raise LossError(f"omega2 pairs must be distinct pairs of distinct indices: {self.omega2}")
        if kind in (LossKind.ORTHO_CONSTRAINED, LossKind.ORTHO_PENALTY) and not self.omega2:
            raise LossError(f"{kind.value} needs at least one omega2 pair")

    @property
    def ortho_indices(self) -> tuple:
        """Every component index that appears in an omega2 pair."""
        return tuple(sorted({i for pair in self.omega2 for i in pair}))

    def check(self, n_components: int) -> None:
        for i in self.omega1 + self.ortho_indices:
            if not 0 <= i < n_components:
                raise LossError(f"component index {i} outside [0, {n_components})")


# -- losses --------------------------------------------------------------------

def loss_mse(pred, label) -> float:
    """Squared Frobenius norm of pred - label."""
    pred, label = np.asarray(pred, dtype=float), np.asarray(label, dtype=float)
    if pred.shape != label.shape:
        raise LossError(f"prediction shape {pred.shape} differs from label shape {label.shape}")
    return float(np.sum(np.square(pred - label)))


def loss_qtv(pred, omega1) -> float:
    """Sum of squared first differences over the listed components."""
    pred = np.asarray(pred, dtype=float)
    total = 0.0
    for m in omega1:
        if not 0 <= m < pred.shape[0]:
            raise LossError(f"QTV component {m} outside [0, {pred.shape[0]})")
        total += float(np.sum(np.square(np.diff(pred[m], axis=-1))))
    return total


def _cosines(a: np.ndarray, b: np.ndarray) -> tuple:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise LossError("orthogonality penalty is undefined for a zero-norm component")
    u = np.sum(a * b, axis=-1)
    return u, na, nb


def loss_ortho_penalty(pred, omega2, gamma: float) -> float:
    """gamma * sum over pairs of |<ci, cj>| / (|ci| |cj|)."""
    pred = np.asarray(pred, dtype=float)
    total = 0.0
    for i, j in omega2:
        u, na, nb = _cosines(pred[i], pred[j])
        total += float(np.sum(np.abs(u) / (na * nb)))
    return gamma * total


def _penalty_grad(a, b):
    u, na, nb = _cosines(a, b)
    scale = (np.sign(u) / (na * nb))[..., None]
    ga = scale * (b - (u / na ** 2)[..., None] * a)
    gb = scale * (a - (u / nb ** 2)[..., None] * b)
    return ga, gb


def loss_and_output_grad(pred, label, spec: LossSpec) -> tuple:
    """Total loss for an output stack and its gradient with respect to it."""
    loss = loss_mse(pred, label)
    grad = 2.0 * (pred - label)
    if spec.kind is LossKind.MSE_QTV and spec.eta:
        loss += spec.eta * loss_qtv(pred, spec.omega1)
        for m in spec.omega1:
            d = np.diff(pred[m], axis=-1)
            zero = np.zeros(d.shape[:-1] + (1,))
            grad[m] += 2.0 * spec.eta * (np.concatenate([zero, d], axis=-1) - np.concatenate([d, zero], axis=-1))
    elif spec.kind is LossKind.ORTHO_PENALTY and spec.gamma:
        loss += loss_ortho_penalty(pred, spec.omega2, spec.gamma)
        for i, j in spec.omega2:
            gi, gj = _penalty_grad(pred[i], pred[j])
            grad[i] += spec.gamma * gi
            grad[j] += spec.gamma * gj
    return loss, grad


# -- gradients -----------------------------------------------------------------

@dataclass(eq=False)
class GradientSet:
    """Gradients shaped like a ModelParams: w1[m][i], w2_raw[m][i], ortho."""

    w1: list
    w2_raw: list
    ortho: np.ndarray | None = None

    @classmethod
    def zeros_like(cls, p: ModelParams) -> "GradientSet":
        return cls([[np.zeros_like(r.w1) for r in b.recursions] for b in p.blocks],
                   [[np.zeros_like(r.w2_raw) for r in b.recursions] for b in p.blocks],
                   None if p.ortho is None else np.zeros_like(p.ortho))

    def named_arrays(self):
        for m, (w1s, w2s) in enumerate(zip(self.w1, self.w2_raw)):
            for i, (g1, g2) in enumerate(zip(w1s, w2s)):
                yield f"block{m}.rec{i}.w1", g1
                yield f"block{m}.rec{i}.w2_raw", g2
        if self.ortho is not None:
            yield "ortho", self.ortho

    def _map(self, fn, other=None) -> "GradientSet":
        pick = (lambda a, b: fn(a)) if other is None else fn
        o = other if other is not None else self
        return GradientSet(
            [[pick(a, b) for a, b in zip(x, y)] for x, y in zip(self.w1, o.w1)],
            [[pick(a, b) for a, b in zip(x, y)] for x, y in zip(self.w2_raw, o.w2_raw)],
            None if self.ortho is None else pick(self.ortho, o.ortho))

    def add(self, other: "GradientSet") -> "GradientSet":
        return self._map(lambda a, b: a + b, other)

    def scaled(self, factor: float) -> "GradientSet":
        return self._map(lambda a: a * factor)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.named_arrays()])


def coordinate_names(p: ModelParams) -> list:
    names = []
    for name, array in p.named_arrays():
        if array.ndim == 2:
            names += [f"{name}[{r},{c}]" for r in range(array.shape[0]) for c in range(array.shape[1])]
        else:
            names += [f"{name}[{k}]" for k in range(array.size)]
    return names


def params_to_flat(p: ModelParams) -> np.ndarray:
    return np.concatenate([a.ravel() for _, a in p.named_arrays()])


def params_from_flat(template: ModelParams, theta: np.ndarray) -> ModelParams:
    p = template.copy()
    offset = 0
    for _, array in p.named_arrays():
        array[...] = theta[offset:offset + array.size].reshape(array.shape)
        offset += array.size
    return p


def _block_backward(trace, block: BlockParams, g: np.ndarray) -> tuple:
    """Pull dL/d(imf) back through the recursions of one block."""
    g1, g2 = [None] * block.depth, [None] * block.depth
    for i in reversed(range(block.depth)):
        step, rec = trace.steps[i], block.recursions[i]
        g_c2 = -g
        g_w2 = conv1d_filter_grad(step.c1, g_c2, rec.w2_raw.size)
        g2[i] = step.w2 * (g_w2 - np.dot(g_w2, step.w2))
        g_c1 = conv1d_same(g_c2, step.w2[::-1])
        g_r = g_c1 * (1.0 - np.square(step.c1))
        g1[i] = conv1d_filter_grad(step.x, g_r, rec.w1.size)
        g = g + conv1d_same(g_r, rec.w1[::-1])
    return g, g1, g2


def _check_compatible(p: ModelParams, spec: LossSpec) -> None:
    spec.check(p.n_blocks)
    constrained = spec.kind is LossKind.ORTHO_CONSTRAINED
    if constrained != (p.ortho is not None):
        raise LossError(f"{spec.kind.value} loss {'needs' if constrained else 'forbids'} an orthogonal matrix")
    if constrained and p.ortho_indices != spec.ortho_indices:
        raise LossError(f"model maps components {p.ortho_indices}, loss pairs name {spec.ortho_indices}")


def backprop(x, label, p: ModelParams, spec: LossSpec) -> tuple:
    """Loss and exact gradient for one signal (N,) or a stack (B, N).

    label has shape (M, N) or (M, B, N); losses and gradients are summed
    over the stack.
    """
    _check_compatible(p, spec)
    x = np.asarray(getattr(x, "samples", x), dtype=float)
    label = np.asarray(label, dtype=float)
    if label.shape != (p.n_blocks,) + x.shape:
        raise ShapeError(f"label shape {label.shape} does not match {(p.n_blocks,) + x.shape}")
    result = cascade_forward(x, p)
    loss, g_out = loss_and_output_grad(result.imfs, label, spec)
    g_raw = g_out.copy()
    grads = GradientSet.zeros_like(p)
    if p.ortho is not None:
        n = x.shape[-1]
        for i in p.ortho_indices:
            g_raw[i] = g_out[i] @ p.ortho
            grads.ortho += g_out[i].reshape(-1, n).T @ result.raw_imfs[i].reshape(-1, n)
    g_x = np.zeros_like(x)
    for m in reversed(range(p.n_blocks)):
        g_in, grads.w1[m], grads.w2_raw[m] = _block_backward(result.traces[m], p.blocks[m], g_raw[m] - g_x)
        g_x = g_x + g_in
    return loss, grads


def evaluate_loss(x, label, p: ModelParams, spec: LossSpec) -> float:
    return loss_and_output_grad(cascade_forward(x, p).imfs, np.asarray(label, dtype=float), spec)[0]


# -- parameter updates ---------------------------------------------------------

def sgd_step(p: ModelParams, g: GradientSet, lr: float) -> ModelParams:
    """p - lr * g on the filters; the orthogonal matrix is left alone."""
    for name, array in g.named_arrays():
        bad = ~np.isfinite(array)
        if bad.any():
            index = np.unravel_index(int(np.argmax(bad)), array.shape)
            raise GradientError(f"{name}[{','.join(map(str, index))}]")
    blocks = [BlockParams([RecursionParams(r.w1 - lr * g1, r.w2_raw - lr * g2)
                           for r, g1, g2 in zip(b.recursions, gw1, gw2)])
              for b, gw1, gw2 in zip(p.blocks, g.w1, g.w2_raw)]
    return ModelParams(blocks, None if p.ortho is None else p.ortho.copy(), p.ortho_indices)


@dataclass(eq=False)
class AdamState:
    """Bias-corrected first and second moment estimates of the filter gradients."""

    m: GradientSet
    v: GradientSet
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, p: ModelParams) -> "AdamState":
        return cls(GradientSet.zeros_like(p), GradientSet.zeros_like(p))

    def copy(self) -> "AdamState":
        return AdamState(self.m.scaled(1.0), self.v.scaled(1.0), self.step, self.beta1, self.beta2, self.eps)

    def direction(self, g: GradientSet) -> GradientSet:
        """Fold g into the moments and return the per-coordinate scaled step."""
        self.step += 1
        self.m = self.m._map(lambda m, d: self.beta1 * m + (1.0 - self.beta1) * d, g)
        self.v = self.v._map(lambda v, d: self.beta2 * v + (1.0 - self.beta2) * np.square(d), g)
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        return self.m._map(lambda m, v: (m / c1) / (np.sqrt(v / c2) + self.eps), self.v)


def adam_step(p: ModelParams, g: GradientSet, lr: float, state: AdamState) -> ModelParams:
    if not np.all(np.isfinite(g.flat())):
        return sgd_step(p, g, lr)  # raises GradientError naming the coordinate
    return sgd_step(p, state.direction(g), lr)


def stiefel_step(wo: np.ndarray, g_wo: np.ndarray, lr: float) -> np.ndarray:
    """Gradient step on W, then projection U V^T from the reduced SVD."""
    target = np.asarray(wo, dtype=float) - lr * np.asarray(g_wo, dtype=float)
    if target.ndim != 2 or target.shape[0] != target.shape[1]:
        raise ShapeError(f"expected a square matrix, got {target.shape}")
    u, s, vt = np.linalg.svd(target, full_matrices=False)
    if not s[0] > 0 or s[-1] <= RANK_TOL * s[0]:
        raise ProjectionError(f"rank-deficient step: singular values span [{s[-1]:.3g}, {s[0]:.3g}]")
    return u @ vt


# -- gradient oracle -----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_deviation: float
    worst_coordinate: str
    names: list
    analytic: np.ndarray
    numeric: np.ndarray
    deviations: np.ndarray

    def passed(self, threshold: float = 1e-5) -> bool:
        return self.max_deviation < threshold


def deviation(analytic, numeric) -> np.ndarray:
    """|a - n| / max(|a|, |n|, 1) per coordinate."""
    a, n = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)


def grad_check(p: ModelParams, x, label, spec: LossSpec, eps: float = 1e-6,
               coordinates=None, fault: int | None = None) -> GradCheckReport:
    """Compare backprop with central differences, coordinate by coordinate.

    `coordinates` restricts the check to a subset of flat indices; `fault`
    corrupts one analytic coordinate by FAULT_SIZE relative to its magnitude.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise LossError(f"eps must lie in [1e-8, 1e-4], got {eps}")
    _, grads = backprop(x, label, p, spec)
    theta = params_to_flat(p)
    analytic_all = grads.flat()
    if fault is not None:
        analytic_all[fault] += FAULT_SIZE * max(1.0, abs(analytic_all[fault]))
    names_all = coordinate_names(p)
    index = np.arange(theta.size) if coordinates is None else np.asarray(coordinates, dtype=int)
    numeric = np.empty(index.size)
    for n, k in enumerate(index):
        step = eps * max(1.0, abs(theta[k]))
        shifted = theta.copy()
        shifted[k] = theta[k] + step
        plus = evaluate_loss(x, label, params_from_flat(p, shifted), spec)
        shifted[k] = theta[k] - step
        minus = evaluate_loss(x, label, params_from_flat(p, shifted), spec)
        numeric[n] = (plus - minus) / (2.0 * step)
    analytic = analytic_all[index]
    dev = deviation(analytic, numeric)
    worst = int(np.argmax(dev))
    names = [names_all[k] for k in index]
    logger.info("grad check over %d coordinates: max deviation %.3g at %s", index.size, dev[worst], names[worst])
    return GradCheckReport(float(dev[worst]), names[worst], names, analytic, numeric, dev)


# -- training ------------------------------------------------------------------

REDUCTIONS = ("sequential", "pairwise", "batched")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    """Training settings.

    With `lr_halving` the step is controlled per epoch: an epoch that raises
    the training loss is rolled back and the step halved, an epoch that
    lowers it multiplies the step by `lr_growth`. Patience counts accepted
    epochs only. Without `lr_halving` the step stays at `lr`.
    """

    lr: float = 1e-3
    lr_ortho: float = 1e-3
    epochs: int = 400
    batch: int = 16
    seed: int = 0
    lr_halving: bool = True
    tol: float = 1e-7
    patience: int = 20
    reduction: str = "sequential"
    workers: int = 1
    lr_growth: float = 1.1
    optimizer: str = "sgd"

    def __post_init__(self):
        if not self.lr > 0 or not self.lr_ortho > 0:
            raise LossError("learning rates must be positive")
        if self.epochs < 1 or self.batch < 1:
            raise LossError("epochs and batch must be at least 1")
        if self.patience < 1:
            raise LossError(f"patience must be at least 1, got {self.patience}")
        if not self.lr_growth >= 1.0:
            raise LossError(f"lr_growth must be at least 1, got {self.lr_growth}")
        if self.reduction not in REDUCTIONS:
            raise LossError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        if self.optimizer not in OPTIMIZERS:
            raise LossError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


@dataclass
class TrainingHistory:
    """Row 0 holds the losses at initialisation when a run starts fresh."""

    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    halvings: list = field(default_factory=list)

    def append(self, epoch, train_loss, val_loss, lr):
        self.epoch.append(epoch)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.lr.append(lr)

    def __len__(self):
        return len(self.epoch)

    def to_csv(self, path) -> None:
        rows = ["epoch,train_loss,val_loss,lr"]
        rows += [f"{e},{format_value(float(a))},{format_value(float(b))},{format_value(float(c))}"
                 for e, a, b, c in zip(self.epoch, self.train_loss, self.val_loss, self.lr)]
        Path(path).write_text("\n".join(rows) + "\n")

    @classmethod
    def from_csv(cls, path) -> "TrainingHistory":
        history = cls()
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        for e, a, b, c in table:
            history.append(int(e), float(a), float(b), float(c))
        return history


def _pairwise_sum(items: list):
    while len(items) > 1:
        paired = [items[i].add(items[i + 1]) for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            paired.append(items[-1])
        items = paired
    return items[0]


def _stack(records) -> tuple:
    x = np.stack([r.input.samples for r in records])
    label = np.stack([r.label_stack for r in records], axis=1)
    return x, label


class Trainer:
    """Mini-batch gradient descent over a SampleSet.

    Holds the current parameters and learning rate between epochs so a run
    can be resumed from a checkpoint with its epoch count and step size.
    """

    def __init__(self, arch: Architecture, spec: LossSpec, cfg: TrainConfig = TrainConfig()):
        self.arch = arch
        self.spec = spec
        self.cfg = cfg
        self.lr = cfg.lr
        self.params = None
        self.history = TrainingHistory()
        self.rng = np.random.default_rng(cfg.seed)
        self.adam = None

    def initialise(self, n: int) -> ModelParams:
        ortho = self.spec.ortho_indices if self.spec.kind is LossKind.ORTHO_CONSTRAINED else ()
        self.params = init_params(self.arch, self.cfg.seed, n=n, ortho_indices=ortho)
        return self.params

    def dataset_loss(self, params: ModelParams, records) -> float:
        """Mean per-record loss."""
        if not records:
            return float("nan")
        x, label = _stack(records)
        return evaluate_loss(x, label, params, self.spec) / len(records)

    def batch_gradient(self, params: ModelParams, records) -> tuple:
        """Mean loss and gradient over a batch, reduced in record order."""
        if self.cfg.reduction == "batched":
            x, label = _stack(records)
            loss, grads = backprop(x, label, params, self.spec)
        else:
            def one(record):
                return backprop(record.input.samples, record.label_stack, params, self.spec)

            if self.cfg.workers > 1:
                with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                    parts = list(pool.map(one, records))
            else:
                parts = [one(r) for r in records]
            loss = sum(part[0] for part in parts)
            if self.cfg.reduction == "pairwise":
                grads = _pairwise_sum([part[1] for part in parts])
            else:
                grads = parts[0][1]
                for part in parts[1:]:
                    grads = grads.add(part[1])
        scale = 1.0 / len(records)
        return loss * scale, grads.scaled(scale)

    def _epoch(self, params: ModelParams, train, epoch: int) -> ModelParams:
        order = self.rng.permutation(len(train))
        for start in range(0, len(train), self.cfg.batch):
            batch = [train[i] for i in order[start:start + self.cfg.batch]]
            loss, grads = self.batch_gradient(params, batch)
            if not math.isfinite(loss):
                raise DivergenceError(epoch, loss)
            if params.ortho is not None:
                ortho = stiefel_step(params.ortho, grads.ortho, self.cfg.lr_ortho)
                params = ModelParams(params.blocks, ortho, params.ortho_indices)
            if self.adam is not None:
                params = adam_step(params, grads, self.lr, self.adam)
            else:
                params = sgd_step(params, grads, self.lr)
        return params

    def _propose(self, params: ModelParams, train, epoch: int) -> tuple:
        """Run one epoch from `params`; returns (candidate, training loss).

        Under step control a blown-up epoch comes back as (params, inf) so
        the caller halves the step instead of giving up.
        """
        try:
            candidate = self._epoch(params, train, epoch)
        except (DivergenceError, GradientError) as err:
            if not self.cfg.lr_halving:
                raise
            logger.info("epoch %d: %s", epoch, err)
            return params, math.inf
        loss = self.dataset_loss(candidate, train)
        if not math.isfinite(loss) and not self.cfg.lr_halving:
            raise DivergenceError(epoch, loss)
        return candidate, loss

    def fit(self, dataset: SampleSet, params: ModelParams | None = None, start_epoch: int = 0) -> tuple:
        """Train; returns (best-validation parameters, history)."""
        train, val = dataset.train, dataset.validation
        if not train:
            raise LossError("the training split is empty")
        n = dataset.n
        if params is None:
            params = self.params if self.params is not None else self.initialise(n)
        _check_compatible(params, self.spec)
        if train[0].label_stack.shape[0] != params.n_blocks:
            raise ShapeError(f"records carry {train[0].label_stack.shape[0]} labels, model has {params.n_blocks} blocks")

        train_loss = self.dataset_loss(params, train)
        val_loss = self.dataset_loss(params, val) if val else train_loss
        if not math.isfinite(train_loss):
            raise DivergenceError(start_epoch, train_loss)
        if start_epoch == 0:
            self.history.append(0, train_loss, val_loss, self.lr)
        if self.cfg.optimizer == "adam" and self.adam is None:
            self.adam = AdamState.zeros_like(params)
        best, best_val, stale = params.copy(), val_loss, 0
        floor = self.cfg.lr * MIN_LR_FRACTION

        for epoch in range(start_epoch + 1, start_epoch + self.cfg.epochs + 1):
            lr_used = self.lr
            moments = None if self.adam is None else self.adam.copy()
            candidate, candidate_loss = self._propose(params, train, epoch)
            if self.cfg.lr_halving and not candidate_loss <= train_loss:
                # 1. roll back and halve
                self.lr /= 2.0
                self.adam = moments
                self.history.halvings.append(epoch)
                self.history.append(epoch, train_loss, val_loss, lr_used)
                logger.info("epoch %d: loss rose to %.6g, step halved to %.3g", epoch, candidate_loss, self.lr)
                if self.lr < floor:
                    if not math.isfinite(candidate_loss):
                        raise DivergenceError(epoch, candidate_loss)
                    logger.info("step fell below %.3g, stopping at epoch %d", floor, epoch)
                    break
                continue
            # 2. accept, and lengthen the step after a real decrease
            if self.cfg.lr_halving and candidate_loss < train_loss:
                self.lr *= self.cfg.lr_growth
            params, train_loss = candidate, candidate_loss
            val_loss = self.dataset_loss(params, val) if val else train_loss
            self.history.append(epoch, train_loss, val_loss, lr_used)
            logger.info("epoch %d: train %.6g, validation %.6g", epoch, train_loss, val_loss)
            # 3. patience, counted on accepted epochs
            if val_loss < best_val - self.cfg.tol:
                best, best_val, stale = params.copy(), val_loss, 0
            else:
                stale += 1
                if stale >= self.cfg.patience:
                    logger.info("early stop at epoch %d", epoch)
                    break
        self.params = params
        return best, self.history


def train(dataset: SampleSet, arch: Architecture, spec: LossSpec, cfg: TrainConfig = TrainConfig(),
          params: ModelParams | None = None) -> tuple:
    return Trainer(arch, spec, cfg).fit(dataset, params)


@dataclass
class GridRow:
    arch: Architecture
    val_loss: float
    train_loss: float


def grid_search(dataset: SampleSet, archs, spec: LossSpec, cfg: TrainConfig = TrainConfig(),
                budget: int | None = None) -> tuple:
    """Train each architecture for `budget` epochs and rank by best validation
    loss; ties go to the smaller total filter length, then to list order."""
    archs = list(archs)
    if not archs:
        raise LossError("empty architecture grid")
    short = replace(cfg, epochs=budget) if budget else cfg
    rows = []
    for arch in archs:
        _, history = Trainer(arch, spec, short).fit(dataset)
        best = int(np.argmin(history.val_loss))
        rows.append(GridRow(arch, history.val_loss[best], history.train_loss[best]))
        logger.info("grid: %s -> validation %.6g", arch, rows[-1].val_loss)
    ranked = sorted(range(len(rows)),
                    key=lambda i: (rows[i].val_loss, sum(rows[i].arch.k1) + sum(rows[i].arch.k2), i))
    table = [rows[i] for i in ranked]
    return table[0].arch, table


# -- checkpoints ---------------------------------------------------------------

def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".txt")


def save_checkpoint(path, params: ModelParams, spec: LossSpec, cfg: TrainConfig,
                    epoch: int, lr: float) -> None:
    """Weights file plus a key=value sidecar with the loss, config and progress.

    Adam moments are not saved; a resumed Adam run starts them from zero.
    """
    save_weights(path, params)
    items = [("epoch", epoch), ("lr_current", float(lr)), ("loss.kind", spec.kind.value),
             ("loss.eta", float(spec.eta)), ("loss.gamma", float(spec.gamma)),
             ("loss.omega1", ",".join(str(i) for i in spec.omega1)),
             ("loss.omega2", ";".join(f"{i},{j}" for i, j in spec.omega2))]
    items += [(f"train.{k}", v) for k, v in asdict(cfg).items()]
    write_keyvalue(_sidecar(path), items, header="checkpoint manifest")


def load_checkpoint(path) -> tuple:
    """Returns (params, loss spec, epoch, current lr)."""
    params = load_weights(path)
    meta = read_keyvalue(_sidecar(path))[""]
    omega1 = tuple(int(i) for i in meta.get("loss.omega1", "").split(",") if i)
    omega2 = tuple(tuple(int(v) for v in pair.split(",")) for pair in meta.get("loss.omega2", "").split(";") if pair)
    spec = LossSpec(LossKind(meta["loss.kind"]), float(meta["loss.eta"]), float(meta["loss.gamma"]), omega1, omega2)
    return params, spec, int(meta["epoch"]), float(meta["lr_current"])


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    rng = np.random.default_rng(0)
    model = init_params(Architecture(blocks=2, recursions=1, k1=5, k2=5), seed=0)
    signal = rng.normal(size=32)
    target = rng.normal(size=(2, 32))
    report = grad_check(model, signal, target, LossSpec(LossKind.ORTHO_PENALTY, gamma=0.1, omega2=((0, 1),)))
    print(f"gradient check: max deviation {report.max_deviation:.2e} at {report.worst_coordinate}")
