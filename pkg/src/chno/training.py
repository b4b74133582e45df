"""Losses and the training loop.

Losses are cell-area-weighted squared L2 distances averaged over batch and
output frames, returned as taped Scalars so gradients flow through the model.
The equivariance loss transforms the input by a group element g, runs the
model, applies g^-1 to the output, and compares against the *untransformed*
target; summed over the configured elements it pushes the model toward
D4-equivariant behaviour without touching the architecture.

The H1 variant adds the squared L2 norm of the spectral gradient of the
difference, computed in the periodic index basis of the sample grid (the
basis the operator layers themselves use).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .fields import D4Element, d4_apply_array, d4_elements, d4_inverse
from .nncore import (
    LRSchedule,
    ParamStore,
    Scalar,
    Tape,
    Tensor4,
    adam_step,
    backward,
    cosine_lr,
    scalar_add,
    scalar_scale,
)

__all__ = [
    "LossConfig",
    "TrainConfig",
    "TrainData",
    "TrainingError",
    "TrainingReport",
    "EpochStats",
    "loss_l2",
    "loss_h1",
    "loss_eq",
    "total_loss",
    "d4_apply_tensor",
    "fit",
    "write_report_csv",
]


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    """data_loss: "l2" or "h1"; eq_weight scales the equivariance term
    (0 disables it); eq_elements defaults to the full group."""

    data_loss: str = "l2"
    eq_weight: float = 1.0
    eq_elements: tuple = tuple(d4_elements())

    def __post_init__(self):
        if self.data_loss not in ("l2", "h1"):
            raise ValueError(f"unknown data loss {self.data_loss!r}")
        if self.eq_weight < 0:
            raise ValueError("eq_weight must be >= 0")
        if self.eq_weight > 0 and not self.eq_elements:
            raise ValueError("eq_elements must be non-empty when eq_weight > 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    n_in: int = 5
    n_out: int = 3
    lr_schedule: LRSchedule = field(default_factory=lambda: LRSchedule(5e-4, 1e-5, 50))
    seed: int = 0
    checkpoint_policy: str = "best-validation"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.checkpoint_policy != "best-validation":
            raise ValueError("only best-validation checkpointing is implemented")


@dataclass(frozen=True)
class TrainData:
    """Stacked sample arrays: inputs (n, n_in, h, w), targets (n, n_out, h, w)."""

    train_inputs: np.ndarray
    train_targets: np.ndarray
    val_inputs: np.ndarray
    val_targets: np.ndarray

    def __post_init__(self):
        if len(self.train_inputs) != len(self.train_targets):
            raise ValueError("train inputs/targets length mismatch")
        if len(self.val_inputs) != len(self.val_targets):
            raise ValueError("val inputs/targets length mismatch")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _target_values(target) -> np.ndarray:
    return target.values if isinstance(target, Tensor4) else np.asarray(target, dtype=float)


def loss_l2(pred: Tensor4, target, cell_area: float | None = None) -> Scalar:
    """Mean over batch and frames of sum_cells (pred - target)^2 * dA.
    cell_area defaults to the unit square's 1/(h*w)."""
    t = _target_values(target)
    if pred.values.shape != t.shape:
        raise ValueError(f"shape mismatch {pred.values.shape} vs {t.shape}")
    b, f, h, w = pred.shape
    da = cell_area if cell_area is not None else 1.0 / (h * w)
    diff = pred.values - t
    coef = da / (b * f)
    out = Scalar(coef * float(np.sum(diff * diff)), pred.tape)

    def _backward():
        pred.accum_grad((2.0 * coef * out.grad) * diff, owned=True)

    pred.tape.record(_backward)
    return out


def loss_h1(pred: Tensor4, target, cell_area: float | None = None) -> Scalar:
    """loss_l2 plus the squared L2 norm of the spectral gradient of the
    difference (periodic index basis, unit domain)."""
    t = _target_values(target)
    if pred.values.shape != t.shape:
        raise ValueError(f"shape mismatch {pred.values.shape} vs {t.shape}")
    b, f, h, w = pred.shape
    da = cell_area if cell_area is not None else 1.0 / (h * w)
    coef = da / (b * f)
    diff = pred.values - t

    kx = 2.0 * np.pi * np.fft.fftfreq(h, 1.0 / h)
    ky = 2.0 * np.pi * np.arange(w // 2 + 1)
    kx[h // 2] = 0.0  # own-axis Nyquist has no well-defined sign
    mx = (1j * kx)[:, None]
    my = (1j * ky)[None, :]
    my[:, -1] = 0.0

    spec = scipy.fft.rfft2(diff, norm="ortho")
    gx = scipy.fft.irfft2(mx * spec, s=(h, w), norm="ortho")
    gy = scipy.fft.irfft2(my * spec, s=(h, w), norm="ortho")
    value = coef * float(np.sum(diff * diff) + np.sum(gx * gx) + np.sum(gy * gy))
    out = Scalar(value, pred.tape)

    def _backward():
        # each gradient component is a self-adjoint-negative spectral multiply,
        # so d/d(diff) of sum(g^2) is -2 * (same multiply applied to g)
        gspec = scipy.fft.rfft2(gx, norm="ortho") * np.conj(mx)
        gspec += scipy.fft.rfft2(gy, norm="ortho") * np.conj(my)
        g = 2.0 * coef * out.grad * (diff + scipy.fft.irfft2(gspec, s=(h, w), norm="ortho"))
        pred.accum_grad(g, owned=True)

    pred.tape.record(_backward)
    return out


def d4_apply_tensor(g: D4Element, x: Tensor4) -> Tensor4:
    """Group action on the spatial axes of a Tensor4, differentiable
    (the adjoint of a permutation is its inverse)."""
    if x.shape[2] != x.shape[3]:
        raise ValueError("square spatial dims required")
    out = Tensor4(d4_apply_array(g, x.values), x.tape)
    inv = d4_inverse(g)

    def _backward():
        if out.grad is not None:
            x.accum_grad(d4_apply_array(inv, out.grad))

    x.tape.record(_backward)
    return out


def loss_eq(model, x: Tensor4, target, cfg: LossConfig,
            cell_area: float | None = None) -> Scalar:
    """Sum over cfg.eq_elements of the data loss between g^-1(model(g(x)))
    and the untransformed target."""
    if x.shape[2] != x.shape[3]:
        raise ValueError("square spatial dims required")
    if not cfg.eq_elements:
        raise ValueError("eq_elements is empty")
    total = None
    for g in cfg.eq_elements:
        pred = d4_apply_tensor(d4_inverse(g), model.forward(d4_apply_tensor(g, x)))
        term = loss_l2(pred, target, cell_area)
        total = term if total is None else scalar_add(total, term)
    return total


def total_loss(model, x: Tensor4, target, cfg: LossConfig,
               cell_area: float | None = None):
    """Returns (total, data, eq) Scalars; eq is None when eq_weight == 0."""
    pred = model.forward(x)
    data_fn = loss_l2 if cfg.data_loss == "l2" else loss_h1
    data = data_fn(pred, target, cell_area)
    if cfg.eq_weight == 0:
        return data, data, None
    eq = loss_eq(model, x, target, cfg, cell_area)
    return scalar_add(data, scalar_scale(eq, cfg.eq_weight)), data, eq


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class TrainingError(RuntimeError):
    def __init__(self, message, epoch, batch):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    eq_loss: float


@dataclass
class TrainingReport:
    epochs: list
    best_epoch: int
    best_val: float


def _validation_loss(model, data: TrainData, cfg: LossConfig, batch_size: int) -> float:
    n = len(data.val_inputs)
    if n == 0:
        return math.nan
    data_fn = loss_l2 if cfg.data_loss == "l2" else loss_h1
    acc = 0.0
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        tape = Tape()
        pred = model.forward(Tensor4(np.ascontiguousarray(data.val_inputs[lo:hi]), tape))
        acc += data_fn(pred, data.val_targets[lo:hi]).value * (hi - lo)
        tape.release()
    return acc / n


def fit(model, data: TrainData, train_cfg: TrainConfig, loss_cfg: LossConfig) -> TrainingReport:
    """Seeded shuffled mini-batches, Adam with a cosine learning rate per
    epoch, validation data-loss each epoch; the best-validation parameters are
    restored into the model before returning."""
    rng = np.random.default_rng(train_cfg.seed)
    n = len(data.train_inputs)
    if n == 0:
        raise ValueError("empty training set")
    stats = []
    best_val = math.inf
    best_epoch = -1
    best_params = None
    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(train_cfg.lr_schedule, epoch)
        perm = rng.permutation(n)
        train_acc = 0.0
        eq_acc = 0.0
        for bi, lo in enumerate(range(0, n, train_cfg.batch_size)):
            idx = perm[lo : lo + train_cfg.batch_size]
            tape = Tape()
            x = Tensor4(np.ascontiguousarray(data.train_inputs[idx]), tape)
            total, _, eq = total_loss(model, x, data.train_targets[idx], loss_cfg)
            if not math.isfinite(total.value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {bi}", epoch, bi
                )
            backward(total)
            adam_step(model.store, lr)
            train_acc += total.value * len(idx)
            eq_acc += (eq.value if eq is not None else 0.0) * len(idx)
        val = _validation_loss(model, data, loss_cfg, train_cfg.batch_size)
        stats.append(EpochStats(epoch, lr, train_acc / n, val, eq_acc / n))
        if math.isfinite(val) and val < best_val:
            best_val = val
            best_epoch = epoch
            best_params = {name: model.store[name].values.copy() for name in model.store.names()}
    if best_params is not None:
        for name, values in best_params.items():
            model.store[name].values[:] = values
    return TrainingReport(stats, best_epoch, best_val)


def write_report_csv(path, report: TrainingReport):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "val_loss", "eq_loss"])
        for s in report.epochs:
            writer.writerow([s.epoch, repr(s.lr), repr(s.train_loss),
                             repr(s.val_loss), repr(s.eq_loss)])
