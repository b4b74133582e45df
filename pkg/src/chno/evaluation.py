"""Evaluation metrics: relative L2 error, windowed box statistics, normalized
free-energy trajectories, equivariance deviation, super-resolution rollout
evaluation, and pointwise error maps, plus their CSV exports.

All metrics are pure functions of arrays/fields; nothing here touches the
tape, so they run on model predictions and solver references alike.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .fields import ScalarField2D, Trajectory, d4_apply_array, d4_elements, d4_inverse, l2_norm_sq
from .operators import rollout
from .solver import CHParams, free_energy

__all__ = [
    "WindowStats",
    "EnergyTrajectory",
    "rel_error",
    "rel_error_root",
    "window_stats",
    "energy_trajectory",
    "equivariance_deviation",
    "superres_eval",
    "error_map",
    "write_frame_errors_csv",
    "write_window_stats_csv",
    "write_energy_comparison_csv",
]


@dataclass(frozen=True)
class WindowStats:
    window_index: int
    median: float
    q25: float
    q75: float
    whisker_lo: float
    whisker_hi: float
    n: int


@dataclass(frozen=True)
class EnergyTrajectory:
    times: np.ndarray
    f_over_f0: np.ndarray


def rel_error(truth: ScalarField2D, pred: ScalarField2D) -> float:
    """Squared-norm ratio ||truth - pred||^2 / ||truth||^2 (reported as-is,
    not square-rooted)."""
    if truth.values.shape != pred.values.shape:
        raise ValueError("shape mismatch")
    denom = l2_norm_sq(truth)
    if denom == 0.0:
        raise ValueError("relative error undefined for zero-norm truth")
    diff = ScalarField2D(truth.grid, truth.values - pred.values)
    return l2_norm_sq(diff) / denom


def rel_error_root(truth: ScalarField2D, pred: ScalarField2D) -> float:
    """Companion unsquared variant, sqrt of rel_error."""
    return math.sqrt(rel_error(truth, pred))


def window_stats(errors, n_windows: int):
    """Box statistics of (time, value) pairs over n_windows equal-width time
    windows spanning [0, t_end].  Quartiles use linear interpolation; whiskers
    sit at 1.5x the interquartile range, clamped to the observed extremes.
    Empty windows are flagged with n = 0 and NaN statistics."""
    errors = list(errors)
    if n_windows < 1:
        raise ValueError("n_windows must be >= 1")
    if not errors:
        raise ValueError("errors must be non-empty")
    t_end = max(t for t, _ in errors)
    buckets = [[] for _ in range(n_windows)]
    for t, v in errors:
        k = min(int(t / t_end * n_windows), n_windows - 1) if t_end > 0 else 0
        buckets[k].append(v)
    out = []
    for k, vals in enumerate(buckets):
        if not vals:
            out.append(WindowStats(k, math.nan, math.nan, math.nan,
                                   math.nan, math.nan, 0))
            continue
        arr = np.asarray(vals, dtype=float)
        q25, med, q75 = np.percentile(arr, [25.0, 50.0, 75.0])
        iqr = q75 - q25
        lo = max(float(arr.min()), q25 - 1.5 * iqr)
        hi = min(float(arr.max()), q75 + 1.5 * iqr)
        out.append(WindowStats(k, float(med), float(q25), float(q75), lo, hi, len(arr)))
    return out


def energy_trajectory(traj: Trajectory, p: CHParams) -> EnergyTrajectory:
    """Per-frame free energy normalized by the first frame's value."""
    if len(traj) < 1:
        raise ValueError("empty trajectory")
    values = np.array([free_energy(f, p).total for f in traj.fields])
    if values[0] == 0.0:
        raise ValueError("normalization undefined: first-frame energy is zero")
    return EnergyTrajectory(traj.times.copy(), values / values[0])


def equivariance_deviation(model, values: np.ndarray) -> float:
    """Mean over the 8 group elements of
    ||g^-1(model(g x)) - model(x)||^2 / ||model(x)||^2."""
    if values.ndim != 4 or values.shape[2] != values.shape[3]:
        raise ValueError("expected a square (batch, channel, h, w) input")
    base = model.predict(values)
    denom = float(np.sum(base * base))
    if denom == 0.0:
        raise ValueError("deviation undefined for zero-norm model output")
    acc = 0.0
    for g in d4_elements():
        out = d4_apply_array(d4_inverse(g), model.predict(d4_apply_array(g, values)))
        acc += float(np.sum((out - base) ** 2)) / denom
    return acc / 8.0


def superres_eval(model, reference: Trajectory, n_in: int, n_out: int):
    """Autoregressive rollout from the first n_in reference frames at the
    reference's own resolution; per predicted frame returns
    (time, rel_error, max_abs_error) against the reference."""
    n_windows = (len(reference) - n_in) // n_out
    if n_windows < 1:
        raise ValueError("reference trajectory too short for one window")
    history = Trajectory(reference.grid, reference.frames[:n_in].copy(),
                         dt=reference.dt, t0=reference.t0)
    pred = rollout(model, history, n_windows)
    rows = []
    for k in range(len(pred)):
        truth = reference.field(n_in + k)
        guess = ScalarField2D(reference.grid, pred.frames[k])
        rows.append((
            float(pred.times[k]),
            rel_error(truth, guess),
            float(np.max(np.abs(truth.values - guess.values))),
        ))
    return rows


def error_map(truth: ScalarField2D, pred: ScalarField2D) -> ScalarField2D:
    """Pointwise |truth - pred| on the shared grid."""
    if truth.values.shape != pred.values.shape:
        raise ValueError("shape mismatch")
    return ScalarField2D(truth.grid, np.abs(truth.values - pred.values))


# ---------------------------------------------------------------------------
# CSV exports
# ---------------------------------------------------------------------------

def write_frame_errors_csv(path, rows):
    """rows: (case_id, t, t_star, rel_error, max_abs)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "t", "t_star", "rel_error", "max_abs"])
        for case_id, t, t_star, err, max_abs in rows:
            writer.writerow([case_id, repr(float(t)), repr(float(t_star)),
                             repr(float(err)), repr(float(max_abs))])


def write_window_stats_csv(path, stats):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window", "median", "q25", "q75", "lo", "hi", "n"])
        for s in stats:
            writer.writerow([s.window_index, repr(s.median), repr(s.q25),
                             repr(s.q75), repr(s.whisker_lo), repr(s.whisker_hi), s.n])


def write_energy_comparison_csv(path, times, truth_ratio, pred_ratio):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "f_over_f0_truth", "f_over_f0_pred"])
        for t, a, b in zip(times, truth_ratio, pred_ratio):
            writer.writerow([repr(float(t)), repr(float(a)), repr(float(b))])
