"""Tests for the evaluation metrics."""

import math

import numpy as np
import pytest

from chno.evaluation import (
    EnergyTrajectory,
    WindowStats,
    energy_trajectory,
    equivariance_deviation,
    error_map,
    rel_error,
    rel_error_root,
    superres_eval,
    window_stats,
    write_energy_comparison_csv,
    write_frame_errors_csv,
    write_window_stats_csv,
)
from chno.fields import Grid2D, ScalarField2D, Trajectory, d4_apply, d4_elements
from chno.nncore import ParamStore, Tape, Tensor4
from chno.operators import FNOConfig, SpectralConv, build_model
from chno.solver import CHParams, random_initial_state, simulate
from chno.spectral import ModeSet


def field_of(values, boundary="neumann"):
    arr = np.asarray(values, dtype=float)
    return ScalarField2D(Grid2D(*arr.shape, boundary=boundary), arr)


# ---------------------------------------------------------------------------
# rel_error
# ---------------------------------------------------------------------------

def test_rel_error_zero_for_identical_fields():
    f = field_of(np.random.default_rng(0).standard_normal((8, 8)))
    assert rel_error(f, f) == 0.0


def test_rel_error_one_for_zero_prediction():
    f = field_of(np.random.default_rng(1).standard_normal((8, 8)))
    zero = field_of(np.zeros((8, 8)))
    assert math.isclose(rel_error(f, zero), 1.0, rel_tol=1e-15)


def test_rel_error_hand_computed_ratio():
    truth = np.zeros((4, 4))
    truth[0, 0] = 1.0
    pred = np.zeros((4, 4))
    pred[0, 0] = 0.5
    assert math.isclose(rel_error(field_of(truth), field_of(pred)), 0.25, rel_tol=1e-15)


def test_rel_error_invariant_under_group_action_and_scaling():
    rng = np.random.default_rng(2)
    truth = field_of(rng.standard_normal((8, 8)))
    pred = field_of(rng.standard_normal((8, 8)))
    base = rel_error(truth, pred)
    for g in d4_elements():
        assert math.isclose(rel_error(d4_apply(g, truth), d4_apply(g, pred)), base,
                            rel_tol=1e-12)
    for alpha in (2.0, -0.3, 17.0):
        scaled = rel_error(field_of(alpha * truth.values), field_of(alpha * pred.values))
        assert math.isclose(scaled, base, rel_tol=1e-12)


def test_rel_error_rejects_zero_norm_truth():
    with pytest.raises(ValueError, match="zero-norm"):
        rel_error(field_of(np.zeros((4, 4))), field_of(np.ones((4, 4))))


def test_rel_error_root_is_sqrt():
    rng = np.random.default_rng(3)
    truth = field_of(rng.standard_normal((8, 8)))
    pred = field_of(rng.standard_normal((8, 8)))
    assert math.isclose(rel_error_root(truth, pred) ** 2, rel_error(truth, pred),
                        rel_tol=1e-14)


# ---------------------------------------------------------------------------
# window_stats
# ---------------------------------------------------------------------------

def quantile_oracle(vals, q):
    s = sorted(vals)
    h = (len(s) - 1) * q
    lo = int(math.floor(h))
    if lo + 1 >= len(s):
        return s[-1]
    return s[lo] + (h - lo) * (s[lo + 1] - s[lo])


def test_window_stats_single_constant_value():
    (s,) = window_stats([(0.5, 3.0)], 1)
    assert s.median == s.q25 == s.q75 == 3.0
    assert s.whisker_lo == s.whisker_hi == 3.0
    assert s.n == 1


def test_window_stats_textbook_quartiles():
    (s,) = window_stats([(0.1, 1.0), (0.2, 2.0), (0.3, 3.0), (0.4, 4.0)], 1)
    assert math.isclose(s.median, 2.5)
    assert math.isclose(s.q25, 1.75)
    assert math.isclose(s.q75, 3.25)
    assert s.n == 4


def test_window_stats_matches_sort_based_oracle():
    rng = np.random.default_rng(4)
    vals = rng.standard_normal(1000)
    errors = [(float(t), float(v)) for t, v in zip(np.linspace(0, 1, 1000), vals)]
    (s,) = window_stats(errors, 1)
    q25, med, q75 = (quantile_oracle(vals, q) for q in (0.25, 0.5, 0.75))
    assert math.isclose(s.median, med, rel_tol=1e-12)
    assert math.isclose(s.q25, q25, rel_tol=1e-12)
    assert math.isclose(s.q75, q75, rel_tol=1e-12)
    iqr = q75 - q25
    assert math.isclose(s.whisker_lo, max(vals.min(), q25 - 1.5 * iqr), rel_tol=1e-12)
    assert math.isclose(s.whisker_hi, min(vals.max(), q75 + 1.5 * iqr), rel_tol=1e-12)
    assert s.q25 <= s.median <= s.q75
    assert s.whisker_lo <= s.q25 and s.q75 <= s.whisker_hi


def test_window_stats_assigns_windows_by_time():
    errors = [(0.0, 1.0), (0.49, 2.0), (0.5, 10.0), (1.0, 20.0)]
    lo, hi = window_stats(errors, 2)
    assert lo.n == 2 and math.isclose(lo.median, 1.5)
    assert hi.n == 2 and math.isclose(hi.median, 15.0)


def test_window_stats_flags_empty_windows():
    stats = window_stats([(0.0, 1.0), (1.0, 2.0)], 3)
    assert stats[1].n == 0
    assert math.isnan(stats[1].median)
    assert stats[0].n == 1 and stats[2].n == 1


def test_window_stats_validation():
    with pytest.raises(ValueError, match="n_windows"):
        window_stats([(0.0, 1.0)], 0)
    with pytest.raises(ValueError, match="non-empty"):
        window_stats([], 2)


# ---------------------------------------------------------------------------
# energy_trajectory
# ---------------------------------------------------------------------------

def test_energy_trajectory_constant_in_time_is_all_ones():
    grid = Grid2D(8, 8)
    rng = np.random.default_rng(5)
    frame = 0.1 * rng.standard_normal((8, 8))
    traj = Trajectory(grid, np.stack([frame] * 4), dt=0.1)
    out = energy_trajectory(traj, CHParams())
    assert np.allclose(out.f_over_f0, 1.0, atol=1e-15)
    assert out.f_over_f0[0] == 1.0


def test_energy_trajectory_halving_oracle():
    # uniform fields have no gradient energy; W(0) = 1/4 and the level c with
    # W(c) = 1/8 makes the second frame's energy exactly half the first's
    grid = Grid2D(8, 8)
    c = math.sqrt(1.0 - 1.0 / math.sqrt(2.0))
    frames = np.stack([np.zeros((8, 8)), np.full((8, 8), c)])
    out = energy_trajectory(Trajectory(grid, frames, dt=1.0), CHParams())
    assert np.allclose(out.f_over_f0, [1.0, 0.5], atol=1e-12)


def test_energy_trajectory_of_solver_run_is_non_increasing():
    grid = Grid2D(16, 16)
    p = CHParams(epsilon=0.05, dt=1e-5)
    f0 = random_initial_state(grid, seed=6)
    traj = simulate(f0, p, n_steps=200, save_every=20)
    out = energy_trajectory(traj, p)
    assert np.all(np.diff(out.f_over_f0) <= 1e-10)


def test_energy_trajectory_rejects_zero_normalization():
    grid = Grid2D(8, 8)
    traj = Trajectory(grid, np.ones((2, 8, 8)), dt=1.0)  # pure phase: F == 0
    with pytest.raises(ValueError, match="zero"):
        energy_trajectory(traj, CHParams())


# ---------------------------------------------------------------------------
# equivariance_deviation
# ---------------------------------------------------------------------------

class _PredictStub:
    def __init__(self, fn):
        self.fn = fn

    def predict(self, values):
        return self.fn(values)


def test_equivariance_deviation_identity_model_is_zero():
    x = np.random.default_rng(7).standard_normal((1, 2, 8, 8))
    assert equivariance_deviation(_PredictStub(lambda v: v.copy()), x) == 0.0


def test_equivariance_deviation_pointwise_model_is_zero():
    cfg = FNOConfig(width=4, n_layers=1, modes=1, lift_hidden=3, proj_hidden=3,
                    coordinate_channels=False)
    model = build_model(cfg, n_in=2, n_out=1, seed=8)
    model.store["block0.spectral.re"].values[:] = 0.0
    model.store["block0.spectral.im"].values[:] = 0.0
    x = np.random.default_rng(9).standard_normal((1, 2, 8, 8))
    assert equivariance_deviation(model, x) == 0.0


def test_equivariance_deviation_positive_for_asymmetric_mode():
    store = ParamStore()
    rng = np.random.default_rng(0)
    conv = SpectralConv(store, "s", 1, 1, ModeSet(1, 1), (1.0, 1.0), rng)
    store["s.re"].values[:] = 0.0
    store["s.im"].values[:] = 0.0
    store["s.re"].values[1, 0, 0, 0] = 1.0  # kx-only mode: breaks x/y symmetry

    def apply_conv(values):
        return conv(Tensor4(values.copy(), Tape())).values

    x = np.random.default_rng(10).standard_normal((1, 1, 8, 8))
    assert equivariance_deviation(_PredictStub(apply_conv), x) > 1e-3


def test_equivariance_deviation_rejects_zero_output():
    x = np.random.default_rng(11).standard_normal((1, 1, 8, 8))
    with pytest.raises(ValueError, match="zero-norm"):
        equivariance_deviation(_PredictStub(lambda v: np.zeros_like(v)), x)


def test_equivariance_deviation_requires_square():
    with pytest.raises(ValueError, match="square"):
        equivariance_deviation(_PredictStub(lambda v: v), np.zeros((1, 1, 8, 6)))


# ---------------------------------------------------------------------------
# superres_eval
# ---------------------------------------------------------------------------

class _LastFrameStub:
    def __init__(self, n_in=5, n_out=3):
        self.n_in, self.n_out = n_in, n_out

    def predict(self, values):
        return np.repeat(values[:, -1:], self.n_out, axis=1)


def constant_trajectory(n_frames, n, value=1.0):
    grid = Grid2D(n, n, boundary="periodic")
    return Trajectory(grid, np.full((n_frames, n, n), value), dt=0.01)


def test_superres_eval_zero_errors_for_constant_identity_case():
    model = _LastFrameStub()
    for n in (8, 16, 32):
        rows = superres_eval(model, constant_trajectory(11, n), n_in=5, n_out=3)
        assert len(rows) == 6  # two windows of three frames
        for _, err, max_abs in rows:
            assert err == 0.0 and max_abs == 0.0


def test_superres_eval_times_follow_reference():
    model = _LastFrameStub()
    ref = constant_trajectory(11, 8)
    rows = superres_eval(model, ref, n_in=5, n_out=3)
    times = [t for t, _, _ in rows]
    assert np.allclose(times, ref.times[5:11])


def test_superres_eval_reports_frame_errors():
    rng = np.random.default_rng(12)
    grid = Grid2D(8, 8, boundary="periodic")
    frames = rng.standard_normal((8, 8, 8)) + 2.0
    ref = Trajectory(grid, frames, dt=0.01)
    model = _LastFrameStub()
    rows = superres_eval(model, ref, n_in=5, n_out=3)
    assert len(rows) == 3
    truth = ScalarField2D(grid, frames[5])
    guess = ScalarField2D(grid, frames[4])  # stub repeats the last input
    assert math.isclose(rows[0][1], rel_error(truth, guess), rel_tol=1e-13)
    assert math.isclose(rows[0][2], float(np.max(np.abs(frames[5] - frames[4]))),
                        rel_tol=1e-13)


def test_superres_eval_too_short_reference():
    with pytest.raises(ValueError, match="short"):
        superres_eval(_LastFrameStub(), constant_trajectory(7, 8), n_in=5, n_out=3)


# ---------------------------------------------------------------------------
# error_map
# ---------------------------------------------------------------------------

def test_error_map_zero_and_offset():
    rng = np.random.default_rng(13)
    f = field_of(rng.standard_normal((8, 8)))
    assert np.all(error_map(f, f).values == 0.0)
    shifted = field_of(f.values - 0.7)
    assert np.allclose(error_map(f, shifted).values, 0.7, atol=1e-15)


def test_error_map_max_equals_linf_oracle():
    rng = np.random.default_rng(14)
    for trial in range(5):
        a = rng.standard_normal((8, 8))
        b = rng.standard_normal((8, 8))
        linf = max(abs(a[i, j] - b[i, j]) for i in range(8) for j in range(8))
        assert float(error_map(field_of(a), field_of(b)).values.max()) == linf


def test_error_map_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        error_map(field_of(np.zeros((8, 8))), field_of(np.zeros((8, 6))))


# ---------------------------------------------------------------------------
# CSV exports
# ---------------------------------------------------------------------------

def test_frame_errors_csv(tmp_path):
    rows = [(3, 0.01, 0.1, 0.5, 0.9), (3, 0.02, 0.2, 0.4, 0.8)]
    path = tmp_path / "frames.csv"
    write_frame_errors_csv(path, rows)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "case_id,t,t_star,rel_error,max_abs"
    assert len(lines) == 3
    assert float(lines[1].split(",")[3]) == 0.5


def test_window_stats_csv(tmp_path):
    stats = window_stats([(0.1, 1.0), (0.9, 2.0)], 2)
    path = tmp_path / "windows.csv"
    write_window_stats_csv(path, stats)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "window,median,q25,q75,lo,hi,n"
    assert len(lines) == 3


def test_energy_csv(tmp_path):
    path = tmp_path / "energy.csv"
    write_energy_comparison_csv(path, [0.0, 0.1], [1.0, 0.9], [1.0, 0.92])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "t,f_over_f0_truth,f_over_f0_pred"
    assert float(lines[2].split(",")[2]) == 0.92
