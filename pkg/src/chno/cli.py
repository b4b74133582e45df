"""The ``chno`` command line: generate / train / eval / predict / version.

Configuration precedence per key: command-line flag, then config-file entry,
then built-in default (for ``generate``, the profile supplies the defaults).
Config files are plain text ``key = value`` lines whose keys match the long
option names with dashes replaced by underscores.  Every resolved key is
written to ``run_config.txt`` in the output directory; that file can be fed
back through ``--config`` to reproduce the run.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Errors print a single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .datasets import (
    ChecksumError,
    DatasetConfig,
    VersionError,
    desk_config,
    generate,
    load_case,
    load_train_data,
    paper_config,
    read_manifest,
)
from .evaluation import (
    equivariance_deviation,
    rel_error,
    superres_eval,
    window_stats,
    write_frame_errors_csv,
    write_window_stats_csv,
)
from .fields import Grid2D, Trajectory, load_trajectory, save_trajectory
from .nncore import LRSchedule
from .operators import (
    RolloutError,
    build_model,
    default_fno_config,
    default_uno_config,
    load_model,
    rollout,
    save_model,
    small_fno_config,
    small_uno_config,
)
from .solver import CHParams, IntegrationError, free_energy, random_initial_state, simulate
from .training import LossConfig, TrainConfig, TrainingError, fit, write_report_csv

__all__ = ["main"]


class UsageError(Exception):
    """Configuration or usage problem detected before the run starts."""


_REQUIRED = object()


def _default_threads():
    try:
        return max(1, int(os.environ.get("CHNO_THREADS", "1")))
    except ValueError:
        return 1


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _read_kv_file(path: str) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    table = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            table[key.strip()] = val.strip()
    return table


def _resolve(args, keys) -> dict:
    """Merge flags, config file, and defaults for the given key specs
    (name, parse_fn, default, choices)."""
    file_vals = _read_kv_file(args.config) if args.config else {}
    known = {name for name, _, _, _ in keys}
    unknown = sorted(set(file_vals) - known)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    out = {}
    for name, parse, default, choices in keys:
        value = getattr(args, name)
        if value is None and name in file_vals:
            try:
                value = parse(file_vals[name])
            except ValueError as exc:
                raise UsageError(f"config key {name!r}: {exc}") from exc
        if value is None:
            value = default() if callable(default) else default
        if value is _REQUIRED:
            raise UsageError(f"missing required option --{name.replace('_', '-')}")
        if choices is not None and value not in choices:
            raise UsageError(f"{name!r} must be one of {', '.join(map(str, choices))}")
        out[name] = value
    return out


def _prepare_out(path: str, force: bool) -> str:
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise UsageError(f"output directory {path!r} is not empty (pass --force to reuse)")
    os.makedirs(path, exist_ok=True)
    return path


def _write_run_config(out_dir: str, resolved: dict):
    lines = [f"{key} = {value}" for key, value in sorted(resolved.items())]
    with open(os.path.join(out_dir, "run_config.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_manifest_dir(data_dir: str):
    path = os.path.join(data_dir, "manifest.txt")
    if not os.path.exists(path):
        raise UsageError(f"no manifest.txt under {data_dir!r}")
    return read_manifest(path)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

_GENERATE_KEYS = (
    ("out", str, _REQUIRED, None),
    ("profile", str, "desk", ("desk", "paper")),
    ("sims", int, None, None),
    ("resolution", int, None, None),
    ("boundary", str, None, ("neumann", "periodic", None)),
    ("gamma", float, None, None),
    ("lam", float, None, None),
    ("epsilon", float, None, None),
    ("dt", float, None, None),
    ("stabilization", float, None, None),
    ("dt_sample", float, None, None),
    ("t_total", float, None, None),
    ("t_burn", float, None, None),
    ("fragments", int, None, None),
    ("n_in", int, None, None),
    ("n_out", int, None, None),
    ("seed", int, None, None),
    ("ic_amplitude", float, None, None),
    ("threads", int, _default_threads, None),
    ("force", _parse_bool, False, None),
    ("deterministic", _parse_bool, True, None),
)


def _dataset_config(r: dict) -> DatasetConfig:
    cfg = desk_config() if r["profile"] == "desk" else paper_config()
    params = cfg.params
    param_over = {}
    for name in ("gamma", "lam", "epsilon", "dt", "stabilization"):
        if r[name] is not None:
            param_over[name] = r[name]
    if r["boundary"] is not None:
        param_over["boundary"] = r["boundary"]
    if param_over:
        params = replace(params, **param_over)
    over = {"params": params, "boundary": params.boundary}
    for key, field_name in (
        ("sims", "n_sims"), ("dt_sample", "dt_sample"), ("t_total", "t_total"),
        ("t_burn", "t_burn"), ("fragments", "fragments_per_sim"),
        ("n_in", "n_in"), ("n_out", "n_out"),
        ("seed", "base_seed"), ("ic_amplitude", "ic_amplitude"),
    ):
        if r[key] is not None:
            over[field_name] = r[key]
    if r["resolution"] is not None:
        over["nx"] = over["ny"] = r["resolution"]
    try:
        return replace(cfg, **over)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_generate(args) -> int:
    r = _resolve(args, _GENERATE_KEYS)
    cfg = _dataset_config(r)
    out = _prepare_out(r["out"], r["force"])
    # record the fully resolved values, not the unset placeholders
    r.update(sims=cfg.n_sims, resolution=cfg.nx, boundary=cfg.boundary,
             gamma=cfg.params.gamma, lam=cfg.params.lam, epsilon=cfg.params.epsilon,
             dt=cfg.params.dt, stabilization=cfg.params.stabilization,
             dt_sample=cfg.dt_sample, t_total=cfg.t_total, t_burn=cfg.t_burn,
             fragments=cfg.fragments_per_sim, n_in=cfg.n_in, n_out=cfg.n_out,
             seed=cfg.base_seed, ic_amplitude=cfg.ic_amplitude)
    _write_run_config(out, r)

    def report(case_id, error):
        status = "ok" if error is None else f"FAILED ({error})"
        print(f"case {case_id}: {status}")

    manifest = generate(cfg, out, workers=r["threads"], progress=report)
    n_ok = cfg.n_sims - len(manifest.failed_cases)
    if manifest.failed_cases:
        print(f"{len(manifest.failed_cases)} of {cfg.n_sims} cases failed: "
              + " ".join(map(str, manifest.failed_cases)))
    if manifest.bound_violations:
        print("bound violations in cases: "
              + " ".join(map(str, manifest.bound_violations)))
    print(f"wrote {os.path.join(out, 'manifest.txt')}")
    if n_ok == 0:
        print("error: every simulation diverged", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_KEYS = (
    ("data", str, _REQUIRED, None),
    ("out", str, _REQUIRED, None),
    ("model", str, "uno", ("uno", "fno")),
    ("size", str, "small", ("small", "full")),
    ("equivariant", str, "on", ("on", "off")),
    ("epochs", int, 50, None),
    ("batch_size", int, 16, None),
    ("data_loss", str, "l2", ("l2", "h1")),
    ("eq_weight", float, 1.0, None),
    ("lr", float, 5e-4, None),
    ("lr_final", float, 1e-5, None),
    ("seed", int, 0, None),
    ("force", _parse_bool, False, None),
    ("deterministic", _parse_bool, True, None),
)

_MODEL_CONFIGS = {
    ("uno", "small"): small_uno_config,
    ("uno", "full"): default_uno_config,
    ("fno", "small"): small_fno_config,
    ("fno", "full"): default_fno_config,
}


def cmd_train(args) -> int:
    r = _resolve(args, _TRAIN_KEYS)
    manifest = _load_manifest_dir(r["data"])
    dcfg = manifest.config
    out = _prepare_out(r["out"], r["force"])
    _write_run_config(out, r)

    model_cfg = _MODEL_CONFIGS[(r["model"], r["size"])]()
    model = build_model(model_cfg, n_in=dcfg.n_in, n_out=dcfg.n_out, seed=r["seed"])
    eq_weight = r["eq_weight"] if r["equivariant"] == "on" else 0.0
    loss_cfg = LossConfig(data_loss=r["data_loss"], eq_weight=eq_weight)
    try:
        train_cfg = TrainConfig(
            epochs=r["epochs"], batch_size=r["batch_size"],
            n_in=dcfg.n_in, n_out=dcfg.n_out,
            lr_schedule=LRSchedule(r["lr"], r["lr_final"], r["epochs"]),
            seed=r["seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    data = load_train_data(r["data"])
    print(f"training {r['model']} ({r['size']}, equivariance {r['equivariant']}) "
          f"on {len(data.train_inputs)} samples for {r['epochs']} epochs")
    report = fit(model, data, train_cfg, loss_cfg)
    checkpoint = os.path.join(out, "model.chck")
    save_model(model, checkpoint)
    write_report_csv(os.path.join(out, "report.csv"), report)
    print(f"best validation loss {report.best_val:.6e} at epoch {report.best_epoch}")
    print(f"wrote {checkpoint}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

_EVAL_KEYS = (
    ("data", str, _REQUIRED, None),
    ("checkpoint", str, _REQUIRED, None),
    ("out", str, _REQUIRED, None),
    ("n_in", int, None, None),
    ("n_windows", int, 6, None),
    ("superres", int, None, None),
    ("dump_error_maps", _parse_bool, False, None),
    ("threads", int, _default_threads, None),
    ("force", _parse_bool, False, None),
    ("deterministic", _parse_bool, True, None),
)


def _fine_reference(cfg: DatasetConfig, case_id: int, factor: int) -> Trajectory:
    """Re-solve one case on a factor-times-refined grid (same seed and times)."""
    grid = Grid2D(cfg.nx * factor, cfg.ny * factor, boundary=cfg.boundary)
    f0 = random_initial_state(grid, seed=cfg.base_seed + case_id,
                              amplitude=cfg.ic_amplitude)
    n_frames = cfg.burn_frames + cfg.frames_per_sim
    traj = simulate(f0, cfg.params, n_steps=cfg.save_every * n_frames,
                    save_every=cfg.save_every)
    return Trajectory(grid, traj.frames[1 + cfg.burn_frames:].copy(),
                      dt=cfg.dt_sample, t0=cfg.t_burn + cfg.dt_sample)


def cmd_eval(args) -> int:
    r = _resolve(args, _EVAL_KEYS)
    manifest = _load_manifest_dir(r["data"])
    dcfg = manifest.config
    if not os.path.exists(r["checkpoint"]):
        raise UsageError(f"checkpoint not found: {r['checkpoint']}")
    model = load_model(r["checkpoint"])
    if r["n_in"] is not None and r["n_in"] != model.n_in:
        raise UsageError(f"checkpoint was trained with n_in = {model.n_in}, "
                         f"but --n-in {r['n_in']} was requested")
    n_in, n_out = model.n_in, model.n_out
    if dcfg.frames_per_sim < n_in + n_out:
        raise UsageError("dataset trajectories are too short for one rollout window")
    test_cases = [cid for cid in sorted(manifest.fragments)
                  if manifest.split[cid] == "test"]
    if not test_cases:
        raise UsageError("dataset has no test cases")
    out = _prepare_out(r["out"], r["force"])
    _write_run_config(out, r)
    if r["dump_error_maps"]:
        os.makedirs(os.path.join(out, "maps"), exist_ok=True)

    frame_rows = []
    energy_rows = []
    eq_rows = []
    for cid in test_cases:
        traj = load_case(r["data"], manifest, cid)
        n_windows = (len(traj) - n_in) // n_out
        head = Trajectory(traj.grid, traj.frames[:n_in].copy(), dt=traj.dt, t0=traj.t0)
        pred = rollout(model, head, n_windows)
        f0 = free_energy(traj.field(0), dcfg.params).total
        maps = []
        for k in range(len(pred)):
            t = float(pred.times[k])
            truth = traj.field(n_in + k)
            guess = pred.field(k)
            try:
                err = rel_error(truth, guess)
            except ValueError:
                err = float("nan")  # metric undefined; row kept, run continues
            max_abs = float(np.max(np.abs(truth.values - guess.values)))
            frame_rows.append((cid, t, t / dcfg.t_total, err, max_abs))
            energy_rows.append((cid, t, free_energy(truth, dcfg.params).total / f0,
                                free_energy(guess, dcfg.params).total / f0))
            maps.append(np.abs(truth.values - guess.values))
        eq_rows.append((cid, equivariance_deviation(model, traj.frames[None, :n_in])))
        if r["dump_error_maps"]:
            save_trajectory(os.path.join(out, "maps", f"case_{cid}.chf2"),
                            Trajectory(traj.grid, np.stack(maps), dt=pred.dt, t0=pred.t0))
        print(f"case {cid}: {len(pred)} frames predicted")

    write_frame_errors_csv(os.path.join(out, "frame_errors.csv"), frame_rows)
    finite = [(t, e) for _, t, _, e, _ in frame_rows if np.isfinite(e)]
    write_window_stats_csv(os.path.join(out, "window_stats.csv"),
                           window_stats(finite, r["n_windows"]))
    with open(os.path.join(out, "energy.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "t", "f_over_f0_truth", "f_over_f0_pred"])
        for cid, t, ft, fp in energy_rows:
            writer.writerow([cid, repr(float(t)), repr(float(ft)), repr(float(fp))])
    with open(os.path.join(out, "equivariance.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "deviation"])
        for cid, dev in eq_rows:
            writer.writerow([cid, repr(float(dev))])

    if r["superres"] is not None:
        if r["superres"] < 2:
            raise UsageError("--superres factor must be >= 2")
        factor = r["superres"]
        if r["threads"] > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=r["threads"]) as pool:
                refs = dict(zip(test_cases, pool.map(
                    _fine_reference, [dcfg] * len(test_cases), test_cases,
                    [factor] * len(test_cases))))
        else:
            refs = {cid: _fine_reference(dcfg, cid, factor) for cid in test_cases}
        with open(os.path.join(out, "superres.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["case_id", "t", "rel_error", "max_abs"])
            for cid in test_cases:
                for t, err, max_abs in superres_eval(model, refs[cid], n_in, n_out):
                    writer.writerow([cid, repr(float(t)), repr(float(err)),
                                     repr(float(max_abs))])
        print(f"super-resolution evaluation at {dcfg.nx * factor}x{dcfg.ny * factor}")

    medians = np.median([e for _, e in finite]) if finite else float("nan")
    print(f"median relative error over {len(frame_rows)} frames: {medians:.6g}")
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

_PREDICT_KEYS = (
    ("checkpoint", str, _REQUIRED, None),
    ("input", str, _REQUIRED, None),
    ("out", str, _REQUIRED, None),
    ("windows", int, 1, None),
    ("dt", float, 0.01, None),
    ("force", _parse_bool, False, None),
    ("deterministic", _parse_bool, True, None),
)


def cmd_predict(args) -> int:
    r = _resolve(args, _PREDICT_KEYS)
    if not os.path.exists(r["checkpoint"]):
        raise UsageError(f"checkpoint not found: {r['checkpoint']}")
    if not os.path.exists(r["input"]):
        raise UsageError(f"input file not found: {r['input']}")
    if r["windows"] < 1:
        raise UsageError("--windows must be >= 1")
    model = load_model(r["checkpoint"])
    seq = load_trajectory(r["input"], dt=r["dt"])
    if len(seq) < model.n_in:
        raise UsageError(f"input holds {len(seq)} frames but the model needs "
                         f"{model.n_in}")
    out = _prepare_out(r["out"], r["force"])
    _write_run_config(out, r)

    history = Trajectory(seq.grid, seq.frames[-model.n_in:].copy(), dt=seq.dt,
                         t0=float(seq.times[len(seq) - model.n_in]))
    frames = []
    t_first = None
    for w in range(r["windows"]):
        start = time.perf_counter()
        pred = rollout(model, history, 1)
        elapsed = time.perf_counter() - start
        print(f"window {w}: {elapsed:.4f} s")
        if t_first is None:
            t_first = pred.t0
        frames.extend(pred.frames)
        merged = np.concatenate([history.frames, pred.frames])[-model.n_in:]
        history = Trajectory(seq.grid, merged, dt=seq.dt,
                             t0=history.t0 + model.n_out * seq.dt)
    result = Trajectory(seq.grid, np.stack(frames), dt=seq.dt, t0=t_first)
    path = os.path.join(out, "prediction.chf2")
    save_trajectory(path, result)
    print(f"wrote {path} ({len(result)} frames)")
    return 0


def cmd_version(args) -> int:
    print(f"chno {__version__}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--config", help="key = value file merged below the flags")
    sub.add_argument("--force", action="store_true", default=None,
                     help="allow writing into a non-empty output directory")
    sub.add_argument("--deterministic", action="store_true", default=None,
                     help="seeded runs are bit-reproducible (always on; recorded)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chno",
        description="Cahn-Hilliard phase-field workbench",
        epilog="Config files list 'key = value' pairs; keys equal the long "
               "option names with '-' replaced by '_'. Flags override the "
               "file. CHNO_THREADS sets the default for --threads.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    g = subs.add_parser("generate", help="simulate a dataset and write it to disk")
    g.add_argument("--out", help="output dataset directory")
    g.add_argument("--profile", choices=["desk", "paper"],
                   help="desk: 40 cases at 32x32; paper: 300 cases at 100x100")
    g.add_argument("--sims", type=int, help="number of simulations")
    g.add_argument("--resolution", type=int, help="grid cells per side")
    g.add_argument("--boundary", choices=["neumann", "periodic"])
    g.add_argument("--gamma", type=float, help="mobility")
    g.add_argument("--lam", type=float, help="surface energy density")
    g.add_argument("--epsilon", type=float, help="interface thickness")
    g.add_argument("--dt", type=float, help="solver time step")
    g.add_argument("--stabilization", type=float, help="semi-implicit splitting shift")
    g.add_argument("--dt-sample", type=float, help="snapshot interval")
    g.add_argument("--t-total", type=float, help="simulated horizon")
    g.add_argument("--t-burn", type=float,
                   help="burn-in time skipped before the first stored frame")
    g.add_argument("--fragments", type=int, help="training fragments per simulation")
    g.add_argument("--n-in", type=int, help="input frames per fragment")
    g.add_argument("--n-out", type=int, help="target frames per fragment")
    g.add_argument("--seed", type=int, help="base seed; case i uses seed + i")
    g.add_argument("--ic-amplitude", type=float, help="initial noise amplitude")
    g.add_argument("--threads", type=int, help="parallel simulation workers")
    _add_common(g)
    g.set_defaults(func=cmd_generate)

    t = subs.add_parser("train", help="train an operator model on a dataset")
    t.add_argument("--data", help="dataset directory (from generate)")
    t.add_argument("--out", help="output directory for model artifacts")
    t.add_argument("--model", choices=["uno", "fno"], help="architecture")
    t.add_argument("--size", choices=["small", "full"],
                   help="small: desk-scale widths; full: published widths")
    t.add_argument("--equivariant", choices=["on", "off"],
                   help="add the symmetry-consistency loss term")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--data-loss", choices=["l2", "h1"],
                   help="h1 adds a spatial-gradient penalty")
    t.add_argument("--eq-weight", type=float,
                   help="weight of the symmetry term when --equivariant on")
    t.add_argument("--lr", type=float, help="initial learning rate")
    t.add_argument("--lr-final", type=float, help="cosine schedule floor")
    t.add_argument("--seed", type=int)
    _add_common(t)
    t.set_defaults(func=cmd_train)

    e = subs.add_parser("eval", help="roll a checkpoint over the test split")
    e.add_argument("--data", help="dataset directory")
    e.add_argument("--checkpoint", help="model checkpoint (.chck)")
    e.add_argument("--out", help="output directory for CSV reports")
    e.add_argument("--n-in", type=int,
                   help="expected input frame count; refused if it differs "
                        "from the checkpoint")
    e.add_argument("--n-windows", type=int, help="time windows in the box statistics")
    e.add_argument("--superres", type=int,
                   help="also evaluate on a factor-N refined reference solve")
    e.add_argument("--dump-error-maps", action="store_true", default=None,
                   help="write per-case |truth - prediction| field files")
    e.add_argument("--threads", type=int, help="parallel refined-solve workers")
    _add_common(e)
    e.set_defaults(func=cmd_eval)

    p = subs.add_parser("predict", help="roll a checkpoint forward from a field file")
    p.add_argument("--checkpoint", help="model checkpoint (.chck)")
    p.add_argument("--input", help="field sequence file; the last n_in frames seed "
                                   "the rollout")
    p.add_argument("--out", help="output directory")
    p.add_argument("--windows", type=int, help="rollout windows (n_out frames each)")
    p.add_argument("--dt", type=float, help="frame spacing of the input sequence")
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    v = subs.add_parser("version", help="print the package version")
    v.set_defaults(func=cmd_version)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, ChecksumError, VersionError, IntegrationError,
            TrainingError, RolloutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
