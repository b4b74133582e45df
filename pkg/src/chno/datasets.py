"""Dataset generation, fragment extraction, splits, and the on-disk layout.

A dataset directory holds:

    manifest.txt     - key = value header, then [split] and [fragments] tables
    cases/case_<id>.chf2 - one trajectory file per simulation (sampled frames)
    checksums.txt    - CRC-64/XZ of every written file

Per-case determinism: simulation i uses seed base_seed + i for both its
initial condition and its fragment selection, so generation is byte-identical
regardless of worker count or ordering.  Fragment start indices are chosen at
generation time and recorded in the manifest; loading never re-randomizes.

The stored frames start at t = t_burn + dt_sample: the noise-like initial
condition is never a useful training frame, and a profile may additionally
skip a burn-in window (t_burn) so that every stored frame shows developed
morphology rather than the noise-to-phase transition.  A default run keeps
30 frames spanning (0, 0.3].
"""

from __future__ import annotations

import concurrent.futures
import os
from dataclasses import dataclass, field

import numpy as np

from .fields import Grid2D, Trajectory, load_trajectory, save_trajectory
from .solver import CHParams, IntegrationError, random_initial_state, simulate
from .training import TrainData

__all__ = [
    "DatasetConfig",
    "DatasetManifest",
    "Sample",
    "ChecksumError",
    "VersionError",
    "crc64",
    "desk_config",
    "paper_config",
    "split_cases",
    "extract_fragments",
    "generate",
    "read_manifest",
    "load_samples",
    "load_arrays",
    "load_train_data",
    "verify_checksums",
]

FORMAT_VERSION = 1
BOUND_LIMIT = 1.05


# ---------------------------------------------------------------------------
# CRC-64/XZ (reflected polynomial, init/xorout all-ones)
# ---------------------------------------------------------------------------

def _crc_table():
    poly = 0xC96C5795D7870F42
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ (poly if crc & 1 else 0)
        table.append(crc)
    return tuple(table)


_CRC_TABLE = _crc_table()


def crc64(data: bytes) -> int:
    """CRC-64/XZ; crc64(b"123456789") == 0x995DC9BBDF1939FA."""
    crc = 0xFFFFFFFFFFFFFFFF
    table = _CRC_TABLE
    for byte in data:
        crc = (crc >> 8) ^ table[(crc ^ byte) & 0xFF]
    return crc ^ 0xFFFFFFFFFFFFFFFF


class ChecksumError(RuntimeError):
    pass


class VersionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    n_sims: int = 40
    nx: int = 32
    ny: int = 32
    boundary: str = "neumann"
    params: CHParams = field(default_factory=CHParams)
    dt_sample: float = 0.01
    t_total: float = 0.3
    t_burn: float = 0.0
    fragments_per_sim: int = 8
    n_in: int = 5
    n_out: int = 3
    base_seed: int = 0
    ic_amplitude: float = 0.05

    def __post_init__(self):
        if self.n_sims < 1:
            raise ValueError("n_sims must be >= 1")
        if self.fragments_per_sim < 1 or self.n_in < 1 or self.n_out < 1:
            raise ValueError("fragment shape fields must be >= 1")
        if self.t_burn < 0 or self.t_burn >= self.t_total:
            raise ValueError("t_burn must lie in [0, t_total)")
        if abs(self.save_every - self.dt_sample / self.params.dt) > 1e-9:
            raise ValueError("dt_sample must be an integer multiple of the solver dt")
        if abs(self.burn_frames - self.t_burn / self.dt_sample) > 1e-9:
            raise ValueError("t_burn must be an integer multiple of dt_sample")
        if abs(self.burn_frames + self.frames_per_sim
               - self.t_total / self.dt_sample) > 1e-9:
            raise ValueError("t_total must be an integer multiple of dt_sample")
        if self.frames_per_sim < self.n_in + self.n_out:
            raise ValueError("t_total too short for a single fragment window")

    @property
    def save_every(self) -> int:
        return int(round(self.dt_sample / self.params.dt))

    @property
    def burn_frames(self) -> int:
        """Sampled frames before the first stored one (spinodal burn-in)."""
        return int(round(self.t_burn / self.dt_sample))

    @property
    def frames_per_sim(self) -> int:
        return int(round((self.t_total - self.t_burn) / self.dt_sample))

    @property
    def grid(self) -> Grid2D:
        return Grid2D(self.nx, self.ny, boundary=self.boundary)


def desk_config() -> DatasetConfig:
    """32-cell grid, 40 simulations: the laptop-scale profile.

    The interface parameters scale with the grid (epsilon = lam = dx) so the
    32-cell solve resolves the interface exactly as the full-scale profile
    does; a burn-in of 0.04 drops the noise-to-phase transition so every
    stored frame shows developed morphology, mirroring the full-scale frame
    content (where the transition completes before the first sample).
    """
    return DatasetConfig(params=CHParams(lam=1.0 / 32.0, epsilon=1.0 / 32.0),
                         t_burn=0.04)


def paper_config() -> DatasetConfig:
    """100-cell grid, 300 simulations: the full-scale profile."""
    return DatasetConfig(n_sims=300, nx=100, ny=100)


@dataclass
class DatasetManifest:
    config: DatasetConfig
    split: dict
    fragments: dict
    failed_cases: tuple = ()
    bound_violations: tuple = ()
    format_version: int = FORMAT_VERSION


@dataclass(frozen=True)
class Sample:
    case_id: int
    fragment_id: int
    inputs: np.ndarray
    targets: np.ndarray
    t_start: float


# ---------------------------------------------------------------------------
# splits and fragments
# ---------------------------------------------------------------------------

def split_cases(n: int, seed: int) -> dict:
    """Seeded shuffle, then 80/10/10 by position (sizes exact to +-1 case)."""
    if n < 10:
        raise ValueError("need at least 10 cases for an 80/10/10 split")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    split = {}
    for pos, case in enumerate(order):
        if pos < n_train:
            split[int(case)] = "train"
        elif pos < n_train + n_val:
            split[int(case)] = "val"
        else:
            split[int(case)] = "test"
    return split


def _fragment_starts(traj: Trajectory, n_fragments: int, window: int, seed: int):
    n_starts = len(traj) - window + 1
    if n_starts < 1:
        raise ValueError("trajectory too short for one fragment window")
    if n_fragments > n_starts:
        raise ValueError(
            f"cannot draw {n_fragments} distinct fragments from {n_starts} windows"
        )
    diffs = np.diff(traj.frames, axis=0)
    rates = np.sqrt(np.sum(diffs * diffs, axis=(1, 2)))[:n_starts]
    weights = rates + 1e-12 * max(float(rates.max()), 1.0)
    weights /= weights.sum()
    rng = np.random.default_rng(seed)
    starts = rng.choice(n_starts, size=n_fragments, replace=False, p=weights)
    return tuple(int(s) for s in np.sort(starts))


def extract_fragments(traj: Trajectory, n_fragments: int, n_in: int, n_out: int,
                      seed: int, case_id: int = 0):
    """Draw n_fragments window start indices without replacement, weighted by
    the frame-difference norm at each window's start (rapid-evolution
    emphasis), and slice the trajectory into Samples."""
    window = n_in + n_out
    starts = _fragment_starts(traj, n_fragments, window, seed)
    return [
        Sample(
            case_id=case_id,
            fragment_id=k,
            inputs=traj.frames[s : s + n_in].copy(),
            targets=traj.frames[s + n_in : s + window].copy(),
            t_start=float(traj.times[s]),
        )
        for k, s in enumerate(starts)
    ]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _run_case(cfg: DatasetConfig, case_id: int, case_path: str):
    """Simulate one case, write its file, and report (starts, violated, error)."""
    seed = cfg.base_seed + case_id
    f0 = random_initial_state(cfg.grid, seed=seed, amplitude=cfg.ic_amplitude)
    n_steps = cfg.save_every * (cfg.burn_frames + cfg.frames_per_sim)
    try:
        # overflow on a diverging case is the expected failure mode, not noise
        with np.errstate(over="ignore", invalid="ignore"):
            traj = simulate(f0, cfg.params, n_steps=n_steps,
                            save_every=cfg.save_every, seed=seed)
    except IntegrationError as exc:
        return case_id, None, False, f"step {exc.step_index}: {exc}"
    # drop the t = 0 noise frame and the burn-in: stored frames span
    # (t_burn, t_total]
    stored = Trajectory(cfg.grid, traj.frames[1 + cfg.burn_frames :].copy(),
                        dt=cfg.dt_sample, t0=cfg.t_burn + cfg.dt_sample)
    violated = bool(np.max(np.abs(stored.frames)) > BOUND_LIMIT)
    starts = _fragment_starts(stored, cfg.fragments_per_sim, cfg.n_in + cfg.n_out,
                              seed=seed)
    save_trajectory(case_path, stored)
    return case_id, starts, violated, None


def generate(cfg: DatasetConfig, out_dir, workers: int = 1,
             progress=None) -> DatasetManifest:
    """Simulate all cases (optionally in parallel), write the dataset
    directory, and return its manifest.  Failed cases are recorded and skipped
    rather than aborting the run."""
    out_dir = os.fspath(out_dir)
    cases_dir = os.path.join(out_dir, "cases")
    os.makedirs(cases_dir, exist_ok=True)

    jobs = [(case_id, os.path.join(cases_dir, f"case_{case_id}.chf2"))
            for case_id in range(cfg.n_sims)]
    results = {}
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_run_case, cfg, cid, path): cid for cid, path in jobs}
            for fut in concurrent.futures.as_completed(futures):
                case_id, starts, violated, error = fut.result()
                results[case_id] = (starts, violated, error)
                if progress is not None:
                    progress(case_id, error)
    else:
        for cid, path in jobs:
            case_id, starts, violated, error = _run_case(cfg, cid, path)
            results[case_id] = (starts, violated, error)
            if progress is not None:
                progress(case_id, error)

    failed = tuple(cid for cid in range(cfg.n_sims) if results[cid][2] is not None)
    violations = tuple(cid for cid in range(cfg.n_sims)
                       if results[cid][2] is None and results[cid][1])
    fragments = {cid: results[cid][0] for cid in range(cfg.n_sims)
                 if results[cid][2] is None}
    manifest = DatasetManifest(
        config=cfg,
        split=split_cases(cfg.n_sims, cfg.base_seed),
        fragments=fragments,
        failed_cases=failed,
        bound_violations=violations,
    )
    _write_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    _write_checksums(out_dir)
    return manifest


def _write_checksums(out_dir):
    entries = ["manifest.txt"] + sorted(
        os.path.join("cases", name) for name in os.listdir(os.path.join(out_dir, "cases"))
    )
    lines = []
    for rel in entries:
        with open(os.path.join(out_dir, rel), "rb") as fh:
            lines.append(f"{crc64(fh.read()):016x}  {rel}")
    with open(os.path.join(out_dir, "checksums.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------------

def _write_manifest(path, m: DatasetManifest):
    cfg = m.config
    p = cfg.params
    lines = [
        f"format_version = {m.format_version}",
        f"n_sims = {cfg.n_sims}",
        f"nx = {cfg.nx}",
        f"ny = {cfg.ny}",
        f"boundary = {cfg.boundary}",
        f"gamma = {p.gamma!r}",
        f"lam = {p.lam!r}",
        f"epsilon = {p.epsilon!r}",
        f"dt = {p.dt!r}",
        f"stabilization = {p.stabilization!r}",
        f"dt_sample = {cfg.dt_sample!r}",
        f"t_total = {cfg.t_total!r}",
        f"t_burn = {cfg.t_burn!r}",
        f"frames_per_sim = {cfg.frames_per_sim}",
        f"fragments_per_sim = {cfg.fragments_per_sim}",
        f"n_in = {cfg.n_in}",
        f"n_out = {cfg.n_out}",
        f"base_seed = {cfg.base_seed}",
        f"ic_amplitude = {cfg.ic_amplitude!r}",
        "failed_cases = " + " ".join(str(c) for c in m.failed_cases),
        "bound_violations = " + " ".join(str(c) for c in m.bound_violations),
        "[split]",
    ]
    for case_id in sorted(m.split):
        lines.append(f"{case_id} {m.split[case_id]}")
    lines.append("[fragments]")
    for case_id in sorted(m.fragments):
        starts = " ".join(str(s) for s in m.fragments[case_id])
        lines.append(f"{case_id} {starts}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    kv = {}
    split = {}
    fragments = {}
    section = None
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line in ("[split]", "[fragments]"):
                section = line
                continue
            if section is None:
                key, _, val = line.partition("=")
                kv[key.strip()] = val.strip()
            elif section == "[split]":
                cid, name = line.split()
                split[int(cid)] = name
            else:
                parts = line.split()
                fragments[int(parts[0])] = tuple(int(s) for s in parts[1:])
    version = int(kv["format_version"])
    if version != FORMAT_VERSION:
        raise VersionError(f"manifest format version {version}, expected {FORMAT_VERSION}")
    cfg = DatasetConfig(
        n_sims=int(kv["n_sims"]),
        nx=int(kv["nx"]),
        ny=int(kv["ny"]),
        boundary=kv["boundary"],
        params=CHParams(
            gamma=float(kv["gamma"]),
            lam=float(kv["lam"]),
            epsilon=float(kv["epsilon"]),
            dt=float(kv["dt"]),
            stabilization=float(kv["stabilization"]),
            boundary=kv["boundary"],
        ),
        dt_sample=float(kv["dt_sample"]),
        t_total=float(kv["t_total"]),
        t_burn=float(kv["t_burn"]),
        fragments_per_sim=int(kv["fragments_per_sim"]),
        n_in=int(kv["n_in"]),
        n_out=int(kv["n_out"]),
        base_seed=int(kv["base_seed"]),
        ic_amplitude=float(kv["ic_amplitude"]),
    )
    failed = tuple(int(c) for c in kv["failed_cases"].split())
    violations = tuple(int(c) for c in kv["bound_violations"].split())
    return DatasetManifest(cfg, split, fragments, failed, violations, version)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _expected_checksums(out_dir) -> dict:
    path = os.path.join(out_dir, "checksums.txt")
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing checksums.txt in {out_dir}")
    table = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                digest, rel = line.split(None, 1)
                table[rel.strip()] = int(digest, 16)
    return table


def _checked_read(out_dir, rel, table):
    path = os.path.join(out_dir, rel)
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing dataset file {rel}")
    with open(path, "rb") as fh:
        data = fh.read()
    if rel not in table:
        raise ChecksumError(f"{rel} has no checksum entry")
    if crc64(data) != table[rel]:
        raise ChecksumError(f"checksum mismatch for {rel}")
    return path


def load_case(out_dir, manifest: DatasetManifest, case_id: int,
              table=None) -> Trajectory:
    if table is None:
        table = _expected_checksums(out_dir)
    cfg = manifest.config
    path = _checked_read(out_dir, os.path.join("cases", f"case_{case_id}.chf2"), table)
    return load_trajectory(path, dt=cfg.dt_sample, t0=cfg.t_burn + cfg.dt_sample,
                           boundary=cfg.boundary)


def load_samples(out_dir, split_filter: str | None = None):
    """Stream Samples for the requested split (None = all), validating the
    manifest version and each file's checksum."""
    out_dir = os.fspath(out_dir)
    manifest = read_manifest(os.path.join(out_dir, "manifest.txt"))
    table = _expected_checksums(out_dir)
    cfg = manifest.config
    for case_id in sorted(manifest.fragments):
        if split_filter is not None and manifest.split[case_id] != split_filter:
            continue
        traj = load_case(out_dir, manifest, case_id, table)
        window = cfg.n_in + cfg.n_out
        for k, s in enumerate(manifest.fragments[case_id]):
            yield Sample(
                case_id=case_id,
                fragment_id=k,
                inputs=traj.frames[s : s + cfg.n_in].copy(),
                targets=traj.frames[s + cfg.n_in : s + window].copy(),
                t_start=float(traj.times[s]),
            )


def load_arrays(out_dir, split_filter: str | None = None):
    """Stacked (inputs, targets) arrays in deterministic case/fragment order."""
    inputs, targets = [], []
    for sample in load_samples(out_dir, split_filter):
        inputs.append(sample.inputs)
        targets.append(sample.targets)
    if not inputs:
        raise ValueError(f"no samples for split {split_filter!r}")
    return np.stack(inputs), np.stack(targets)


def load_train_data(out_dir) -> TrainData:
    train_x, train_y = load_arrays(out_dir, "train")
    val_x, val_y = load_arrays(out_dir, "val")
    return TrainData(train_x, train_y, val_x, val_y)


def verify_checksums(out_dir) -> int:
    """Re-hash every file listed in checksums.txt; returns the file count."""
    out_dir = os.fspath(out_dir)
    table = _expected_checksums(out_dir)
    for rel in table:
        _checked_read(out_dir, rel, table)
    return len(table)
