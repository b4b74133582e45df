"""Tests for dataset generation, splits, fragments, and the on-disk format."""

import hashlib
import os

import numpy as np
import pytest

from chno.datasets import (
    BOUND_LIMIT,
    ChecksumError,
    DatasetConfig,
    Sample,
    VersionError,
    crc64,
    desk_config,
    extract_fragments,
    generate,
    load_arrays,
    load_case,
    load_samples,
    load_train_data,
    paper_config,
    read_manifest,
    split_cases,
    verify_checksums,
)
from chno.fields import Grid2D, Trajectory, load_trajectory
from chno.solver import CHParams, random_initial_state, simulate


def small_config(**kw):
    base = dict(n_sims=10, nx=16, ny=16, t_total=0.10, fragments_per_sim=2)
    base.update(kw)
    return DatasetConfig(**base)


def tree_bytes(root):
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            digest.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()


def ramp_trajectory(n_frames, nx=8, speeds=None):
    """Frames whose step-to-step change at index k has norm speeds[k]."""
    grid = Grid2D(nx, nx)
    if speeds is None:
        speeds = np.ones(n_frames - 1)
    frames = [np.zeros((nx, nx))]
    for s in speeds:
        bump = np.zeros((nx, nx))
        bump[0, 0] = s  # difference norm == s exactly
        frames.append(frames[-1] + bump)
    return Trajectory(grid, np.stack(frames), dt=0.01, t0=0.01)


# ---------------------------------------------------------------------------
# crc64
# ---------------------------------------------------------------------------

def test_crc64_check_value():
    assert crc64(b"123456789") == 0x995DC9BBDF1939FA


def test_crc64_empty_and_sensitivity():
    assert crc64(b"") == 0
    assert crc64(b"abc") != crc64(b"abd")
    assert crc64(b"abc") != crc64(b"abc\x00")


def crc64_bitwise(data):
    # independent oracle: reflected CRC computed bit by bit, no lookup table
    poly = 0xC96C5795D7870F42
    crc = 0xFFFFFFFFFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
    return crc ^ 0xFFFFFFFFFFFFFFFF


def test_crc64_matches_bitwise_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        data = rng.integers(0, 256, size=rng.integers(0, 64)).astype(np.uint8).tobytes()
        assert crc64(data) == crc64_bitwise(data)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def test_split_sizes_exact():
    for n, sizes in [(300, (240, 30, 30)), (40, (32, 4, 4)), (10, (8, 1, 1))]:
        split = split_cases(n, seed=0)
        assert sorted(split) == list(range(n))
        counts = tuple(sum(1 for v in split.values() if v == name)
                       for name in ("train", "val", "test"))
        assert counts == sizes


def test_split_deterministic_and_seed_sensitive():
    assert split_cases(40, seed=3) == split_cases(40, seed=3)
    assert split_cases(40, seed=3) != split_cases(40, seed=4)


def test_split_is_shuffled_not_positional():
    split = split_cases(300, seed=0)
    # a positional split would put cases 0..239 in train; a shuffle will not
    assert any(split[c] != "train" for c in range(240))


def test_split_rejects_tiny_case_counts():
    with pytest.raises(ValueError):
        split_cases(9, seed=0)


# ---------------------------------------------------------------------------
# fragments
# ---------------------------------------------------------------------------

def test_fragments_are_distinct_sorted_and_sliced_correctly():
    traj = ramp_trajectory(30)
    for seed in range(6):
        frags = extract_fragments(traj, n_fragments=10, n_in=5, n_out=3,
                                  seed=seed, case_id=4)
        starts = []
        for k, s in enumerate(frags):
            assert s.case_id == 4 and s.fragment_id == k
            # recover the start index from the fragment's start time
            start = int(round((s.t_start - traj.t0) / traj.dt))
            starts.append(start)
            assert np.array_equal(s.inputs, traj.frames[start : start + 5])
            assert np.array_equal(s.targets, traj.frames[start + 5 : start + 8])
            assert s.t_start == pytest.approx(float(traj.times[start]))
        assert len(set(starts)) == len(starts)
        assert starts == sorted(starts)
        assert all(0 <= s <= len(traj) - 8 for s in starts)


def test_fragments_without_replacement_pigeonhole():
    traj = ramp_trajectory(30)  # 23 admissible windows of length 8
    extract_fragments(traj, n_fragments=23, n_in=5, n_out=3, seed=0)
    with pytest.raises(ValueError):
        extract_fragments(traj, n_fragments=24, n_in=5, n_out=3, seed=0)


def test_fragments_single_window_case():
    traj = ramp_trajectory(8)
    frags = extract_fragments(traj, n_fragments=1, n_in=5, n_out=3, seed=0)
    assert len(frags) == 1
    assert np.array_equal(frags[0].inputs, traj.frames[:5])


def test_fragments_weighted_toward_fast_frames():
    # change rate decays 100x across the trajectory; the mean selected start
    # must sit well below the uniform-sampling mean over many seeds
    speeds = 1.0 / (1.0 + np.arange(29)) ** 2
    traj = ramp_trajectory(30, speeds=speeds)
    n_windows = 23
    picks = []
    for seed in range(200):
        frags = extract_fragments(traj, n_fragments=4, n_in=5, n_out=3, seed=seed)
        picks.extend(int(round((f.t_start - traj.t0) / traj.dt)) for f in frags)
    uniform_mean = (n_windows - 1) / 2.0
    assert np.mean(picks) < 0.6 * uniform_mean


def test_fragments_reject_too_short_trajectory():
    traj = ramp_trajectory(6)
    with pytest.raises(ValueError):
        extract_fragments(traj, n_fragments=1, n_in=5, n_out=3, seed=0)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_profile_shapes():
    desk = desk_config()
    assert (desk.n_sims, desk.nx, desk.ny) == (40, 32, 32)
    assert desk.frames_per_sim == 26 and desk.save_every == 100
    assert desk.burn_frames == 4
    assert desk.boundary == "neumann"
    # interface parameters scale with the grid: the 32-cell profile keeps the
    # same cells-per-interface ratio as the 100-cell one
    assert desk.params.epsilon / desk.grid.dx == pytest.approx(1.0)
    paper = paper_config()
    assert (paper.n_sims, paper.nx, paper.ny) == (300, 100, 100)
    assert paper.frames_per_sim == 30 and paper.t_burn == 0.0
    assert paper.params.epsilon / paper.grid.dx == pytest.approx(1.0)


def test_config_rejects_incommensurate_times():
    with pytest.raises(ValueError):
        DatasetConfig(dt_sample=0.0107)
    with pytest.raises(ValueError):
        DatasetConfig(t_total=0.305)
    with pytest.raises(ValueError):
        DatasetConfig(t_total=0.07)  # 7 frames < n_in + n_out
    with pytest.raises(ValueError):
        DatasetConfig(n_sims=0)


# ---------------------------------------------------------------------------
# generation and layout
# ---------------------------------------------------------------------------

def test_generate_layout_and_manifest_roundtrip(tmp_path):
    cfg = small_config()
    manifest = generate(cfg, tmp_path)
    assert sorted(os.listdir(tmp_path)) == ["cases", "checksums.txt", "manifest.txt"]
    names = sorted(os.listdir(tmp_path / "cases"))
    assert names == sorted(f"case_{i}.chf2" for i in range(10))
    assert manifest.failed_cases == () and manifest.bound_violations == ()
    back = read_manifest(tmp_path / "manifest.txt")
    assert back.config == cfg
    assert back.split == manifest.split
    assert back.fragments == manifest.fragments
    assert back.failed_cases == () and back.bound_violations == ()
    assert verify_checksums(tmp_path) == 11  # manifest + 10 cases


def test_generate_drops_initial_frame(tmp_path):
    cfg = small_config(n_sims=10)
    generate(cfg, tmp_path)
    traj = load_trajectory(tmp_path / "cases" / "case_0.chf2",
                           dt=cfg.dt_sample, t0=cfg.dt_sample)
    assert len(traj) == cfg.frames_per_sim
    assert traj.times[0] == pytest.approx(cfg.dt_sample)
    assert traj.times[-1] == pytest.approx(cfg.t_total)
    # stored frames must be the solver states at t = dt_sample, 2*dt_sample,
    # ... with the t = 0 noise frame dropped: recompute case 0 independently
    f0 = random_initial_state(cfg.grid, seed=cfg.base_seed, amplitude=cfg.ic_amplitude)
    ref = simulate(f0, cfg.params, n_steps=cfg.save_every * cfg.frames_per_sim,
                   save_every=cfg.save_every)
    assert not np.array_equal(traj.frames[0], ref.frames[0])
    assert np.array_equal(traj.frames, ref.frames[1:])


def test_generate_skips_burn_in_frames(tmp_path):
    cfg = small_config(n_sims=10, t_burn=0.02, fragments_per_sim=1)
    manifest = generate(cfg, tmp_path)
    assert manifest.config.t_burn == pytest.approx(0.02)
    traj = load_case(tmp_path, manifest, 0)
    assert len(traj) == cfg.frames_per_sim == 8
    assert traj.times[0] == pytest.approx(cfg.t_burn + cfg.dt_sample)
    assert traj.times[-1] == pytest.approx(cfg.t_total)
    # the stored frames are the post-burn-in solver states of the same run
    f0 = random_initial_state(cfg.grid, seed=cfg.base_seed, amplitude=cfg.ic_amplitude)
    ref = simulate(f0, cfg.params,
                   n_steps=cfg.save_every * (cfg.burn_frames + cfg.frames_per_sim),
                   save_every=cfg.save_every)
    assert np.array_equal(traj.frames, ref.frames[1 + cfg.burn_frames :])


def test_config_rejects_bad_burn_in():
    with pytest.raises(ValueError):
        small_config(t_burn=-0.01)
    with pytest.raises(ValueError):
        small_config(t_burn=0.10)  # equals t_total
    with pytest.raises(ValueError):
        small_config(t_burn=0.015)  # not a multiple of dt_sample
    with pytest.raises(ValueError):
        small_config(t_burn=0.04)  # leaves 6 frames < n_in + n_out


def test_generate_byte_identical_and_worker_invariant(tmp_path):
    cfg = small_config()
    digests = []
    for name, workers in [("a", 1), ("b", 1), ("c", 2)]:
        out = tmp_path / name
        generate(cfg, out, workers=workers)
        digests.append(tree_bytes(out))
    assert digests[0] == digests[1]
    assert digests[0] == digests[2]


def test_generate_seed_changes_content(tmp_path):
    generate(small_config(), tmp_path / "a")
    generate(small_config(base_seed=1), tmp_path / "b")
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "b")


def test_generate_flags_diverged_cases_and_continues(tmp_path):
    # an enormous initial amplitude overflows within a few solver steps
    cfg = small_config(ic_amplitude=1e8)
    progress = []
    manifest = generate(cfg, tmp_path, progress=lambda cid, err: progress.append((cid, err)))
    assert manifest.failed_cases == tuple(range(10))
    assert manifest.fragments == {}
    assert len(progress) == 10 and all(err is not None for _, err in progress)
    assert os.path.exists(tmp_path / "manifest.txt")
    assert read_manifest(tmp_path / "manifest.txt").failed_cases == tuple(range(10))
    assert list(load_samples(tmp_path)) == []


def test_generate_flags_bound_violations(tmp_path):
    # starting from |phi| <= 1.2, some seeds still exceed the 1.05 watchdog
    # in their stored frames; the flag must match the data exactly
    cfg = small_config(ic_amplitude=1.2)
    manifest = generate(cfg, tmp_path)
    assert manifest.failed_cases == ()
    assert BOUND_LIMIT == pytest.approx(1.05)
    expected = []
    for case_id in range(cfg.n_sims):
        traj = load_trajectory(tmp_path / "cases" / f"case_{case_id}.chf2",
                               dt=cfg.dt_sample, t0=cfg.dt_sample)
        if np.max(np.abs(traj.frames)) > BOUND_LIMIT:
            expected.append(case_id)
    assert expected, "fixture no longer produces any violation"
    assert manifest.bound_violations == tuple(expected)
    # flagged cases are still stored and loadable
    assert len(list(load_samples(tmp_path))) == 10 * cfg.fragments_per_sim


# ---------------------------------------------------------------------------
# loading and validation
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    cfg = small_config()
    manifest = generate(cfg, out)
    return out, cfg, manifest


def test_load_samples_shapes_times_and_split(dataset):
    out, cfg, manifest = dataset
    count = 0
    for s in load_samples(out):
        assert isinstance(s, Sample)
        assert s.inputs.shape == (cfg.n_in, cfg.nx, cfg.ny)
        assert s.targets.shape == (cfg.n_out, cfg.nx, cfg.ny)
        start = manifest.fragments[s.case_id][s.fragment_id]
        assert s.t_start == pytest.approx(cfg.dt_sample * (start + 1))
        count += 1
    assert count == cfg.n_sims * cfg.fragments_per_sim
    for name, cases in [("train", 8), ("val", 1), ("test", 1)]:
        got = list(load_samples(out, name))
        assert len(got) == cases * cfg.fragments_per_sim
        assert all(manifest.split[s.case_id] == name for s in got)


def test_load_samples_matches_stored_trajectory(dataset):
    out, cfg, manifest = dataset
    sample = next(load_samples(out, "test"))
    traj = load_trajectory(out / "cases" / f"case_{sample.case_id}.chf2",
                           dt=cfg.dt_sample, t0=cfg.dt_sample)
    start = manifest.fragments[sample.case_id][sample.fragment_id]
    assert np.array_equal(sample.inputs, traj.frames[start : start + cfg.n_in])
    assert np.array_equal(sample.targets,
                          traj.frames[start + cfg.n_in : start + cfg.n_in + cfg.n_out])


def test_load_arrays_deterministic_order(dataset):
    out, cfg, _ = dataset
    x1, y1 = load_arrays(out, "train")
    x2, y2 = load_arrays(out, "train")
    assert np.array_equal(x1, x2) and np.array_equal(y1, y2)
    assert x1.shape == (8 * cfg.fragments_per_sim, cfg.n_in, cfg.nx, cfg.ny)
    with pytest.raises(ValueError):
        load_arrays(out, "nonexistent-split")


def test_load_train_data_bridges_to_training(dataset):
    out, cfg, _ = dataset
    data = load_train_data(out)
    assert len(data.train_inputs) == 8 * cfg.fragments_per_sim
    assert len(data.val_inputs) == 1 * cfg.fragments_per_sim
    assert data.train_inputs.shape[1:] == (cfg.n_in, cfg.nx, cfg.ny)
    assert data.train_targets.shape[1:] == (cfg.n_out, cfg.nx, cfg.ny)


def test_corrupted_case_raises_checksum_error(tmp_path):
    generate(small_config(), tmp_path)
    victim = tmp_path / "cases" / "case_3.chf2"
    with open(victim, "r+b") as fh:
        fh.seek(40)
        byte = fh.read(1)
        fh.seek(40)
        fh.write(bytes([byte[0] ^ 0xFF]))
    with pytest.raises(ChecksumError, match="case_3"):
        list(load_samples(tmp_path))


def test_version_mismatch_raises_version_error(tmp_path):
    generate(small_config(), tmp_path)
    manifest_path = tmp_path / "manifest.txt"
    text = manifest_path.read_text().replace("format_version = 1",
                                             "format_version = 99")
    manifest_path.write_text(text)
    with pytest.raises(VersionError, match="99"):
        list(load_samples(tmp_path))


def test_missing_case_file_raises_file_not_found(tmp_path):
    generate(small_config(), tmp_path)
    os.remove(tmp_path / "cases" / "case_5.chf2")
    with pytest.raises(FileNotFoundError, match="case_5"):
        list(load_samples(tmp_path))


def test_missing_checksum_entry_raises_checksum_error(tmp_path):
    generate(small_config(), tmp_path)
    checks = tmp_path / "checksums.txt"
    lines = [ln for ln in checks.read_text().splitlines() if "case_2" not in ln]
    checks.write_text("\n".join(lines) + "\n")
    with pytest.raises(ChecksumError, match="case_2"):
        list(load_samples(tmp_path))


def test_missing_checksums_file_raises_file_not_found(tmp_path):
    generate(small_config(), tmp_path)
    os.remove(tmp_path / "checksums.txt")
    with pytest.raises(FileNotFoundError):
        list(load_samples(tmp_path))
