"""Uniform-grid scalar fields, the D4 symmetry group, basic norms, and field file I/O.

Conventions used throughout the package:

* ``values[i, j]`` is the sample at cell centre ``x_i = (i + 1/2) dx``,
  ``y_j = (j + 1/2) dy``; axis 0 is x (nx rows), axis 1 is y (ny columns).
  Batched tensors keep the grid in the trailing two axes.
* Rotation is counterclockwise in index space, ``new[i, j] = old[j, n-1-i]``
  (one quarter turn); reflection is the horizontal flip ``old[i, n-1-j]`` and
  is applied *before* the rotation.  Any fixed convention yields the same
  group; this one is pinned so compositions are reproducible.
* Field files (``.chf2``) are little-endian: a 24-byte header
  ``magic "CHF2" | u32 version=1 | u32 nx | u32 ny | f64 lx`` followed by the
  row-major float64 payload.  Only ``lx`` is stored; readers reconstruct
  ``ly = lx * ny / nx`` (uniform square cells), exact for the square domains
  used everywhere in practice.  A trajectory file is a plain concatenation of
  such records on a single grid.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

_MAGIC = b"CHF2"
_HEADER = struct.Struct("<4sIIId")  # magic, version, nx, ny, lx  (24 bytes)
_VERSION = 1


# ---------------------------------------------------------------------------
# grids and fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid2D:
    """Uniform cell-centred grid on the rectangle [0, lx] x [0, ly]."""

    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0
    boundary: str = "neumann"  # "neumann" (cosine basis) or "periodic"

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"grid must be at least 4x4, got {self.nx}x{self.ny}")
        if self.lx <= 0 or self.ly <= 0:
            raise ValueError("domain edge lengths must be positive")
        if self.boundary not in ("neumann", "periodic"):
            raise ValueError(f"unknown boundary {self.boundary!r}")

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def is_square(self) -> bool:
        return self.nx == self.ny and self.lx == self.ly

    def cell_centers(self):
        """Return (X, Y) arrays of shape (nx, ny) with physical cell-centre coordinates."""
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        return np.meshgrid(x, y, indexing="ij")

    def normalized_coordinates(self):
        """Cell-centre coordinates scaled to (0, 1); resolution-consistent across grids."""
        xn = (np.arange(self.nx) + 0.5) / self.nx
        yn = (np.arange(self.ny) + 0.5) / self.ny
        return np.meshgrid(xn, yn, indexing="ij")

    def with_resolution(self, nx: int, ny: int) -> "Grid2D":
        """Same domain and boundary at a different cell count."""
        return Grid2D(nx, ny, self.lx, self.ly, self.boundary)


@dataclass
class ScalarField2D:
    """A real scalar field sampled at the cell centres of ``grid``."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.nx, self.grid.ny):
            raise ValueError(
                f"values shape {v.shape} does not match grid "
                f"({self.grid.nx}, {self.grid.ny})"
            )
        self.values = v

    def copy(self) -> "ScalarField2D":
        return ScalarField2D(self.grid, self.values.copy())


@dataclass
class Trajectory:
    """Time-ordered snapshots on one grid, sampled every ``dt`` starting at ``t0``."""

    grid: Grid2D
    frames: np.ndarray  # (n_frames, nx, ny)
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 3 or f.shape[1:] != (self.grid.nx, self.grid.ny):
            raise ValueError(f"frames shape {f.shape} does not match grid")
        if f.shape[0] < 1:
            raise ValueError("a trajectory needs at least one frame")
        if self.dt <= 0:
            raise ValueError("sampling interval must be positive")
        self.frames = f

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    def field(self, k: int) -> ScalarField2D:
        return ScalarField2D(self.grid, self.frames[k])

    @property
    def fields(self):
        return [self.field(k) for k in range(len(self))]


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def l2_norm_sq(f: ScalarField2D) -> float:
    """Cell-area-weighted squared L2 norm, sum(values^2) * dx * dy.

    The area weight makes values comparable across resolutions of the same
    domain, which the super-resolution evaluation relies on.  fsum gives the
    exactly-rounded sum, so the norm is bit-identical under any permutation
    of the values (e.g. the D4 action).
    """
    return math.fsum((f.values ** 2).ravel()) * f.grid.cell_area


def mean(f: ScalarField2D) -> float:
    """Arithmetic mean of the values (the conserved quantity of the dynamics);
    exactly-rounded, hence permutation-invariant."""
    return math.fsum(f.values.ravel()) / f.values.size


# ---------------------------------------------------------------------------
# D4: the eight symmetries of the square
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class D4Element:
    """Group element r^rotation * m^reflected: flip first (if set), then rotate."""

    rotation: int = 0
    reflected: bool = False

    def __post_init__(self):
        if self.rotation not in (0, 1, 2, 3):
            raise ValueError(f"rotation must be in 0..3, got {self.rotation}")


D4_IDENTITY = D4Element(0, False)


def d4_elements():
    """All 8 elements, rotations first, then the reflected coset."""
    return [D4Element(r, m) for m in (False, True) for r in range(4)]


def d4_apply_array(g: D4Element, a: np.ndarray) -> np.ndarray:
    """Apply g to the trailing two axes of ``a`` (must be square in those axes)."""
    if a.shape[-1] != a.shape[-2]:
        raise ValueError(f"D4 acts on square arrays only, got trailing shape {a.shape[-2:]}")
    if g.reflected:
        a = a[..., ::-1]
    # np.rot90 with axes (-2, -1) realizes new[i, j] = old[j, n-1-i] per turn
    return np.ascontiguousarray(np.rot90(a, k=g.rotation, axes=(-2, -1)))


def d4_apply(g: D4Element, f: ScalarField2D) -> ScalarField2D:
    """Group action on a field; requires a square grid."""
    if not f.grid.is_square:
        raise ValueError("D4 action requires a square grid (nx == ny, lx == ly)")
    return ScalarField2D(f.grid, d4_apply_array(g, f.values))


def d4_compose(g: D4Element, h: D4Element) -> D4Element:
    """The element k with apply(k, f) == apply(g, apply(h, f)).

    With g = r^p m^s and h = r^q m^t, conjugating a rotation by the mirror
    inverts it (m r^q = r^{-q} m), so the product is r^{p+q} m^t when g is a
    pure rotation and r^{p-q} m^{1+t} when g is reflected.
    """
    if g.reflected:
        rot = (g.rotation - h.rotation) % 4
    else:
        rot = (g.rotation + h.rotation) % 4
    return D4Element(rot, g.reflected != h.reflected)


def d4_inverse(g: D4Element) -> D4Element:
    """The element with compose(g, inverse(g)) == identity."""
    if g.reflected:
        return g  # reflected elements are involutions under this convention
    return D4Element((-g.rotation) % 4, False)


# ---------------------------------------------------------------------------
# field file I/O
# ---------------------------------------------------------------------------

def _pack_record(f: ScalarField2D) -> bytes:
    header = _HEADER.pack(_MAGIC, _VERSION, f.grid.nx, f.grid.ny, f.grid.lx)
    return header + np.ascontiguousarray(f.values, dtype="<f8").tobytes()


def _read_record(fh):
    """Read one CHF2 record from an open binary file, or None at clean EOF."""
    raw = fh.read(_HEADER.size)
    if len(raw) == 0:
        return None
    if len(raw) < _HEADER.size:
        raise ValueError("truncated field record header")
    magic, version, nx, ny, lx = _HEADER.unpack(raw)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}, not a CHF2 field file")
    if version != _VERSION:
        raise ValueError(f"unsupported CHF2 version {version}")
    payload = fh.read(nx * ny * 8)
    if len(payload) < nx * ny * 8:
        raise ValueError("truncated field record payload")
    values = np.frombuffer(payload, dtype="<f8").reshape(nx, ny)
    return nx, ny, float(lx), values


def save_field(path, f: ScalarField2D):
    with open(path, "wb") as fh:
        fh.write(_pack_record(f))


def load_field(path, boundary: str = "neumann") -> ScalarField2D:
    with open(path, "rb") as fh:
        rec = _read_record(fh)
        if rec is None:
            raise ValueError("empty field file")
        nx, ny, lx, values = rec
    grid = Grid2D(nx, ny, lx, lx * ny / nx, boundary)
    return ScalarField2D(grid, values.copy())


def save_trajectory(path, traj: Trajectory):
    with open(path, "wb") as fh:
        for k in range(len(traj)):
            fh.write(_pack_record(traj.field(k)))


def load_trajectory(path, dt: float, t0: float = 0.0, boundary: str = "neumann") -> Trajectory:
    """Read a concatenated CHF2 file; sampling times are supplied by the caller
    (the on-disk format stores geometry only, the dataset manifest stores time)."""
    frames = []
    shape = None
    with open(path, "rb") as fh:
        while True:
            rec = _read_record(fh)
            if rec is None:
                break
            nx, ny, lx, values = rec
            if shape is None:
                shape = (nx, ny, lx)
            elif (nx, ny, lx) != shape:
                raise ValueError("trajectory file mixes grids")
            frames.append(values.copy())
    if not frames:
        raise ValueError("empty trajectory file")
    nx, ny, lx = shape
    grid = Grid2D(nx, ny, lx, lx * ny / nx, boundary)
    return Trajectory(grid, np.stack(frames), dt, t0)


def save_field_csv(path, f: ScalarField2D):
    """Plain i,j,value rows for quick plotting outside the package."""
    with open(path, "w") as fh:
        fh.write("i,j,value\n")
        for i in range(f.grid.nx):
            for j in range(f.grid.ny):
                fh.write(f"{i},{j},{float(f.values[i, j])!r}\n")
