"""Transform-domain machinery for both boundary types.

Two bases:

* ``periodic``  -- real-FFT half-spectrum (complex coefficients, shape
  (nx, ny//2 + 1)); physical wavenumbers k = 2*pi*index/L with signed row
  indices.  Grid dimensions must be even.
* ``neumann``   -- cosine basis (DCT-II/III pair, real coefficients, shape
  (nx, ny)); wavenumbers k = pi*index/L.  This is the basis in which the
  zero-flux boundary conditions of the phase-field problem are natural.

Coefficient scaling: orthonormal transform times sqrt(cell area), with the
duplicated periodic columns (0 < ky < Nyquist) additionally folded by sqrt(2).
Two consequences worth the bookkeeping:

* plain ``sum |coeffs|^2`` equals the cell-area-weighted squared L2 norm of
  the field (Parseval with no leftover factors);
* a given continuous mode has the *same* coefficient at every resolution of a
  fixed domain, so resolution resampling is pure zero-pad / truncate.

Differentiation zeroes the Nyquist row/column (periodic) so odd derivatives
stay real; resampling keeps strictly sub-Nyquist content of the coarser grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .fields import Grid2D, ScalarField2D

__all__ = [
    "SpectralField2D",
    "ModeSet",
    "forward",
    "inverse",
    "laplacian",
    "gradient",
    "resample",
    "truncate_modes",
]


@dataclass
class SpectralField2D:
    """Transform coefficients of a real field; ``basis`` matches grid.boundary."""

    grid: Grid2D
    coeffs: np.ndarray
    basis: str

    def __post_init__(self):
        if self.basis not in ("periodic", "neumann"):
            raise ValueError(f"unknown basis {self.basis!r}")
        expected = (
            (self.grid.nx, self.grid.ny // 2 + 1)
            if self.basis == "periodic"
            else (self.grid.nx, self.grid.ny)
        )
        if self.coeffs.shape != expected:
            raise ValueError(f"coeff shape {self.coeffs.shape}, expected {expected}")


@dataclass(frozen=True)
class ModeSet:
    """Retained modes per axis: indices with |index| <= kmax survive truncation."""

    kmax_x: int
    kmax_y: int

    def __post_init__(self):
        if self.kmax_x < 0 or self.kmax_y < 0:
            raise ValueError("mode counts must be non-negative")


# ---------------------------------------------------------------------------
# wavenumbers and column folding
# ---------------------------------------------------------------------------

def signed_index_x(nx: int) -> np.ndarray:
    """Signed integer mode index per periodic row: 0..nx/2-1, -nx/2..-1."""
    return np.fft.fftfreq(nx, d=1.0 / nx)  # float-valued integers


def wavenumbers(grid: Grid2D, basis: str):
    """(kx, ky) physical wavenumber arrays matching the coefficient layout."""
    if basis == "periodic":
        kx = 2.0 * np.pi * signed_index_x(grid.nx) / grid.lx
        ky = 2.0 * np.pi * np.arange(grid.ny // 2 + 1) / grid.ly
    else:
        kx = np.pi * np.arange(grid.nx) / grid.lx
        ky = np.pi * np.arange(grid.ny) / grid.ly
    return kx, ky


def _fold(grid: Grid2D) -> np.ndarray:
    """sqrt(2) on the periodic columns that stand for +/-ky pairs."""
    w = np.ones(grid.ny // 2 + 1)
    w[1 : grid.ny // 2] = np.sqrt(2.0)
    return w


# ---------------------------------------------------------------------------
# forward / inverse
# ---------------------------------------------------------------------------

def forward(f: ScalarField2D) -> SpectralField2D:
    """Orthonormal transform scaled by sqrt(dA); see module docstring."""
    grid = f.grid
    root_da = math.sqrt(grid.cell_area)
    if grid.boundary == "periodic":
        if grid.nx % 2 or grid.ny % 2:
            raise ValueError("periodic transforms require even grid dimensions")
        c = scipy.fft.rfft2(f.values, norm="ortho") * root_da
        c *= _fold(grid)[None, :]
        return SpectralField2D(grid, c, "periodic")
    c = scipy.fft.dctn(f.values, type=2, norm="ortho") * root_da
    return SpectralField2D(grid, c, "neumann")


def inverse(sf: SpectralField2D) -> ScalarField2D:
    grid = sf.grid
    root_da = math.sqrt(grid.cell_area)
    if sf.basis == "periodic":
        c = sf.coeffs / _fold(grid)[None, :] / root_da
        v = scipy.fft.irfft2(c, s=(grid.nx, grid.ny), norm="ortho")
    else:
        v = scipy.fft.idctn(sf.coeffs / root_da, type=2, norm="ortho")
    return ScalarField2D(grid, v)


# ---------------------------------------------------------------------------
# differential operators
# ---------------------------------------------------------------------------

def laplacian(f: ScalarField2D) -> ScalarField2D:
    """Multiply each mode by -(kx^2 + ky^2) in the basis of f's boundary type.

    Each periodic second-derivative term is zeroed on its own Nyquist line,
    matching `gradient` applied twice, so div(grad f) equals this exactly.
    """
    sf = forward(f)
    kx, ky = wavenumbers(f.grid, sf.basis)
    kx2, ky2 = kx**2, ky**2
    if sf.basis == "periodic":
        kx2 = kx2.copy()
        ky2 = ky2.copy()
        kx2[f.grid.nx // 2] = 0.0
        ky2[f.grid.ny // 2] = 0.0
    sf.coeffs *= -(kx2[:, None] + ky2[None, :])
    return inverse(sf)


def gradient(f: ScalarField2D):
    """Spectral (d/dx f, d/dy f) evaluated on the same grid.

    Periodic: multiply by i*k, Nyquist mode zeroed so the derivative is real.
    Neumann: the derivative of the cosine series is a sine series; it is
    evaluated at the same midpoint samples via an (inverse) DST-II with the
    coefficient index shifted by one.
    """
    grid = f.grid
    if grid.boundary == "periodic":
        sf = forward(f)
        kx, ky = wavenumbers(grid, "periodic")
        cx = sf.coeffs * (1j * kx[:, None])
        cx[grid.nx // 2, :] = 0.0
        cy = sf.coeffs * (1j * ky[None, :])
        cy[:, grid.ny // 2] = 0.0
        return (
            inverse(SpectralField2D(grid, cx, "periodic")),
            inverse(SpectralField2D(grid, cy, "periodic")),
        )
    return (
        ScalarField2D(grid, _cosine_derivative(f.values, axis=0, length=grid.lx)),
        ScalarField2D(grid, _cosine_derivative(f.values, axis=1, length=grid.ly)),
    )


def _cosine_derivative(values: np.ndarray, axis: int, length: float) -> np.ndarray:
    """d/dx of a cosine series, sampled on the same midpoint grid.

    With A = DCT-II_ortho(values) the field is sum_k A_k e_k, and its
    derivative is a plain sine series with coefficients -A_k * pi*k/L.  The
    orthonormal DST-II basis uses index k for mode sin(pi*(k+1)*x/L) with the
    same sqrt(2/n) interior scaling as the cosine side, so shifting the
    scaled coefficients down one slot and applying the inverse DST evaluates
    the series (the vacated top slot, mode n, does not occur).
    """
    n = values.shape[axis]
    a = scipy.fft.dct(values, type=2, axis=axis, norm="ortho")
    k = np.arange(n, dtype=float)
    shape = [1, 1]
    shape[axis] = n
    b = -a * (np.pi * k / length).reshape(shape)
    d = np.roll(b, -1, axis=axis)
    d[(slice(None), n - 1) if axis == 1 else (n - 1, slice(None))] = 0.0
    return scipy.fft.idst(d, type=2, axis=axis, norm="ortho")


# ---------------------------------------------------------------------------
# mode truncation and resolution resampling
# ---------------------------------------------------------------------------

def truncate_modes(sf: SpectralField2D, m: ModeSet) -> SpectralField2D:
    """Zero every coefficient with |index| beyond kmax per axis (idempotent)."""
    grid = sf.grid
    if sf.basis == "periodic":
        nyq_x, nyq_y = grid.nx // 2, grid.ny // 2
    else:
        nyq_x, nyq_y = grid.nx - 1, grid.ny - 1
    if m.kmax_x > nyq_x or m.kmax_y > nyq_y:
        raise ValueError(f"mode set {m} exceeds the grid Nyquist ({nyq_x}, {nyq_y})")
    c = sf.coeffs.copy()
    if sf.basis == "periodic":
        keep_x = np.abs(signed_index_x(grid.nx)) <= m.kmax_x
        c[~keep_x, :] = 0.0
        c[:, m.kmax_y + 1 :] = 0.0
    else:
        c[m.kmax_x + 1 :, :] = 0.0
        c[:, m.kmax_y + 1 :] = 0.0
    return SpectralField2D(grid, c, sf.basis)


def resample(f: ScalarField2D, nx2: int, ny2: int) -> ScalarField2D:
    """Spectral resampling: zero-pad (up) or truncate (down) the spectrum.

    Because coefficients here are resolution-independent (module docstring),
    this is index bookkeeping only.  On the periodic side the transfer keeps
    strictly sub-Nyquist modes of the coarser axis, so no fold-factor or
    conjugate-pair fixups arise at the boundary modes.
    """
    grid = f.grid
    grid2 = grid.with_resolution(nx2, ny2)
    sf = forward(f)
    if sf.basis == "periodic":
        if nx2 % 2 or ny2 % 2:
            raise ValueError("periodic transforms require even grid dimensions")
        c2 = np.zeros((nx2, ny2 // 2 + 1), dtype=complex)
        if nx2 == grid.nx:
            rows = np.arange(grid.nx)
        else:
            kxk = min(grid.nx, nx2) // 2 - 1
            rows = np.concatenate([np.arange(kxk + 1), np.arange(-kxk, 0)])
        if ny2 == grid.ny:
            cols = np.arange(grid.ny // 2 + 1)
        else:
            cols = np.arange(min(grid.ny, ny2) // 2)  # 0 .. min/2 - 1
        c2[np.ix_(rows % nx2, cols)] = sf.coeffs[np.ix_(rows % grid.nx, cols)]
        # samples live at cell centres, so mode k carries phase exp(i*pi*k/n)
        # relative to the index-space DFT basis; moving between resolutions
        # re-anchors that half-cell shift
        shift = np.pi * (1.0 / nx2 - 1.0 / grid.nx)
        c2[rows % nx2, :] *= np.exp(1j * shift * rows)[:, None]
        c2[:, cols] *= np.exp(1j * np.pi * (1.0 / ny2 - 1.0 / grid.ny) * cols)[None, :]
        return inverse(SpectralField2D(grid2, c2, "periodic"))
    c2 = np.zeros((nx2, ny2))
    mx, my = min(grid.nx, nx2), min(grid.ny, ny2)
    c2[:mx, :my] = sf.coeffs[:mx, :my]
    return inverse(SpectralField2D(grid2, c2, "neumann"))
