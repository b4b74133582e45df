"""Neural operator models: spectral convolution with hand-derived adjoint,
FNO and U-shaped (UNO) stacks, model assembly, rollout, checkpoint+config I/O.

Spectral convolution conventions
--------------------------------

Layers transform with the *amplitude* normalization (``norm="forward"``), so a
retained Fourier coefficient means the same thing at every resolution and
changing resolution inside a layer is plain zero-pad / truncate of the
spectrum (the mesh-free property exploited for zero-shot super-resolution).

Weights are complex, stored as separate real/imaginary float64 parameters of
shape (kmax+1, kmax+1, c_out, c_in).  Retained modes are |kx| <= kmax,
0 <= ky <= kmax of the half-spectrum, and the +kx / -kx rows *share* the same
stored matrix.  The tying is not a convenience: the ky = 0 column of a real
field's half-spectrum satisfies X(-kx, 0) = conj(X(kx, 0)), and only a tied
multiplier keeps that Hermitian symmetry — i.e. makes the layer exactly a
circular convolution with a real kernel instead of silently discarding an
anti-Hermitian residue in the inverse transform.

At run time the band is clamped to strictly sub-Nyquist indices of the
smaller of the input/output resolutions (kx, ky <= min(n_in, n_out)//2 - 1);
weight cells outside the clamp simply receive zero gradient at that
resolution.  This is what lets one model run unchanged at 16^2 or 200^2.

Adjoint (enforced against finite differences in the tests): with forward
``y = IFFT_out[ R . trunc(FFT_in[x]) ]`` and upstream gradient g,

    dL/dx = (N_out/N_in) * IFFT_in[ pad( R^H . trunc(FFT_out[g]) ) ]
    dL/dR = N_out * c_ky * sum_b  trunc(FFT_out[g]) . conj(trunc(FFT_in[x]))

where R^H conj-transposes each per-mode c_out x c_in matrix, N = H*W counts
grid points, and c_ky is 2 for the duplicated half-spectrum columns
(0 < ky) and 1 for ky = 0; tied rows accumulate from both signed blocks.
The scale factors come from Parseval under the amplitude normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .fields import Trajectory
from .nncore import (
    ParamStore,
    Tape,
    Tensor4,
    add,
    concat_channels,
    gelu,
    load_checkpoint,
    pointwise_linear,
    save_checkpoint,
)
from .spectral import ModeSet

__all__ = [
    "FNOConfig",
    "UNOConfig",
    "OperatorModel",
    "RolloutError",
    "build_model",
    "rollout",
    "save_model",
    "load_model",
    "default_fno_config",
    "default_uno_config",
    "small_fno_config",
    "small_uno_config",
]


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FNOConfig:
    """Fixed-resolution Fourier stack.  `modes` is the one-sided band limit
    kmax (retained |k| <= kmax with +-kx tied), so a stated two-sided mode
    count of m corresponds to modes = m // 2."""

    width: int = 95
    n_layers: int = 4
    modes: int = 8
    lift_hidden: int = 640
    proj_hidden: int = 3408
    coordinate_channels: bool = True

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if min(self.width, self.lift_hidden, self.proj_hidden) < 1 or self.modes < 0:
            raise ValueError("invalid FNO config")


@dataclass(frozen=True)
class UNOConfig:
    """Multi-resolution encoder-decoder stack; per-layer channel counts,
    band limits (kmax convention as in FNOConfig), resolution scalings, and
    encoder->decoder concatenation skips."""

    width: int = 95
    out_channels: tuple = (32, 64, 64, 128, 64, 64, 32)
    modes: tuple = (16, 8, 4, 2, 4, 8, 16)
    scalings: tuple = ((1, 1), (0.5, 0.5), (0.5, 0.5), (1, 1), (2, 2), (2, 2), (1, 1))
    skip_pairs: tuple = ((0, 6), (1, 5), (2, 4))
    lift_hidden: int = 524
    proj_hidden: int = 3408
    coordinate_channels: bool = True

    def __post_init__(self):
        n = len(self.out_channels)
        if not (len(self.modes) == len(self.scalings) == n):
            raise ValueError("out_channels, modes, scalings must have equal lengths")
        for axis in (0, 1):
            if not math.isclose(math.prod(s[axis] for s in self.scalings), 1.0):
                raise ValueError("scalings must multiply to 1 per axis")
        for src, dst in self.skip_pairs:
            if not (0 <= src < dst < n):
                raise ValueError(f"bad skip pair ({src}, {dst})")


def default_uno_config() -> UNOConfig:
    """The full-scale configuration: 6,376,406 parameters."""
    return UNOConfig()


def default_fno_config() -> FNOConfig:
    """The full-scale configuration: 6,288,090 parameters."""
    return FNOConfig()


def small_uno_config() -> UNOConfig:
    """Width-scaled variant of the full ladder for desk-scale training runs
    (same channel ratios, mode ladder, scalings, and skips)."""
    return UNOConfig(
        width=18,
        out_channels=(6, 12, 12, 24, 12, 12, 6),
        lift_hidden=64,
        proj_hidden=96,
    )


def small_fno_config() -> FNOConfig:
    """Width-scaled four-layer variant for desk-scale training runs."""
    return FNOConfig(width=18, n_layers=4, modes=8, lift_hidden=80, proj_hidden=96)


# ---------------------------------------------------------------------------
# spectral convolution (forward + adjoint)
# ---------------------------------------------------------------------------

def _out_size(n: int, scale: float, layer_name: str) -> int:
    out = n * scale
    if abs(out - round(out)) > 1e-9 or round(out) < 4 or round(out) % 2:
        raise ValueError(
            f"{layer_name}: resolution {n} with scaling {scale} gives invalid size {out}"
        )
    return int(round(out))


class SpectralConv:
    """Per-mode channel mixing in the half-spectrum; owns re/im parameters.

    On the ky = 0 column only the real part of the weight acts: the +-kx
    entries there are conjugate mates of one mode, and the real inverse
    transform projects out the anti-Hermitian residue a complex tied weight
    would introduce.  The imaginary cells of that column are inert and
    correspondingly receive exactly zero gradient.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 modes: ModeSet, out_scale, rng):
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.modes = modes
        self.out_scale = (float(out_scale[0]), float(out_scale[1]))
        shape = (modes.kmax_x + 1, modes.kmax_y + 1, c_out, c_in)
        # |w| <= 1/(c_in*c_out) componentwise bound on the complex magnitude
        bound = 1.0 / (c_in * c_out * math.sqrt(2.0))
        self.w_re = store.add(f"{name}.re", rng.uniform(-bound, bound, size=shape))
        self.w_im = store.add(f"{name}.im", rng.uniform(-bound, bound, size=shape))

    def _clamped_band(self, h_in, w_in, h_out, w_out):
        kx = min(self.modes.kmax_x, min(h_in, h_out) // 2 - 1)
        ky = min(self.modes.kmax_y, min(w_in, w_out) // 2 - 1)
        return kx, ky

    def __call__(self, x: Tensor4) -> Tensor4:
        b, c, h, w = x.shape
        if c != self.c_in:
            raise ValueError(f"{self.name}: expected {self.c_in} channels, got {c}")
        h2 = _out_size(h, self.out_scale[0], self.name)
        w2 = _out_size(w, self.out_scale[1], self.name)
        kx, ky = self._clamped_band(h, w, h2, w2)

        weight = self.w_re.values + 1j * self.w_im.values
        wp = weight[: kx + 1, : ky + 1]          # rows +0..+kx
        wn = weight[kx:0:-1, : ky + 1]           # rows -kx..-1 (tied to +|kx|)

        xs = scipy.fft.rfft2(x.values, norm="forward")
        xp = xs[:, :, : kx + 1, : ky + 1]
        xn = xs[:, :, h - kx :, : ky + 1]

        ys = np.zeros((b, self.c_out, h2, w2 // 2 + 1), dtype=complex)
        ys[:, :, : kx + 1, : ky + 1] = np.einsum("xyoi,bixy->boxy", wp, xp)
        if kx > 0:
            ys[:, :, h2 - kx :, : ky + 1] = np.einsum("xyoi,bixy->boxy", wn, xn)
        out = Tensor4(scipy.fft.irfft2(ys, s=(h2, w2), norm="forward"), x.tape)

        w_re, w_im = self.w_re, self.w_im

        def _backward():
            if out.grad is None:
                return
            gs = scipy.fft.rfft2(out.grad, norm="forward")
            gp = gs[:, :, : kx + 1, : ky + 1]
            gn = gs[:, :, h2 - kx :, : ky + 1] if kx > 0 else None

            # input gradient: conj-transposed mode matrices, then back to the
            # input resolution with the Parseval factor N_out/N_in
            zs = np.zeros((b, self.c_in, h, w // 2 + 1), dtype=complex)
            zs[:, :, : kx + 1, : ky + 1] = np.einsum("xyoi,boxy->bixy", np.conj(wp), gp)
            if kx > 0:
                zs[:, :, h - kx :, : ky + 1] = np.einsum("xyoi,boxy->bixy", np.conj(wn), gn)
            factor = (h2 * w2) / (h * w)
            x.accum_grad(factor * scipy.fft.irfft2(zs, s=(h, w), norm="forward"),
                         owned=True)

            # weight gradient: N_out * c_ky * sum_b g . conj(x), tied rows
            # accumulating from both signed blocks
            col_w = np.full(ky + 1, 2.0)
            col_w[0] = 1.0
            gw = np.einsum("boxy,bixy,y->xyoi", gp, np.conj(xp), col_w) * (h2 * w2)
            if kx > 0:
                gw_neg = np.einsum("boxy,bixy,y->xyoi", gn, np.conj(xn), col_w) * (h2 * w2)
                gw[kx:0:-1] += gw_neg
            full = np.zeros((self.modes.kmax_x + 1, self.modes.kmax_y + 1,
                             self.c_out, self.c_in), dtype=complex)
            full[: kx + 1, : ky + 1] = gw
            w_re.accum_grad(np.ascontiguousarray(full.real), owned=True)
            w_im.accum_grad(np.ascontiguousarray(full.imag), owned=True)

        x.tape.record(_backward)
        return out


def _spectral_resample(x: Tensor4, h2: int, w2: int) -> Tensor4:
    """Resolution change of the pointwise path: strictly sub-Nyquist zero-pad/
    truncate in index space (amplitude convention).  Linear; the adjoint is the
    reverse resample scaled by N_out/N_in."""
    b, c, h, w = x.shape
    if (h, w) == (h2, w2):
        return x

    def transfer(v, ha, wa, hb, wb):
        kx = min(ha, hb) // 2 - 1
        ky = min(wa, wb) // 2 - 1
        s = scipy.fft.rfft2(v, norm="forward")
        t = np.zeros(v.shape[:-2] + (hb, wb // 2 + 1), dtype=complex)
        t[..., : kx + 1, : ky + 1] = s[..., : kx + 1, : ky + 1]
        t[..., hb - kx :, : ky + 1] = s[..., ha - kx :, : ky + 1]
        return scipy.fft.irfft2(t, s=(hb, wb), norm="forward")

    out = Tensor4(transfer(x.values, h, w, h2, w2), x.tape)

    def _backward():
        if out.grad is None:
            return
        x.accum_grad((h2 * w2) / (h * w) * transfer(out.grad, h2, w2, h, w),
                     owned=True)

    x.tape.record(_backward)
    return out


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------

class _Linear:
    """Pointwise linear with uniform +-1/sqrt(fan_in) initialization."""

    def __init__(self, store, name, c_in, c_out, rng):
        bound = 1.0 / math.sqrt(c_in)
        self.weight = store.add(f"{name}.weight", rng.uniform(-bound, bound, (c_out, c_in)))
        self.bias = store.add(f"{name}.bias", rng.uniform(-bound, bound, c_out))

    def __call__(self, x):
        return pointwise_linear(x, self.weight, self.bias)


class _Block:
    """sigma( resample(W v) + SpectralConv(v) ): the shared FNO/UNO unit."""

    def __init__(self, store, name, c_in, c_out, kmax, scaling, rng):
        self.w = _Linear(store, f"{name}.w", c_in, c_out, rng)
        self.conv = SpectralConv(store, f"{name}.spectral", c_in, c_out,
                                 ModeSet(kmax, kmax), scaling, rng)
        self.scaling = scaling

    def __call__(self, v):
        k = self.conv(v)
        p = self.w(v)
        if p.shape[2:] != k.shape[2:]:
            p = _spectral_resample(p, k.shape[2], k.shape[3])
        return gelu(add(p, k))


class OperatorModel:
    """Lifting MLP, spectral blocks, projection MLP over a shared ParamStore."""

    def __init__(self, kind, config, n_in, n_out, seed):
        self.kind = kind
        self.config = config
        self.n_in, self.n_out, self.seed = n_in, n_out, seed
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        c0 = n_in + (2 if config.coordinate_channels else 0)
        self.lift0 = _Linear(self.store, "lift.0", c0, config.lift_hidden, rng)
        self.lift1 = _Linear(self.store, "lift.1", config.lift_hidden, config.width, rng)
        self.blocks = []
        if kind == "fno":
            for j in range(config.n_layers):
                self.blocks.append(_Block(self.store, f"block{j}", config.width,
                                          config.width, config.modes, (1.0, 1.0), rng))
            proj_in = config.width
        else:
            self._skip_src = {dst: src for src, dst in config.skip_pairs}
            c_prev = config.width
            for j, c_out in enumerate(config.out_channels):
                c_in = c_prev
                if j in self._skip_src:
                    c_in += config.out_channels[self._skip_src[j]]
                self.blocks.append(_Block(self.store, f"block{j}", c_in, c_out,
                                          config.modes[j], tuple(config.scalings[j]), rng))
                c_prev = c_out
            proj_in = c_prev
        self.proj0 = _Linear(self.store, "proj.0", proj_in, config.proj_hidden, rng)
        self.proj1 = _Linear(self.store, "proj.1", config.proj_hidden, n_out, rng)

    # -- forward ----------------------------------------------------------

    def _with_coords(self, x: Tensor4) -> Tensor4:
        if not self.config.coordinate_channels:
            return x
        b, _, h, w = x.shape
        cx = (np.arange(h) + 0.5) / h
        cy = (np.arange(w) + 0.5) / w
        coords = np.broadcast_to(
            np.stack(np.meshgrid(cx, cy, indexing="ij")), (b, 2, h, w)
        )
        return concat_channels(x, Tensor4(np.ascontiguousarray(coords), x.tape))

    def forward(self, x: Tensor4) -> Tensor4:
        expected = self.n_in
        if x.channels != expected:
            raise ValueError(f"expected {expected} input channels, got {x.channels}")
        v = gelu(self.lift0(self._with_coords(x)))
        v = self.lift1(v)
        if self.kind == "uno":
            kept = []
            for j, block in enumerate(self.blocks):
                if j in self._skip_src:
                    skip = kept[self._skip_src[j]]
                    if skip.shape[2:] != v.shape[2:]:
                        raise ValueError(
                            f"block{j}: skip resolution {skip.shape[2:]} does not match {v.shape[2:]}"
                        )
                    v = concat_channels(v, skip)
                v = block(v)
                kept.append(v)
        else:
            for block in self.blocks:
                v = block(v)
        return self.proj1(gelu(self.proj0(v)))

    def predict(self, values: np.ndarray) -> np.ndarray:
        """Forward pass on raw (batch, n_in, h, w) values, fresh tape."""
        tape = Tape()
        out = self.forward(Tensor4(values, tape)).values
        tape.release()
        return out


def build_model(config, n_in: int = 5, n_out: int = 3, seed: int = 0) -> OperatorModel:
    """Assemble a seeded model; identical seeds give bit-identical parameters."""
    if isinstance(config, FNOConfig):
        return OperatorModel("fno", config, n_in, n_out, seed)
    if isinstance(config, UNOConfig):
        return OperatorModel("uno", config, n_in, n_out, seed)
    raise ValueError(f"unknown config type {type(config).__name__}")


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------

class RolloutError(RuntimeError):
    def __init__(self, message, window_index):
        super().__init__(message)
        self.window_index = window_index


def rollout(model: OperatorModel, history: Trajectory, n_windows: int) -> Trajectory:
    """Autoregressive prediction: each window of the latest n_in frames emits
    n_out frames; ground truth enters only through the initial history."""
    if len(history) != model.n_in:
        raise ValueError(f"history must hold exactly {model.n_in} frames")
    if n_windows < 1:
        raise ValueError("n_windows must be >= 1")
    window = history.frames.copy()
    emitted = []
    for j in range(n_windows):
        pred = model.predict(window[None])[0]
        if not np.all(np.isfinite(pred)):
            raise RolloutError(f"non-finite prediction in window {j}", j)
        emitted.append(pred)
        tail = np.concatenate([window, pred], axis=0)
        window = tail[-model.n_in :]
    frames = np.concatenate(emitted, axis=0)
    t0 = history.t0 + model.n_in * history.dt
    return Trajectory(history.grid, frames, dt=history.dt, t0=t0)


# ---------------------------------------------------------------------------
# persistence: checkpoint + config sidecar
# ---------------------------------------------------------------------------

def _fmt_pairs(pairs):
    return " ".join(f"{a},{b}" for a, b in pairs)


def _fmt_floats(pairs):
    return " ".join(f"{float(a)!r},{float(b)!r}" for a, b in pairs)


def save_model(model: OperatorModel, path):
    """Write the checkpoint at `path` and a text config sidecar at `path`.cfg."""
    save_checkpoint(path, model.store)
    cfg = model.config
    lines = [
        f"kind = {model.kind}",
        f"n_in = {model.n_in}",
        f"n_out = {model.n_out}",
        f"seed = {model.seed}",
        f"width = {cfg.width}",
        f"lift_hidden = {cfg.lift_hidden}",
        f"proj_hidden = {cfg.proj_hidden}",
        f"coordinate_channels = {int(cfg.coordinate_channels)}",
    ]
    if model.kind == "fno":
        lines += [f"n_layers = {cfg.n_layers}", f"modes = {cfg.modes}"]
    else:
        lines += [
            "out_channels = " + " ".join(str(c) for c in cfg.out_channels),
            "modes = " + " ".join(str(m) for m in cfg.modes),
            "scalings = " + _fmt_floats(cfg.scalings),
            "skip_pairs = " + _fmt_pairs(cfg.skip_pairs),
        ]
    with open(str(path) + ".cfg", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> OperatorModel:
    """Rebuild a model from checkpoint + sidecar; parameters come from the
    checkpoint (the seed is provenance, not a re-randomization)."""
    kv = {}
    with open(str(path) + ".cfg") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            kv[key.strip()] = val.strip()
    kind = kv["kind"]
    common = dict(
        width=int(kv["width"]),
        lift_hidden=int(kv["lift_hidden"]),
        proj_hidden=int(kv["proj_hidden"]),
        coordinate_channels=bool(int(kv.get("coordinate_channels", "1"))),
    )
    if kind == "fno":
        config = FNOConfig(n_layers=int(kv["n_layers"]), modes=int(kv["modes"]), **common)
    elif kind == "uno":
        config = UNOConfig(
            out_channels=tuple(int(c) for c in kv["out_channels"].split()),
            modes=tuple(int(m) for m in kv["modes"].split()),
            scalings=tuple(tuple(float(x) for x in p.split(",")) for p in kv["scalings"].split()),
            skip_pairs=tuple(tuple(int(x) for x in p.split(",")) for p in kv["skip_pairs"].split()),
            **common,
        )
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    model = build_model(config, int(kv["n_in"]), int(kv["n_out"]), int(kv["seed"]))
    loaded = load_checkpoint(path)
    if loaded.names() != model.store.names() or any(
        loaded[n].values.shape != model.store[n].values.shape for n in loaded.names()
    ):
        raise ValueError("checkpoint parameters do not match the sidecar config")
    model.store = loaded
    _rebind(model)
    return model


def _rebind(model: OperatorModel):
    """Point layer objects at the store's Param instances (after swapping stores)."""
    store = model.store
    def bind_linear(lin, name):
        lin.weight = store[f"{name}.weight"]
        lin.bias = store[f"{name}.bias"]
    bind_linear(model.lift0, "lift.0")
    bind_linear(model.lift1, "lift.1")
    for j, block in enumerate(model.blocks):
        bind_linear(block.w, f"block{j}.w")
        block.conv.w_re = store[f"block{j}.spectral.re"]
        block.conv.w_im = store[f"block{j}.spectral.im"]
    bind_linear(model.proj0, "proj.0")
    bind_linear(model.proj1, "proj.1")
