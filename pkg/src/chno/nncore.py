"""Minimal float64 reverse-mode core for the operator models.

Design: an explicit tape of backward closures over a *fixed* op vocabulary
(pointwise channel mixing, GELU, add, channel concat, plus scalar reductions
used by losses) instead of a general autodiff graph.  Each op computes its
forward result, then records one closure that reads the output's accumulated
gradient and adds hand-derived adjoint contributions to its inputs and
parameters.  Running the closures in reverse registration order is exactly
reverse-mode differentiation because registration order is a topological
order of the (acyclic) forward computation.

Everything is float64 and deterministic: parameters live in an insertion-
ordered store, gradient accumulation uses plain `+=` in forward order, and
Adam walks the store in that fixed order.  Complex-valued layers (the
spectral convolutions in the operators module) keep separate real/imaginary
real-array parameters so that storage, Adam, counting, and checkpoints stay
uniformly real.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor4",
    "Scalar",
    "Tape",
    "Param",
    "ParamStore",
    "LRSchedule",
    "pointwise_linear",
    "gelu",
    "add",
    "concat_channels",
    "scalar_add",
    "scalar_scale",
    "backward",
    "adam_step",
    "cosine_lr",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
]


class Tape:
    """Ordered log of backward closures for one forward pass."""

    def __init__(self):
        self._records = []

    def record(self, fn):
        self._records.append(fn)

    def run_backward(self):
        for fn in reversed(self._records):
            fn()

    def release(self):
        """Drop the recorded closures.  The closures close over every tensor
        of the forward pass while those tensors point back at the tape, so a
        spent graph is one big reference cycle that only the cyclic collector
        would reclaim; releasing breaks the cycle and frees the activations
        promptly by plain refcounting."""
        self._records.clear()

    def __len__(self):
        return len(self._records)


class Tensor4:
    """Batched feature field, shape (batch, channels, height, width), float64."""

    __slots__ = ("values", "tape", "requires_grad", "grad")

    def __init__(self, values, tape: Tape | None = None, requires_grad: bool = False):
        v = np.ascontiguousarray(values, dtype=np.float64)
        if v.ndim != 4:
            raise ValueError(f"Tensor4 needs 4 axes (b, c, h, w), got shape {v.shape}")
        self.values = v
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def channels(self):
        return self.values.shape[1]

    def accum_grad(self, g, owned=False):
        """Add g into the gradient buffer.  owned=True lets a caller hand
        over a freshly allocated array it will not touch again, skipping the
        defensive copy."""
        if self.grad is None:
            if owned:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g


class Scalar:
    """A reduced (loss) value on the tape; grad is a plain float seed."""

    __slots__ = ("value", "tape", "grad")

    def __init__(self, value: float, tape: Tape):
        self.value = float(value)
        self.tape = tape
        self.grad = 0.0


@dataclass
class Param:
    """A named learnable array with its gradient and Adam moments."""

    name: str
    values: np.ndarray
    grad: np.ndarray | None = None
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None

    def accum_grad(self, g, owned=False):
        """See Tensor4.accum_grad: owned=True transfers a fresh buffer."""
        if self.grad is None:
            if owned:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g


class ParamStore:
    """Insertion-ordered name -> Param map plus the global Adam step counter."""

    def __init__(self):
        self._entries: dict[str, Param] = {}
        self.step_count = 0

    def add(self, name: str, values) -> Param:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        v = np.ascontiguousarray(values, dtype=np.float64)
        p = Param(name, v, None, np.zeros_like(v), np.zeros_like(v))
        self._entries[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def zero_grads(self):
        for p in self:
            p.grad = None


def parameter_count(store: ParamStore) -> int:
    """Total scalar parameter count (complex layers store re/im separately)."""
    return sum(p.values.size for p in store)


# ---------------------------------------------------------------------------
# layer vocabulary
# ---------------------------------------------------------------------------

def pointwise_linear(x: Tensor4, weight: Param, bias: Param | None) -> Tensor4:
    """Per-pixel channel mixing y[b,o,i,j] = sum_c W[o,c] x[b,c,i,j] + b[o].

    Adjoints: dx = W^T dy; dW[o,c] = sum_{b,i,j} dy[b,o,i,j] x[b,c,i,j];
    db[o] = sum over everything but the channel axis.
    """
    b_, c, h, w = x.shape
    if weight.values.ndim != 2 or weight.values.shape[1] != c:
        raise ValueError(
            f"weight shape {weight.values.shape} incompatible with {c} input channels"
        )
    c_out = weight.values.shape[0]
    flat = x.values.reshape(b_, c, h * w)
    y = np.matmul(weight.values, flat)  # (b, c_out, h*w) via broadcasting
    if bias is not None:
        y += bias.values[None, :, None]
    out = Tensor4(y.reshape(b_, c_out, h, w), x.tape)

    def _backward():
        if out.grad is None:
            return
        gy = out.grad.reshape(b_, c_out, h * w)
        x.accum_grad(np.matmul(weight.values.T, gy).reshape(x.shape), owned=True)
        weight.accum_grad(np.matmul(gy, flat.transpose(0, 2, 1)).sum(axis=0),
                          owned=True)
        if bias is not None:
            bias.accum_grad(gy.sum(axis=(0, 2)), owned=True)

    x.tape.record(_backward)
    return out


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor4) -> Tensor4:
    """tanh-approximation GELU, 0.5*x*(1 + tanh(c*(x + 0.044715 x^3))).

    The activations are the largest arrays on the tape, so both passes are
    written with in-place ufuncs to keep temporaries to one buffer each.
    """
    v = x.values
    t = v * v
    t *= 0.044715
    t += 1.0
    t *= v
    t *= _GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= v
    y *= 0.5
    out = Tensor4(y, x.tape)

    def _backward():
        if out.grad is None:
            return
        # d/dv [0.5 v (1+t)] = 0.5 (1 + t + v (1-t^2) c (1 + 3*0.044715 v^2))
        dt = v * v
        dt *= 3 * 0.044715
        dt += 1.0
        dt *= _GELU_C
        dt *= v
        s = t * t
        np.subtract(1.0, s, out=s)
        dt *= s
        dt += 1.0
        dt += t
        dt *= 0.5
        dt *= out.grad
        x.accum_grad(dt, owned=True)

    x.tape.record(_backward)
    return out


def add(x: Tensor4, y: Tensor4) -> Tensor4:
    if x.shape != y.shape:
        raise ValueError(f"add shape mismatch {x.shape} vs {y.shape}")
    out = Tensor4(x.values + y.values, x.tape)

    def _backward():
        if out.grad is None:
            return
        x.accum_grad(out.grad)
        y.accum_grad(out.grad)

    x.tape.record(_backward)
    return out


def concat_channels(x: Tensor4, y: Tensor4) -> Tensor4:
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ValueError(f"concat shape mismatch {x.shape} vs {y.shape}")
    cx = x.channels
    out = Tensor4(np.concatenate([x.values, y.values], axis=1), x.tape)

    def _backward():
        if out.grad is None:
            return
        x.accum_grad(out.grad[:, :cx])
        y.accum_grad(out.grad[:, cx:])

    x.tape.record(_backward)
    return out


# ---------------------------------------------------------------------------
# scalar (loss) plumbing
# ---------------------------------------------------------------------------

def scalar_add(a: Scalar, b: Scalar) -> Scalar:
    out = Scalar(a.value + b.value, a.tape)

    def _backward():
        a.grad += out.grad
        b.grad += out.grad

    a.tape.record(_backward)
    return out


def scalar_scale(a: Scalar, factor: float) -> Scalar:
    out = Scalar(a.value * factor, a.tape)

    def _backward():
        a.grad += factor * out.grad

    a.tape.record(_backward)
    return out


def backward(loss: Scalar):
    """Seed d(loss)/d(loss) = 1, run the tape once, and release it."""
    loss.grad = 1.0
    loss.tape.run_backward()
    loss.tape.release()


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LRSchedule:
    lr_init: float
    lr_final: float
    total_epochs: int

    def __post_init__(self):
        if not (self.lr_init >= self.lr_final > 0):
            raise ValueError("need lr_init >= lr_final > 0")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


def cosine_lr(sched: LRSchedule, epoch: int) -> float:
    """lr_final + (lr_init - lr_final) * (1 + cos(pi * epoch / total)) / 2."""
    if not 0 <= epoch <= sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {sched.total_epochs}]")
    cos = np.cos(np.pi * epoch / sched.total_epochs)
    return sched.lr_final + 0.5 * (sched.lr_init - sched.lr_final) * (1.0 + cos)


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """Bias-corrected Adam over the store in insertion order; grads consumed."""
    for p in store:
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
    t = store.step_count + 1
    for p in store:
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        p.values -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None
    store.step_count = t


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CK_MAGIC = b"CHCK"
_CK_HEADER = struct.Struct("<4sIQQ")  # magic, version, total scalar count, step count
_CK_VERSION = 1


def save_checkpoint(path, store: ParamStore):
    with open(path, "wb") as fh:
        fh.write(_CK_HEADER.pack(_CK_MAGIC, _CK_VERSION, parameter_count(store), store.step_count))
        for p in store:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", p.values.ndim))
            fh.write(struct.pack(f"<{p.values.ndim}Q", *p.values.shape))
            for arr in (p.values, p.adam_m, p.adam_v):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParamStore:
    store = ParamStore()
    with open(path, "rb") as fh:
        raw = fh.read(_CK_HEADER.size)
        if len(raw) < _CK_HEADER.size:
            raise ValueError("truncated checkpoint header")
        magic, version, count, step_count = _CK_HEADER.unpack(raw)
        if magic != _CK_MAGIC:
            raise ValueError(f"bad magic {magic!r}, not a checkpoint file")
        if version != _CK_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            arrs = []
            for _ in range(3):
                buf = fh.read(8 * n)
                if len(buf) < 8 * n:
                    raise ValueError(f"truncated data for parameter {name!r}")
                arrs.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
            p = store.add(name, arrs[0])
            p.adam_m, p.adam_v = arrs[1], arrs[2]
    if parameter_count(store) != count:
        raise ValueError(
            f"checkpoint declares {count} parameters but contains {parameter_count(store)}"
        )
    store.step_count = step_count
    return store
