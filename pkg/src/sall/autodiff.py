"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives needed by small convolutional classifiers are provided.
Operations record themselves on the innermost active :class:`Tape` when any
input requires a gradient; outside a tape everything runs in inference mode.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ArrayLike = Union[np.ndarray, Sequence, float, int]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A caller broke an operation's precondition."""


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar used by tests and small scripts
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_TAPES: list = []


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded here. A tape can be replayed by :func:`backward` exactly once.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: BackwardFn) -> None:
        if self.consumed:
            raise ContractError("cannot record on a consumed tape")
        self.nodes.append((out, inputs, fn))


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    tape = _TAPES[-1] if _TAPES else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, fn)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("operation produced non-finite values")
    return out


def backward(loss: Tensor, tape: Tape) -> dict:
    """Propagate d(loss)/d(.) to every tensor recorded on ``tape``.

    Returns a map from each reached ``requires_grad`` tensor to its gradient
    array; the same arrays are stored on ``tensor.grad``. The tape is consumed.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, fn in reversed(tape.nodes):
        g = grads.get(id(out))
        if g is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = inp
    result = {}
    for key, t in owners.items():
        if t.requires_grad or t is loss:
            t.grad = grads[key]
            result[t] = grads[key]
    return result


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Sum of equal shapes, or ``a[..., n] + b[n]`` (bias broadcast)."""
    if a.shape != b.shape and not (b.data.ndim == 1 and a.shape[-1:] == b.shape):
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")

    def fn(g):
        gb = g if b.shape == g.shape else g.reshape(-1, b.size).sum(axis=0)
        return g, gb

    return _emit(a.data + b.data, (a, b), fn)


def channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[B, C, H, W] + b[C]``."""
    if x.data.ndim != 4 or b.shape != (x.shape[1],):
        raise DimensionError(f"channel bias {b.shape} does not fit {x.shape}")
    return _emit(x.data + b.data[None, :, None, None], (x, b), lambda g: (g, g.sum(axis=(0, 2, 3))))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly zero is zero."""
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tensor_sum(x: Tensor) -> Tensor:
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _emit(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def take_rows(x: Tensor, index: Iterable[int]) -> Tensor:
    """Rows ``x[index]`` of a 2-D tensor."""
    idx = np.asarray(list(index), dtype=np.intp)

    def fn(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(x.data[idx], (x,), fn)


# ------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``x`` is ``[c_in, h, w]`` or batched ``[B, c_in, h, w]``; ``kernels`` is
    ``[c_out, c_in, kh, kw]``.
    """
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise DimensionError(f"conv2d expects [B,]C,H,W input and 4-D kernels, got {x.shape}, {kernels.shape}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    B, C, H, W = xd.shape
    O, Ck, kh, kw = kernels.shape
    if Ck != C:
        raise DimensionError(f"input has {C} channels, kernels expect {Ck}: {x.shape} vs {kernels.shape}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # column layout (C*kh*kw, B*Ho*Wo) keeps the innermost copy axis contiguous
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(C * kh * kw, B * Ho * Wo)
    wmat = kernels.data.reshape(O, -1)
    out = (wmat @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    if single:
        out = out[0]

    def fn(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(1, 0, 2, 3).reshape(O, -1)
        gk = (gmat @ cols.T).reshape(kernels.shape)
        if not x.requires_grad:
            return None, gk
        if stride == 1:
            # full correlation of the output gradient with the flipped kernels
            flipped = kernels.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, -1)
            gp = np.pad(g4, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gw = sliding_window_view(gp, (kh, kw), axis=(2, 3))
            gcols = gw.transpose(1, 4, 5, 0, 2, 3).reshape(O * kh * kw, -1)
            gxp = (flipped @ gcols).reshape(C, B, Hp, Wp).transpose(1, 0, 2, 3)
        else:
            gcols = (wmat.T @ gmat).reshape(C, kh, kw, B, Ho, Wo)
            gxp = np.zeros((B, C, Hp, Wp))
            hs = stride * (Ho - 1) + 1
            ws = stride * (Wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        gx = np.ascontiguousarray(gx)
        return (gx[0] if single else gx), gk

    return _emit(np.ascontiguousarray(out), (x, kernels), fn)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last two axes; trailing rows/cols that
    do not fill a window are dropped. Gradient goes to the first maximal entry."""
    lead = x.shape[:-2]
    H, W = x.shape[-2:]
    Ho, Wo = H // size, W // size
    if Ho == 0 or Wo == 0:
        raise DimensionError(f"pool size {size} larger than input {H}x{W}")
    views = [x.data[..., i:Ho * size:size, j:Wo * size:size] for i in range(size) for j in range(size)]
    out = np.maximum.reduce(views)

    def fn(g):
        gx = np.zeros(x.shape)
        taken = np.zeros(out.shape, dtype=bool)
        for k, v in enumerate(views):
            hit = (v == out) & ~taken
            taken |= hit
            i, j = divmod(k, size)
            gx[..., i:Ho * size:size, j:Wo * size:size] = g * hit
        return (gx,)

    return _emit(out, (x,), fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: ``[..., C, H, W] -> [..., C]``."""
    H, W = x.shape[-2:]
    n = H * W

    def fn(g):
        return (np.broadcast_to(g[..., None, None] / n, x.shape).copy(),)

    return _emit(x.data.mean(axis=(-2, -1)), (x,), fn)


# ---------------------------------------------------------------- softmax


def _check_temperature(T: float) -> float:
    T = float(T)
    if not T > 0 or not np.isfinite(T):
        raise ValueError(f"temperature must be positive and finite, got {T}")
    return T


def softmax_array(z: np.ndarray, T: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis of a plain array."""
    T = _check_temperature(T)
    s = z / T
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_array(z: np.ndarray, T: float = 1.0) -> np.ndarray:
    T = _check_temperature(T)
    s = z / T
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax_t(z: Tensor, T: float = 1.0) -> Tensor:
    """exp(z_i / T) / sum_j exp(z_j / T) along the last axis."""
    p = softmax_array(z.data, T)

    def fn(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner) / T,)

    return _emit(p, (z,), fn)


def cross_entropy_soft(pred_logits: Tensor, targets, T: float = 1.0) -> Tensor:
    """Mean over rows of ``-sum_j targets[i, j] * log softmax_t(pred_logits[i], T)[j]``.

    Targets may be one-hot or soft; every row must be a probability vector.
    No gradient flows into ``targets``.
    """
    T = _check_temperature(T)
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    z = pred_logits.data
    if z.ndim != 2 or y.shape != z.shape:
        raise DimensionError(f"logits {z.shape} and targets {y.shape} must both be [B, K]")
    if z.shape[1] < 2:
        raise DimensionError("cross-entropy needs at least two classes")
    if np.any(y < 0) or np.any(np.abs(y.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("every target row must be a probability vector")
    B = z.shape[0]
    logp = log_softmax_array(z, T)
    loss = -(y * logp).sum() / B

    def fn(g):
        return (float(g) * (np.exp(logp) - y) / (T * B),)

    return _emit(np.array(loss), (pred_logits,), fn)
