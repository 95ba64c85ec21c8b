"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient::

    with Tape() as tape:
        loss = tensor_sum(mul(x, x))
    backward(loss, tape)

Outside a tape nothing is recorded, which is how evaluation runs.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of a tape (non-scalar loss, double backward)."""


class NumericError(ArithmeticError):
    """A non-finite value where a finite one is required."""


class Tensor:
    """A float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_produced", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        # True for outputs recorded on a tape (non-leaves).
        self._produced = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    name: str


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Tapes are thread-confined: entering a tape only affects the current thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - defensive
            stack.remove(self)

    def record(self, name: str, output: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        output.requires_grad = True
        output._produced = True
        self.nodes.append(_Node(output, tuple(inputs), backward_fn, name))

    def __len__(self) -> int:
        return len(self.nodes)


def _finish(name: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out._produced = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(name, out, inputs, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss`` through ``tape``.

    Leaf gradients accumulate (add) into existing ``.grad`` arrays. The tape is
    consumed afterwards.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward()")
    if not loss._produced:
        raise TapeError("loss was not produced through this tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._produced:
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
            elif t.grad is None:
                t.grad = np.array(gi, dtype=np.float64)
            else:
                t.grad = t.grad + gi
    tape.nodes.clear()
    tape.consumed = True


# ---------------------------------------------------------------------------
# Primitives


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _finish("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data

    def _bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _finish("mul", out, (a, b), _bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product; ``a`` may carry leading batch dimensions.

    ``b`` is either a plain matrix ``[k, n]`` shared across the batch, or has
    the same leading dimensions as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _finish("matmul", out, (a, b), _bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _finish("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _finish("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in the gradient."""
    src_shape = a.shape

    def _bw(g):
        full = np.zeros(src_shape)
        np.add.at(full, key, g)
        return (full,)

    return _finish("getitem", np.array(a.data[key], dtype=np.float64), (a,), _bw)


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _finish("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def tensor_mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _finish("mean", np.array(a.data.mean()), (a,), lambda g: (np.full(shape, g / n),))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: ArrayLike) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got {x.shape}")
    s = _softmax_np(x.data)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _finish("softmax", s, (x,), _bw)


def log_softmax(x: ArrayLike) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def _bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _finish("log_softmax", out, (x,), _bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params {gain.shape}, {bias.shape} do not match width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def _bw(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return _finish("layer_norm", out, (x, gain, bias), _bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: ArrayLike) -> Tensor:
    """Tanh-approximation GELU."""
    x = _as_tensor(x)
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * (xd + 0.044715 * x2 * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def _bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _finish("gelu", out, (x,), _bw)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout. Identity when not training or ``p == 0``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a generator")
    keep = rng.random(x.shape) >= p
    mask = keep / (1.0 - p) if p < 1.0 else np.zeros(x.shape)
    return mul(x, mask)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"token id out of range for embedding of {weight.shape[0]} rows")
    return getitem(weight, ids)


# ---------------------------------------------------------------------------
# Verification harness


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    n_samples: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is a zero-argument closure computing a scalar from ``params``. At most
    ``n_samples`` coordinates are probed (all of them if there are fewer),
    spread evenly over the parameter tensors. The per-coordinate error is
    ``|g_auto - g_fd| / max(1, |g_auto|, |g_fd|)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h must lie in [1e-7, 1e-3], got {h}")
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise NumericError("parameters must be finite")
        p.grad = None
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("f is not finite at the base point")
    backward(loss, tape)
    autos = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    coords = _sample_coords([p.size for p in params], n_samples, seed)
    worst = 0.0
    for ti, flat in coords:
        p = params[ti]
        view = p.data.reshape(-1)
        orig = view[flat]
        view[flat] = orig + h
        fp = f().item()
        view[flat] = orig - h
        fm = f().item()
        view[flat] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"f is not finite when probing tensor {ti} coordinate {flat}")
        g_fd = (fp - fm) / (2.0 * h)
        g_auto = float(autos[ti].reshape(-1)[flat])
        err = abs(g_auto - g_fd) / max(1.0, abs(g_auto), abs(g_fd))
        worst = max(worst, err)
    return worst


def _sample_coords(sizes: Sequence[int], n_samples: int, seed: int) -> list[tuple[int, int]]:
    total = sum(sizes)
    if total <= n_samples:
        return [(ti, j) for ti, s in enumerate(sizes) for j in range(s)]
    rng = np.random.default_rng(seed)
    quota = [0] * len(sizes)
    remaining = n_samples
    # Round-robin so small tensors (biases, gains) are always probed.
    while remaining > 0:
        progressed = False
        for ti, s in enumerate(sizes):
            if remaining and quota[ti] < s:
                quota[ti] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    coords = []
    for ti, (s, q) in enumerate(zip(sizes, quota)):
        for j in sorted(rng.choice(s, size=q, replace=False)):
            coords.append((ti, int(j)))
    return coords
