"""Dense fp64 tensors with taped reverse-mode differentiation.

All storage is CPU numpy, always float64. Primitives record onto the
active tape (opened with :func:`record`) whenever at least one input is
tracked, i.e. requires a gradient or was itself produced on that tape.
With no active tape a forward pass is just numpy arithmetic.

The tape is thread-local: distinct model instances may run on distinct
threads, but one tape never spans threads.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_DEBUG = False


def set_debug(enabled: bool) -> None:
    """Toggle NaN/Inf checking on every op output (slow; off by default)."""
    global _DEBUG
    _DEBUG = bool(enabled)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if _DEBUG and not np.all(np.isfinite(arr)):
        raise ContractError(f"non-finite values produced by {where}")


class Tensor:
    """A dense float64 array, optionally tracked for differentiation.

    ``requires_grad`` marks a leaf whose gradient should be accumulated
    into ``grad`` by :meth:`Tape.backward`. ``node_id`` is assigned by
    the tape the tensor is first seen on; constants keep ``None``.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: "Tape | None" = None
        _check_finite(self.data, "Tensor()")

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
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    @property
    def T(self):
        if self.ndim != 2:
            raise ShapeError(f".T needs a 2-D tensor, got shape {self.shape}")
        return transpose(self, (1, 0))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


# -- tape --------------------------------------------------------------


class _Node:
    __slots__ = ("op", "in_ids", "out_id", "backward")

    def __init__(self, op: str, in_ids: list[int], out_id: int,
                 backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.in_ids = in_ids
        self.out_id = out_id
        self.backward = backward


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Nodes are appended in execution order, so the record is
    topologically sorted by construction; ``backward`` walks it once in
    reverse. Leaf gradients accumulate into ``Tensor.grad`` across
    calls until the caller clears them.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._next_id = 0
        self._leaves: dict[int, Tensor] = {}
        # keep recorded tensors alive so node ids stay unambiguous
        self._owned: list[Tensor] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _register(self, t: Tensor, as_leaf: bool) -> int:
        if t._tape is not self:
            t._tape = self
            t.node_id = self._next_id
            self._next_id += 1
            self._owned.append(t)
            if as_leaf and t.requires_grad:
                self._leaves[t.node_id] = t
        return t.node_id  # type: ignore[return-value]

    def record(self, op: str, inputs: Iterable[Tensor], output: Tensor,
               backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> None:
        in_ids = [self._register(t, as_leaf=True) for t in inputs]
        out_id = self._register(output, as_leaf=False)
        self._nodes.append(_Node(op, in_ids, out_id, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``."""
        if loss._tape is not self or loss.node_id is None:
            raise ContractError("loss was not produced under this tape")
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g_out = grads.pop(node.out_id, None)
            if g_out is None:
                continue
            for in_id, g_in in zip(node.in_ids, node.backward(g_out)):
                if g_in is None:
                    continue
                if in_id in grads:
                    grads[in_id] = grads[in_id] + g_in
                else:
                    grads[in_id] = g_in
        for node_id, leaf in self._leaves.items():
            g = grads.get(node_id)
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = g.reshape(leaf.shape).copy()
            else:
                leaf.grad = leaf.grad + g.reshape(leaf.shape)


_LOCAL = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def record():
    """Open a fresh tape; ops inside the block record onto it."""
    tape = Tape()
    _tape_stack().append(tape)
    try:
        yield tape
    finally:
        _tape_stack().pop()


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a recorded scalar loss."""
    if loss._tape is None:
        raise ContractError("loss was not produced under an active tape")
    loss._tape.backward(loss)


def _tracked(tape: Tape, t: Tensor) -> bool:
    return t.requires_grad or t._tape is tape


def _apply(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(_tracked(tape, t) for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the pre-broadcast shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape))
                 if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data
    return _apply("add", (a, b), out,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data
    return _apply("sub", (a, b), out,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data
    return _apply("mul", (a, b), out,
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data / b.data
    return _apply("div", (a, b), out,
                  lambda g: (_unbroadcast(g / b.data, a.shape),
                             _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = _coerce(a)
    return _apply("neg", (a,), -a.data, lambda g: (-g,))


def relu(a) -> Tensor:
    # subgradient at 0 is 0 (strict > mask)
    a = _coerce(a)
    mask = a.data > 0.0
    return _apply("relu", (a,), np.where(mask, a.data, 0.0),
                  lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)
    return _apply("exp", (a,), out, lambda g: (g * out,))


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out = np.sqrt(a.data)
    return _apply("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor) with ReLU subgradient (0 where a < floor)."""
    return relu(_coerce(a) - floor) + floor


# -- matmul ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    Backward follows dA = dC·Bᵀ and dB = Aᵀ·dC per matrix, summed over
    broadcast batch axes.
    """
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul batch shapes differ: {a.shape} @ {b.shape}") from exc

    def bwd(g: np.ndarray):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _apply("matmul", (a, b), out, bwd)


# -- reductions and shape ops -------------------------------------------


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), a.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.shape).copy(),)

    return _apply("sum", (a,), out, bwd)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    count = a.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out = a.data.reshape(shape)
    return _apply("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _apply("transpose", (a,), out, lambda g: (g.transpose(inverse),))


def concatenate(tensors, axis: int = 0) -> Tensor:
    parts = [_coerce(t) for t in tensors]
    if not parts:
        raise ContractError("concatenate needs at least one tensor")
    out = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g: np.ndarray):
        return tuple(np.split(g, offsets, axis=axis))

    return _apply("concatenate", tuple(parts), out, bwd)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along one axis; backward scatter-adds (repeats accumulate)."""
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def bwd(g: np.ndarray):
        ga = np.zeros_like(a.data)
        ga_m = np.moveaxis(ga, axis, 0)
        g_m = np.moveaxis(g, axis, 0) if idx.ndim == 1 else g
        np.add.at(ga_m, idx, g_m)
        return (ga,)

    return _apply("take", (a,), out, bwd)


# -- fused numeric primitives -------------------------------------------


def softmax_rows(a) -> Tensor:
    """Row-stochastic softmax over the last axis, max-subtracted for
    stability; rows sum to 1 within 1e-12 for any finite input."""
    a = _coerce(a)
    if a.shape[-1] < 1:
        raise ShapeError(f"softmax_rows needs a non-empty last axis, got {a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g: np.ndarray):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _apply("softmax_rows", (a,), out, bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis to zero mean / unit variance, then apply
    the affine pair. Constant rows map to ``beta`` (variance floor eps)."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    x = _coerce(x)
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=-1, keepdims=True)
    normed = centered / sqrt(var + eps)
    return normed * gamma + beta


def conv2d_valid(x, kernels, stride: int = 1) -> Tensor:
    """Valid (no padding) 2-D convolution.

    ``x`` is (H, W, Cin) or (B, H, W, Cin); ``kernels`` is
    (kh, kw, Cin, Cout). Output spatial dims follow
    floor((H - kh)/stride) + 1.
    """
    x, kernels = _coerce(x), _coerce(kernels)
    if stride < 1:
        raise ContractError(f"stride must be positive, got {stride}")
    squeeze = x.ndim == 3
    if squeeze:
        x_r = reshape(x, (1,) + x.shape)
        out = conv2d_valid(x_r, kernels, stride)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d_valid needs (B,H,W,Cin) and (kh,kw,Cin,Cout), "
                         f"got {x.shape} and {kernels.shape}")
    b, h, w, cin = x.shape
    kh, kw, kcin, cout = kernels.shape
    if kcin != cin:
        raise ShapeError(f"kernel channels {kcin} != input channels {cin}")
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1

    def cols_of(data: np.ndarray) -> np.ndarray:
        view = np.lib.stride_tricks.sliding_window_view(data, (kh, kw), axis=(1, 2))
        view = view[:, ::stride, ::stride]          # (B, Ho, Wo, Cin, kh, kw)
        return view.transpose(0, 1, 2, 4, 5, 3)     # (B, Ho, Wo, kh, kw, Cin)

    kmat = kernels.data.reshape(kh * kw * cin, cout)
    cols = cols_of(x.data).reshape(b * ho * wo, kh * kw * cin)
    out = (cols @ kmat).reshape(b, ho, wo, cout)

    def bwd(g: np.ndarray):
        gmat = g.reshape(b * ho * wo, cout)
        cols_b = cols_of(x.data).reshape(b * ho * wo, kh * kw * cin)
        gk = (cols_b.T @ gmat).reshape(kh, kw, cin, cout)
        dcols = (gmat @ kmat.T).reshape(b, ho, wo, kh, kw, cin)
        gx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + (ho - 1) * stride + 1:stride,
                   j:j + (wo - 1) * stride + 1:stride, :] += dcols[:, :, :, i, j, :]
        return gx, gk

    return _apply("conv2d_valid", (x, kernels), out, bwd)


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling (window == stride == ``size``); a
    ragged right/bottom margin is dropped. Ties route to the first
    maximum in window scan order."""
    x = _coerce(x)
    squeeze = x.ndim == 3
    if squeeze:
        out = maxpool2d(reshape(x, (1,) + x.shape), size)
        return reshape(out, out.shape[1:])
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d needs (B,H,W,C), got {x.shape}")
    b, h, w, c = x.shape
    if size < 1 or h < size or w < size:
        raise ShapeError(f"pool window {size} does not fit input {h}x{w}")
    ho, wo = h // size, w // size
    cropped = x.data[:, :ho * size, :wo * size, :]
    tiles = cropped.reshape(b, ho, size, wo, size, c)
    tiles = tiles.transpose(0, 1, 3, 5, 2, 4).reshape(b, ho, wo, c, size * size)
    arg = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0]

    def bwd(g: np.ndarray):
        gt = np.zeros((b, ho, wo, c, size * size))
        np.put_along_axis(gt, arg[..., None], g[..., None], axis=-1)
        gt = gt.reshape(b, ho, wo, c, size, size).transpose(0, 1, 4, 2, 5, 3)
        gx = np.zeros_like(x.data)
        gx[:, :ho * size, :wo * size, :] = gt.reshape(b, ho * size, wo * size, c)
        return (gx,)

    return _apply("maxpool2d", (x,), out, bwd)


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted-scaling dropout: surviving entries divide by the keep
    probability, so evaluation needs no rescaling. Train-time only; the
    caller simply skips the call in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    x = _coerce(x)
    if rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return x * Tensor(mask)


# -- parameters ---------------------------------------------------------


class ParameterStore:
    """Named trainable tensors plus gradient and optimizer slots.

    Names are unique; gradients live on the tensors themselves and the
    per-parameter optimizer slots (``slots[name]["m"]`` etc.) are lazily
    created by the optimizer.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.slots: dict[str, dict[str, np.ndarray]] = {}
        self.step = 0

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def snapshot_slots(self) -> dict[str, dict[str, np.ndarray]]:
        return {name: {k: v.copy() for k, v in slot.items()}
                for name, slot in self.slots.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self._params:
                raise ContractError(f"unknown parameter {name!r}")
            t = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {name!r}: stored shape {arr.shape} "
                                 f"!= expected {t.shape}")
            t.data = arr.copy()

    def load_slots(self, slots: dict[str, dict[str, np.ndarray]]) -> None:
        self.slots = {name: {k: np.array(v, dtype=np.float64) for k, v in slot.items()}
                     for name, slot in slots.items()}
