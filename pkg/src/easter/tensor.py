"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients are recorded: each output is stamped with a monotonically
increasing sequence number and keeps its inputs plus a backward rule.
:func:`backward` collects everything reachable from a scalar loss and
replays the rules in reverse recording order, so each recorded use of a
tensor contributes to its gradient exactly once.

Layouts follow the model's needs: sequences are ``[C, T]`` or batched
``[N, C, T]`` (channels before time), class scores put the class axis last.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading

import numpy as np

from .errors import InvalidArgumentError

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_counter = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (inference)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_seq")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.op = None
        self._parents = ()
        self._backward = None
        self._seq = next(_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: tuple, backward_rule, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._seq = next(_counter)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_rule
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy() if g.shape == t.data.shape else np.broadcast_to(g, t.data.shape).copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def tape(loss: Tensor) -> list:
    """Recorded operations reachable from ``loss``, in recording order."""
    seen = set()
    nodes = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward is not None:
            nodes.append(t)
            stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad."""
    if loss.data.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(tape(loss)):
        if node.grad is not None:
            node._backward(node.grad)
        # intermediate results release their graph once consumed
        node._backward = None
        node._parents = ()


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def rule(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), rule, "add")


def neg(a: Tensor) -> Tensor:
    def rule(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), rule, "neg")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def rule(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), rule, "mul")


def tsum(a: Tensor, axis=None) -> Tensor:
    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), rule, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))

    def rule(g):
        _accumulate(a, np.transpose(g, inv))

    return _result(np.transpose(a.data, axes), (a,), rule, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    def rule(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), rule, "reshape")


def getitem(a: Tensor, index) -> Tensor:
    basic = all(isinstance(i, (int, np.integer, slice)) for i in (index if isinstance(index, tuple) else (index,)))

    def rule(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        _accumulate(a, full)

    return _result(np.asarray(a.data[index]), (a,), rule, "getitem")


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    active = x.data > 0

    def rule(g):
        _accumulate(x, g * active)

    return _result(x.data * active, (x,), rule, "relu")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so the expectation is kept."""
    if not 0.0 <= rate < 1.0:
        raise InvalidArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise InvalidArgumentError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)

    def rule(g):
        _accumulate(x, g * keep)

    return _result(x.data * keep, (x,), rule, "dropout")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def rule(g):
        _accumulate(x, g - probs * g.sum(axis=axis, keepdims=True))

    return _result(out, (x,), rule, "log_softmax")


# ---------------------------------------------------------------------------
# convolution


def conv_padding(kernel: int, stride: int, dilation: int, length: int) -> tuple[int, int, int]:
    """Return ``(pad_left, pad_right, out_length)`` for "same"-style padding.

    ``out_length = ceil(length / stride)``; the left pad centres the dilated
    kernel (floor for even spans) and the right pad is whatever the last
    window needs.
    """
    span = (kernel - 1) * dilation
    out_len = -(-length // stride)
    left = span // 2
    right = max(0, (out_len - 1) * stride + span + 1 - length - left)
    return left, right, out_len


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, dilation: int = 1) -> Tensor:
    """1-D convolution over the last axis of ``[C_in, T]`` or ``[N, C_in, T]``.

    ``out[n, c, t] = bias[c] + sum_{i,k} x[n, i, t*stride + k*dilation - pad_left] * weight[c, i, k]``
    with out-of-range input read as zero.
    """
    if stride < 1 or dilation < 1:
        raise InvalidArgumentError("stride and dilation must be >= 1")
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3 or weight.ndim != 3:
        raise InvalidArgumentError(f"conv1d expects [N,C,T] input and [Co,Ci,K] weight, got {x.shape}, {weight.shape}")
    n, c_in, length = xd.shape
    c_out, w_in, k = weight.shape
    if w_in != c_in:
        raise InvalidArgumentError(f"input has {c_in} channels but weight expects {w_in}")
    if k < 1 or length < 1:
        raise InvalidArgumentError("kernel and input length must be >= 1")
    if bias is not None and bias.shape != (c_out,):
        raise InvalidArgumentError(f"bias shape {bias.shape} does not match {c_out} filters")

    left, right, t_out = conv_padding(k, stride, dilation, length)
    dtype = np.result_type(xd.dtype, weight.data.dtype)
    xp = np.zeros((n, c_in, left + length + right), dtype=dtype)
    xp[:, :, left:left + length] = xd
    reach = stride * (t_out - 1) + 1

    # columns laid out [C_in, K, N, T_out] so one matmul covers the whole batch
    cols = np.empty((c_in, k, n, t_out), dtype=dtype)
    for j in range(k):
        s = j * dilation
        cols[:, j] = xp[:, :, s:s + reach:stride].transpose(1, 0, 2)
    cols = cols.reshape(c_in * k, n * t_out)
    wmat = weight.data.reshape(c_out, c_in * k)
    out = (wmat @ cols).reshape(c_out, n, t_out)
    if bias is not None:
        out += bias.data[:, None, None]
    out = out.transpose(1, 0, 2)
    if unbatched:
        out = out[0]

    def rule(g):
        g3 = g[None] if unbatched else g
        gm = g3.transpose(1, 0, 2).reshape(c_out, n * t_out)
        if weight.requires_grad:
            _accumulate(weight, (gm @ cols.T).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gm.sum(axis=1))
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(c_in, k, n, t_out)
            gxp = np.zeros_like(xp)
            for j in range(k):
                s = j * dilation
                gxp[:, :, s:s + reach:stride] += gcols[:, j].transpose(1, 0, 2)
            gx = gxp[:, :, left:left + length]
            _accumulate(x, gx[0] if unbatched else gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(np.ascontiguousarray(out), parents, rule, "conv1d")


# ---------------------------------------------------------------------------
# normalisation


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    mask: np.ndarray | None = None,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalisation of ``[N, C, T]`` (or ``[C, T]``) input.

    In training mode the statistics are taken over batch and time, restricted
    to positions where ``mask`` (shape ``[N, 1, T]``) is nonzero, and the
    running buffers are updated in place by exponential moving average.
    Infer mode uses the running buffers only.
    """
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3:
        raise InvalidArgumentError(f"batch_norm expects [N,C,T] input, got {x.shape}")
    if xd.shape[2] == 0:
        raise InvalidArgumentError("batch_norm on a zero-length time axis")
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise InvalidArgumentError(f"gamma/beta must have shape ({c},)")

    if training:
        m = np.ones((xd.shape[0], 1, xd.shape[2]), dtype=xd.dtype) if mask is None else mask.astype(xd.dtype)
        count = m.sum()
        if count == 0:
            raise InvalidArgumentError("batch_norm mask selects no positions")
        mu = (xd * m).sum(axis=(0, 2)) / count
        centred = xd - mu[None, :, None]
        var = (centred * centred * m).sum(axis=(0, 2)) / count
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
        centred = xd - mu[None, :, None]

    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = centred * inv_std[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]
    if unbatched:
        out = out[0]

    def rule(g):
        g3 = g[None] if unbatched else g
        if gamma.requires_grad:
            _accumulate(gamma, (g3 * xhat).sum(axis=(0, 2)))
        if beta.requires_grad:
            _accumulate(beta, g3.sum(axis=(0, 2)))
        if not x.requires_grad:
            return
        gxhat = g3 * gamma.data[None, :, None]
        gx = gxhat * inv_std[None, :, None]
        if training:
            # every output depends on the masked statistics, so sums run over all positions
            d_mu = -(gxhat.sum(axis=(0, 2))) * inv_std
            d_var = -0.5 * (gxhat * centred).sum(axis=(0, 2)) * inv_std**3
            gx = gx + m * (d_mu[None, :, None] + 2.0 * d_var[None, :, None] * centred) / count
        _accumulate(x, gx[0] if unbatched else gx)

    return _result(out, (x, gamma, beta), rule, "batch_norm")


def fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)
