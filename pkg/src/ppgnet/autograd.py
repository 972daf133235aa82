"""Minimal reverse-mode differentiation over numpy float64 arrays.

Only the primitives PPGnet needs are provided. Every op builds a node whose
backward maps the upstream gradient to one gradient per parent; the engine
walks the graph once in reverse topological order and accumulates.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import fft as sfft

__all__ = [
    "Tensor",
    "BatchNormState",
    "no_grad",
    "record_kinks",
    "is_grad_enabled",
    "tensor",
    "add",
    "mul",
    "linear",
    "sigmoid",
    "tanh",
    "relu",
    "concat",
    "stack",
    "pad_last",
    "lstm_forward",
    "conv1d",
    "same_padding",
    "batchnorm",
    "maxpool1d",
    "dropout",
    "mae_loss",
    "sgd_step",
]

DTYPE = np.float64

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def record_kinks():
    """Collect the branch pattern of every piecewise-linear op evaluated inside.

    Finite-difference checks compare patterns between perturbed evaluations
    to detect steps that straddle a kink.
    """
    log: list[np.ndarray] = []
    previous = getattr(_grad_state, "kinks", None)
    _grad_state.kinks = log
    try:
        yield log
    finally:
        _grad_state.kinks = previous


def _note_kink(pattern: np.ndarray) -> None:
    log = getattr(_grad_state, "kinks", None)
    if log is not None:
        log.append(pattern)


@contextmanager
def no_grad():
    """Disable graph construction in the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """An array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients to every tracked ancestor.

        Called without ``grad`` the tensor must be a scalar and is seeded
        with 1. Gradients accumulate into ``.grad`` of leaves and
        intermediates alike.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"{node.op} backward produced shape {pg.shape} for parent {parent.shape}"
                    )
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), backward, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - t * t),)

    return _make(t, (x,), backward, "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_kink(mask)

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), backward, "relu")


# shape ops -------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def getitem(x: Tensor, index) -> Tensor:
    items = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(i, (list, np.ndarray)) for i in items)

    def backward(g):
        full = np.zeros_like(x.data)
        if advanced:
            np.add.at(full, index, g)  # repeated indices must accumulate
        else:
            full[index] += g
        return (full,)

    return _make(np.array(x.data[index]), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            s != s0 for i, (s, s0) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise ValueError(f"concat shape mismatch: {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            sl = [slice(None)] * ndim
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def pad_last(x: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    width = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    length = x.shape[-1]

    def backward(g):
        return (np.ascontiguousarray(g[..., left:left + length]),)

    return _make(np.pad(x.data, width), (x,), backward, "pad_last")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def tsum(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum()), (x,), backward, "sum")


def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(np.asarray(x.data.mean()), (x,), backward, "mean")


# dense -----------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``.

    ``weight`` has shape ``(out_features, in_features)``.
    """
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, backward, "linear")


# recurrent -------------------------------------------------------------------

def lstm_forward(
    inputs: Tensor,
    layers: Sequence[tuple[Tensor, Tensor, Tensor]],
) -> tuple[Tensor, list[tuple[Tensor, Tensor]]]:
    """Stacked LSTM over ``inputs`` of shape ``(B, T, D)`` from zero states.

    Each layer is ``(w_ih (4H, D_l), w_hh (4H, H), bias (4H,))`` with gate rows
    ordered input, forget, cell, output. Returns the hidden state of every
    layer at every step as ``(B, T, n_layers, H)`` and the final ``(h, c)``
    per layer.
    """
    if inputs.ndim != 3:
        raise ValueError(f"lstm_forward expects (B, T, D) input, got {inputs.shape}")
    batch, steps, _ = inputs.shape
    layer_input = inputs
    per_layer: list[list[Tensor]] = []
    finals: list[tuple[Tensor, Tensor]] = []
    for w_ih, w_hh, bias in layers:
        hidden = w_hh.shape[1]
        if w_ih.shape[0] != 4 * hidden or w_hh.shape != (4 * hidden, hidden) or bias.shape != (4 * hidden,):
            raise ValueError(
                f"lstm_forward: inconsistent layer shapes {w_ih.shape}, {w_hh.shape}, {bias.shape}"
            )
        projected = linear(layer_input, w_ih, bias)  # (B, T, 4H), all steps at once
        h = Tensor(np.zeros((batch, hidden)))
        c = Tensor(np.zeros((batch, hidden)))
        outputs = []
        for t in range(steps):
            gates = add(projected[:, t, :], linear(h, w_hh))
            i = sigmoid(gates[:, 0:hidden])
            f = sigmoid(gates[:, hidden:2 * hidden])
            g = tanh(gates[:, 2 * hidden:3 * hidden])
            o = sigmoid(gates[:, 3 * hidden:])
            c = add(mul(f, c), mul(i, g))
            h = mul(o, tanh(c))
            outputs.append(h)
        per_layer.append(outputs)
        finals.append((h, c))
        layer_input = stack(outputs, axis=1)
    hiddens = stack([stack(step_hiddens, axis=1) for step_hiddens in per_layer], axis=2)
    return hiddens, finals


# convolution -----------------------------------------------------------------

def same_padding(kernel_size: int) -> tuple[int, int]:
    """Left/right zero padding that preserves length; even kernels pad more on the right."""
    left = (kernel_size - 1) // 2
    return left, kernel_size - 1 - left


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded 1-D cross-correlation.

    ``x`` is ``(N, C_in, L)``, ``weight`` is ``(C_out, C_in, K)``; the output is
    ``(N, C_out, L)`` with ``out[n, o, l] = b[o] + sum_{c,k} w[o, c, k] x[n, c, l + k - left]``
    and zeros outside the signal. Evaluated through zero-padded real FFTs.
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise ValueError(f"conv1d expects 3-D input and weight, got {x.shape} and {weight.shape}")
    n_batch, c_in, length = x.shape
    c_out, c_w, k = weight.shape
    if c_w != c_in:
        raise ValueError(f"conv1d: input has {c_in} channels, weight expects {c_w}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv1d: bias {bias.shape} != ({c_out},)")
    left, right = same_padding(k)
    if k > length + left + right:
        raise ValueError("conv1d: kernel longer than padded input")

    # circular correlation is exact on the kept outputs and kernel lags once
    # the transform covers L + max(left, right); full linear length is not needed
    nfft = sfft.next_fast_len(length + right, real=True)
    # frequency-major contiguous layouts turn the channel contraction into one
    # batched BLAS matmul; strided operands fall off the BLAS path
    xf = _freq_major(sfft.rfft(x.data, nfft, axis=-1))  # (F, N, C_in)
    wf_rev = _freq_major(sfft.rfft(weight.data[:, :, ::-1], nfft, axis=-1).transpose(1, 0, 2))  # (F, C_in, C_out)
    start = k - 1 - left
    out = np.ascontiguousarray(_time_major(xf @ wf_rev, nfft)[:, :, start:start + length])
    if bias is not None:
        out += bias.data[None, :, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gf = _freq_major(sfft.rfft(g, nfft, axis=-1))  # (F, N, C_out)
        gx = gw = None
        if x.requires_grad:
            wf = _freq_major(sfft.rfft(weight.data, nfft, axis=-1))  # (F, C_out, C_in)
            gx = np.ascontiguousarray(_time_major(gf @ wf, nfft)[:, :, left:left + length])
        if weight.requires_grad:
            # circular cross-correlation of g with x; lags stay clear of wrap-around
            corr = _time_major(np.conj(gf).transpose(0, 2, 1) @ xf, nfft)  # (C_out, C_in, nfft)
            lags = (np.arange(k) - left) % nfft
            gw = np.ascontiguousarray(corr[:, :, lags])
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _make(out, parents, backward, "conv1d")


def _freq_major(spectrum: np.ndarray) -> np.ndarray:
    """(A, B, F) spectrum -> contiguous (F, A, B)."""
    return np.ascontiguousarray(spectrum.transpose(2, 0, 1))


def _time_major(prod: np.ndarray, nfft: int) -> np.ndarray:
    """(F, A, B) spectrum -> real (A, B, nfft) signal."""
    return sfft.irfft(np.ascontiguousarray(prod.transpose(1, 2, 0)), nfft, axis=-1)


# normalization ---------------------------------------------------------------

@dataclass
class BatchNormState:
    """Learned affine parameters plus running statistics for one BN layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        if eps <= 0:
            raise ValueError("eps must be positive")
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True, name="bn_gamma"),
            beta=Tensor(np.zeros(channels), requires_grad=True, name="bn_beta"),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            eps=eps,
        )


def batchnorm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization of ``(N, C, L)`` input.

    Training mode standardizes with the biased batch variance and folds the
    unbiased variance into the running estimate (momentum-weighted). Eval
    mode applies the running statistics as a fixed affine map.
    """
    if x.ndim != 3 or x.shape[1] != state.gamma.shape[0]:
        raise ValueError(f"batchnorm: input {x.shape} does not match {state.gamma.shape[0]} channels")
    gamma, beta = state.gamma, state.beta
    shape = (1, -1, 1)

    if not training:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        scale = (gamma.data * inv_std).reshape(shape)
        xhat = (x.data - state.running_mean.reshape(shape)) * inv_std.reshape(shape)
        out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

        def backward_eval(g):
            return g * scale, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

        return _make(out, (x, gamma, beta), backward_eval, "batchnorm")

    m = x.shape[0] * x.shape[2]
    if m <= 1:
        raise ValueError("batchnorm: training mode needs more than one value per channel")
    mean = np.einsum("ncl->c", x.data) / m
    xhat = x.data - mean.reshape(shape)
    var = np.einsum("ncl,ncl->c", xhat, xhat) / m
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat *= inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape)
    out += beta.data.reshape(shape)

    state.running_mean = (1.0 - state.momentum) * state.running_mean + state.momentum * mean
    state.running_var = (1.0 - state.momentum) * state.running_var + state.momentum * var * m / (m - 1)

    def backward_train(g):
        g_sum = np.einsum("ncl->c", g)
        g_xhat = np.einsum("ncl,ncl->c", g, xhat)
        # dx = gamma * inv_std / m * (m g - sum g - xhat * sum(g xhat))
        gx = xhat * (-g_xhat / m).reshape(shape)
        gx += g
        gx -= (g_sum / m).reshape(shape)
        gx *= (gamma.data * inv_std).reshape(shape)
        return gx, g_xhat, g_sum

    return _make(out, (x, gamma, beta), backward_train, "batchnorm")


# pooling / regularization ----------------------------------------------------

def maxpool1d(x: Tensor, kernel: int = 4) -> Tensor:
    """Non-overlapping max pool on the last axis; a trailing remainder is dropped."""
    length = x.shape[-1]
    out_len = length // kernel
    if out_len == 0:
        raise ValueError(f"maxpool1d: length {length} shorter than kernel {kernel}")
    blocks = x.data[..., : out_len * kernel].reshape(*x.shape[:-1], out_len, kernel)
    # running max over the k strided slices; strict '>' keeps the first index on ties
    out = blocks[..., 0].copy()
    arg = np.zeros(out.shape, dtype=np.int8)
    for j in range(1, kernel):
        better = blocks[..., j] > out
        np.copyto(out, blocks[..., j], where=better)
        arg[better] = j
    _note_kink(arg)

    def backward(g):
        gblocks = np.empty(blocks.shape)
        for j in range(kernel):
            gblocks[..., j] = np.where(arg == j, g, 0.0)
        if out_len * kernel == length:
            return (gblocks.reshape(x.shape),)
        full = np.zeros(x.shape)
        full[..., : out_len * kernel] = gblocks.reshape(*x.shape[:-1], out_len * kernel)
        return (full,)

    return _make(out, (x,), backward, "maxpool1d")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode and at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), backward, "dropout")


# loss / optimizer ------------------------------------------------------------

def mae_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at an exact tie is 0."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ValueError(f"mae_loss: prediction {pred.shape} vs target {target.shape}")
    if pred.data.size == 0:
        raise ValueError("mae_loss: empty batch")
    diff = pred.data - target
    n = diff.size
    _note_kink(np.sign(diff))

    def backward(g):
        return (g * np.sign(diff) / n,)

    return _make(np.asarray(np.abs(diff).mean()), (pred,), backward, "mae_loss")


def sgd_step(params: Iterable[Tensor], lr: float, grads: Sequence[np.ndarray] | None = None) -> None:
    """In-place ``p <- p - lr * g`` for each parameter.

    Gradients default to ``p.grad``; parameters without a gradient (frozen or
    unused) are left untouched.
    """
    params = list(params)
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ValueError("sgd_step: one gradient per parameter required")
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"sgd_step: gradient {g.shape} vs parameter {p.shape}")
        p.data -= lr * g
