"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the segmentation network and its losses need are
provided. Every op records a closure on the active :class:`Tape`; calling
:meth:`Tape.backward` replays those closures in reverse order.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigurationError, TapeError

_local = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded. A tape can be consumed by ``backward`` exactly once.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable[[np.ndarray], None]]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        out._tape = self
        self._nodes.append((out, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("tape already consumed; run a new forward pass first")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        loss.grad = np.ones_like(loss.data)
        for out, _inputs, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)
        self.consumed = True
        self._nodes.clear()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor that contributed to ``loss``."""
    if loss._tape is None:
        raise TapeError("loss was not produced by tape-recorded ops")
    loss._tape.backward(loss)


# op name -> gradient multiplier; test hook for proving the checker catches bad backwards
_faults: dict[str, float] = {}


@contextmanager
def inject_backward_fault(op: str, factor: float = 1.5):
    """Scale the upstream gradient seen by ``op``'s backward while active."""
    _faults[op] = factor
    try:
        yield
    finally:
        _faults.pop(op, None)


@contextmanager
def kink_probe():
    """Collect the branch pattern of piecewise ops (relu, huber, absolute)."""
    patterns: list[bytes] = []
    _local.probe = patterns
    try:
        yield patterns
    finally:
        _local.probe = None


def _probe(mask: np.ndarray) -> None:
    patterns = getattr(_local, "probe", None)
    if patterns is not None:
        patterns.append(np.packbits(mask).tobytes())


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    stack = _tape_stack()
    out = Tensor(data, requires_grad=needs and bool(stack))
    if out.requires_grad:
        if op in _faults:
            factor, inner = _faults[op], backward_fn
            backward_fn = lambda g: inner(g * factor)  # noqa: E731
        stack[-1].record(out, inputs, backward_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


# --- ops ---------------------------------------------------------------


_PAD_MODES = {"zeros": "constant", "reflect": "reflect", "replicate": "edge"}


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int,
           padding_mode: str = "zeros") -> Tensor:
    """Same-size cross-correlation of a ``[C_in, H, W]`` map.

    ``padding_mode`` is ``zeros`` (default), ``reflect`` or ``replicate``.
    """
    if x.data.ndim != 3:
        raise ConfigurationError(f"conv2d input must be [C,H,W], got shape {x.shape}")
    if kernel.data.ndim != 4:
        raise ConfigurationError(f"conv2d kernel must be [C_out,C_in,k,k], got {kernel.shape}")
    c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise ConfigurationError(f"conv2d C_in mismatch: input has {c_in}, kernel expects {k_in}")
    if kh != kw or kh % 2 == 0:
        raise ConfigurationError(f"conv2d kernel size must be odd and square, got {kh}x{kw}")
    if padding != (kh - 1) // 2:
        raise ConfigurationError(f"conv2d padding must be {(kh - 1) // 2} for k={kh}, got {padding}")
    if bias.shape != (c_out,):
        raise ConfigurationError(f"conv2d bias C_out mismatch: expected ({c_out},), got {bias.shape}")
    if padding_mode not in _PAD_MODES:
        raise ConfigurationError(f"unknown padding_mode {padding_mode!r}")
    k = kh
    np_mode = _PAD_MODES[padding_mode]
    if np_mode == "reflect" and padding >= min(h, w):
        raise ConfigurationError(f"reflect padding {padding} needs H, W > {padding}")
    pad_spec = ((0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad_spec, mode=np_mode)
    source = None
    if np_mode != "constant" and padding:
        # flat source pixel of every padded position, for folding gradients back
        source = np.pad(np.arange(h * w).reshape(h, w), padding, mode=np_mode).ravel()
    # cols[(y, x), (c, dy, dx)]
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))  # C, H, W, k, k
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(h * w, c_in * k * k)
    wmat = kernel.data.reshape(c_out, c_in * k * k)
    out = (cols @ wmat.T).T.reshape(c_out, h, w) + bias.data[:, None, None]

    def back(g: np.ndarray) -> None:
        gm = g.reshape(c_out, h * w)
        if bias.requires_grad:
            bias.grad += gm.sum(axis=1)
        if kernel.requires_grad:
            kernel.grad += (gm @ cols).reshape(kernel.shape)
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(c_in, k, k, h, w)
            dxp = np.zeros_like(xp)
            for dy in range(k):
                for dx in range(k):
                    dxp[:, dy:dy + h, dx:dx + w] += dcols[:, dy, dx]
            if source is None:
                x.grad += dxp[:, padding:padding + h, padding:padding + w]
            else:
                flat = dxp.reshape(c_in, -1)
                folded = np.zeros((c_in, h * w))
                for c in range(c_in):
                    folded[c] = np.bincount(source, weights=flat[c], minlength=h * w)
                x.grad += folded.reshape(c_in, h, w)

    return _result("conv2d", out, (x, kernel, bias), back)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial positions of one image."""
    if eps <= 0:
        raise ConfigurationError(f"batch_norm eps must be positive, got {eps}")
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(f"batch_norm affine params must have shape ({c},)")
    flat = x.data.reshape(c, -1)
    n = flat.shape[1]
    mu = flat.mean(axis=1, keepdims=True)
    centered = flat - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = (gamma.data[:, None] * xhat + beta.data[:, None]).reshape(x.shape)

    def back(g: np.ndarray) -> None:
        gf = g.reshape(c, n)
        if beta.requires_grad:
            beta.grad += gf.sum(axis=1)
        if gamma.requires_grad:
            gamma.grad += (gf * xhat).sum(axis=1)
        if x.requires_grad:
            gx = gf * gamma.data[:, None]
            dx = inv_std * (gx - gx.mean(axis=1, keepdims=True)
                            - xhat * (gx * xhat).mean(axis=1, keepdims=True))
            x.grad += dx.reshape(x.shape)

    return _result("batch_norm", out, (x, gamma, beta), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _probe(mask)
    out = np.where(mask, x.data, 0.0)

    def back(g: np.ndarray) -> None:
        x.grad += g * mask

    return _result("relu", out, (x,), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def back(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _result("add", a.data + b.data, (a, b), back)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant (no gradient w.r.t. ``factor``)."""
    factor = float(factor)

    def back(g: np.ndarray) -> None:
        x.grad += g * factor

    return _result("scale", x.data * factor, (x,), back)


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""

    def back(g: np.ndarray) -> None:
        x.grad += np.broadcast_to(g, x.shape)

    return _result("total", np.array(x.data.sum()), (x,), back)


def log_softmax(x: Tensor, axis: int = 0) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def back(g: np.ndarray) -> None:
        x.grad += g - probs * g.sum(axis=axis, keepdims=True)

    return _result("log_softmax", out, (x,), back)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Select ``x[index[i, j], i, j]`` from a ``[C, H, W]`` tensor."""
    index = np.asarray(index)
    if index.shape != x.shape[1:]:
        raise ConfigurationError(f"pick index shape {index.shape} does not match {x.shape[1:]}")
    rows, cols = np.indices(index.shape)
    out = x.data[index, rows, cols]

    def back(g: np.ndarray) -> None:
        np.add.at(x.grad, (index, rows, cols), g)

    return _result("pick", out, (x,), back)


def shift_diff(x: Tensor, dy: int, dx: int) -> Tensor:
    """Neighbour differences ``x[:, i+dy, j+dx] - x[:, i, j]`` for dy, dx in {0, 1}."""
    _, h, w = x.shape
    ahead = x.data[:, dy:, dx:]
    here = x.data[:, :h - dy, :w - dx]

    def back(g: np.ndarray) -> None:
        x.grad[:, dy:, dx:] += g
        x.grad[:, :h - dy, :w - dx] -= g

    return _result("shift_diff", ahead - here, (x,), back)


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty, quadratic inside ``delta``."""
    if delta <= 0:
        raise ConfigurationError(f"huber delta must be positive, got {delta}")
    a = np.abs(x.data)
    inner = a <= delta
    _probe(np.stack([inner, x.data > 0]))
    out = np.where(inner, 0.5 * x.data * x.data, delta * (a - 0.5 * delta))

    def back(g: np.ndarray) -> None:
        x.grad += g * np.where(inner, x.data, delta * np.sign(x.data))

    return _result("huber", out, (x,), back)


def absolute(x: Tensor) -> Tensor:
    _probe(x.data > 0)

    def back(g: np.ndarray) -> None:
        x.grad += g * np.sign(x.data)

    return _result("absolute", np.abs(x.data), (x,), back)


def dot(x: Tensor, weights) -> Tensor:
    """``sum(x * weights)`` against a constant array."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != x.shape:
        raise ConfigurationError(f"dot shape mismatch: {x.shape} vs {weights.shape}")

    def back(g: np.ndarray) -> None:
        x.grad += g * weights

    return _result("dot", np.array((x.data * weights).sum()), (x,), back)
