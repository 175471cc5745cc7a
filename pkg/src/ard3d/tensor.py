"""Dense tensors with reverse-mode autodiff, float32 by default.

The op set is exactly what the transformer, the 3D VAE and the flow loss
need: matmul (batched, broadcasting), elementwise arithmetic, masked
softmax, RMS norm, SiLU/GELU, embedding lookup, reshape/transpose/concat,
reductions, 3D convolution and nearest upsampling. Every op records a
closure on the tape when gradients are required; ``backward`` walks the
graph in reverse topological order.
"""

from __future__ import annotations

import ctypes
import math
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def retain_large_blocks(threshold: int = 32 << 20) -> bool:
    """Keep blocks below ``threshold`` on the glibc heap instead of mmap.

    Small recurring buffers (projections, FFN activations, latents) are
    reused warm instead of paying a fresh mmap/munmap page-fault cycle
    every training step. Anything bigger (attention score matrices,
    im2col scratch) still goes through mmap and returns to the OS on
    free: large freed heap chunks get pinned by interleaved small
    allocations faster than malloc_trim can release them, which grows
    resident size without bound over long runs. Pair with periodic
    trim_heap(). No-op (returns False) off glibc.
    """
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(ctypes.c_int(-3), ctypes.c_int(threshold))  # M_MMAP_THRESHOLD
        libc.mallopt(ctypes.c_int(-1), ctypes.c_int(threshold))  # M_TRIM_THRESHOLD
        return True
    except (OSError, AttributeError):
        return False


def trim_heap() -> bool:
    """Release free heap chunks back to the OS (glibc malloc_trim).

    With mmap disabled for large blocks, long-lived small allocations
    interleaved between big transient buffers slowly fragment the heap
    and resident size creeps by ~MBs per training step. Trimming every
    few dozen steps bounds that creep without giving up warm reuse in
    between. No-op (returns False) off glibc.
    """
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.malloc_trim(ctypes.c_size_t(0))
        return True
    except (OSError, AttributeError):
        return False


_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling tape recording (inference fast path)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward: Callable[[], None] | None = None
        self._prev: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode accumulation from a scalar loss."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self), _const(-1.0, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), mul(self, _const(-1.0, self)))

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _const(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _const(v: float, like: Tensor) -> Tensor:
    return Tensor(np.asarray(v, dtype=like.data.dtype))


def _needs_grad(*ts: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in ts)


def _accum(t: Tensor, g: np.ndarray, owned: bool = False):
    # owned=True promises g is a fresh array no other node aliases, so it
    # can become t.grad directly; identity-style backwards (add, reshape,
    # transpose, concat, tsum) pass views of out.grad and must copy.
    if t.grad is None:
        if g.dtype != t.data.dtype:
            t.grad = g.astype(t.data.dtype, copy=not owned)
        else:
            t.grad = g if owned else g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from e
    out = Tensor(out_data, requires_grad=_needs_grad(a, b), dtype=out_data.dtype)
    if out.requires_grad:
        out._prev = (a, b)

        def _bw():
            if a.requires_grad:
                ga = _unbroadcast(out.grad, a.shape)
                _accum(a, ga, owned=ga is not out.grad)
            if b.requires_grad:
                gb = _unbroadcast(out.grad, b.shape)
                _accum(b, gb, owned=gb is not out.grad)

        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e
    out = Tensor(out_data, requires_grad=_needs_grad(a, b), dtype=out_data.dtype)
    if out.requires_grad:
        out._prev = (a, b)

        def _bw():
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad * b.data, a.shape), owned=True)
            if b.requires_grad:
                _accum(b, _unbroadcast(out.grad * a.data, b.shape), owned=True)

        out._backward = _bw
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), requires_grad=_needs_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        out._prev = (a,)

        def _bw():
            _accum(a, out.grad * out.data, owned=True)

        out._backward = _bw
    return out


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * sig, requires_grad=_needs_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        out._prev = (a,)

        def _bw():
            d = 1.0 - sig
            d *= a.data
            d += 1.0
            d *= sig
            d *= out.grad
            _accum(a, d, owned=True)

        out._backward = _bw
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t), requires_grad=_needs_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        out._prev = (a,)

        def _bw():
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            dt = (1.0 - t**2) * dinner
            _accum(a, out.grad * (0.5 * (1.0 + t) + 0.5 * x * dt), owned=True)

        out._backward = _bw
    return out


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: batch dims incompatible, {a.shape} @ {b.shape}") from e
    out = Tensor(out_data, requires_grad=_needs_grad(a, b), dtype=out_data.dtype)
    if out.requires_grad:
        out._prev = (a, b)

        def _bw():
            g = out.grad
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                _accum(a, _unbroadcast(ga, a.shape), owned=True)
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                _accum(b, _unbroadcast(gb, b.shape), owned=True)

        out._backward = _bw
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape), requires_grad=_needs_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        out._prev = (a,)

        def _bw():
            _accum(a, out.grad.reshape(a.shape))

        out._backward = _bw
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes), requires_grad=_needs_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        out._prev = (a,)
        inv = tuple(np.argsort(axes))

        def _bw():
            _accum(a, np.transpose(out.grad, inv))

        out._backward = _bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(out_data, requires_grad=_needs_grad(*tensors), dtype=out_data.dtype)
    if out.requires_grad:
        out._prev = tuple(tensors)
        sizes = [t.shape[axis] for t in tensors]

        def _bw():
            start = 0
            for t, n in zip(tensors, sizes):
                if t.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(start, start + n)
                    _accum(t, out.grad[tuple(sl)])
                start += n

        out._backward = _bw
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    key = tuple(sl)
    out = Tensor(a.data[key], requires_grad=_needs_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        out._prev = (a,)

        def _bw():
            g = np.zeros_like(a.data)
            g[key] = out.grad
            _accum(a, g, owned=True)

        out._backward = _bw
    return out


def index_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0 by an integer index array."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx], requires_grad=_needs_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        out._prev = (a,)

        def _bw():
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            _accum(a, g, owned=True)

        out._backward = _bw
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table of {table.shape[0]} rows")
    return index_rows(table, ids)


# -- reductions --------------------------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis), requires_grad=_needs_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        out._prev = (a,)

        def _bw():
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.shape))

        out._backward = _bw
    return out


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis), requires_grad=_needs_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        out._prev = (a,)

        def _bw():
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.shape) / n, owned=True)

        out._backward = _bw
    return out


def mean_square(a: Tensor) -> Tensor:
    """Scalar mean of squared entries."""
    out = Tensor(np.asarray((a.data**2).mean(), dtype=a.data.dtype),
                 requires_grad=_needs_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        out._prev = (a,)

        def _bw():
            _accum(a, out.grad * (2.0 / a.data.size) * a.data, owned=True)

        out._backward = _bw
    return out


# -- normalization / attention ----------------------------------------------


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to unit RMS, then scale by ``gain``."""
    if gain.shape != a.shape[-1:]:
        raise ShapeError(f"rms_norm: gain shape {gain.shape} vs feature dim {a.shape[-1:]}")
    ms = (a.data**2).mean(axis=-1, keepdims=True) + eps
    inv = ms**-0.5
    normed = a.data * inv
    out_data = normed * gain.data
    out = Tensor(out_data, requires_grad=_needs_grad(a, gain), dtype=out_data.dtype)
    if out.requires_grad:
        out._prev = (a, gain)
        n = a.shape[-1]

        def _bw():
            g = out.grad
            if gain.requires_grad:
                _accum(gain, (g * normed).reshape(-1, n).sum(axis=0), owned=True)
            if a.requires_grad:
                gg = g * gain.data
                dot = (gg * a.data).sum(axis=-1, keepdims=True)
                _accum(a, inv * gg - a.data * (inv**3) * dot / n, owned=True)

        out._backward = _bw
    return out


def masked_softmax(a: Tensor, mask: np.ndarray, inplace: bool = False) -> Tensor:
    """Softmax over the last axis restricted to ``mask`` (True = allowed).

    Rows with no allowed position produce all-zero outputs rather than NaN.
    ``mask`` broadcasts against ``a``'s shape. ``inplace=True`` overwrites
    ``a.data`` with the result; only valid when no other node reads ``a``'s
    forward values (the backward here needs just the probabilities).
    """
    small = np.asarray(mask, dtype=bool)
    mask = np.broadcast_to(small, a.shape)
    neg = np.finfo(a.data.dtype).min
    # the score arrays dominate memory traffic and allocator time at full
    # sequence length, so everything below mutates one buffer
    if inplace:
        x = a.data
        np.copyto(x, neg, where=np.broadcast_to(~small, x.shape))
    else:
        x = np.where(mask, a.data, neg)
    rowmax = x.max(axis=-1, keepdims=True)
    np.subtract(x, rowmax, out=x)
    np.exp(x, out=x)
    x *= mask
    denom = x.sum(axis=-1, keepdims=True)
    np.divide(x, np.where(denom > 0, denom, 1.0), out=x)
    p = x
    out = Tensor(p, requires_grad=_needs_grad(a), dtype=a.data.dtype)
    if out.requires_grad:
        out._prev = (a,)

        def _bw():
            # out.grad buffers are never aliased across nodes (see _accum),
            # so the jacobian product can reuse the incoming gradient
            g = out.grad
            dot = np.einsum("...k,...k->...", g, p)[..., None]
            np.subtract(g, dot, out=g)
            g *= p
            out.grad = None
            _accum(a, g, owned=True)

        out._backward = _bw
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray, reduction: str = "mean") -> Tensor:
    """Numerically stable binary cross-entropy from logits."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce: target shape {t.shape} vs logits {logits.shape}")
    x = logits.data
    # log(1+exp(-|x|)) + max(x,0) - x*t
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    if reduction == "mean":
        val = loss.mean()
        scale = 1.0 / loss.size
    elif reduction == "sum":
        val = loss.sum()
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    out = Tensor(np.asarray(val, dtype=x.dtype), requires_grad=_needs_grad(logits), dtype=x.dtype)
    if out.requires_grad:
        out._prev = (logits,)

        def _bw():
            sig = 1.0 / (1.0 + np.exp(-x))
            _accum(logits, out.grad * scale * (sig - t), owned=True)

        out._backward = _bw
    return out


# -- convolution -------------------------------------------------------------


def _conv3d_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D convolution, NCDHW layout, cubic kernels.

    Forward via im2col + matmul; backward scatters through the same
    window geometry (27 vectorized slice-adds for k=3).
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D x and w, got {x.shape}, {w.shape}")
    B, Cin, X, Y, Z = x.shape
    Cout, Cin_w, k, k2, k3 = w.shape
    if Cin != Cin_w or k != k2 or k != k3:
        raise ShapeError(f"conv3d: weight {w.shape} incompatible with input {x.shape}")
    xo = _conv3d_out_size(X, k, stride, padding)
    yo = _conv3d_out_size(Y, k, stride, padding)
    zo = _conv3d_out_size(Z, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2, (padding,) * 2)) if padding else x.data

    def im2col(src):
        # windows: (B, Cin, xo, yo, zo, k, k, k)
        win = np.lib.stride_tricks.sliding_window_view(src, (k, k, k), axis=(2, 3, 4))
        win = win[:, :, ::stride, ::stride, ::stride]
        return win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(B * xo * yo * zo, Cin * k**3)

    cols = im2col(xp)
    wmat = w.data.reshape(Cout, Cin * k**3).T
    out_data = (cols @ wmat).reshape(B, xo, yo, zo, Cout).transpose(0, 4, 1, 2, 3)
    # cols is the blown-up (27x) copy of the input; rebuilding it inside the
    # backward keeps only xp alive between passes
    del cols
    if b is not None:
        out_data = out_data + b.data.reshape(1, Cout, 1, 1, 1)
    inputs = (x, w) if b is None else (x, w, b)
    out_data = np.ascontiguousarray(out_data)
    out = Tensor(out_data, requires_grad=_needs_grad(*inputs), dtype=out_data.dtype)
    if out.requires_grad:
        out._prev = inputs

        def _bw():
            g = out.grad  # (B, Cout, xo, yo, zo)
            gflat = g.transpose(0, 2, 3, 4, 1).reshape(B * xo * yo * zo, Cout)
            if b is not None and b.requires_grad:
                _accum(b, gflat.sum(axis=0), owned=True)
            if w.requires_grad:
                gw = (im2col(xp).T @ gflat).T.reshape(Cout, Cin, k, k, k)
                _accum(w, gw, owned=True)
            if x.requires_grad:
                exact = (xo - 1) * stride + k - 2 * padding == X \
                    and (yo - 1) * stride + k - 2 * padding == Y \
                    and (zo - 1) * stride + k - 2 * padding == Z
                if exact:
                    # input gradient as a transposed convolution: dilate g by
                    # the stride, pad, correlate with the flipped kernel; a
                    # gemm instead of 27 strided scatter-adds
                    q = k - 1 - padding
                    dil = ((xo - 1) * stride + 1, (yo - 1) * stride + 1, (zo - 1) * stride + 1)
                    gp = np.zeros((B, Cout, dil[0] + 2 * q, dil[1] + 2 * q, dil[2] + 2 * q),
                                  dtype=g.dtype)
                    gp[:, :, q:q + dil[0]:stride, q:q + dil[1]:stride, q:q + dil[2]:stride] = g
                    winb = np.lib.stride_tricks.sliding_window_view(gp, (k, k, k), axis=(2, 3, 4))
                    colsb = winb.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(B * X * Y * Z, Cout * k**3)
                    wf = w.data[:, :, ::-1, ::-1, ::-1].transpose(0, 2, 3, 4, 1).reshape(Cout * k**3, Cin)
                    gx = (colsb @ wf).reshape(B, X, Y, Z, Cin).transpose(0, 4, 1, 2, 3)
                    _accum(x, np.ascontiguousarray(gx), owned=True)
                else:
                    gcols = (gflat @ wmat.T).reshape(B, xo, yo, zo, Cin, k, k, k)
                    gx = np.zeros((B, Cin, X + 2 * padding, Y + 2 * padding, Z + 2 * padding), dtype=g.dtype)
                    for dx in range(k):
                        for dy in range(k):
                            for dz in range(k):
                                gx[:, :,
                                   dx:dx + xo * stride:stride,
                                   dy:dy + yo * stride:stride,
                                   dz:dz + zo * stride:stride] += gcols[:, :, :, :, :, dx, dy, dz].transpose(0, 4, 1, 2, 3)
                    if padding:
                        gx = gx[:, :, padding:-padding, padding:-padding, padding:-padding]
                    _accum(x, gx, owned=not padding)

        out._backward = _bw
    return out


def upsample_nearest3d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of the three spatial axes (NCDHW)."""
    if x.ndim != 5:
        raise ShapeError(f"upsample expects 5-D input, got {x.shape}")
    d = x.data.repeat(factor, axis=2).repeat(factor, axis=3).repeat(factor, axis=4)
    out = Tensor(d, requires_grad=_needs_grad(x), dtype=x.data.dtype)
    if out.requires_grad:
        out._prev = (x,)
        B, C, X, Y, Z = x.shape

        def _bw():
            g = out.grad.reshape(B, C, X, factor, Y, factor, Z, factor)
            _accum(x, g.sum(axis=(3, 5, 7)), owned=True)

        out._backward = _bw
    return out


# -- gradient checking -------------------------------------------------------


def grad_check(f, params: dict[str, Tensor], n_samples: int = 16, h: float = 1e-4,
               seed: int = 0) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` maps the param dict to a scalar Tensor. Evaluation runs in
    float64 so the comparison probes the gradient formulas rather than
    f32 rounding. Returns max over sampled coordinates of
    |analytic - numeric| / (|numeric| + 1e-8).
    """
    rng = np.random.default_rng(seed)
    p64 = {k: Tensor(v.data.astype(np.float64), requires_grad=True, dtype=np.float64)
           for k, v in params.items()}
    loss = f(p64)
    loss.backward()
    worst = 0.0
    for name, t in p64.items():
        if t.grad is None:
            continue
        size = t.data.size
        n_here = min(n_samples, size)
        coords = rng.choice(size, size=n_here, replace=False)
        flat = t.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            lp = f(p64).item()
            flat[c] = orig - h
            lm = f(p64).item()
            flat[c] = orig
            numeric = (lp - lm) / (2 * h)
            analytic = t.grad.reshape(-1)[c]
            err = abs(analytic - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, err)
    return worst
