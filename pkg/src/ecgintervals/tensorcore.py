"""Dense tensors and reverse-mode differentiation for 1-d convolutional nets.

Implements exactly the primitive set the interval-estimation models need:
conv1d, batchnorm1d, relu, maxpool1d, global average pooling, dense,
sigmoid, and elementwise add for skip connections. Gradients are recorded
on an explicit tape and replayed in reverse; every primitive is checked
against central finite differences in the test suite.

Convolutions use cross-correlation semantics (deep-learning convention)
and are lowered to a single matrix product per layer via an im2col view,
so the heavy lifting happens inside BLAS. Backward passes recompute the
im2col view from the saved input instead of keeping the unfolded matrix
alive, trading a little compute for a much smaller tape.

Float32 is the working precision; building tensors from float64 arrays
keeps them in float64, which is what the gradient-checking tests use.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

Padding = Union[int, str]


class TensorCoreError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(TensorCoreError):
    """Operand shapes are incompatible with the requested primitive."""


class TapeError(TensorCoreError):
    """Tape misuse: backward on a spent tape or on a non-scalar loss."""


class Tensor:
    """A dense n-d array that can participate in reverse-mode differentiation.

    ``grad`` is lazily allocated the first time a backward pass deposits a
    contribution; repeated contributions accumulate additively.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager; primitives executed inside record a backward
    closure when any input requires a gradient. ``backward`` replays the
    closures in exact reverse order, accumulating into ``Tensor.grad``.
    A tape can be consumed once; a second backward raises ``TapeError``.
    """

    def __init__(self):
        self._nodes: list[Callable[[], None]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def record(self, node: Callable[[], None]) -> None:
        self._nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if self._spent:
            raise TapeError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        if not self._nodes:
            raise TapeError("tape is empty; nothing was recorded")
        self._spent = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            node()


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(tape: Tape, loss: Tensor) -> None:
    """Run reverse-mode differentiation for everything recorded on ``tape``."""
    tape.backward(loss)


def _maybe_record(out: Tensor, inputs: Sequence[Tensor], node: Callable[[], None]) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(node)
    return out


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------

def _resolve_padding(length: int, k: int, stride: int, padding: Padding) -> tuple[int, int]:
    if isinstance(padding, str):
        if padding != "same":
            raise ShapeError(f"unknown padding mode {padding!r}")
        out_len = -(-length // stride)  # ceil
        total = max(0, (out_len - 1) * stride + k - length)
        return total // 2, total - total // 2
    if padding < 0:
        raise ShapeError("padding must be non-negative")
    return int(padding), int(padding)


def _window_view(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Overlapping windows [B, C, out_len, k] over the last axis, no copy."""
    b, c, lp = x.shape
    out_len = (lp - k) // stride + 1
    sb, sc, sl = x.strides
    return np.lib.stride_tricks.as_strided(
        x, shape=(b, c, out_len, k), strides=(sb, sc, sl * stride, sl), writeable=False
    )


# Forward unfolds smaller than this are kept alive for the weight-gradient
# GEMM; larger ones are recomputed in backward to bound tape memory.
_COLS_CACHE_BYTES = 160 * 1024 * 1024


def _unfold(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """im2col matrix [B*out_len, C*k] for a padded input [B, C, Lp].

    Row-major over (batch, position) with each window's k samples
    contiguous, so the gather copy streams well.
    """
    view = _window_view(xp, k, stride)  # [B, C, O, k]
    b, c, o, _ = view.shape
    return view.transpose(0, 2, 1, 3).reshape(b * o, c * k)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: Padding = 0) -> Tensor:
    """Batched 1-d cross-correlation.

    x: [batch, in_ch, len], w: [out_ch, in_ch, k], b: [out_ch].
    ``padding`` is a symmetric sample count or "same" (asymmetric when the
    arithmetic demands it; the extra sample goes on the right).
    """
    if x.data.ndim != 3 or w.data.ndim != 3 or b.data.ndim != 1:
        raise ShapeError("conv1d expects x:[B,C,L], w:[O,C,k], b:[O]")
    bs, in_ch, length = x.data.shape
    out_ch, w_in, k = w.data.shape
    if w_in != in_ch:
        raise ShapeError(f"conv1d channel mismatch: input has {in_ch}, kernel expects {w_in}")
    if b.data.shape[0] != out_ch:
        raise ShapeError("conv1d bias length must equal out_ch")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    pl, pr = _resolve_padding(length, k, stride, padding)
    if k > length + pl + pr:
        raise ShapeError(f"kernel {k} longer than padded input {length + pl + pr}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr)))
    cols = _unfold(xp, k, stride)  # [B*O, C*k]
    out_len = (length + pl + pr - k) // stride + 1
    w2 = w.data.reshape(out_ch, in_ch * k)
    y = (cols @ w2.T).reshape(bs, out_len, out_ch).transpose(0, 2, 1)
    y = y + b.data[None, :, None]
    out = Tensor(y, dtype=x.data.dtype)

    keep_cols = cols if cols.nbytes <= _COLS_CACHE_BYTES else None

    def node():
        if out.grad is None:
            return
        g = out.grad  # [B, O, out_len]
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2)))
        if w.requires_grad:
            g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(bs * out_len, out_ch)
            cols_w = keep_cols
            if cols_w is None:
                cols_w = _unfold(np.pad(x.data, ((0, 0), (0, 0), (pl, pr))), k, stride)
            _accumulate(w, (g2.T @ cols_w).reshape(w.data.shape))
        if x.requires_grad:
            # Transposed convolution: dilate the output grad by the stride,
            # pad by k-1, correlate with the channel-transposed flipped kernel.
            lp = length + pl + pr
            ld = (out_len - 1) * stride + 1
            gd = np.zeros((bs, out_ch, ld), dtype=g.dtype)
            gd[:, :, ::stride] = g
            gp = np.pad(gd, ((0, 0), (0, 0), (k - 1, k - 1)))
            wt = w.data[:, :, ::-1].transpose(1, 0, 2).reshape(in_ch, out_ch * k)
            cols_g = _unfold(gp, k, 1)  # [B*(ld+k-1), O*k]
            gx_full = (cols_g @ wt.T).reshape(bs, ld + k - 1, in_ch).transpose(0, 2, 1)
            gxp = np.zeros((bs, in_ch, lp), dtype=g.dtype)
            gxp[:, :, : gx_full.shape[2]] = gx_full[:, :, :lp]
            _accumulate(x, gxp[:, :, pl : pl + length])

    return _maybe_record(out, (x, w, b), node)


# ---------------------------------------------------------------------------
# batchnorm1d
# ---------------------------------------------------------------------------

def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of [batch, ch, len] activations.

    Training mode normalizes by batch statistics (biased variance) and
    updates the running buffers in place with ``momentum``; eval mode uses
    the running buffers. Running buffers never receive gradients.
    """
    if x.data.ndim != 3:
        raise ShapeError("batchnorm1d expects x:[B,C,L]")
    bs, ch, length = x.data.shape
    if gamma.data.shape != (ch,) or beta.data.shape != (ch,):
        raise ShapeError("gamma/beta length must equal channel count")
    if training and bs * length == 0:
        raise ShapeError("batchnorm1d cannot compute batch statistics on an empty batch")

    if training:
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        running_mean.data[:] = (1.0 - momentum) * running_mean.data + momentum * mean
        running_var.data[:] = (1.0 - momentum) * running_var.data + momentum * var
    else:
        mean = running_mean.data
        var = running_var.data

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
    y = gamma.data[None, :, None] * xhat + beta.data[None, :, None]
    out = Tensor(y, dtype=x.data.dtype)

    def node():
        if out.grad is None:
            return
        g = out.grad
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2)))
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None]
            if training:
                n = bs * length
                s1 = gxhat.sum(axis=(0, 2))
                s2 = (gxhat * xhat).sum(axis=(0, 2))
                gx = (inv_std[None, :, None] / n) * (
                    n * gxhat - s1[None, :, None] - xhat * s2[None, :, None]
                )
            else:
                gx = gxhat * inv_std[None, :, None]
            _accumulate(x, gx)

    return _maybe_record(out, (x, gamma, beta), node)


# ---------------------------------------------------------------------------
# elementwise / pooling / dense
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is taken as 0."""
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0), dtype=x.data.dtype)

    def node():
        if out.grad is None or not x.requires_grad:
            return
        _accumulate(x, out.grad * mask)

    return _maybe_record(out, (x,), node)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (skip connections)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data, dtype=a.data.dtype)

    def node():
        if out.grad is None:
            return
        if a.requires_grad:
            _accumulate(a, out.grad)
        if b.requires_grad:
            _accumulate(b, out.grad)

    return _maybe_record(out, (a, b), node)


def maxpool1d(x: Tensor, k: int, stride: int, ceil_mode: bool = False) -> Tensor:
    """Max pooling over the last axis; ties resolve to the first index.

    ``ceil_mode`` admits a trailing partial window, which keeps pooled skip
    paths aligned with "same"-padded strided convolutions on odd lengths.
    """
    if x.data.ndim != 3:
        raise ShapeError("maxpool1d expects x:[B,C,L]")
    if k < 1 or stride < 1:
        raise ShapeError("kernel and stride must be >= 1")
    bs, ch, length = x.data.shape
    if length < 1 or (not ceil_mode and length < k):
        raise ShapeError(f"maxpool1d window {k} exceeds input length {length}")
    if ceil_mode:
        out_len = -(-max(length - k, 0) // stride) + 1
    else:
        out_len = (length - k) // stride + 1
    pad_to = (out_len - 1) * stride + k
    if pad_to > length:
        fill = np.finfo(x.data.dtype).min
        xp = np.pad(x.data, ((0, 0), (0, 0), (0, pad_to - length)), constant_values=fill)
    else:
        xp = x.data
    windows = _window_view(xp, k, stride)  # [B, C, O, k]
    arg = windows.argmax(axis=3)
    y = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]
    out = Tensor(y, dtype=x.data.dtype)

    def node():
        if out.grad is None or not x.requires_grad:
            return
        g = out.grad
        span = max(pad_to, length, out_len * stride)
        gx = np.zeros((bs, ch, span), dtype=g.dtype)
        if stride >= k:
            # Non-overlapping windows tile the padded axis; scatter in bulk.
            buf = np.zeros((bs, ch, out_len, stride), dtype=g.dtype)
            np.put_along_axis(buf, arg[..., None], g[..., None], axis=3)
            gx[:, :, : out_len * stride] = buf.reshape(bs, ch, out_len * stride)
        else:
            flat = (np.arange(out_len) * stride)[None, None, :] + arg
            np.add.at(
                gx.reshape(bs * ch, span),
                (np.repeat(np.arange(bs * ch), out_len), flat.reshape(bs * ch, out_len).ravel()),
                g.reshape(bs * ch * out_len),
            )
        _accumulate(x, gx[:, :, :length])

    return _maybe_record(out, (x,), node)


def avgpool_global(x: Tensor) -> Tensor:
    """Mean over the temporal axis: [batch, ch, len] -> [batch, ch]."""
    if x.data.ndim != 3:
        raise ShapeError("avgpool_global expects x:[B,C,L]")
    length = x.data.shape[2]
    out = Tensor(x.data.mean(axis=2), dtype=x.data.dtype)

    def node():
        if out.grad is None or not x.requires_grad:
            return
        _accumulate(x, np.repeat(out.grad[:, :, None], length, axis=2) / length)

    return _maybe_record(out, (x,), node)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine layer: [batch, d] @ [d, o] + [o]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError("dense expects x:[B,D], w:[D,O], b:[O]")
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"dense shape mismatch: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}"
        )
    out = Tensor(x.data @ w.data + b.data, dtype=x.data.dtype)

    def node():
        if out.grad is None:
            return
        g = out.grad
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))
        if w.requires_grad:
            _accumulate(w, x.data.T @ g)
        if x.requires_grad:
            _accumulate(x, g @ w.data.T)

    return _maybe_record(out, (x, w, b), node)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function."""
    z = x.data
    y = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    y = y.astype(x.data.dtype)
    out = Tensor(y, dtype=x.data.dtype)

    def node():
        if out.grad is None or not x.requires_grad:
            return
        _accumulate(x, out.grad * y * (1.0 - y))

    return _maybe_record(out, (x,), node)
