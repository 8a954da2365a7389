"""Dense float64 tensors with a record/replay gradient tape.

Everything is numpy under the hood and everything is double precision.
Only the primitives the model zoo and the MI estimator need are provided:
affine, ReLU, 2-D convolution, 2-D max pooling and softmax cross-entropy.
Each forward op records a backward closure on an explicit tape; replaying
the tape in reverse accumulates gradients into every tensor that took part.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "affine",
    "relu",
    "conv2d",
    "maxpool2d",
    "softmax_xent",
    "log_softmax",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes do not fit the op. Message names both shapes."""


class NonFiniteError(FloatingPointError):
    """A value that must be finite is not."""


class Tensor:
    """A float64 array plus an accumulated gradient of the same shape."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"grad shape {g.shape} vs tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape})"


class Tape:
    """Ordered record of primitive ops for one forward pass.

    backward() may run once per tape: replaying twice would double-count
    accumulated gradients, so a second call raises.
    """

    def __init__(self):
        self._steps = []
        self._replayed = False

    def record(self, backward_fn) -> None:
        self._steps.append(backward_fn)

    def __len__(self) -> int:
        return len(self._steps)

    def backward(self, seeds) -> None:
        """Seed output gradients and replay the tape in reverse.

        seeds: iterable of (Tensor, ndarray) pairs. Multiple seeds are
        allowed, which is how objectives with several output heads (the MI
        estimator's joint/marginal split) start their backward pass.
        """
        if self._replayed:
            raise RuntimeError("tape already replayed; build a fresh tape per forward pass")
        self._replayed = True
        for tensor, g in seeds:
            tensor.accumulate(np.asarray(g, dtype=np.float64))
        for step in reversed(self._steps):
            step()


def affine(tape: Tape, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b for x:[n,din], w:[din,dout], b:[dout]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"affine needs 2-d operands, got x{x.shape} w{w.shape}")
    if x.data.shape[1] != w.data.shape[0] or b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"affine mismatch: x{x.shape} w{w.shape} b{b.shape}")
    out = Tensor(x.data @ w.data + b.data)

    def backward():
        g = out.grad
        if g is None:
            return
        x.accumulate(g @ w.data.T)
        w.accumulate(x.data.T @ g)
        b.accumulate(g.sum(axis=0))

    tape.record(backward)
    return out


def relu(tape: Tape, x: Tensor) -> Tensor:
    """max(x, 0). The subgradient at exactly 0 is 0."""
    mask = x.data > 0.0
    out = Tensor(np.where(mask, x.data, 0.0))

    def backward():
        if out.grad is not None:
            x.accumulate(out.grad * mask)

    tape.record(backward)
    return out


def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(tape: Tape, x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Direct 2-D convolution, x:[n,cin,h,w] * kernels:[cout,cin,kh,kw].

    Output spatial size is floor((h + 2*pad - kh)/stride) + 1. Plain slice
    loops over the kernel window; no im2col / GEMM restructuring.
    """
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d operands, got x{x.shape} k{kernels.shape}")
    n, cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernels.data.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: x{x.shape} k{kernels.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d bad stride/pad: stride={stride} pad={pad}")
    oh = _conv_out_size(h, kh, stride, pad)
    ow = _conv_out_size(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d geometry: input {h}x{w}, kernel {kh}x{kw}, "
                         f"stride {stride}, pad {pad} gives empty output")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.data.shape}, expected ({cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    out_data = np.zeros((n, cout, oh, ow))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride]
            out_data += np.einsum("nchw,oc->nohw", patch, kernels.data[:, :, i, j])
    if bias is not None:
        out_data += bias.data[None, :, None, None]
    out = Tensor(out_data)

    def backward():
        g = out.grad
        if g is None:
            return
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernels.data)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride]
                gk[:, :, i, j] = np.einsum("nohw,nchw->oc", g, patch)
                gxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += \
                    np.einsum("nohw,oc->nchw", g, kernels.data[:, :, i, j])
        kernels.accumulate(gk)
        if bias is not None:
            bias.accumulate(g.sum(axis=(0, 2, 3)))
        x.accumulate(gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp)

    tape.record(backward)
    return out


def maxpool2d(tape: Tape, x: Tensor, size: int, stride: int | None = None) -> Tensor:
    """Max pooling over size x size windows. Ties route to the first window
    position in row-major order, so the backward pass is deterministic."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d needs 4-d input, got {x.shape}")
    if stride is None:
        stride = size
    n, c, h, w = x.data.shape
    oh = _conv_out_size(h, size, stride, 0)
    ow = _conv_out_size(w, size, stride, 0)
    if oh < 1 or ow < 1:
        raise ShapeError(f"maxpool2d geometry: input {h}x{w}, window {size}, stride {stride}")

    windows = np.stack([
        x.data[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride]
        for i in range(size) for j in range(size)
    ])
    winner = windows.argmax(axis=0)
    out = Tensor(np.take_along_axis(windows, winner[None], axis=0)[0])

    def backward():
        g = out.grad
        if g is None:
            return
        gx = np.zeros_like(x.data)
        for flat in range(size * size):
            i, j = divmod(flat, size)
            sel = (winner == flat)
            gx[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += g * sel
        x.accumulate(gx)

    tape.record(backward)
    return out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax of a [n, c] array, max-shifted for stability."""
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_xent(tape: Tape, logits: Tensor, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch with integer labels.

    Returns (loss, dlogits) where dlogits = (softmax - onehot) / n is the
    gradient seed: pass [(logits, dlogits)] to tape.backward().
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_xent needs [n, classes] logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape}, expected ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c}): min={labels.min()} max={labels.max()}")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def grad_check(loss_fn, params, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    loss_fn() -> float must rebuild a fresh tape, run backward, and leave
    .grad set on every tensor in params. Perturbations use the current
    .data in place. Relative error per coordinate is
    |analytic - numeric| / max(|analytic| + |numeric|, 1e-8), so an exactly
    zero gradient checks out at 0.
    """
    for p in params:
        p.zero_grad()
    base = loss_fn()
    if not np.isfinite(base):
        raise NonFiniteError(f"loss not finite at the evaluation point: {base}")
    analytic = []
    for p in params:
        analytic.append(np.zeros_like(p.data) if p.grad is None else p.grad.copy())

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + eps
            up = loss_fn()
            flat[idx] = keep - eps
            down = loss_fn()
            flat[idx] = keep
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError("loss not finite under perturbation")
            numeric = (up - down) / (2.0 * eps)
            err = abs(gflat[idx] - numeric) / max(abs(gflat[idx]) + abs(numeric), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
