"""Differentiable operations used by the U-Net and the losses.

All image tensors are NCHW. Convolution kernels run either on the in-house
numpy im2col path or, when torch is importable, on torch's CPU convolution
primitives. The backend only computes raw arrays; gradient bookkeeping stays
on the tape in :mod:`lesionseg.numerics.tensor` either way.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor

# ---------------------------------------------------------------------------
# convolution kernels
# ---------------------------------------------------------------------------


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    xt = x.transpose(1, 0, 2, 3)
    if padding:
        xp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = xt
    else:
        xp = xt
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols, ho, wo


def _numpy_conv_forward(x, k, stride, padding):
    n = x.shape[0]
    kn, c, kh, kw = k.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    out = k.reshape(kn, -1) @ cols.reshape(c * kh * kw, -1)
    return np.ascontiguousarray(out.reshape(kn, n, ho, wo).transpose(1, 0, 2, 3))


def _numpy_conv_backward(x, k, g, stride, padding, need_input=True):
    n, c, h, w = x.shape
    kn, _, kh, kw = k.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    gt = g.transpose(1, 0, 2, 3).reshape(kn, -1)
    gk = (gt @ cols.reshape(c * kh * kw, -1).T).reshape(k.shape)
    if not need_input:
        return None, gk
    dcols = (k.reshape(kn, -1).T @ gt).reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
    dx = dxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dx), gk


def _torch_conv_forward(x, k, stride, padding):
    import torch

    out = torch.nn.functional.conv2d(torch.from_numpy(x), torch.from_numpy(k), stride=stride, padding=padding)
    return out.numpy()


def _torch_conv_backward(x, k, g, stride, padding, need_input=True):
    import torch

    tx, tk, tg = torch.from_numpy(x), torch.from_numpy(k), torch.from_numpy(np.ascontiguousarray(g))
    kh = k.shape[2]
    if need_input and stride == 1 and k.shape[3] == kh and kh - 1 - padding >= 0:
        # stride-1 input gradient is a forward conv with the flipped, transposed kernel
        flipped = torch.from_numpy(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).copy())
        dx = torch.nn.functional.conv2d(tg, flipped, padding=kh - 1 - padding).numpy()
        need_input = False
    else:
        dx = None
    dxt, dk, _ = torch.ops.aten.convolution_backward(
        tg, tx, tk, None, [stride, stride], [padding, padding], [1, 1], False, [0, 0], 1, [need_input, True, False]
    )
    if need_input:
        dx = dxt.numpy()
    return dx, dk.numpy()


_BACKENDS = {
    "numpy": (_numpy_conv_forward, _numpy_conv_backward),
    "torch": (_torch_conv_forward, _torch_conv_backward),
}


def _default_backend() -> str:
    requested = os.environ.get("LESIONSEG_CONV_BACKEND")
    if requested:
        return requested
    try:
        import torch

        torch.set_num_threads(1)
        return "torch"
    except ImportError:
        return "numpy"


_conv_backend = _default_backend()


def conv_backend() -> str:
    return _conv_backend


def set_conv_backend(name: str) -> str:
    """Select the convolution kernel backend; returns the previous one."""
    global _conv_backend
    if name not in _BACKENDS:
        raise ValueError(f"unknown conv backend {name!r}; choose from {sorted(_BACKENDS)}")
    prev, _conv_backend = _conv_backend, name
    return prev


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    kn, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} has {c} channels, kernel {kernel.shape} expects {kc}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    fwd, bwd = _BACKENDS[_conv_backend]
    xd, kd = x.data, kernel.data.astype(x.dtype, copy=False)
    out = fwd(xd, kd, stride, padding)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1).astype(out.dtype, copy=False)

    def backward(g):
        dx, dk = bwd(xd, kd, g, stride, padding, x.requires_grad)
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return dx, dk.astype(kernel.dtype, copy=False), db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor.from_op(out, parents, backward)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    estimates are updated in place (unbiased variance, as is conventional).
    In eval mode the running estimates are used and the op is affine.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batchnorm2d parameters must have length {c}")
    xd = x.data
    shape = (1, c, 1, 1)
    g_, b_ = gamma.data.reshape(shape), beta.data.reshape(shape)

    if not training:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype).reshape(shape)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(shape)) * inv_std
        out = g_ * xhat + b_

        def backward_eval(g):
            return g * g_ * inv_std, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return Tensor.from_op(out, (x, gamma, beta), backward_eval)

    n, _, h, w = xd.shape
    m = n * h * w
    xr = xd.reshape(n, c, h * w)
    mean = np.einsum("ncp->c", xr, dtype=np.float64) / m
    centered = xd - mean.astype(xd.dtype).reshape(shape)
    cr = centered.reshape(n, c, h * w)
    var = np.einsum("ncp,ncp->c", cr, cr, dtype=np.float64) / m
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = centered
    xhat *= inv_std.reshape(shape)
    out = g_ * xhat + b_

    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    unbiased = var * m / max(m - 1, 1)
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    def backward(g):
        gr = g.reshape(n, c, h * w)
        dbeta = np.einsum("ncp->c", gr)
        dgamma = np.einsum("ncp,ncp->c", gr, xhat.reshape(n, c, h * w))
        scale = (gamma.data * inv_std).reshape(shape)
        dx = g - (dbeta / m).reshape(shape)
        dx -= xhat * (dgamma / m).reshape(shape)
        dx *= scale
        return dx, dgamma, dbeta

    return Tensor.from_op(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# resampling and structural ops
# ---------------------------------------------------------------------------


def maxpool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    xd = x.data
    corners = [xd[:, :, i::2, j::2] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    if _pattern_log is not None:
        _pattern_log.append(np.argmax(np.stack(corners), axis=0).astype(np.int8).tobytes())

    def backward(g):
        # gradient goes to the first maximal corner only
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), corner in zip(((0, 0), (0, 1), (1, 0), (1, 1)), corners):
            hit = corner == out
            hit &= ~taken
            taken |= hit
            dx[:, :, i::2, j::2] = g * hit
        return (dx,)

    return Tensor.from_op(out, (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by a factor of two."""
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def backward(g):
        # strided adds beat a generic reduction over the two short axes
        g6 = g.reshape(n, c, h, 2, w, 2)
        dx = g6[:, :, :, 0, :, 0] + g6[:, :, :, 0, :, 1]
        dx += g6[:, :, :, 1, :, 0]
        dx += g6[:, :, :, 1, :, 1]
        return (dx,)

    return Tensor.from_op(out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels needs matching N,H,W; got {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1)
    return Tensor.from_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        dx = np.zeros(shape, dtype=g.dtype)
        dx[:, start:stop] = g
        return (dx,)

    return Tensor.from_op(np.ascontiguousarray(x.data[:, start:stop]), (x,), backward)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


# ---------------------------------------------------------------------------
# activation patterns
# ---------------------------------------------------------------------------

_pattern_log: list | None = None


@contextlib.contextmanager
def record_patterns():
    """Collect the ReLU on/off sets and max-pool winners of every forward call.

    Two forwards with equal logs lie in the same piecewise-smooth region, so a
    finite difference between them has no kink inside.
    """
    global _pattern_log
    prev, _pattern_log = _pattern_log, []
    try:
        yield _pattern_log
    finally:
        _pattern_log = prev


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    if _pattern_log is not None:
        _pattern_log.append(np.packbits(x.data > 0).tobytes())
    return Tensor.from_op(out, (x,), lambda g: (g * (out > 0),))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |z|
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for any finite x."""
    z = x.data
    out = (np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))).astype(z.dtype, copy=False)
    return Tensor.from_op(out, (x,), lambda g: (g * _sigmoid(z),))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor.from_op(np.log(xd), (x,), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,))


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,))


def check_finite(x: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"non-finite values produced at {where}")
    return x
