"""Dense NCHW tensor operations with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of shape ``(n, c, h, w)``.
Runtime code uses float32; every op is dtype-preserving so the same code
runs in float64 for finite-difference gradient checks.

All convolutions use stride 1. Spatial downsampling is done exclusively by
:func:`avg_pool2`, which commutes with 90 degree rotations on even sizes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PADDING_MODES = ("same_zero", "valid")


def check_tensor(t: np.ndarray, name: str = "tensor") -> None:
    if t.ndim != 4:
        raise ValueError(f"{name} must be 4-D (n, c, h, w), got shape {t.shape}")


@dataclass
class ConvKernel:
    """Convolution weights ``(c_out, c_in, k, k)`` plus a ``c_out`` bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValueError(f"kernel weights must be (c_out, c_in, k, k), got {w.shape}")
        if w.shape[2] % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {w.shape[2]}")
        b = np.asarray(self.bias, dtype=w.dtype)
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias must have shape ({w.shape[0]},), got {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("kernel contains non-finite values")
        self.weights = w
        self.bias = b

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def delta(cls, c_out=1, c_in=1, k=3, dtype=np.float32) -> "ConvKernel":
        w = np.zeros((c_out, c_in, k, k), dtype=dtype)
        for o in range(min(c_out, c_in)):
            w[o, o, k // 2, k // 2] = 1.0
        return cls(w, np.zeros(c_out, dtype=dtype))

    def astype(self, dtype) -> "ConvKernel":
        return ConvKernel(self.weights.astype(dtype), self.bias.astype(dtype))


def _pad_amount(k: int, padding: str) -> int:
    if padding == "same_zero":
        return k // 2
    if padding == "valid":
        return 0
    raise ValueError(f"unknown padding {padding!r}; expected one of {PADDING_MODES}")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """``(n, k*k*c, h'*w')`` columns of an already padded input, tap-major."""
    n, c, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    cols = np.empty((n, k * k, c, ho, wo), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, dy * k + dx] = x[:, :, dy:dy + ho, dx:dx + wo]
    return cols.reshape(n, k * k * c, ho * wo)


def _correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of an already padded input, no bias."""
    k = w.shape[2]
    n, _, h, wd = x.shape
    wmat = w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)  # o, (dy, dx, c)
    out = np.matmul(wmat, _im2col(x, k))
    return out.reshape(n, w.shape[0], h - k + 1, wd - k + 1)


def conv2d(x: np.ndarray, kernel: ConvKernel, padding: str = "same_zero") -> np.ndarray:
    """Stride-1 2-D cross-correlation.

    ``out[n, o, y, x] = bias[o] + sum_{i,dy,dx} in[n, i, y+dy-k//2, x+dx-k//2] * w[o, i, dy, dx]``
    with zeros outside the input for ``same_zero``.
    """
    check_tensor(x, "input")
    k = kernel.k
    if x.shape[1] != kernel.c_in:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {kernel.c_in}")
    p = _pad_amount(k, padding)
    if padding == "valid" and (k > x.shape[2] or k > x.shape[3]):
        raise ValueError(f"valid convolution needs input >= {k}x{k}, got {x.shape[2:]}")
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = _correlate(x, kernel.weights.astype(x.dtype, copy=False))
    out += kernel.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return out


def conv2d_backward(x, kernel: ConvKernel, grad_out, padding: str = "same_zero"):
    """Gradients of :func:`conv2d` w.r.t. input, weights and bias."""
    check_tensor(x, "input")
    k = kernel.k
    p = _pad_amount(k, padding)
    h_out = x.shape[2] + 2 * p - k + 1
    w_out = x.shape[3] + 2 * p - k + 1
    expected = (x.shape[0], kernel.c_out, h_out, w_out)
    if grad_out.shape != expected or x.shape[1] != kernel.c_in:
        raise ValueError(f"grad_out shape {grad_out.shape} inconsistent with forward (expected {expected})")

    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = _im2col(xp, k)  # n, (dy, dx, c), hw
    go = grad_out.reshape(grad_out.shape[0], grad_out.shape[1], -1)
    gw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0)  # o, (dy, dx, c)
    grad_w = gw.reshape(kernel.c_out, k, k, kernel.c_in).transpose(0, 3, 1, 2)
    grad_b = grad_out.sum(axis=(0, 2, 3))

    # full correlation with the flipped, channel-transposed kernel
    w_t = kernel.weights.astype(x.dtype, copy=False)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    gp = np.pad(grad_out, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    grad_xp = _correlate(gp, w_t)
    if p:
        grad_xp = grad_xp[:, :, p:-p, p:-p]
    return np.ascontiguousarray(grad_xp), grad_w.astype(x.dtype, copy=False), grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # numerically stable for both signs
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * y * (1 - y)


def l2_normalize_channels(t: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Divide every channel vector by ``max(||v||, eps)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = np.sqrt(np.sum(t * t, axis=1, keepdims=True))
    return t / np.maximum(norm, eps)


def l2_normalize_channels_backward(t, grad_out, eps: float = 1e-8):
    norm = np.sqrt(np.sum(t * t, axis=1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = t / denom
    proj = np.sum(y * grad_out, axis=1, keepdims=True)
    # below eps the denominator is constant and the map is linear
    return np.where(norm >= eps, (grad_out - y * proj) / denom, grad_out / denom)


def avg_pool2(t: np.ndarray) -> np.ndarray:
    check_tensor(t)
    n, c, h, w = t.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 requires even spatial dims, got {h}x{w}")
    return t.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward(grad_out: np.ndarray) -> np.ndarray:
    g = grad_out * 0.25
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)


def space_to_depth(s: np.ndarray, r: int) -> np.ndarray:
    """Rearrange ``(n, 1, h, w)`` into ``(n, r*r, h/r, w/r)``.

    Channel ``dy*r + dx`` of block ``(Y, X)`` holds ``s[n, 0, Y*r+dy, X*r+dx]``.
    """
    check_tensor(s)
    n, c, h, w = s.shape
    if c != 1:
        raise ValueError(f"space_to_depth expects a single channel, got {c}")
    if r < 1 or h % r or w % r:
        raise ValueError(f"spatial dims {h}x{w} not divisible by r={r}")
    blocks = s.reshape(n, h // r, r, w // r, r).transpose(0, 2, 4, 1, 3)
    return np.ascontiguousarray(blocks.reshape(n, r * r, h // r, w // r))


def depth_to_space(t: np.ndarray, r: int) -> np.ndarray:
    """Inverse of :func:`space_to_depth`."""
    check_tensor(t)
    n, c, hb, wb = t.shape
    if c != r * r:
        raise ValueError(f"expected {r * r} channels, got {c}")
    blocks = t.reshape(n, r, r, hb, wb).transpose(0, 3, 1, 4, 2)
    return np.ascontiguousarray(blocks.reshape(n, 1, hb * r, wb * r))


def _bilinear_weights(points, h, w, tol=1e-6):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    bad = (x < -tol) | (x > w - 1 + tol) | (y < -tol) | (y > h - 1 + tol) | ~np.isfinite(pts).all(axis=1)
    if np.any(bad):
        raise ValueError(f"{int(bad.sum())} sample point(s) outside [0, {w - 1}] x [0, {h - 1}]")
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = x - x0
    ay = y - y0
    idx = (y0, x0, y0, x1, y1, x0, y1, x1)
    wts = ((1 - ay) * (1 - ax), (1 - ay) * ax, ay * (1 - ax), ay * ax)
    return idx, wts


def bilinear_sample(t: np.ndarray, points, batch: int = 0) -> np.ndarray:
    """Sample channel vectors of ``t[batch]`` at real ``(x, y)`` pixel coordinates.

    Returns an array of shape ``(len(points), c)``.
    """
    check_tensor(t)
    img = t[batch]
    _, h, w = img.shape
    (y0, x0, _, x1, y1, _, _, _), (w00, w01, w10, w11) = _bilinear_weights(points, h, w)
    dt = t.dtype
    out = (img[:, y0, x0] * w00.astype(dt) + img[:, y0, x1] * w01.astype(dt)
           + img[:, y1, x0] * w10.astype(dt) + img[:, y1, x1] * w11.astype(dt))
    return np.ascontiguousarray(out.T)


def bilinear_sample_backward(shape, points, grad_samples: np.ndarray, batch: int = 0) -> np.ndarray:
    """Scatter ``(P, c)`` sample gradients back onto a zero tensor of ``shape``."""
    n, c, h, w = shape
    grad = np.zeros(shape, dtype=grad_samples.dtype)
    if len(grad_samples) == 0:
        return grad
    (y0, x0, _, x1, y1, _, _, _), wts = _bilinear_weights(points, h, w)
    plane = grad[batch]
    g = grad_samples.T  # c, P
    for (yy, xx), wt in zip(((y0, x0), (y0, x1), (y1, x0), (y1, x1)), wts):
        flat = yy * w + xx
        for ch in range(c):
            plane[ch].reshape(-1)[:] += np.bincount(flat, weights=g[ch] * wt, minlength=h * w).astype(grad.dtype)
    return grad
