"""Rotated kernel fusion (RKF) convolution and its re-parameterisation.

An RKF layer convolves its input with N rotated copies of one base kernel
and sums the results. Convolution is linear in the kernel, so the N
branches collapse into a single kernel ``sum_n rot(W, theta_n)`` for
inference without changing the output.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import group_angles, rotate_image, rotate_kernel
from .tensor_core import ConvKernel, check_tensor, conv2d, conv2d_backward


def default_interp(n_rotations: int) -> str:
    return "exact90" if n_rotations in (1, 2, 4) else "bilinear"


@dataclass
class RkfLayer:
    base: ConvKernel
    n_rotations: int = 4
    interp: str = field(default="")

    def __post_init__(self):
        if self.n_rotations < 1:
            raise ValueError("n_rotations must be >= 1")
        if not self.interp:
            self.interp = default_interp(self.n_rotations)

    @property
    def angles(self) -> list[float]:
        return group_angles(self.n_rotations)

    def rotated_kernels(self) -> list[ConvKernel]:
        return [rotate_kernel(self.base, th, self.interp) for th in self.angles]


def fuse_weights(weights: np.ndarray, n_rotations: int, interp: str | None = None) -> np.ndarray:
    """``sum_n rot(W, 2*pi*n/N)`` over the trailing k x k axes."""
    interp = interp or default_interp(n_rotations)
    k = ConvKernel(weights, np.zeros(weights.shape[0], dtype=weights.dtype))
    out = np.zeros_like(weights)
    for th in group_angles(n_rotations):
        out += rotate_kernel(k, th, interp).weights
    return out


def unfuse_grad(grad_fused: np.ndarray, n_rotations: int, interp: str | None = None) -> np.ndarray:
    """Adjoint of :func:`fuse_weights`: gradient w.r.t. the base kernel.

    For exact 90 degree rotations this is the sum of inverse-rotated copies.
    Bilinear rotation is a linear map on taps too; its adjoint is applied by
    transposing the per-angle sampling matrix.
    """
    interp = interp or default_interp(n_rotations)
    if interp == "exact90":
        out = np.zeros_like(grad_fused)
        for m in range(n_rotations):
            quarter = (4 // n_rotations) * m
            out += np.rot90(grad_fused, -quarter, axes=(2, 3))
        return out
    k = grad_fused.shape[-1]
    A = _fuse_matrix(k, n_rotations, interp)
    flat = grad_fused.reshape(-1, k * k) @ A
    return flat.reshape(grad_fused.shape).astype(grad_fused.dtype, copy=False)


def _fuse_matrix(k: int, n_rotations: int, interp: str) -> np.ndarray:
    """Matrix ``A`` with ``vec(fused) = A @ vec(base)`` for one k x k slice."""
    eye = np.eye(k * k).reshape(k * k, 1, k, k)
    cols = fuse_weights(eye, n_rotations, interp)  # column j = image of basis tap j
    return cols.reshape(k * k, k * k).T


def rkf_forward(layer: RkfLayer, x: np.ndarray) -> np.ndarray:
    """Multi-branch RKF convolution; the bias is added once."""
    check_tensor(x, "input")
    if x.shape[1] != layer.base.c_in:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, layer expects {layer.base.c_in}")
    out = None
    for rk in layer.rotated_kernels():
        y = conv2d(x, ConvKernel(rk.weights, np.zeros_like(rk.bias)))
        out = y if out is None else out + y
    out += layer.base.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return out


def rkf_backward(layer: RkfLayer, x: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_input, grad_base, grad_bias)`` for :func:`rkf_forward`."""
    grad_x = np.zeros_like(x)
    grad_base = np.zeros_like(layer.base.weights, dtype=x.dtype)
    grad_bias = None
    for th, rk in zip(layer.angles, layer.rotated_kernels()):
        gx, gw, gb = conv2d_backward(x, rk, grad_out)
        grad_x += gx
        # each branch kernel is a linear resampling of the base taps
        grad_base += _branch_adjoint(gw, th, layer.interp)
        grad_bias = gb
    return grad_x, grad_base, grad_bias


def _branch_adjoint(grad_branch: np.ndarray, theta: float, interp: str) -> np.ndarray:
    k = grad_branch.shape[-1]
    if interp == "exact90":
        zero = np.zeros(grad_branch.shape[0], dtype=grad_branch.dtype)
        return rotate_kernel(ConvKernel(grad_branch, zero), -theta, "exact90").weights
    eye = ConvKernel(np.eye(k * k).reshape(k * k, 1, k, k), np.zeros(k * k))
    A = rotate_kernel(eye, theta, interp).weights.reshape(k * k, k * k).T
    return (grad_branch.reshape(-1, k * k) @ A).reshape(grad_branch.shape).astype(grad_branch.dtype)


def reparameterize(layer: RkfLayer) -> ConvKernel:
    """Collapse the N branches into one plain :class:`ConvKernel`."""
    w = fuse_weights(layer.base.weights, layer.n_rotations, layer.interp)
    return ConvKernel(w, layer.base.bias.copy())


def check_equivariance(forward_fn, x: np.ndarray, n_index: int, crop_margin: int, n_rotations: int = 4) -> float:
    """Max interior deviation between ``f(rot x)`` and ``rot f(x)``.

    ``forward_fn`` maps an NCHW tensor to an NCHW tensor whose spatial size
    may differ from the input by a power-of-two factor; the crop margin is
    given in input pixels and scaled accordingly.
    """
    check_tensor(x, "input")
    h, w = x.shape[2:]
    if h != w:
        raise ValueError("equivariance checks need square inputs")
    if 2 * crop_margin >= h:
        raise ValueError(f"crop margin {crop_margin} too large for {h}x{w} input")
    theta = group_angles(n_rotations)[n_index % n_rotations]
    lhs = forward_fn(rotate_image(x, theta)[0])
    rhs = rotate_image(forward_fn(x), theta)[0]
    m = int(np.ceil(crop_margin * lhs.shape[2] / h))
    if m:
        lhs = lhs[:, :, m:-m, m:-m]
        rhs = rhs[:, :, m:-m, m:-m]
    return float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0
