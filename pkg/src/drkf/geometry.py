"""Kernel and image rotations, homographies and ground-truth correspondences.

Rotation convention (used everywhere, kernels and images alike): with
centred ``(row, col)`` coordinates, a rotation by ``theta`` samples
``out(p) = in(R(-theta) p)``. For ``theta = pi/2`` on a k x k grid this is
``out[i][j] = in[j][k-1-i]``, i.e. ``numpy.rot90`` with ``k=1``.

In ``(x, y)`` pixel coordinates the same rotation moves content at source
point ``q`` to ``c + R(-theta)(q - c)``; :func:`rotation_homography` builds
that point map so that ``warp_image(t, rotation_homography(theta, ...))``
agrees with ``rotate_image(t, theta)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import ConvKernel, check_tensor

HALF_PI = math.pi / 2


def rotation_index(theta: float, tol: float = 1e-9):
    """Return ``m`` in 0..3 if ``theta`` is a multiple of pi/2, else None."""
    q = theta / HALF_PI
    m = round(q)
    if abs(q - m) > tol:
        return None
    return m % 4


def group_angles(n: int) -> list[float]:
    """The N equally spaced angles ``2*pi*i/N``."""
    if n < 1:
        raise ValueError("number of rotations must be >= 1")
    return [2 * math.pi * i / n for i in range(n)]


def _rotate_planes_bilinear(planes: np.ndarray, theta: float):
    """Rotate the trailing two axes about their centre; returns (out, mask)."""
    h, w = planes.shape[-2:]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64) - cy,
                         np.arange(w, dtype=np.float64) - cx, indexing="ij")
    c, s = math.cos(theta), math.sin(theta)
    src_r = c * rr + s * cc + cy
    src_c = -s * rr + c * cc + cx
    return _sample_grid(planes, src_c, src_r)


def _sample_grid(planes: np.ndarray, src_x: np.ndarray, src_y: np.ndarray, tol: float = 1e-6):
    """Bilinear inverse-map resampling with zero fill outside the source."""
    h, w = planes.shape[-2:]
    valid = (src_x >= -tol) & (src_x <= w - 1 + tol) & (src_y >= -tol) & (src_y <= h - 1 + tol)
    valid &= np.isfinite(src_x) & np.isfinite(src_y)
    x = np.clip(np.where(valid, src_x, 0.0), 0, w - 1)
    y = np.clip(np.where(valid, src_y, 0.0), 0, h - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (x - x0).astype(planes.dtype)
    ay = (y - y0).astype(planes.dtype)
    out = (planes[..., y0, x0] * (1 - ay) * (1 - ax) + planes[..., y0, x1] * (1 - ay) * ax
           + planes[..., y1, x0] * ay * (1 - ax) + planes[..., y1, x1] * ay * ax)
    out = np.where(valid, out, 0).astype(planes.dtype, copy=False)
    return out, valid


def rotate_kernel(kernel: ConvKernel, theta: float, interp: str = "exact90") -> ConvKernel:
    """Rotate every k x k slice of a kernel about its centre tap. Bias is kept."""
    m = rotation_index(theta)
    if interp == "exact90":
        if m is None:
            raise ValueError(f"exact90 rotation needs a multiple of pi/2, got {theta}")
        w = np.rot90(kernel.weights, m, axes=(2, 3))
    elif interp == "bilinear":
        if m is not None:
            w = np.rot90(kernel.weights, m, axes=(2, 3))
        else:
            w, _ = _rotate_planes_bilinear(kernel.weights, theta)
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    return ConvKernel(np.ascontiguousarray(w), kernel.bias.copy())


def rotate_image(t: np.ndarray, theta: float, policy: str = "same_canvas_zero_fill"):
    """Rotate an NCHW tensor about the image centre on the same canvas.

    Returns ``(rotated, mask)`` where ``mask`` is an ``(h, w)`` boolean map of
    pixels whose pre-image lies inside the source.
    """
    if policy != "same_canvas_zero_fill":
        raise ValueError(f"unsupported rotation policy {policy!r}")
    check_tensor(t)
    h, w = t.shape[2:]
    m = rotation_index(theta)
    if m is not None and (h == w or m % 2 == 0):
        return np.ascontiguousarray(np.rot90(t, m, axes=(2, 3))), np.ones((h, w), dtype=bool)
    return _rotate_planes_bilinear(t, theta)


@dataclass
class AugmentConfig:
    """Ranges for random homographies. Defaults are the training distribution."""

    rotation: tuple[float, float] = (0.0, 2 * math.pi)
    scale: tuple[float, float] = (0.8, 1.25)  # log-uniform
    shear: float = 0.2
    perspective: float = 1e-4
    translation: float = 0.05  # fraction of image size

    def validate(self):
        lo, hi = self.rotation
        if hi < lo:
            raise ValueError("rotation range is reversed")
        if not (0 < self.scale[0] <= self.scale[1]):
            raise ValueError("scale range must be positive and ordered")
        if self.shear < 0 or self.perspective < 0 or self.translation < 0:
            raise ValueError("augmentation magnitudes must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(rotation=(0.0, 0.0), scale=(1.0, 1.0), shear=0.0, perspective=0.0, translation=0.0)

    @classmethod
    def upright(cls) -> "AugmentConfig":
        """Training ranges without the in-plane rotation."""
        return cls(rotation=(0.0, 0.0))

    @classmethod
    def rotation_only(cls, theta: float) -> "AugmentConfig":
        return cls(rotation=(theta, theta), scale=(1.0, 1.0), shear=0.0, perspective=0.0, translation=0.0)


def _translate(tx, ty):
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def rotation_homography(theta: float, h: int, w: int) -> np.ndarray:
    """Point map of ``rotate_image(., theta)`` on an h x w canvas."""
    cx, cy = (w - 1) / 2, (h - 1) / 2
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    return _translate(cx, cy) @ rot @ _translate(-cx, -cy)


def normalize_homography(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {H.shape}")
    if abs(H[2, 2]) < 1e-12:
        raise ValueError("homography has h22 == 0 and cannot be normalised")
    H = H / H[2, 2]
    if abs(np.linalg.det(H)) <= 1e-9:
        raise ValueError("homography is singular")
    return H


def sample_homography(cfg: AugmentConfig, seed, h: int = 64, w: int = 64, max_tries: int = 100) -> np.ndarray:
    """Draw ``T(c + t) . P . Sh . S . R . T(-c)``, deterministic given ``seed``."""
    cfg.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cx, cy = (w - 1) / 2, (h - 1) / 2
    for _ in range(max_tries):
        theta = rng.uniform(*cfg.rotation) if cfg.rotation[1] > cfg.rotation[0] else cfg.rotation[0]
        lo, hi = np.log(cfg.scale[0]), np.log(cfg.scale[1])
        scale = float(np.exp(rng.uniform(lo, hi))) if hi > lo else cfg.scale[0]
        shx, shy = rng.uniform(-cfg.shear, cfg.shear, size=2) if cfg.shear > 0 else (0.0, 0.0)
        px, py = rng.uniform(-cfg.perspective, cfg.perspective, size=2) if cfg.perspective > 0 else (0.0, 0.0)
        if cfg.translation > 0:
            tx = rng.uniform(-cfg.translation, cfg.translation) * w
            ty = rng.uniform(-cfg.translation, cfg.translation) * h
        else:
            tx = ty = 0.0

        c, s = math.cos(theta), math.sin(theta)
        rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        sc = np.diag([scale, scale, 1.0])
        sh = np.array([[1.0, shx, 0.0], [shy, 1.0, 0.0], [0.0, 0.0, 1.0]])
        persp = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]])
        H = _translate(cx + tx, cy + ty) @ persp @ sh @ sc @ rot @ _translate(-cx, -cy)
        H = H / H[2, 2]
        if abs(np.linalg.det(H)) > 1e-9:
            return H
    raise RuntimeError("could not draw a non-degenerate homography")


def warp_points(H: np.ndarray, pts):
    """Apply ``H`` to ``(P, 2)`` xy points; returns ``(warped, valid)``.

    Points mapped to the plane at infinity are flagged invalid (and set to NaN).
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    homog = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ np.asarray(H, dtype=np.float64).T
    z = homog[:, 2]
    valid = np.abs(z) >= 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        out = homog[:, :2] / np.where(valid, z, np.nan)[:, None]
    return out, valid


def warp_image(t: np.ndarray, H: np.ndarray):
    """Inverse-map ``t`` through ``H`` (source -> destination point map).

    Returns ``(warped, mask)`` with bilinear interpolation and zero fill.
    """
    check_tensor(t)
    h, w = t.shape[2:]
    Hinv = np.linalg.inv(np.asarray(H, dtype=np.float64))
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    src, ok = warp_points(Hinv, np.stack([xs.ravel(), ys.ravel()], axis=1))
    src_x = np.where(ok, src[:, 0], np.inf).reshape(h, w)
    src_y = np.where(ok, src[:, 1], np.inf).reshape(h, w)
    return _sample_grid(t, src_x, src_y)


def valid_mask(H: np.ndarray, h: int, w: int) -> np.ndarray:
    """Mask of destination pixels whose pre-image under ``H`` lies in an h x w source."""
    _, mask = warp_image(np.zeros((1, 1, h, w), dtype=np.float32), H)
    return mask


def _mask_ok(mask: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Points in bounds whose four bilinear neighbours are all valid."""
    h, w = mask.shape
    x, y = pts[:, 0], pts[:, 1]
    inb = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    ok = np.zeros(len(pts), dtype=bool)
    if not inb.any():
        return ok
    xi, yi = x[inb], y[inb]
    x0 = np.floor(xi).astype(np.intp)
    y0 = np.floor(yi).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ok[inb] = mask[y0, x0] & mask[y0, x1] & mask[y1, x0] & mask[y1, x1]
    return ok


def grid_points(h: int, w: int, stride: int) -> np.ndarray:
    """Regular grid of xy points starting at ``stride // 2``."""
    if stride < 1:
        raise ValueError("grid_stride must be >= 1")
    ys, xs = np.meshgrid(np.arange(stride // 2, h, stride), np.arange(stride // 2, w, stride), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def generate_correspondences(H, grid_stride: int, mask_a: np.ndarray, mask_b: np.ndarray):
    """Grid points of image A and their images under ``H`` in B.

    Returns ``(pts_a, pts_b)`` as ``(P, 2)`` float arrays; may be empty.
    """
    pa = grid_points(*mask_a.shape, grid_stride)
    pb, ok = warp_points(H, pa)
    keep = ok & _mask_ok(mask_a, pa)
    keep[keep] = _mask_ok(mask_b, pb[keep])
    return pa[keep], pb[keep]
