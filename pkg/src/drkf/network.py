"""Toy detect-and-describe network, keypoint extraction and the joint loss.

Architecture (all convs 3x3, stride 1, zero "same" padding)::

    trunk:  conv(1->16) relu conv(16->16) relu
    desc:   [avg_pool2 conv(->head) relu] x log2(r)  conv(head->C)  l2-normalise
    score:  conv(16->1) sigmoid                         (full resolution)

In the ``rkf`` variant every k >= 3 conv is an RKF layer. Layers are held as
their base kernels; ``rkf_mode="fused"`` evaluates them through the summed
kernel (numerically the same map, one conv per layer) while
``rkf_mode="branched"`` runs the N rotated convolutions explicitly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor_core as tc
from .rkf_conv import RkfLayer, fuse_weights, rkf_backward, rkf_forward, unfuse_grad
from .tensor_core import ConvKernel

VARIANTS = ("base", "rkf")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    c_in: int
    c_out: int
    k: int = 3


@dataclass
class ModelConfig:
    variant: str = "base"
    n_rotations: int = 4
    trunk_channels: tuple[int, ...] = (16, 16)
    head_channels: int = 32
    desc_dim: int = 32
    rate: int = 4
    kernel_size: int = 3

    def __post_init__(self):
        self.trunk_channels = tuple(int(c) for c in self.trunk_channels)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.rate < 1 or self.rate & (self.rate - 1):
            raise ValueError(f"rate must be a power of two, got {self.rate}")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel sizes must be odd")
        if self.n_rotations < 1:
            raise ValueError("n_rotations must be >= 1")
        if not self.trunk_channels:
            raise ValueError("need at least one trunk layer")

    @property
    def n_stages(self) -> int:
        return int(round(math.log2(self.rate)))

    def layer_specs(self) -> list[LayerSpec]:
        k = self.kernel_size
        specs = []
        c = 1
        for i, co in enumerate(self.trunk_channels):
            specs.append(LayerSpec(f"trunk{i}", c, co, k))
            c = co
        trunk_out = c
        for j in range(self.n_stages):
            specs.append(LayerSpec(f"desc{j}", c, self.head_channels, k))
            c = self.head_channels
        specs.append(LayerSpec("desc_out", c, self.desc_dim, k))
        specs.append(LayerSpec("score", trunk_out, 1, k))
        return specs

    def receptive_field_radius(self) -> int:
        """Half-width (input pixels) of the region feeding one output value."""
        k2 = self.kernel_size // 2
        r = k2 * len(self.trunk_channels)
        stride = 1
        for _ in range(self.n_stages):
            r += stride  # 2x2 pool extends the window by one current-resolution pixel
            stride *= 2
            r += k2 * stride
        r += k2 * stride
        return r


@dataclass
class FeatureOutput:
    desc: np.ndarray   # (n, C, H/r, W/r), unit columns
    score: np.ndarray  # (n, 1, H, W), in (0, 1)


class Keypoint(NamedTuple):
    x: int
    y: int
    score: float


@dataclass
class CorrespondenceBatch:
    pts_a: np.ndarray
    pts_b: np.ndarray
    f_a: np.ndarray
    f_b: np.ndarray
    s_a: np.ndarray
    s_b: np.ndarray
    # bookkeeping for the backward pass
    raw_a: np.ndarray = field(default=None, repr=False)
    raw_b: np.ndarray = field(default=None, repr=False)
    batch_a: int = 0
    batch_b: int = 0
    rate: int = 1

    def __len__(self):
        return len(self.pts_a)


def he_init(specs: list[LayerSpec], rng: np.random.Generator, dtype=np.float32,
            n_rotations: int = 1) -> list[ConvKernel]:
    """He-normal weights, zero bias. With ``n_rotations > 1`` (RKF layers) the
    std is divided by sqrt(N) so the fused kernel keeps He scale."""
    layers = []
    for s in specs:
        std = math.sqrt(2.0 / (s.c_in * s.k * s.k))
        if s.k >= 3:
            std /= math.sqrt(n_rotations)
        w = rng.normal(0.0, std, size=(s.c_out, s.c_in, s.k, s.k)).astype(dtype)
        layers.append(ConvKernel(w, np.zeros(s.c_out, dtype=dtype)))
    return layers


class Model:
    """Parameters plus the hand-composed forward/backward of the network."""

    def __init__(self, cfg: ModelConfig, layers: list[ConvKernel] | None = None, seed=0,
                 dtype=np.float32, rkf_mode: str = "fused"):
        self.cfg = cfg
        self.specs = cfg.layer_specs()
        if layers is None:
            rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
            layers = he_init(self.specs, rng, dtype, cfg.n_rotations if cfg.variant == "rkf" else 1)
        if len(layers) != len(self.specs):
            raise ValueError(f"expected {len(self.specs)} layers, got {len(layers)}")
        for s, l in zip(self.specs, layers):
            if l.weights.shape != (s.c_out, s.c_in, s.k, s.k):
                raise ValueError(f"layer {s.name}: expected {(s.c_out, s.c_in, s.k, s.k)}, got {l.weights.shape}")
        self.layers = layers
        self.rkf_mode = rkf_mode
        self._fused_cache = None

    # -- parameters ---------------------------------------------------------
    @property
    def rkf_flags(self) -> list[bool]:
        # k = 1 layers stay regular: all their rotations coincide
        return [self.cfg.variant == "rkf" and s.k >= 3 for s in self.specs]

    def params(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out += [l.weights, l.bias]
        return out

    def copy(self, dtype=None) -> "Model":
        dtype = dtype or self.layers[0].weights.dtype
        layers = [ConvKernel(l.weights.astype(dtype, copy=True), l.bias.astype(dtype, copy=True)) for l in self.layers]
        return Model(self.cfg, layers, dtype=dtype, rkf_mode=self.rkf_mode)

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def invalidate(self):
        """Drop cached fused kernels; call after mutating parameters."""
        self._fused_cache = None

    def effective_kernels(self) -> list[ConvKernel]:
        if self._fused_cache is None:
            n = self.cfg.n_rotations
            self._fused_cache = [
                ConvKernel(fuse_weights(l.weights, n), l.bias) if flag else l
                for l, flag in zip(self.layers, self.rkf_flags)
            ]
        return self._fused_cache

    def reparameterized(self) -> "Model":
        """Equivalent base-variant model holding the fused kernels."""
        fused = [ConvKernel(k.weights.copy(), k.bias.copy()) for k in self.effective_kernels()]
        return Model(replace(self.cfg, variant="base"), fused, dtype=fused[0].weights.dtype)

    # -- forward / backward -------------------------------------------------
    def _conv(self, i, x):
        if self.rkf_flags[i] and self.rkf_mode == "branched":
            return rkf_forward(RkfLayer(self.layers[i], self.cfg.n_rotations), x)
        return tc.conv2d(x, self.effective_kernels()[i])

    def _conv_backward(self, i, x, g):
        if self.rkf_flags[i] and self.rkf_mode == "branched":
            return rkf_backward(RkfLayer(self.layers[i], self.cfg.n_rotations), x, g)
        gx, gw, gb = tc.conv2d_backward(x, self.effective_kernels()[i], g)
        if self.rkf_flags[i]:
            gw = unfuse_grad(gw, self.cfg.n_rotations)
        return gx, gw, gb

    def check_input(self, image: np.ndarray):
        tc.check_tensor(image, "image")
        h, w = image.shape[2:]
        m = 2 * self.cfg.rate
        if image.shape[1] != 1:
            raise ValueError("images must have a single channel")
        if h % m or w % m:
            raise ValueError(f"image dims {h}x{w} must be divisible by {m}")

    def forward(self, image: np.ndarray, keep_cache: bool = False):
        """Returns a :class:`FeatureOutput`, or ``(output, cache)`` if requested."""
        self.check_input(image)
        x = image.astype(self.layers[0].weights.dtype, copy=False)
        cache = {"input": x}
        nt = len(self.cfg.trunk_channels)
        acts = []
        h = x
        for i in range(nt):
            a = self._conv(i, h)
            acts.append((h, a))
            h = tc.relu(a)
        trunk = h
        score_idx = len(self.specs) - 1
        z = self._conv(score_idx, trunk)
        score = tc.sigmoid(z)

        p = trunk
        stages = []
        for j in range(self.cfg.n_stages):
            q = tc.avg_pool2(p)
            a = self._conv(nt + j, q)
            stages.append((q, a))
            p = tc.relu(a)
        raw = self._conv(score_idx - 1, p)
        desc = tc.l2_normalize_channels(raw)
        out = FeatureOutput(desc, score)
        if not keep_cache:
            return out
        cache.update(acts=acts, trunk=trunk, score=score, stages=stages, head_in=p, raw=raw)
        return out, cache

    __call__ = forward

    def backward(self, cache, grad_desc=None, grad_score=None):
        """Gradients w.r.t. all parameters, ordered as :meth:`params`."""
        nl = len(self.specs)
        nt = len(self.cfg.trunk_channels)
        grads: list = [None] * (2 * nl)
        trunk = cache["trunk"]
        g_trunk = np.zeros_like(trunk)

        if grad_desc is not None:
            g_raw = tc.l2_normalize_channels_backward(cache["raw"], grad_desc)
            gx, gw, gb = self._conv_backward(nl - 2, cache["head_in"], g_raw)
            grads[2 * (nl - 2)], grads[2 * (nl - 2) + 1] = gw, gb
            g = gx
            for j in reversed(range(self.cfg.n_stages)):
                q, a = cache["stages"][j]
                g = tc.relu_backward(a, g)
                gx, gw, gb = self._conv_backward(nt + j, q, g)
                grads[2 * (nt + j)], grads[2 * (nt + j) + 1] = gw, gb
                g = tc.avg_pool2_backward(gx)
            g_trunk = g_trunk + g
        if grad_score is not None:
            g_z = tc.sigmoid_backward(cache["score"], grad_score)
            gx, gw, gb = self._conv_backward(nl - 1, trunk, g_z)
            grads[2 * (nl - 1)], grads[2 * (nl - 1) + 1] = gw, gb
            g_trunk = g_trunk + gx

        g = g_trunk
        for i in reversed(range(nt)):
            h_in, a = cache["acts"][i]
            g = tc.relu_backward(a, g)
            gx, gw, gb = self._conv_backward(i, h_in, g)
            grads[2 * i], grads[2 * i + 1] = gw, gb
            g = gx
        return [np.zeros_like(p) if gr is None else gr.astype(p.dtype, copy=False)
                for gr, p in zip(grads, self.params())]


# -- keypoints and correspondences ------------------------------------------

def detect_keypoints(score: np.ndarray, nms_radius: int = 2, threshold: float = 0.5,
                     top_k: int = 512, batch: int = 0, mask: np.ndarray | None = None) -> list[Keypoint]:
    """Strict local maxima above ``threshold``, best first, at most ``top_k``.

    Ties in score are ordered by ``(y, x)``. ``mask`` optionally restricts
    candidates to a boolean region.
    """
    s = np.asarray(score)
    if s.ndim == 4:
        s = s[batch, 0]
    s = s.astype(np.float64)
    r = nms_radius
    k = 2 * r + 1
    padded = np.pad(s, r, constant_values=-np.inf)
    win = sliding_window_view(padded, (k, k)).reshape(s.shape + (k * k,)).copy()
    win[..., (k * k) // 2] = -np.inf
    neigh = win.max(axis=-1)
    cand = (s > neigh) & (s >= threshold)
    if mask is not None:
        cand &= mask
    ys, xs = np.nonzero(cand)
    vals = s[ys, xs]
    order = np.lexsort((xs, ys, -vals))[:top_k]
    return [Keypoint(int(xs[i]), int(ys[i]), float(vals[i])) for i in order]


def keypoints_to_array(kps: list[Keypoint]) -> np.ndarray:
    return np.array([[k.x, k.y] for k in kps], dtype=np.float64).reshape(-1, 2)


def desc_coords(pts: np.ndarray, rate: int, h: int, w: int) -> np.ndarray:
    """Map full-resolution pixel centres onto the descriptor grid.

    Pixel ``c`` lies at ``(c + 0.5) / r - 0.5`` on an r-times pooled grid,
    which keeps image-centre rotations aligned between the two resolutions.
    """
    q = (np.asarray(pts, dtype=np.float64) + 0.5) / rate - 0.5
    q[:, 0] = np.clip(q[:, 0], 0, w - 1)
    q[:, 1] = np.clip(q[:, 1], 0, h - 1)
    return q


def sample_descriptors(desc: np.ndarray, pts: np.ndarray, rate: int, batch: int = 0):
    """Bilinear descriptor samples at full-resolution points, re-normalised."""
    q = desc_coords(pts, rate, *desc.shape[2:])
    raw = tc.bilinear_sample(desc, q, batch)
    n = np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-8)
    return raw / n, raw


def sample_correspondence_features(out_a: FeatureOutput, out_b: FeatureOutput, pts_a, pts_b,
                                   rate: int, batch_a: int = 0, batch_b: int = 0) -> CorrespondenceBatch:
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    if len(pts_a) == 0 or len(pts_a) != len(pts_b):
        raise ValueError("need a non-empty, equal-length list of correspondences")
    f_a, raw_a = sample_descriptors(out_a.desc, pts_a, rate, batch_a)
    f_b, raw_b = sample_descriptors(out_b.desc, pts_b, rate, batch_b)
    s_a = tc.bilinear_sample(out_a.score, pts_a, batch_a)[:, 0]
    s_b = tc.bilinear_sample(out_b.score, pts_b, batch_b)[:, 0]
    return CorrespondenceBatch(pts_a, pts_b, f_a, f_b, s_a, s_b, raw_a, raw_b, batch_a, batch_b, rate)


def correspondence_backward(batch: CorrespondenceBatch, desc_shape, score_shape, g_fa, g_fb, g_sa, g_sb):
    """Push sample gradients back onto the dense descriptor and score maps."""
    dtype = g_fa.dtype
    grad_desc = np.zeros(desc_shape, dtype=dtype)
    grad_score = np.zeros(score_shape, dtype=dtype)
    h, w = desc_shape[2:]
    for pts, raw, g_f, g_s, b in ((batch.pts_a, batch.raw_a, g_fa, g_sa, batch.batch_a),
                                  (batch.pts_b, batch.raw_b, g_fb, g_sb, batch.batch_b)):
        n = np.linalg.norm(raw, axis=1, keepdims=True)
        d = np.maximum(n, 1e-8)
        f = raw / d
        g_raw = np.where(n >= 1e-8, (g_f - f * np.sum(f * g_f, axis=1, keepdims=True)) / d, g_f / d)
        q = desc_coords(pts, batch.rate, h, w)
        grad_desc += tc.bilinear_sample_backward(desc_shape, q, g_raw.astype(dtype), b)
        grad_score += tc.bilinear_sample_backward(score_shape, pts, np.asarray(g_s, dtype=dtype)[:, None], b)
    return grad_desc, grad_score


# -- loss and optimiser -------------------------------------------------------

def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(sq, 0.0))


def joint_loss(batch: CorrespondenceBatch, margin: float = 1.0, eps: float = 1e-8):
    """Score-weighted hardest-negative triplet loss.

    ``L = sum_c w_c M_c`` with ``w_c = s_c s'_c / sum_q s_q s'_q`` and
    ``M_c = max(0, margin + |f_c - f'_c| - min_{q != c} min(|f_c - f'_q|, |f_q - f'_c|))``.

    Returns ``(loss, (g_fa, g_fb, g_sa, g_sb))``.
    """
    fa, fb = batch.f_a, batch.f_b
    sa, sb = batch.s_a.astype(fa.dtype), batch.s_b.astype(fa.dtype)
    n = len(fa)
    if n < 2:
        raise ValueError("joint loss needs at least two correspondences")
    D = _pairwise_dist(fa, fb)  # D[i, j] = |f_i - f'_j|, used for the argmin only
    off = D.copy()
    np.fill_diagonal(off, np.inf)
    idx = np.arange(n)
    row_min_idx = np.argmin(off, axis=1)   # |f_c - f'_q|
    col_min_idx = np.argmin(off, axis=0)   # |f_q - f'_c|
    use_row = off[idx, row_min_idx] <= off[col_min_idx, idx]
    # hardest negative is either (f_c, f'_q) or (f_q, f'_c)
    q = np.where(use_row, row_min_idx, col_min_idx)
    ia = np.where(use_row, idx, q)
    ib = np.where(use_row, q, idx)
    dp = fa - fb
    dn = fa[ia] - fb[ib]
    pos = np.linalg.norm(dp, axis=1)
    neg = np.linalg.norm(dn, axis=1)
    hinge = margin + pos - neg
    M = np.maximum(hinge, 0)

    prod = sa * sb
    Z = np.sum(prod)
    wts = prod / Z
    loss = float(np.sum(wts * M))

    g_fa = np.zeros_like(fa)
    g_fb = np.zeros_like(fb)
    c = np.nonzero(hinge > 0)[0]
    wc = wts[c][:, None]
    u = wc * dp[c] / np.maximum(pos[c], eps)[:, None]
    g_fa[c] += u
    g_fb[c] -= u
    v = wc * dn[c] / np.maximum(neg[c], eps)[:, None]
    np.add.at(g_fa, ia[c], -v)
    np.add.at(g_fb, ib[c], v)
    g_sa = sb * (M - loss) / Z
    g_sb = sa * (M - loss) / Z
    return loss, (g_fa, g_fb, g_sa, g_sb)


def loss_weights(batch: CorrespondenceBatch) -> np.ndarray:
    prod = batch.s_a * batch.s_b
    return prod / np.sum(prod)


def optimizer_step(params: list[np.ndarray], grads: list[np.ndarray], state: list[np.ndarray] | None,
                   lr: float, momentum: float = 0.9) -> list[np.ndarray]:
    """Classical momentum, in place: ``v = mu v + g``; ``p -= lr v``. Returns the state."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if state is None:
        state = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, state):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {v.shape}")
        v *= momentum
        v += g
        p -= lr * v
    return state
