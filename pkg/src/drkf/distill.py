"""Distillation losses and the two training loops (base training, teacher distillation)."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import AugmentConfig, generate_correspondences, sample_homography, warp_image
from .mofa import MofaTeacher, mofa_forward
from .network import (Model, ModelConfig, correspondence_backward, joint_loss, optimizer_step,
                      sample_correspondence_features)
from .tensor_core import depth_to_space, space_to_depth


def desc_distill_loss(d_s: np.ndarray, d_t: np.ndarray, eps: float = 1e-8):
    """Mean over locations of ``|D_s - D_t|_2``; returns ``(loss, grad_wrt_d_s)``."""
    if d_s.shape != d_t.shape:
        raise ValueError(f"descriptor map shapes differ: {d_s.shape} vs {d_t.shape}")
    diff = d_s - d_t
    dist = np.sqrt(np.sum(diff * diff, axis=1, keepdims=True))
    count = dist.size
    loss = float(np.sum(dist, dtype=np.float64) / count)
    # the norm has no gradient where the columns coincide; use 0 there
    grad = np.where(dist > eps, diff / np.maximum(dist, eps), 0.0) / count
    return loss, grad.astype(d_s.dtype, copy=False)


def _softmax_channels(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def score_distill_loss(s_s: np.ndarray, s_t: np.ndarray, r: int, log_floor: float = 1e-12):
    """Local cross-entropy between r x r block softmaxes of two score maps.

    Both maps are rearranged to ``(n, r*r, H/r, W/r)``; the loss is the mean
    over blocks of ``-sum_k P_t log P_s``. Returns ``(loss, grad_wrt_s_s)``.
    """
    if s_s.shape != s_t.shape:
        raise ValueError(f"score map shapes differ: {s_s.shape} vs {s_t.shape}")
    p_s = _softmax_channels(space_to_depth(s_s, r).astype(np.float64))
    p_t = _softmax_channels(space_to_depth(s_t, r).astype(np.float64))
    count = p_s.shape[0] * p_s.shape[2] * p_s.shape[3]
    loss = float(-np.sum(p_t * np.log(np.maximum(p_s, log_floor))) / count)
    grad = (p_s * p_t.sum(axis=1, keepdims=True) - p_t) / count
    return loss, depth_to_space(grad, r).astype(s_s.dtype, copy=False)


def total_distill_loss(desc_term: float, score_term: float, lambda1: float = 1.0) -> float:
    if lambda1 < 0:
        raise ValueError("lambda1 must be non-negative")
    return desc_term + lambda1 * score_term


@dataclass
class TrainData:
    images: list
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    grid_stride: int = 4
    min_correspondences: int = 8
    max_redraws: int = 20


@dataclass
class DistillConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    iterations: int = 500
    lr: float = 0.001
    momentum: float = 0.9
    seed: int = 0
    student: str = "rkf"

    def validate(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass
class TrainReport:
    l_ori: list = field(default_factory=list)
    l_desc: list = field(default_factory=list)
    l_score: list = field(default_factory=list)
    total: list = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str | None = None

    def __len__(self):
        return len(self.total)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["iteration", "l_ori", "l_desc", "l_score", "total"])
            for i, row in enumerate(zip(self.l_ori, self.l_desc, self.l_score, self.total)):
                w.writerow([i] + [repr(float(v)) for v in row])


def _draw_pair(data: TrainData, rng: np.random.Generator):
    for _ in range(data.max_redraws):
        img = data.images[int(rng.integers(len(data.images)))]
        h, w = img.shape[2:]
        H = sample_homography(data.aug, rng, h, w)
        warped, mask_b = warp_image(img, H)
        pa, pb = generate_correspondences(H, data.grid_stride, np.ones((h, w), dtype=bool), mask_b)
        if len(pa) >= data.min_correspondences:
            return np.concatenate([img, warped], axis=0), pa, pb
    raise RuntimeError(f"no pair with >= {data.min_correspondences} correspondences after {data.max_redraws} draws")


def _run(model: Model, data: TrainData, iterations: int, lr: float, momentum: float, seed: int,
         teacher: MofaTeacher | None = None, lambda1: float = 1.0, lambda2: float = 0.0,
         log_every: int = 0) -> TrainReport:
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    report = TrainReport()
    state = None
    rate = model.cfg.rate
    t0 = time.perf_counter()
    for it in range(iterations):
        x, pa, pb = _draw_pair(data, rng)
        out, cache = model.forward(x, keep_cache=True)
        batch = sample_correspondence_features(out, out, pa, pb, rate, 0, 1)
        l_ori, (g_fa, g_fb, g_sa, g_sb) = joint_loss(batch)
        g_desc, g_score = correspondence_backward(batch, out.desc.shape, out.score.shape, g_fa, g_fb, g_sa, g_sb)
        l_desc = l_score = 0.0
        if teacher is not None:
            t_out = mofa_forward(teacher, x)
            l_desc, gd = desc_distill_loss(out.desc, t_out.desc)
            l_score, gs = score_distill_loss(out.score, t_out.score, rate)
            g_desc = g_desc + lambda2 * gd
            g_score = g_score + (lambda2 * lambda1) * gs
        total = l_ori + lambda2 * total_distill_loss(l_desc, l_score, lambda1)
        grads = model.backward(cache, g_desc, g_score)
        state = optimizer_step(model.params(), grads, state, lr, momentum)
        model.invalidate()
        report.l_ori.append(l_ori)
        report.l_desc.append(l_desc)
        report.l_score.append(l_score)
        report.total.append(total)
        if not math.isfinite(total):
            raise FloatingPointError(f"loss diverged at iteration {it}")
        if log_every and (it + 1) % log_every == 0:
            recent = report.total[-log_every:]
            print(f"  iter {it + 1}/{iterations} loss {np.mean(recent):.4f}", flush=True)
    report.wall_time = time.perf_counter() - t0
    return report


def init_model(cfg: ModelConfig, seed: int) -> Model:
    return Model(cfg, seed=np.random.default_rng(np.random.SeedSequence([seed, 0])))


def train_base(model_cfg: ModelConfig, data: TrainData, iterations: int = 2000, lr: float = 0.01,
               seed: int = 0, momentum: float = 0.9, init: Model | None = None, log_every: int = 0):
    """Train with the joint detect-and-describe loss only. Returns ``(model, report, metadata)``."""
    model = init.copy() if init is not None else init_model(model_cfg, seed)
    report = _run(model, data, iterations, lr, momentum, seed, log_every=log_every)
    meta = {"stage": "train_base", "variant": model.cfg.variant, "iterations": iterations, "lr": lr,
            "momentum": momentum, "seed": seed, "aug": asdict(data.aug), "grid_stride": data.grid_stride}
    return model, report, meta


def train_distilled(student_cfg: ModelConfig, teacher: MofaTeacher, data: TrainData, cfg: DistillConfig,
                    init: Model | None = None, log_every: int = 0):
    """Train a student on ``L_ori + lambda2 (L_desc + lambda1 L_score)``."""
    cfg.validate()
    if student_cfg.rate != teacher.rate:
        raise ValueError(f"teacher rate {teacher.rate} != student rate {student_cfg.rate}")
    model = init.copy() if init is not None else init_model(student_cfg, cfg.seed)
    if model.cfg.variant != student_cfg.variant:
        raise ValueError("initial weights do not match the student variant")
    before = teacher.model.checksum()
    report = _run(model, data, cfg.iterations, cfg.lr, cfg.momentum, cfg.seed, teacher, cfg.lambda1, cfg.lambda2,
                  log_every=log_every)
    assert teacher.model.checksum() == before, "teacher parameters were modified"
    meta = {"stage": "distill", "student": student_cfg.variant, "name": "DRKF" if student_cfg.variant == "rkf" else "DBase",
            "teacher_rotations": teacher.n_rotations, "distill": asdict(cfg), "aug": asdict(data.aug),
            "grid_stride": data.grid_stride, "initialised_from_checkpoint": init is not None}
    return model, report, meta
