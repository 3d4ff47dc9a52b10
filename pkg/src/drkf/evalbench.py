"""Mutual nearest-neighbour matching, MMA curves, rotation sweeps and timing."""
from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .data_synth import PairRecord, make_pair
from .geometry import AugmentConfig, warp_points
from .network import detect_keypoints, keypoints_to_array, sample_descriptors

DEFAULT_THRESHOLDS = tuple(range(1, 11))


@dataclass
class MatchSet:
    idx_a: np.ndarray
    idx_b: np.ndarray
    dist: np.ndarray

    def __len__(self):
        return len(self.idx_a)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.idx_a.tolist(), self.idx_b.tolist()))


@dataclass
class MmaCurve:
    thresholds: tuple
    accuracy: np.ndarray
    n_pairs: int = 1
    n_empty: int = 0  # pairs that produced no matches (scored as 0)

    def at(self, t) -> float:
        return float(self.accuracy[list(self.thresholds).index(t)])


@dataclass
class DetectorParams:
    nms_radius: int = 2
    threshold: float = 0.0
    top_k: int = 256
    border: int = 4  # keypoints this close to the image or fill boundary are dropped


def match_descriptors(desc_a: np.ndarray, desc_b: np.ndarray) -> MatchSet:
    """Brute-force L2 mutual nearest neighbours; ties go to the lower index."""
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        e = np.zeros(0, dtype=np.intp)
        return MatchSet(e, e.copy(), np.zeros(0))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"descriptor dims differ: {a.shape[1]} vs {b.shape[1]}")
    diff = a[:, None, :] - b[None, :, :]
    D = np.sqrt(np.sum(diff * diff, axis=-1))
    nn_ab = np.argmin(D, axis=1)
    nn_ba = np.argmin(D, axis=0)
    ia = np.arange(len(a))
    mutual = nn_ba[nn_ab] == ia
    return MatchSet(ia[mutual], nn_ab[mutual], D[ia[mutual], nn_ab[mutual]])


def compute_mma(matches: MatchSet, kpts_a, kpts_b, H, thresholds=DEFAULT_THRESHOLDS) -> MmaCurve:
    """Fraction of matches whose ground-truth reprojection error is within each threshold."""
    thresholds = tuple(thresholds)
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    if len(matches) == 0:
        return MmaCurve(thresholds, np.zeros(len(thresholds)), 1, 1)
    pa = np.asarray(kpts_a, dtype=np.float64)[matches.idx_a]
    pb = np.asarray(kpts_b, dtype=np.float64)[matches.idx_b]
    proj, ok = warp_points(H, pa)
    err = np.where(ok, np.linalg.norm(proj - pb, axis=1), np.inf)
    acc = np.array([np.mean(err <= t) for t in thresholds])
    return MmaCurve(thresholds, acc, 1, 0)


def mean_curve(curves: list[MmaCurve]) -> MmaCurve:
    if not curves:
        raise ValueError("no curves to average")
    acc = np.mean([c.accuracy for c in curves], axis=0)
    return MmaCurve(curves[0].thresholds, acc, sum(c.n_pairs for c in curves), sum(c.n_empty for c in curves))


def _erode(mask: np.ndarray, r: int) -> np.ndarray:
    if r <= 0:
        return mask.copy()
    p = np.pad(mask, r, constant_values=False)
    h, w = mask.shape
    out = np.ones_like(mask)
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            out &= p[dy:dy + h, dx:dx + w]
    return out


def covisible_masks(pair: PairRecord, border: int):
    """Detection regions: pixels seen in both images, away from any boundary."""
    h, w = pair.mask_b.shape
    mb = _erode(pair.mask_b, border)
    ys, xs = np.mgrid[0:h, 0:w]
    proj, ok = warp_points(pair.H, np.stack([xs.ravel(), ys.ravel()], axis=1))
    px = np.where(ok, np.rint(proj[:, 0]), -1).astype(np.intp)
    py = np.where(ok, np.rint(proj[:, 1]), -1).astype(np.intp)
    inside = ok & (px >= 0) & (px < w) & (py >= 0) & (py < h)
    ma = np.zeros(h * w, dtype=bool)
    ma[inside] = mb[py[inside], px[inside]]
    ma = ma.reshape(h, w) & _erode(pair.mask_a, border)
    return ma, mb


def evaluate_pair(forward_fn, pair: PairRecord, detector: DetectorParams, rate: int,
                  thresholds=DEFAULT_THRESHOLDS) -> MmaCurve:
    out = forward_fn(np.concatenate([pair.image_a, pair.image_b], axis=0))
    ma, mb = covisible_masks(pair, detector.border)
    kps = []
    descs = []
    for b, mask in ((0, ma), (1, mb)):
        k = keypoints_to_array(detect_keypoints(out.score, detector.nms_radius, detector.threshold,
                                                detector.top_k, batch=b, mask=mask))
        kps.append(k)
        descs.append(sample_descriptors(out.desc, k, rate, b)[0] if len(k) else np.zeros((0, out.desc.shape[1])))
    matches = match_descriptors(descs[0], descs[1])
    return compute_mma(matches, kps[0], kps[1], pair.H, thresholds)


def evaluate_model(forward_fn, pairs: list[PairRecord], detector: DetectorParams | None = None,
                   rate: int | None = None, thresholds=DEFAULT_THRESHOLDS) -> MmaCurve:
    """Mean MMA curve over ``pairs``; pairs without matches count as zero.

    ``forward_fn`` is a :class:`~drkf.network.Model`, a
    :class:`~drkf.mofa.MofaTeacher`, or any callable returning a
    :class:`~drkf.network.FeatureOutput`.
    """
    if not pairs:
        raise ValueError("evaluation set is empty")
    detector = detector or DetectorParams()
    if rate is None:
        rate = forward_fn.rate if hasattr(forward_fn, "rate") else forward_fn.cfg.rate
    return mean_curve([evaluate_pair(forward_fn, p, detector, rate, thresholds) for p in pairs])


def rotation_sweep(forward_fn, images: list[np.ndarray], angles, detector: DetectorParams | None = None,
                   rate: int | None = None, seed: int = 0, grid_stride: int = 4) -> list[tuple[float, float]]:
    """MMA@5px on rotation-only pairs for each angle (radians). Returns ``(angle_deg, mma5)`` rows."""
    rows = []
    for a in angles:
        if not (0 <= a < 2 * math.pi):
            raise ValueError(f"angle {a} outside [0, 2*pi)")
        pairs = [make_pair(img, AugmentConfig.rotation_only(a), seed + i, grid_stride) for i, img in enumerate(images)]
        curve = evaluate_model(forward_fn, pairs, detector, rate, thresholds=(5,))
        rows.append((math.degrees(a), float(curve.accuracy[0])))
    return rows


def write_curve_csv(path, curve: MmaCurve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "accuracy"])
        for t, a in zip(curve.thresholds, curve.accuracy):
            w.writerow([t, repr(float(a))])


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["angle_deg", "mma5"])
        for ang, v in rows:
            w.writerow([repr(round(float(ang), 6)), repr(float(v))])


@dataclass
class TimingRow:
    variant: str
    size: int
    median_ms: float
    ratio_to_base: float


def timing_compare(variants: dict, sizes=(64, 256), repetitions: int = 15, warmup: int = 2,
                   seed: int = 0) -> list[TimingRow]:
    """Median wall time per variant and size; ``variants`` maps name -> forward callable.

    Variants are interleaved within each repetition so drifts in machine load
    hit all of them alike. The ``"base"`` variant is the reference for ratios.
    """
    if repetitions < 10:
        raise ValueError("need at least 10 repetitions")
    if "base" not in variants:
        raise ValueError("a 'base' variant is required as the timing reference")
    rng = np.random.default_rng(seed)
    rows = []
    for size in sizes:
        img = rng.uniform(0, 1, size=(1, 1, size, size)).astype(np.float32)
        for fn in variants.values():
            for _ in range(warmup):
                fn(img)
        times = {name: [] for name in variants}
        for _ in range(repetitions):
            for name, fn in variants.items():
                t0 = time.perf_counter()
                fn(img)
                times[name].append(time.perf_counter() - t0)
        med = {k: statistics.median(v) * 1e3 for k, v in times.items()}
        rows += [TimingRow(k, size, med[k], med[k] / med["base"]) for k in variants]
    return rows


def write_timing_csv(path, rows: list[TimingRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["variant", "size", "median_ms", "ratio_to_base"])
        for r in rows:
            w.writerow([r.variant, r.size, f"{r.median_ms:.4f}", f"{r.ratio_to_base:.4f}"])
