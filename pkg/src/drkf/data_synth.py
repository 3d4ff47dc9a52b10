"""Synthetic textures, ground-truth image pairs and netpbm / manifest I/O."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import AugmentConfig, generate_correspondences, normalize_homography, sample_homography, valid_mask, warp_image

STYLES = ("blobs", "checker_warped", "multi_freq_noise")
MAXVAL = 65535


class PgmError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class SynthStyle:
    kind: str = "multi_freq_noise"
    density: float = 1.0
    contrast: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STYLES:
            raise ValueError(f"unknown style {self.kind!r}; expected one of {STYLES}")
        if self.density < 0 or self.contrast < 0:
            raise ValueError("density and contrast must be non-negative")


def quantize16(img: np.ndarray) -> np.ndarray:
    """Snap values in [0, 1] to the 16-bit grid (round half up), float32."""
    q = np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * MAXVAL + 0.5)
    return (q / MAXVAL).astype(np.float32)


def _upsample(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    """Separable linear interpolation of a coarse grid onto h x w (corners aligned)."""
    gh, gw = grid.shape
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    rows = np.stack([np.interp(xs, np.arange(gw), grid[i]) for i in range(gh)])
    return np.stack([np.interp(ys, np.arange(gh), rows[:, j]) for j in range(w)], axis=1)


def _multi_freq_noise(rng, h, w, style):
    img = np.zeros((h, w))
    size = max(h, w)
    amp = 1.0
    cells = 4
    while cells <= size // 2:
        n_cells = max(2, int(round(cells * style.density)))
        img += amp * _upsample(rng.uniform(-1, 1, size=(n_cells + 1, n_cells + 1)), h, w)
        amp *= 0.7
        cells *= 2
    return img


def _blobs(rng, h, w, style):
    n = int(round(style.density * h * w / 128))
    img = np.zeros((h, w))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(n):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        rad = rng.uniform(1.5, 6.0)
        img += rng.uniform(-1, 1) * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * rad * rad))
    return img


def _checker_warped(rng, h, w, style):
    if style.density <= 0:
        return np.zeros((h, w))
    period = 16.0 / style.density
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    fx, fy, px, py = rng.uniform(0.03, 0.12), rng.uniform(0.03, 0.12), rng.uniform(0, 2 * math.pi), rng.uniform(0, 2 * math.pi)
    amp = rng.uniform(2.0, 5.0)
    u = xs + amp * np.sin(fy * ys + py)
    v = ys + amp * np.sin(fx * xs + px)
    ang = rng.uniform(0, math.pi)
    a = math.cos(ang) * u + math.sin(ang) * v
    b = -math.sin(ang) * u + math.cos(ang) * v
    return np.tanh(2.0 * np.sin(math.pi * a / period)) * np.tanh(2.0 * np.sin(math.pi * b / period))


def gen_image(style: SynthStyle, h: int = 64, w: int = 64) -> np.ndarray:
    """Deterministic ``(1, 1, h, w)`` float32 texture on the 16-bit grid, values in [0, 1]."""
    if h < 16 or w < 16:
        raise ValueError("images must be at least 16x16")
    rng = np.random.default_rng(style.seed)
    raw = {"blobs": _blobs, "checker_warped": _checker_warped, "multi_freq_noise": _multi_freq_noise}[style.kind](rng, h, w, style)
    lo, hi = raw.min(), raw.max()
    if hi - lo < 1e-9 or style.contrast == 0:
        raise DataError(f"style {style.kind} with density={style.density} produced a constant image")
    img = 0.5 + style.contrast * ((raw - lo) / (hi - lo) - 0.5)
    img = quantize16(img)
    if img.std() <= 0.02:
        raise DataError(f"generated image has too little texture (std={img.std():.4f})")
    return img[None, None]


@dataclass
class PairRecord:
    image_a: np.ndarray
    image_b: np.ndarray
    H: np.ndarray
    mask_a: np.ndarray
    mask_b: np.ndarray
    seed: int = 0
    provenance: dict = field(default_factory=dict)


def make_pair(img: np.ndarray, aug: AugmentConfig, seed: int, grid_stride: int = 4,
              min_correspondences: int = 16, max_tries: int = 20) -> PairRecord:
    """Warp ``img`` by a random homography; B is snapped to the 16-bit grid."""
    h, w = img.shape[2:]
    rng = np.random.default_rng(seed)
    mask_a = np.ones((h, w), dtype=bool)
    for _ in range(max_tries):
        H = sample_homography(aug, rng, h, w)
        b, mask_b = warp_image(img, H)
        pa, _ = generate_correspondences(H, grid_stride, mask_a, mask_b)
        if len(pa) >= min_correspondences:
            return PairRecord(img, quantize16(b), H, mask_a, mask_b, seed,
                              {"seed": seed, "grid_stride": grid_stride})
    raise DataError(f"no homography with >= {min_correspondences} correspondences after {max_tries} draws")


# -- netpbm --------------------------------------------------------------------

def write_pgm(path, img: np.ndarray) -> None:
    """Binary 16-bit PGM (P5, maxval 65535, big-endian samples)."""
    a = np.asarray(img)
    while a.ndim > 2:
        if a.shape[0] != 1:
            raise PgmError(f"can only write single-channel images, got shape {np.shape(img)}")
        a = a[0]
    q = np.floor(np.clip(a.astype(np.float64), 0.0, 1.0) * MAXVAL + 0.5).astype(">u2")
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii"))
        f.write(q.tobytes())


def _header_tokens(data: bytes, count: int):
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise PgmError("truncated PGM header")
        tokens.append(data[start:i])
    if i >= n or not data[i:i + 1].isspace():
        raise PgmError("malformed PGM header")
    return tokens, i + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a ``(1, 1, h, w)`` float32 tensor scaled by maxval."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        kind = data[:2].decode("ascii", "replace")
        raise PgmError(f"unsupported netpbm variant {kind!r}; only binary P5 is accepted")
    tokens, offset = _header_tokens(data[2:], 3)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise PgmError(f"malformed PGM header: {tokens}") from e
    if w <= 0 or h <= 0 or not (0 < maxval <= MAXVAL):
        raise PgmError(f"invalid PGM dimensions or maxval: {w}x{h}, {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    payload = data[2 + offset:]
    need = w * h * np.dtype(dtype).itemsize
    if len(payload) < need:
        raise PgmError(f"truncated PGM payload: {len(payload)} of {need} bytes")
    q = np.frombuffer(payload[:need], dtype=dtype).reshape(h, w).astype(np.float64)
    return (q / maxval).astype(np.float32)[None, None]


# -- datasets ------------------------------------------------------------------

@dataclass
class DatasetSpec:
    n_train: int = 200
    n_eval: int = 100
    size: int = 64
    style: str = "multi_freq_noise"
    density: float = 1.0
    contrast: float = 1.0
    seed: int = 0
    grid_stride: int = 4


TRAIN_MANIFEST = "train.manifest"
EVAL_MANIFESTS = {"upright": "eval_upright.manifest", "rotated": "eval_rotated.manifest"}


def eval_augment(condition: str, base: AugmentConfig | None = None) -> AugmentConfig:
    base = base or AugmentConfig()
    if condition == "upright":
        return AugmentConfig(rotation=(0.0, 0.0), scale=base.scale, shear=base.shear,
                             perspective=base.perspective, translation=base.translation)
    if condition == "rotated":
        return base
    raise ValueError(f"unknown eval condition {condition!r}")


def image_seed(seed: int, split: str, index: int) -> int:
    """Stable per-image seed derived from the dataset seed."""
    return int(np.random.SeedSequence([seed, {"train": 0, "eval": 1}[split], index]).generate_state(1)[0])


def pair_seed(seed: int, condition: str, index: int) -> int:
    return int(np.random.SeedSequence([seed, 2, {"upright": 0, "rotated": 1}[condition], index]).generate_state(1)[0])


def generate_images(spec: DatasetSpec, split: str) -> list[np.ndarray]:
    n = spec.n_train if split == "train" else spec.n_eval
    return [gen_image(SynthStyle(spec.style, spec.density, spec.contrast, image_seed(spec.seed, split, i)),
                      spec.size, spec.size) for i in range(n)]


def build_eval_pairs(images: list[np.ndarray], condition: str, seed: int, aug: AugmentConfig | None = None,
                     grid_stride: int = 4) -> list[PairRecord]:
    cfg = eval_augment(condition, aug)
    return [make_pair(img, cfg, pair_seed(seed, condition, i), grid_stride) for i, img in enumerate(images)]


def write_dataset(root, spec: DatasetSpec, aug: AugmentConfig | None = None) -> dict:
    """Generate the standard corpus under ``root``; returns manifest paths."""
    root = Path(root)
    (root / "train").mkdir(parents=True, exist_ok=True)
    train = generate_images(spec, "train")
    lines = []
    for i, img in enumerate(train):
        rel = f"train/img_{i:04d}.pgm"
        write_pgm(root / rel, img)
        lines.append(f"{rel} {image_seed(spec.seed, 'train', i)}")
    _write_lines(root / TRAIN_MANIFEST, lines)

    eval_imgs = generate_images(spec, "eval")
    out = {"train": root / TRAIN_MANIFEST}
    for cond, name in EVAL_MANIFESTS.items():
        pairs = build_eval_pairs(eval_imgs, cond, spec.seed, aug, spec.grid_stride)
        write_pairs(root, cond, pairs)
        out[cond] = root / name
    return out


def write_pairs(root, condition: str, pairs: list[PairRecord]) -> Path:
    root = Path(root)
    (root / "eval" / condition).mkdir(parents=True, exist_ok=True)
    lines = []
    for i, rec in enumerate(pairs):
        ra, rb = f"eval/{condition}/a_{i:04d}.pgm", f"eval/{condition}/b_{i:04d}.pgm"
        write_pgm(root / ra, rec.image_a)
        write_pgm(root / rb, rec.image_b)
        hs = " ".join(repr(float(v)) for v in rec.H.ravel())
        lines.append(f"{ra} {rb} {hs} {rec.seed}")
    path = root / EVAL_MANIFESTS[condition]
    _write_lines(path, lines)
    return path


def _write_lines(path: Path, lines: list[str]):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text("".join(l + "\n" for l in lines), encoding="ascii")
    os.replace(tmp, path)


def _manifest_lines(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    for no, line in enumerate(path.read_text(encoding="ascii").splitlines(), 1):
        line = line.strip()
        if line and not line.startswith("#"):
            yield no, line.split()


def read_train_images(root) -> list[np.ndarray]:
    root = Path(root)
    imgs = []
    for no, parts in _manifest_lines(root / TRAIN_MANIFEST):
        if len(parts) != 2:
            raise DataError(f"{TRAIN_MANIFEST}:{no}: expected 'path seed'")
        imgs.append(read_pgm(root / parts[0]))
    return imgs


def read_pairs(root, condition: str) -> list[PairRecord]:
    root = Path(root)
    pairs = []
    for no, parts in _manifest_lines(root / EVAL_MANIFESTS[condition]):
        if len(parts) != 12:
            raise DataError(f"{EVAL_MANIFESTS[condition]}:{no}: expected 2 paths, 9 homography entries and a seed")
        a, b = read_pgm(root / parts[0]), read_pgm(root / parts[1])
        H = normalize_homography(np.array([float(v) for v in parts[2:11]]).reshape(3, 3))
        h, w = a.shape[2:]
        pairs.append(PairRecord(a, b, H, np.ones((h, w), dtype=bool), valid_mask(H, h, w), int(parts[11]),
                                {"condition": condition}))
    return pairs
