"""Multi-oriented feature aggregation: a rotate / run / un-rotate / average teacher."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import group_angles, rotate_image, rotation_index
from .network import FeatureOutput, Model
from .tensor_core import l2_normalize_channels


@dataclass
class MofaTeacher:
    model: Model
    n_rotations: int = 4

    def __post_init__(self):
        if self.n_rotations < 1:
            raise ValueError("n_rotations must be >= 1")

    @property
    def rate(self) -> int:
        return self.model.cfg.rate

    def __call__(self, image):
        return mofa_forward(self, image)


def _exact(n_rotations: int) -> bool:
    return all(rotation_index(t) is not None for t in group_angles(n_rotations))


def mofa_forward(teacher: MofaTeacher, image: np.ndarray) -> FeatureOutput:
    """Average of ``rot(-t_n) F(rot(t_n) I)`` over the N group angles.

    Descriptor maps are rotated spatially only, averaged, then re-normalised;
    score maps are averaged as they are. The wrapped model is only read.
    """
    n = teacher.n_rotations
    h, w = image.shape[2:]
    exact = _exact(n)
    if exact and n > 1 and h != w:
        raise ValueError(f"exact 90-degree aggregation needs a square image, got {h}x{w}")
    angles = group_angles(n)
    batch = image.shape[0]
    # one stacked forward over all orientations
    rotated = np.concatenate([rotate_image(image, th)[0] for th in angles], axis=0)
    out = teacher.model.forward(rotated)
    desc_sum = None
    score_sum = None
    for i, th in enumerate(angles):
        sl = slice(i * batch, (i + 1) * batch)
        d = rotate_image(out.desc[sl], -th)[0]
        s = rotate_image(out.score[sl], -th)[0]
        desc_sum = d if desc_sum is None else desc_sum + d
        score_sum = s if score_sum is None else score_sum + s
    desc = l2_normalize_channels(desc_sum / n)
    return FeatureOutput(desc, score_sum / n)
