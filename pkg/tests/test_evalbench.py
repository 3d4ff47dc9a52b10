import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from drkf.data_synth import SynthStyle, gen_image, make_pair
from drkf.evalbench import (DetectorParams, MatchSet, MmaCurve, compute_mma, covisible_masks, evaluate_model,
                            match_descriptors, mean_curve, rotation_sweep, timing_compare, write_curve_csv,
                            write_sweep_csv, write_timing_csv)
from drkf.geometry import AugmentConfig
from drkf.mofa import MofaTeacher
from drkf.network import Model, ModelConfig

SMALL = ModelConfig(trunk_channels=(4, 4), head_channels=8, desc_dim=8, rate=4)


def quadratic_oracle(a, b):
    out = set()
    for i in range(len(a)):
        d = [np.linalg.norm(a[i] - b[j]) for j in range(len(b))]
        j = int(np.argmin(d))
        back = [np.linalg.norm(a[k] - b[j]) for k in range(len(a))]
        if int(np.argmin(back)) == i:
            out.add((i, j))
    return out


def test_match_examples(rng):
    a = rng.normal(size=(6, 4))
    assert match_descriptors(a, a).pairs() == {(i, i) for i in range(6)}
    one = match_descriptors(np.eye(3)[:1], np.eye(3)[:1])
    assert len(one) == 1
    empty = match_descriptors(np.zeros((0, 4)), a)
    assert len(empty) == 0
    with pytest.raises(ValueError):
        match_descriptors(a, np.zeros((2, 3)))


def test_match_random_oracle(rng):
    a, b = rng.normal(size=(20, 8)), rng.normal(size=(20, 8))
    assert match_descriptors(a, b).pairs() == quadratic_oracle(a, b)


@given(st.integers(0, 2**31 - 1), st.integers(1, 15), st.integers(1, 15))
def test_match_symmetry_and_uniqueness(seed, na, nb):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(na, 4)), rng.normal(size=(nb, 4))
    ab, ba = match_descriptors(a, b), match_descriptors(b, a)
    assert ab.pairs() == {(j, i) for i, j in ba.pairs()}
    assert len(set(ab.idx_a.tolist())) == len(ab) == len(set(ab.idx_b.tolist()))


def test_match_ties_prefer_lower_index():
    a = np.array([[1.0, 0.0]])
    b = np.array([[0.0, 1.0], [0.0, -1.0]])
    assert match_descriptors(a, b).pairs() == {(0, 0)}


def test_mma_examples():
    k = np.array([[1.0, 2.0], [3.0, 4.0]])
    m = MatchSet(np.array([0, 1]), np.array([0, 1]), np.zeros(2))
    np.testing.assert_array_equal(compute_mma(m, k, k, np.eye(3)).accuracy, np.ones(10))
    ka = np.zeros((10, 2))
    kb = np.zeros((10, 2))
    kb[7:, 0] = 20.0  # three matches far off
    kb[:7, 0] = np.linspace(0, 5, 7)
    m = MatchSet(np.arange(10), np.arange(10), np.zeros(10))
    curve = compute_mma(m, ka, kb, np.eye(3))
    assert curve.at(5) == pytest.approx(0.7)
    empty = compute_mma(MatchSet(np.zeros(0, int), np.zeros(0, int), np.zeros(0)), ka, kb, np.eye(3))
    assert not empty.accuracy.any() and empty.n_empty == 1
    with pytest.raises(ValueError):
        compute_mma(m, ka, kb, np.eye(3), thresholds=(3, 1))


def test_mma_enumeration_oracle(rng):
    ka = rng.uniform(0, 30, size=(15, 2))
    H = np.array([[1.0, 0.1, 2.0], [-0.05, 0.95, 1.0], [0.0, 0.0, 1.0]])
    proj = (H @ np.c_[ka, np.ones(15)].T).T
    proj = proj[:, :2] / proj[:, 2:]
    kb = proj + rng.normal(scale=4.0, size=proj.shape)
    m = MatchSet(np.arange(15), rng.permutation(15), np.zeros(15))
    curve = compute_mma(m, ka, kb, H)
    for t in range(1, 11):
        hits = sum(np.linalg.norm(proj[i] - kb[j]) <= t for i, j in zip(m.idx_a, m.idx_b))
        assert curve.at(t) == pytest.approx(hits / 15)
    assert np.all(np.diff(curve.accuracy) >= 0)


def test_mean_curve():
    c = mean_curve([MmaCurve((1, 2), np.array([0.0, 0.5])), MmaCurve((1, 2), np.array([1.0, 1.0]), 1, 1)])
    np.testing.assert_allclose(c.accuracy, [0.5, 0.75])
    assert c.n_pairs == 2 and c.n_empty == 1
    with pytest.raises(ValueError):
        mean_curve([])


@pytest.fixture(scope="module")
def model():
    return Model(SMALL, seed=3)


@pytest.fixture(scope="module")
def images():
    return [gen_image(SynthStyle(seed=i), 32, 32) for i in range(3)]


def test_covisible_masks_identity(images):
    rec = make_pair(images[0], AugmentConfig.identity(), 0)
    ma, mb = covisible_masks(rec, 4)
    np.testing.assert_array_equal(ma, mb)
    assert ma[4:-4, 4:-4].all() and not ma[:4].any()


def test_identity_pairs_score_high(model, images):
    pairs = [make_pair(img, AugmentConfig.identity(), i) for i, img in enumerate(images)]
    curve = evaluate_model(model, pairs)
    assert curve.at(1) > 0.9 and curve.n_pairs == 3


def test_evaluate_model_deterministic_and_accepts_teacher(model, images):
    pairs = [make_pair(img, AugmentConfig(), i) for i, img in enumerate(images)]
    a = evaluate_model(model, pairs)
    b = evaluate_model(model, pairs)
    np.testing.assert_array_equal(a.accuracy, b.accuracy)
    assert np.all(np.diff(a.accuracy) >= 0)
    t = evaluate_model(MofaTeacher(model), pairs)
    assert t.accuracy.shape == (10,)
    with pytest.raises(ValueError):
        evaluate_model(model, [])


def test_rotation_sweep(model, images, tmp_path):
    angles = [0.0, math.pi / 4, math.pi / 2]
    rows = rotation_sweep(model, images, angles)
    assert [r[0] for r in rows] == pytest.approx([0.0, 45.0, 90.0])
    upright = evaluate_model(model, [make_pair(img, AugmentConfig.rotation_only(0.0), i)
                                     for i, img in enumerate(images)], thresholds=(5,))
    assert rows[0][1] == pytest.approx(upright.accuracy[0])
    write_sweep_csv(tmp_path / "s.csv", rows)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "angle_deg,mma5" and len(lines) == 4
    with pytest.raises(ValueError):
        rotation_sweep(model, images, [2 * math.pi])


def test_curve_csv(tmp_path):
    write_curve_csv(tmp_path / "c.csv", MmaCurve(tuple(range(1, 11)), np.linspace(0, 1, 10)))
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "threshold,accuracy" and len(lines) == 11
    assert lines[1].startswith("1,")


def test_timing_compare(model, tmp_path):
    rows = timing_compare({"base": model, "other": model}, sizes=(32,), repetitions=10, warmup=1)
    assert [(r.variant, r.size) for r in rows] == [("base", 32), ("other", 32)]
    assert rows[0].ratio_to_base == 1.0 and rows[1].median_ms > 0
    write_timing_csv(tmp_path / "t.csv", rows)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "variant,size,median_ms,ratio_to_base"
    with pytest.raises(ValueError):
        timing_compare({"base": model}, repetitions=5)
    with pytest.raises(ValueError):
        timing_compare({"x": model})


def test_detector_defaults():
    d = DetectorParams()
    assert (d.nms_radius, d.threshold, d.top_k, d.border) == (2, 0.0, 256, 4)
