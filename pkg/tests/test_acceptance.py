"""Acceptance criteria 1-8, each at its stated tolerance.

Run alone with ``pytest tests/test_acceptance.py -v``; a summary line per
criterion is printed at the end of the session.
"""
import csv
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from drkf import cli
from drkf.distill import (DistillConfig, TrainData, desc_distill_loss, score_distill_loss, train_distilled)
from drkf.checkpoint import load_checkpoint
from drkf.data_synth import read_pairs, read_train_images
from drkf.mofa import MofaTeacher, mofa_forward
from drkf.network import (CorrespondenceBatch, Model, ModelConfig, joint_loss)
from drkf.rkf_conv import RkfLayer, check_equivariance, reparameterize, rkf_forward
from drkf.tensor_core import (ConvKernel, avg_pool2, avg_pool2_backward, conv2d, conv2d_backward,
                              l2_normalize_channels, l2_normalize_channels_backward, relu, relu_backward)

from conftest import numeric_grad, record_criterion

SEED = 2024


def run_cli(*args) -> None:
    code = cli.main([*args, "--quiet"])
    assert code == 0, f"drkf {' '.join(args)} exited with {code}"


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small") / "ds"
    run_cli("gen-data", "--out", str(root), "--set", "data.n_train=8", "--set", "data.n_eval=20",
            "--deterministic")
    return root


# -- 1 ----------------------------------------------------------------------------

def test_criterion1_reparameterization_exact(small_dataset, tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for case in range(100):
        k = (3, 5)[case % 2]
        base = ConvKernel(rng.normal(size=(4, 3, k, k)).astype(np.float32), rng.normal(size=4).astype(np.float32))
        layer = RkfLayer(base, 4)
        x = rng.normal(size=(1, 3, 16, 16)).astype(np.float32)
        worst = max(worst, float(np.max(np.abs(conv2d(x, reparameterize(layer)) - rkf_forward(layer, x)))))

    # model level: eval on the unfused checkpoint versus eval after reparam
    ckpt, fused = tmp_path / "rkf.ckpt", tmp_path / "fused.ckpt"
    run_cli("train-base", "--data", str(small_dataset), "--variant", "rkf", "--out", str(ckpt),
            "--set", "train.iterations=20")
    run_cli("reparam", str(ckpt), str(fused))
    metric_gap = 0.0
    for mode in ("upright", "rotated", "sweep"):
        a, b = tmp_path / f"{mode}_unfused.csv", tmp_path / f"{mode}_fused.csv"
        extra = ["--set", "eval.sweep_step_deg=45", "--set", "eval.sweep_images=10"]
        run_cli("eval", "--ckpt", str(ckpt), "--data", str(small_dataset), "--mode", mode, "--out", str(a), *extra)
        run_cli("eval", "--ckpt", str(fused), "--data", str(small_dataset), "--mode", mode, "--out", str(b), *extra)
        va, vb = np.loadtxt(a, delimiter=",", skiprows=1), np.loadtxt(b, delimiter=",", skiprows=1)
        metric_gap = max(metric_gap, float(np.max(np.abs(va - vb))))

    # dense outputs of the explicit N-branch network versus the fused one
    unfused, _ = load_checkpoint(ckpt)
    reparamed, _ = load_checkpoint(fused)
    unfused.rkf_mode = "branched"
    x = np.concatenate([p.image_a for p in read_pairs(small_dataset, "rotated")[:8]]).astype(np.float32)
    ob, of = unfused(x), reparamed(x)
    dense_gap = max(float(np.max(np.abs(ob.score - of.score))), float(np.max(np.abs(ob.desc - of.desc))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and metric_gap <= 1e-4 and dense_gap <= 1e-4 and elapsed < 60
    record_criterion(1, ok, f"max |fused-branched| {worst:.2e} over 100 cases; dense model gap {dense_gap:.2e}; "
                            f"max metric gap {metric_gap:.2e}; {elapsed:.1f}s")
    assert worst <= 1e-4 and metric_gap <= 1e-4 and dense_gap <= 1e-4
    assert elapsed < 60


# -- 2 ----------------------------------------------------------------------------

def _stack(kernels, rotations):
    def f(x):
        h = x
        for i, k in enumerate(kernels):
            h = relu(rkf_forward(RkfLayer(k, rotations), h))
            if i == 0:
                h = avg_pool2(h)
        return h
    return f


def test_criterion2_equivariance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    # receptive field of conv3, pool, conv3, conv3 in input pixels
    margin = 1 + 1 + 2 + 2
    worst, control_hits = 0.0, 0
    for _ in range(100):
        kernels = []
        for ci, co in ((1, 4), (4, 4), (4, 3)):
            std = math.sqrt(2.0 / (ci * 9 * 4))
            kernels.append(ConvKernel(rng.normal(0, std, size=(co, ci, 3, 3)).astype(np.float32),
                                      rng.normal(0, 0.05, size=co).astype(np.float32)))
        x = rng.uniform(size=(1, 1, 64, 64)).astype(np.float32)
        for m in range(4):
            worst = max(worst, check_equivariance(_stack(kernels, 4), x, m, margin))
        # negative control: the same kernels as plain convolutions
        control_hits += check_equivariance(_stack(kernels, 1), x, 1, margin) >= 1e-3
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and control_hits >= 95 and elapsed < 60
    record_criterion(2, ok, f"max interior deviation {worst:.2e}; plain-conv control >= 1e-3 in "
                            f"{control_hits}/100; {elapsed:.1f}s")
    assert worst <= 1e-4 and control_hits >= 95 and elapsed < 60


# -- 3 ----------------------------------------------------------------------------

def test_criterion3_mofa_group_property():
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    cfg = ModelConfig(trunk_channels=(8, 8), head_channels=16, desc_dim=16, rate=4)
    worst = 0.0
    checksums_ok = True
    for case in range(50):
        model = Model(cfg, seed=case)
        before = model.checksum()
        teacher = MofaTeacher(model)
        x = rng.uniform(size=(1, 1, 32, 32)).astype(np.float32)
        m = case % 4
        ref = mofa_forward(teacher, x)
        rot = mofa_forward(teacher, np.rot90(x, m, axes=(2, 3)).copy())
        for got, want in ((rot.desc, ref.desc), (rot.score, ref.score)):
            worst = max(worst, float(np.max(np.abs(got - np.rot90(want, m, axes=(2, 3))))))
        checksums_ok &= model.checksum() == before
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and checksums_ok and elapsed < 60
    record_criterion(3, ok, f"max deviation {worst:.2e} over 50 cases; teacher checksum unchanged: {checksums_ok}; "
                            f"{elapsed:.1f}s")
    assert worst <= 1e-5 and checksums_ok and elapsed < 60


# -- 4 ----------------------------------------------------------------------------

def _rel_err(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-12))


def test_criterion4_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    errs = {}

    x = rng.normal(size=(1, 2, 5, 5))
    k = ConvKernel(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    probe = rng.normal(size=(1, 3, 5, 5))
    gx, gw, gb = conv2d_backward(x, k, probe)
    f = lambda: float(np.sum(conv2d(x, k) * probe))
    errs["conv"] = max(_rel_err(gx, numeric_grad(f, x)), _rel_err(gw, numeric_grad(f, k.weights)),
                       _rel_err(gb, numeric_grad(f, k.bias)))

    x = rng.normal(size=(1, 2, 4, 6))
    probe = rng.normal(size=(1, 2, 2, 3))
    errs["avg_pool2"] = _rel_err(avg_pool2_backward(probe), numeric_grad(lambda: float(np.sum(avg_pool2(x) * probe)), x))

    x = rng.normal(size=(1, 2, 4, 4))
    x[np.abs(x) < 0.05] = 0.3  # keep clear of the kink
    probe = rng.normal(size=x.shape)
    errs["relu"] = _rel_err(relu_backward(x, probe), numeric_grad(lambda: float(np.sum(relu(x) * probe)), x))

    x = rng.normal(size=(1, 4, 3, 3))
    probe = rng.normal(size=x.shape)
    errs["normalize"] = _rel_err(l2_normalize_channels_backward(x, probe),
                                 numeric_grad(lambda: float(np.sum(l2_normalize_channels(x) * probe)), x))

    n = 6
    fa, fb = rng.normal(size=(n, 4)) * 0.3, rng.normal(size=(n, 4)) * 0.3
    sa, sb = rng.uniform(0.1, 1, n), rng.uniform(0.1, 1, n)
    z = np.zeros((n, 2))
    batch = CorrespondenceBatch(z, z, fa, fb, sa, sb)
    _, grads = joint_loss(batch)
    fl = lambda: joint_loss(batch)[0]
    errs["joint_loss"] = max(_rel_err(g, numeric_grad(fl, arr, 1e-6))
                             for g, arr in zip(grads, (batch.f_a, batch.f_b, batch.s_a, batch.s_b)))

    a, b = rng.normal(size=(1, 3, 3, 3)), rng.normal(size=(1, 3, 3, 3))
    errs["desc_distill"] = _rel_err(desc_distill_loss(a, b)[1],
                                    numeric_grad(lambda: desc_distill_loss(a, b)[0], a, 1e-6))
    a, b = rng.uniform(size=(1, 1, 8, 8)), rng.uniform(size=(1, 1, 8, 8))
    errs["score_distill"] = _rel_err(score_distill_loss(a, b, 4)[1],
                                     numeric_grad(lambda: score_distill_loss(a, b, 4)[0], a, 1e-6))
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst <= 1e-3 and elapsed < 120
    record_criterion(4, ok, "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
                     + f"; {elapsed:.1f}s")
    assert worst <= 1e-3 and elapsed < 120


# -- 5 ----------------------------------------------------------------------------

def test_criterion5_loss_identities(small_dataset):
    a = np.zeros((1, 2, 4, 4))
    b = np.zeros((1, 2, 4, 4))
    a[:, 0], b[:, 1] = 1.0, 1.0
    sqrt2 = desc_distill_loss(a, b)[0]
    const = np.full((1, 1, 16, 16), 0.42)
    log16 = score_distill_loss(const, const, 4)[0]

    cfg = ModelConfig(trunk_channels=(8, 8), head_channels=16, desc_dim=16, rate=4)
    data = TrainData(read_train_images(small_dataset))
    teacher = MofaTeacher(Model(cfg, seed=1))
    dcfg = DistillConfig(lambda1=0.5, lambda2=2.0, iterations=25, seed=3, student="rkf")
    _, rep, _ = train_distilled(ModelConfig(variant="rkf", trunk_channels=(8, 8), head_channels=16, desc_dim=16,
                                            rate=4), teacher, data, dcfg)
    gap = max(abs(t - (o + 2.0 * (d + 0.5 * s))) for o, d, s, t in zip(rep.l_ori, rep.l_desc, rep.l_score, rep.total))
    ok = abs(sqrt2 - math.sqrt(2)) <= 1e-6 and abs(log16 - math.log(16)) <= 1e-6 and round(log16, 4) == 2.7726 \
        and gap <= 1e-6
    record_criterion(5, ok, f"orthogonal desc loss {sqrt2:.6f}; constant-map score loss {log16:.4f}; "
                            f"max decomposition gap {gap:.1e} over {len(rep)} steps")
    assert abs(sqrt2 - math.sqrt(2)) <= 1e-6
    assert abs(log16 - math.log(16)) <= 1e-6 and round(log16, 4) == 2.7726
    assert gap <= 1e-6


# -- 6 ----------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion6_desk_scale_ablation(tmp_path):
    t0 = time.perf_counter()
    root, out = tmp_path / "ds", tmp_path / "run"
    run_cli("gen-data", "--out", str(root), "--seed", "0", "--deterministic")
    run_cli("ablation", "--data", str(root), "--out", str(out), "--seed", "0", "--deterministic")
    elapsed = time.perf_counter() - t0
    res = cli.read_ablation_csv(out / "ablation.csv")
    assert len(res) == 10
    m = {key: v["mma_5px"] for key, v in res.items()}
    checks = {
        "a": m["base", "rotated"] < m["base", "upright"] - 0.10,
        "b": m["rkf", "rotated"] >= m["base", "rotated"],
        "c": m["mofa", "rotated"] >= m["base", "rotated"],
        "d": m["drkf", "rotated"] >= max(m["base", "rotated"], m["dbase", "rotated"]),
        "e": m["drkf", "upright"] >= 0.9 * m["base", "upright"],
    }
    table = " ".join(f"{v}/{c[0]}={m[v, c]:.3f}" for v in cli.ABLATION_VARIANTS for c in cli.CONDITIONS)
    ok = all(checks.values()) and elapsed < 15 * 60
    record_criterion(6, ok, f"orderings holding: {''.join(k for k, v in checks.items() if v) or 'none'} of abcde; "
                            f"mma@5px {table}; {elapsed:.0f}s")
    for k, v in checks.items():
        assert v, f"ordering ({k}) violated: {table}"
    assert elapsed < 15 * 60


# -- 7 ----------------------------------------------------------------------------

def test_criterion7_timing(tmp_path):
    t0 = time.perf_counter()
    path = tmp_path / "timing.csv"
    run_cli("bench", "--out", str(path), "--seed", "0")
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    ratio = {(r["variant"], int(r["size"])): float(r["ratio_to_base"]) for r in rows}
    sizes = (64, 256)
    fused = max(ratio["rkf_fused", s] for s in sizes)
    branched = min(ratio["rkf_branched", s] for s in sizes)
    mofa = min(ratio["mofa", s] for s in sizes)
    elapsed = time.perf_counter() - t0
    ok = fused <= 1.15 and branched >= 2.0 and mofa >= 2.0 and elapsed < 120
    record_criterion(7, ok, f"fused/base max {fused:.3f}; branched/base min {branched:.3f}; "
                            f"mofa/base min {mofa:.3f}; {elapsed:.1f}s")
    assert fused <= 1.15 and branched >= 2.0 and mofa >= 2.0 and elapsed < 120


# -- 8 ----------------------------------------------------------------------------

def _pipeline(root: Path) -> None:
    ds, run = root / "ds", root / "run"
    small = ["--set", "data.n_train=10", "--set", "data.n_eval=8", "--set", "train.iterations=30",
             "--set", "distill.iterations=10", "--set", "eval.sweep_step_deg=60", "--set", "eval.sweep_images=4",
             "--seed", "7", "--deterministic"]
    run_cli("gen-data", "--out", str(ds), *small)
    run_cli("train-base", "--data", str(ds), "--out", str(root / "base.ckpt"), "--report",
            str(root / "base.csv"), *small)
    run_cli("distill", "--data", str(ds), "--teacher", str(root / "base.ckpt"), "--student", "rkf",
            "--out", str(root / "drkf.ckpt"), "--report", str(root / "drkf.csv"), *small)
    run_cli("reparam", str(root / "drkf.ckpt"), str(root / "drkf_fused.ckpt"), *small)
    for mode in ("upright", "rotated", "sweep"):
        run_cli("eval", "--ckpt", str(root / "drkf_fused.ckpt"), "--data", str(ds), "--mode", mode,
                "--out", str(root / f"eval_{mode}.csv"), *small)
    run_cli("ablation", "--data", str(ds), "--out", str(run), *small)


def test_criterion8_determinism(tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    _pipeline(first)
    _pipeline(second)
    files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    artefacts = [f for f in files if f.suffix in (".ckpt", ".csv", ".pgm", ".manifest")]
    differing = [str(f) for f in files if (first / f).read_bytes() != (second / f).read_bytes()]
    n_ckpt = sum(f.suffix == ".ckpt" for f in artefacts)
    n_csv = sum(f.suffix == ".csv" for f in artefacts)
    ok = not differing and n_ckpt >= 7 and n_csv >= 8
    record_criterion(8, ok, f"{len(files)} files ({n_ckpt} checkpoints, {n_csv} CSVs) compared byte for byte; "
                            f"differing: {differing or 'none'}")
    assert not differing
    assert n_ckpt >= 7 and n_csv >= 8


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
