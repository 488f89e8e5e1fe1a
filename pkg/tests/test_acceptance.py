"""Acceptance criteria 1-8.  Each test prints one PASS/FAIL line.

Criterion 6 trains three 20K-iteration runs on the default scene and takes
tens of minutes on one core.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from fabarf import cli, gradcheck
from fabarf import encoding as enc
from fabarf import field
from fabarf.config import load_config
from fabarf.encoding import EncodingConfig, covariance_path, frequency_response, ipe, ipe_jacobians, pe
from fabarf.evaluation import psnr, ssim, time_to_threshold
from fabarf.experiment import make_dataset, run_training
from fabarf.optim import TrainConfig
from fabarf.renderer import SamplingConfig, composite, render_rays, rays_for_pixels
from fabarf.sampling import FrustumGaussian, frustum_moments, gaussian_from_moments, intrinsics_matrix
from fabarf.scene import perturb_poses, sphere_rig
from fabarf.se3 import SimilarityTransform, log_map, procrustes_align, rotation_angle
from oracles import random_rotation, ssim_naive

ACCEPTANCE_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "acceptance.yaml"
TRANS_TARGET = 0.02


def test_criterion_1_gradcheck(criterion):
    t = time.perf_counter()
    results = gradcheck.run(seed=0, trials=100)
    elapsed = time.perf_counter() - t
    worst = {r.name: r.worst_rel for r in results}
    ok = all(r.passed for r in results) and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s for 100 trials each"
    assert criterion("1", ok, detail)


def _frustum(rng, equal=False):
    o, d = rng.uniform(-1, 1, 3), rng.standard_normal(3)
    d /= np.linalg.norm(d)
    t0 = rng.uniform(0.3, 2.0)
    mu_t, st2, sr2 = frustum_moments(t0, t0 + rng.uniform(0.05, 0.8), 0.2)
    if equal:
        sr2 = st2
    g = gaussian_from_moments(o, d, np.atleast_1d(mu_t), np.atleast_1d(st2), np.atleast_1d(sr2))
    return d, FrustumGaussian(g.mean[0], g.diag_cov[0], mu_t, st2, sr2)


def test_criterion_2_identities(criterion):
    rng = np.random.default_rng(0)
    mu = rng.uniform(-4, 4, (1000, 3))
    cfg10 = EncodingConfig(10, "integrated_pe")
    zero_cov = np.abs(ipe(mu, cfg10, diag_cov=np.zeros_like(mu)) - pe(mu, cfg10)).max()
    decomp = 0.0
    iso = True
    for _ in range(100):
        cfg = EncodingConfig(int(rng.integers(1, 11)), "integrated_pe")
        d, fr = _frustum(rng)
        full = ipe_jacobians(fr, d, cfg, full_chain=True).d_by_dw
        approx = ipe_jacobians(fr, d, cfg, full_chain=False).d_by_dw
        decomp = max(decomp, np.abs(full - covariance_path(fr, d, cfg) - approx).max())
        d, fr = _frustum(rng, equal=True)
        iso &= not covariance_path(fr, d, cfg).any()
    ok = zero_cov <= 1e-12 and decomp <= 1e-12 and iso
    assert criterion("2", ok, f"ipe(0)-pe {zero_cov:.1e}; full-cov-approx {decomp:.1e}; "
                               f"covariance path zero when isotropic: {iso}")


def test_criterion_3_low_pass(criterion):
    L = 10
    ipe_cfg, ann_cfg = EncodingConfig(L, "integrated_pe"), EncodingConfig(L, "annealed_pe")
    decreasing = all(np.all(np.diff(frequency_response(ipe_cfg, np.full(3, s))) < 0)
                     for s in (1e-6, 1e-4, 1e-3, 5e-3))
    train_cfg = TrainConfig(mode="integrated_pe")
    constant = all(train_cfg.band_weights(it) is None for it in range(0, 20000, 97))
    ends = (np.array_equal(frequency_response(ann_cfg, anneal=enc.AnnealState(0.0)), np.zeros(L))
            and np.array_equal(frequency_response(ann_cfg, anneal=enc.AnnealState(float(L))), np.ones(L)))
    ann_cfg_t = TrainConfig(mode="annealed_pe", iterations=20000)
    seen = {tuple(ann_cfg_t.band_weights(it)) for it in range(0, 20000, 500)}
    raised = all(np.array_equal(enc.anneal_weights(a, L),
                                (1 - np.cos(np.pi * np.clip(a - np.arange(L), 0.0, 1.0))) / 2)
                 for a in np.linspace(0, L, 41))
    ok = decreasing and constant and ends and len(seen) > 2 and raised
    assert criterion("3", ok, f"ipe gains decreasing {decreasing}; constant over iterations {constant}; "
                               f"w(0)=0 and w(L)=1 {ends}; {len(seen)} distinct annealed masks; "
                               f"raised cosine {raised}")


def test_criterion_4_renderer(criterion):
    cfg = EncodingConfig(4, "integrated_pe")
    model = field.init([cfg.dim, 4])
    model.weights[0][...] = 0
    rgb, sigma = np.array([0.2, 0.5, 0.7]), 0.4
    model.biases[0][:3] = np.log(rgb / (1 - rgb))
    model.biases[0][3] = np.log(np.expm1(sigma))
    model.touch()
    rays = rays_for_pixels(np.eye(3), np.zeros(3), intrinsics_matrix(20.0, 20.0, 8.0, 8.0), [[3.0, 5.0]])
    res, _ = render_rays(rays, model, cfg, SamplingConfig(2.0, 6.0, 1024))
    trans = np.exp(-sigma * 4.0)
    expected = rgb * (1 - trans) + trans
    rel = np.abs(res.color[0] - expected).max() / np.abs(expected).max()
    bg = np.array([0.1, 0.6, 0.3])
    empty, _ = composite(np.zeros((64, 4)), np.linspace(2, 6, 65), bg)
    ok = rel < 1e-3 and np.array_equal(empty.color, bg)
    assert criterion("4", ok, f"constant density rel err {rel:.1e} at N=1024; "
                               f"empty ray equals background exactly: {np.array_equal(empty.color, bg)}")


def test_criterion_5_procrustes_and_perturbation(criterion):
    rng = np.random.default_rng(0)
    ref = sphere_rig(10, seed=0)
    s = SimilarityTransform(1.7, random_rotation(rng), rng.uniform(-2, 2, 3))
    sim = procrustes_align([s.apply_pose(p) for p in ref], ref)
    inv = s.inverse()
    rec = max(abs(sim.scale - inv.scale), np.abs(sim.rotation - inv.rotation).max(),
              np.abs(sim.translation - inv.translation).max())
    base = sphere_rig(10_000, seed=1)
    noisy = perturb_poses(base, 14.9, 0.26, seed=2)
    rels = [q.compose(p.inverse()) for p, q in zip(base, noisy)]
    rot_rms = np.sqrt(np.mean([np.degrees(rotation_angle(r.rotation)) ** 2 for r in rels]))
    trans_rms = np.sqrt(np.mean([np.sum(log_map(r)[:3] ** 2) for r in rels]))
    ok = rec < 1e-9 and abs(rot_rms / 14.9 - 1) < 0.03 and abs(trans_rms / 0.26 - 1) < 0.03
    assert criterion("5", ok, f"similarity recovered to {rec:.1e}; perturbation rms {rot_rms:.2f} deg, "
                               f"{trans_rms:.4f} over 1e4 draws")


# -- criterion 6: joint optimization on the default scene ----------------------


@pytest.fixture(scope="module")
def mode_runs(tmp_path_factory):
    cfg = load_config(ACCEPTANCE_CONFIG)
    ds = make_dataset(cfg)
    out = {}
    for mode in ("integrated_pe", "plain_pe", "annealed_pe"):
        run_cfg = load_config(ACCEPTANCE_CONFIG, [f"train.mode={mode}"])
        t = time.perf_counter()
        res = run_training(run_cfg, ds, tmp_path_factory.mktemp(mode))
        out[mode] = (res.records, time.perf_counter() - t)
    return out


def _final(records):
    return records[-1].rot_err_deg, records[-1].trans_err


@pytest.mark.slow
def test_criterion_6a_integrated_converges(mode_runs, criterion):
    recs, secs = mode_runs["integrated_pe"]
    rot, trans = _final(recs)
    ok = rot < 1.0 and trans < TRANS_TARGET
    assert criterion("6a", ok, f"integrated_pe final rot {rot:.3f} deg (< 1), trans {trans:.4f} "
                                f"(< {TRANS_TARGET}); {recs[-1].iter} iterations in {secs / 60:.1f} min")


@pytest.mark.slow
def test_criterion_6b_plain_fails(mode_runs, criterion):
    rot_ipe, _ = _final(mode_runs["integrated_pe"][0])
    rot_plain, trans_plain = _final(mode_runs["plain_pe"][0])
    ratio = rot_plain / rot_ipe
    assert criterion("6b", ratio >= 3.0, f"plain_pe final rot {rot_plain:.3f} deg, trans {trans_plain:.4f}; "
                                         f"{ratio:.1f}x the integrated_pe rotation error (>= 3)")


@pytest.mark.slow
def test_criterion_6c_integrated_faster_than_annealed(mode_runs, criterion):
    ann_recs = mode_runs["annealed_pe"][0]
    it_ipe, _ = time_to_threshold(mode_runs["integrated_pe"][0], "trans_err", TRANS_TARGET)
    it_ann, _ = time_to_threshold(ann_recs, "trans_err", TRANS_TARGET)
    rot_ann, trans_ann = _final(ann_recs)
    # a run that never crosses needs more than its last iteration (right-censored)
    censored = it_ann is None
    bound = ann_recs[-1].iter if censored else it_ann
    ok = it_ipe is not None and it_ipe <= 0.8 * bound and rot_ann < 1.0
    ann_txt = f"> {bound} (never crossed)" if censored else str(it_ann)
    assert criterion("6c", ok, f"trans < {TRANS_TARGET} at iter {it_ipe} (integrated_pe) vs {ann_txt} "
                               f"(annealed_pe, final rot {rot_ann:.3f} deg < 1, trans {trans_ann:.4f}); "
                               f"need integrated <= 0.8x annealed")


# -- criteria 7 and 8 ------------------------------------------------------------


def test_criterion_7_determinism(tmp_path, criterion):
    small = ["scene.image_size=16", "scene.samples_per_ray=32", "scene.n_train=4", "scene.n_test=1",
             "train.hidden=[16, 16]", "train.n_samples=8", "train.rays_per_batch=64", "train.eval_every=10",
             "train.L=4"]
    assert cli.main(["gen-scene", "--out", str(tmp_path / "scene"), "-q", *small]) == 0
    blobs = []
    for name in ("a", "b"):
        assert cli.main(["train", "--data", str(tmp_path / "scene" / "dataset"), "--iters", "50",
                         "--deterministic", "--seed", "5", "--out", str(tmp_path / name), "-q", *small]) == 0
        blobs.append((tmp_path / name / "records.csv").read_bytes())
    ok = blobs[0] == blobs[1]
    assert criterion("7", ok, f"two deterministic runs, records.csv byte-equal: {ok} ({len(blobs[0])} bytes)")


def test_criterion_8_metrics(criterion):
    a = np.zeros((16, 16, 3))
    p = psnr(a, a + 0.1)
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (24, 20, 3))
    same = ssim(img, img)
    other = np.clip(img + rng.normal(0, 0.1, img.shape), 0, 1)
    gap = abs(ssim(img, other) - ssim_naive(img, other))
    ok = abs(p - 20.0) < 1e-12 and abs(same - 1.0) < 1e-12 and gap < 1e-8
    assert criterion("8", ok, f"psnr at mse 0.01 = {p:.12f} dB; ssim identical = {same:.12f}; "
                               f"ssim vs naive {gap:.1e}")
