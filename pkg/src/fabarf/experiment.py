"""Glue between configs, datasets, training runs, checkpoints and evaluation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import encoding as enc
from . import field as fm
from .config import Config, from_dict, parse_yaml, to_dict
from .evaluation import (ExperimentRecord, emit_report, psnr, registration_errors, ssim,
                         testtime_pose_refine)
from .optim import AdamState, TrainResult, train
from .renderer import CameraState, SamplingConfig, render_image
from .scene import AnalyticScene, Blob, Dataset, bake_dataset, perturb_poses
from .se3 import PoseSE3, procrustes_align

log = logging.getLogger(__name__)


def build_scene(cfg: Config) -> AnalyticScene:
    blobs = [Blob(tuple(b["center"]), tuple(b["scales"]), float(b["peak"]), tuple(b["color"]))
             for b in cfg.scene.blobs]
    return AnalyticScene(blobs, cfg.scene.near, cfg.scene.far)


def make_dataset(cfg: Config) -> Dataset:
    s = cfg.scene
    return bake_dataset(build_scene(cfg), s.image_size, s.samples_per_ray, s.seed, s.n_train,
                        s.n_test, s.radius, s.elevation, s.background)


def sampling_config(cfg: Config) -> SamplingConfig:
    return SamplingConfig(cfg.scene.near, cfg.scene.far, cfg.train.n_samples, tuple(cfg.scene.background))


def initial_poses(cfg: Config, poses):
    p = cfg.perturb
    return perturb_poses(poses, p.rot_std_deg, p.trans_std, p.seed, p.side)


# ---------------------------------------------------------------------------
# Checkpoints: field container plus poses and optimizer state


def _adam_arrays(prefix, state: AdamState):
    return {f"{prefix}_m": np.concatenate([m.ravel() for m in state.m]),
            f"{prefix}_v": np.concatenate([v.ravel() for v in state.v]),
            f"{prefix}_t": np.array(state.t, dtype=np.int64)}


def save_run_checkpoint(path, cfg: Config, it: int, model, cameras, adam=None) -> Path:
    extra = {
        "iteration": np.array(it, dtype=np.int64),
        "base_poses": np.stack([c.base.matrix() for c in cameras]),
        "twists": np.stack([c.twist for c in cameras]),
        "config_yaml": np.array(yaml.safe_dump(to_dict(cfg), sort_keys=False)),
    }
    if adam is not None:
        extra.update(_adam_arrays("adam_field", adam[0]))
        extra.update(_adam_arrays("adam_pose", adam[1]))
    path = Path(path)
    fm.save_checkpoint(model, path, **extra)
    return path


@dataclass
class RunCheckpoint:
    model: fm.FieldModel
    cameras: list
    iteration: int
    config: Config

    def poses(self) -> list[PoseSE3]:
        return [c.pose() for c in self.cameras]


def load_run_checkpoint(path) -> RunCheckpoint:
    model, extra = fm.load_checkpoint(path)
    missing = {"iteration", "base_poses", "twists", "config_yaml"} - set(extra)
    if missing:
        raise ValueError(f"{path}: not a training checkpoint (missing {sorted(missing)})")
    cfg = from_dict(Config, parse_yaml(str(extra["config_yaml"])))
    cams = [CameraState(PoseSE3.from_matrix(m), np.array(t))
            for m, t in zip(extra["base_poses"], extra["twists"])]
    return RunCheckpoint(model, cams, int(extra["iteration"]), cfg)


# ---------------------------------------------------------------------------
# Runs


def run_training(cfg: Config, ds: Dataset, out_dir=None, wall_clock: bool = True,
                 on_record=None) -> TrainResult:
    """Train on the dataset's train split from perturbed poses.

    With ``out_dir`` the records, summary, timing and final checkpoint are
    written there.  ``wall_clock=False`` zeroes the CSV wall-time column
    (the measured times go to ``timing.json``) so reruns compare byte-equal.
    """
    tr = ds.subset("train")
    tcfg = cfg.train
    init = initial_poses(cfg, tr.poses_gt)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def ckpt(it, model, cameras, adam):
        save_run_checkpoint(out / "checkpoint.npz", cfg, it, model, cameras, adam)

    def record_hook(rec: ExperimentRecord):
        if tcfg.mode == "annealed_pe" and tcfg.anneal is not None:
            start, end = tcfg.anneal_iters()
            alpha = enc.AnnealState.at_iteration(rec.iter, start, end, tcfg.L).alpha
            log.info("iter %d anneal alpha %.3f (%d active bands)", rec.iter, alpha, int(np.ceil(alpha)))
        if on_record is not None:
            on_record(rec)

    t0 = time.perf_counter()
    res = train(np.stack(tr.images), init, tr.camera.K, tcfg, sampling_config(cfg),
                gt_poses=tr.poses_gt, on_record=record_hook,
                checkpoint=ckpt if out is not None else None)
    if out is not None:
        emit_report(res.records, out, wall_clock=wall_clock)
        timing = {"total_seconds": time.perf_counter() - t0,
                  "record_seconds": {str(r.iter): r.wall_seconds for r in res.records}}
        (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    return res


def aligned_test_poses(estimated, reference, test_gt):
    """Ground-truth test poses mapped into the frame of the estimated poses."""
    inv = procrustes_align(estimated, reference).inverse()
    return [inv.apply_pose(p) for p in test_gt]


def evaluate(ck: RunCheckpoint, ds: Dataset, refine_steps: Optional[int] = None,
             cfg: Optional[Config] = None):
    """Registration errors on train views and refined test-view synthesis metrics.

    Returns ``(ExperimentRecord, per_view list of dicts)``.
    """
    cfg = cfg or ck.config
    steps = cfg.eval.refine_steps if refine_steps is None else refine_steps
    tr, te = ds.subset("train"), ds.subset("test")
    if len(tr.poses_gt) != len(ck.cameras):
        raise ValueError(f"checkpoint has {len(ck.cameras)} poses, dataset has {len(tr.poses_gt)} train views")
    est = ck.poses()
    rot, trans = registration_errors(est, tr.poses_gt)
    enc_cfg = ck.config.train.encoding
    samp = sampling_config(ck.config)
    K, cam = ds.camera.K, ds.camera
    train_psnr = float(np.mean([psnr(render_image(p, K, cam.width, cam.height, ck.model, enc_cfg, samp)[0], img)
                                for p, img in zip(est, tr.images)]))
    views = []
    if te.images:
        for p0, img in zip(aligned_test_poses(est, tr.poses_gt, te.poses_gt), te.images):
            pose = p0
            if steps > 0:
                pose, _ = testtime_pose_refine(ck.model, img, p0, steps, K, enc_cfg, samp, lr=cfg.eval.refine_lr)
            rgb, _ = render_image(pose, K, cam.width, cam.height, ck.model, enc_cfg, samp)
            views.append({"psnr": psnr(rgb, img), "ssim": ssim(rgb, img)})
    test_psnr = float(np.mean([v["psnr"] for v in views])) if views else float("nan")
    test_ssim = float(np.mean([v["ssim"] for v in views])) if views else float("nan")
    rec = ExperimentRecord(ck.iteration, 0.0, rot, trans, train_psnr, test_psnr, test_ssim,
                           ck.config.train.mode)
    return rec, views


def write_eval_report(rec: ExperimentRecord, views, out_dir, wall_clock=True):
    out = Path(out_dir)
    csv_path, summary = emit_report([rec], out, wall_clock=wall_clock)
    (out / "views.json").write_text(json.dumps(views, indent=2) + "\n")
    return csv_path, summary
