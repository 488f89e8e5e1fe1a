"""Joint optimization of field parameters and camera twists."""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import encoding as enc
from . import field as fm
from .evaluation import ExperimentRecord, psnr_from_mse, registration_errors
from .renderer import CameraState, SamplingConfig, render_rays, render_rays_backward
from .sampling import DepthSamples, Rays, camera_directions, footprint_radius, stratified_depths
from .se3 import PoseSE3

log = logging.getLogger(__name__)

# rays per work unit; fixed so the reduction order never depends on worker count
CHUNK_RAYS = 256


class NonFiniteError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 20000
    rays_per_batch: int = 1024
    lr_field: tuple = (5e-4, 1e-4)
    lr_pose: tuple = (1e-3, 1e-5)
    # fractions of `iterations` over which alpha ramps 0 -> L (annealed_pe only)
    anneal: Optional[tuple] = (0.1, 0.5)
    mode: str = "integrated_pe"
    L: int = 10
    hidden: tuple = (128, 128, 128, 128)
    n_samples: int = 32
    seed: int = 0
    eval_every: int = 100
    full_chain: bool = True
    pose_update: str = "additive"
    compute_dtype: str = "float32"
    # ray-evaluation threads; 0 uses every available core
    workers: int = 0
    # 0 checkpoints only at the end (or on abort)
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("lr_field", "lr_pose"):
            pair = getattr(self, name)
            if len(pair) != 2 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in pair):
                raise ValueError(f"{name}: need two numbers (start, end), got {pair!r}")
            start, end = pair
            if not (start > 0 and end > 0 and end <= start):
                raise ValueError(f"{name}: need 0 < end <= start, got {start}, {end}")
        if self.pose_update not in ("additive", "multiplicative"):
            raise ValueError("pose_update must be 'additive' or 'multiplicative'")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError("compute_dtype must be float32 or float64")
        if self.workers < 0:
            raise ValueError("workers must be >= 0")
        if self.iterations < 0 or self.rays_per_batch < 1 or self.eval_every < 1:
            raise ValueError("iterations >= 0, rays_per_batch >= 1 and eval_every >= 1 required")
        enc.EncodingConfig(self.L, self.mode)

    @property
    def encoding(self) -> enc.EncodingConfig:
        return enc.EncodingConfig(self.L, self.mode)

    def anneal_iters(self):
        if self.anneal is None:
            return None
        a, b = self.anneal
        return int(round(a * self.iterations)), int(round(b * self.iterations))

    def band_weights(self, it: int):
        if self.mode != "annealed_pe" or self.anneal is None:
            return None
        start, end = self.anneal_iters()
        return enc.anneal_weights(enc.AnnealState.at_iteration(it, start, end, self.L), self.L)


def lr_at(it, start, end, total) -> float:
    """Exponential (geometric) interpolation from ``start`` to ``end``."""
    if total <= 0:
        return float(start)
    return float(start * (end / start) ** (min(max(it, 0), total) / total))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls([np.zeros_like(p, dtype=np.float64) for p in params],
                   [np.zeros_like(p, dtype=np.float64) for p in params])


def check_finite(grads, what="parameter") -> None:
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise NonFiniteError(f"non-finite gradient in {what} {i} ({bad} entries)")


def adam_step(state: AdamState, params, grads, lr: float) -> None:
    """In-place Adam update of ``params`` (list of float64 arrays)."""
    check_finite(grads)
    state.t += 1
    b1, b2 = state.betas
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Loss and gradients


@dataclass
class RayBatch:
    views: np.ndarray     # (R,) index into the camera list
    pixels: np.ndarray    # (R, 2) (col, row)
    target: np.ndarray    # (R, 3)


def sample_batch(images: np.ndarray, n: int, rng, views=None) -> RayBatch:
    """Uniformly sample ``n`` pixels across the (M, H, W, 3) image stack."""
    m, h, w, _ = images.shape
    pool = np.arange(m) if views is None else np.asarray(views)
    v = pool[rng.integers(0, len(pool), n)]
    cols = rng.integers(0, w, n)
    rows = rng.integers(0, h, n)
    return RayBatch(v, np.stack([cols, rows], axis=1), images[v, rows, cols])


@dataclass
class StepResult:
    loss: float
    grad_params: list
    grad_twists: np.ndarray
    color: np.ndarray


def loss_and_grads(batch: RayBatch, cameras, model: fm.FieldModel, enc_cfg: enc.EncodingConfig,
                   samp: SamplingConfig, intrinsics, band_weights=None, rng=None,
                   need_params=True, need_pose=True, full_chain=True, workers: int = 1,
                   pose_method: str = "analytic", fd_step: float = 1e-6) -> StepResult:
    """Mean squared RGB error over the batch and its gradients.

    ``cameras`` is a list of :class:`CameraState`; ``grad_twists`` has one
    row per camera and only receives the residuals of that camera's rays.
    ``pose_method='fd'`` replaces the analytic pose chain by central finite
    differences of the whole batch loss (slow, for verification).
    """
    n = len(batch.views)
    if n == 0:
        raise ValueError("empty ray batch")
    jacs = [c.with_jacobian() for c in cameras]
    rots = np.stack([j[0] for j in jacs])
    trans = np.stack([j[1] for j in jacs])
    dirs_cam = camera_directions(intrinsics, batch.pixels)
    radius = footprint_radius(intrinsics)
    depths = stratified_depths(samp.near, samp.far, samp.n_samples, rng=rng, batch=n)

    def run(sl):
        v = batch.views[sl]
        dc = dirs_cam[sl]
        rays = Rays(trans[v], np.einsum("rab,rb->ra", rots[v], dc), dc, batch.pixels[sl],
                    np.full(len(v), radius))
        res, tape = render_rays(rays, model, enc_cfg, samp, band_weights, depths=_rows(depths, sl))
        resid = res.color - batch.target[sl]
        d_color = resid * (2.0 / (3 * n))
        pg, gd, go = render_rays_backward(tape, d_color, need_params=need_params,
                                          need_pose=need_pose and pose_method == "analytic",
                                          full_chain=full_chain)
        return res.color, (resid ** 2).sum(), pg, gd, go

    slices = [slice(s, min(s + CHUNK_RAYS, n)) for s in range(0, n, CHUNK_RAYS)]
    workers = workers or os.cpu_count() or 1
    if workers > 1 and len(slices) > 1:
        with ThreadPoolExecutor(workers) as ex:
            outs = list(ex.map(run, slices))
    else:
        outs = [run(sl) for sl in slices]

    color = np.concatenate([o[0] for o in outs])
    loss = float(sum(o[1] for o in outs) / (3 * n))
    grad_params = None
    if need_params:
        grad_params = []
        for layer in zip(*[o[2] for o in outs]):
            grad_params.append(sum(l[0] for l in layer))
            grad_params.append(sum(l[1] for l in layer))
    grad_twists = np.zeros((len(cameras), 6))
    if need_pose and pose_method == "analytic":
        gd = np.concatenate([o[3] for o in outs])
        go = np.concatenate([o[4] for o in outs])
        g_rot = np.zeros((len(cameras), 3, 3))
        np.add.at(g_rot, batch.views, gd[:, :, None] * dirs_cam[:, None, :])
        g_t = np.zeros((len(cameras), 3))
        np.add.at(g_t, batch.views, go)
        for i in np.unique(batch.views):
            _, _, dr, dt = jacs[i]
            grad_twists[i] = np.einsum("iab,ab->i", dr, g_rot[i]) + dt @ g_t[i]
    elif need_pose:
        grad_twists = _fd_twist_grads(batch, cameras, model, enc_cfg, samp, intrinsics,
                                      band_weights, depths, fd_step)
    return StepResult(loss, grad_params, grad_twists, color)


def _rows(depths, sl):
    return DepthSamples(depths.bounds[sl])


def _fd_twist_grads(batch, cameras, model, enc_cfg, samp, intrinsics, band_weights, depths, h):
    out = np.zeros((len(cameras), 6))
    for i in np.unique(batch.views):
        for k in range(6):
            vals = []
            for sgn in (1, -1):
                cams = list(cameras)
                tw = cams[i].twist.copy()
                tw[k] += sgn * h
                cams[i] = CameraState(cams[i].base, tw)
                vals.append(batch_loss(batch, cams, model, enc_cfg, samp, intrinsics, band_weights, depths))
            out[i, k] = (vals[0] - vals[1]) / (2 * h)
    return out


def batch_loss(batch, cameras, model, enc_cfg, samp, intrinsics, band_weights=None, depths=None) -> float:
    """Forward-only batch MSE (the quantity ``loss_and_grads`` differentiates)."""
    dirs_cam = camera_directions(intrinsics, batch.pixels)
    rots = np.stack([c.pose().rotation for c in cameras])
    trans = np.stack([c.pose().translation for c in cameras])
    v = batch.views
    rays = Rays(trans[v], np.einsum("rab,rb->ra", rots[v], dirs_cam), dirs_cam, batch.pixels,
                np.full(len(v), footprint_radius(intrinsics)))
    res, _ = render_rays(rays, model, enc_cfg, samp, band_weights, depths=depths)
    return float(((res.color - batch.target) ** 2).mean())


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    model: fm.FieldModel
    cameras: list
    records: list
    aborted: Optional[str] = None

    def poses(self) -> list[PoseSE3]:
        return [c.pose() for c in self.cameras]


def build_model(cfg: TrainConfig) -> fm.FieldModel:
    widths = [cfg.encoding.dim, *cfg.hidden, 4]
    return fm.init(widths, seed=cfg.seed, compute_dtype=np.dtype(cfg.compute_dtype).type)


def train(images, init_poses, intrinsics, cfg: TrainConfig, samp: SamplingConfig,
          gt_poses=None, model: Optional[fm.FieldModel] = None,
          evaluator: Optional[Callable] = None, on_record: Optional[Callable] = None,
          checkpoint: Optional[Callable] = None) -> TrainResult:
    """Jointly optimize the field and one twist per training view.

    ``images`` is an (M, H, W, 3) stack aligned with ``init_poses``.  When
    ``gt_poses`` is given, each record carries Procrustes-aligned pose
    errors.  ``evaluator(model, cameras)`` may supply test metrics.
    Non-finite losses stop the run early with ``aborted`` set.
    ``checkpoint(it, model, cameras, (field_adam, pose_adam))`` is called
    every ``cfg.checkpoint_every`` iterations and once at the end, with the
    last good state when the run aborts.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) != len(init_poses):
        raise ValueError("need exactly one initial pose per training image")
    model = model if model is not None else build_model(cfg)
    cameras = [CameraState(p, np.zeros(6)) for p in init_poses]
    enc_cfg = cfg.encoding
    root = np.random.default_rng(cfg.seed)
    batch_rng, jitter_rng = [np.random.default_rng(s) for s in root.bit_generator.seed_seq.spawn(2)]
    params = model.params()
    opt_field = AdamState.for_params(params)
    twists = np.zeros((len(cameras), 6))
    opt_pose = AdamState.for_params([twists])
    records = []
    t_start = time.perf_counter()
    mse_acc, mse_n = 0.0, 0

    def make_record(it):
        rot_err = trans_err = float("nan")
        if gt_poses is not None and len(cameras) >= 3:
            rot_err, trans_err = registration_errors([c.pose() for c in cameras], gt_poses)
        train_psnr = psnr_from_mse(mse_acc / mse_n) if mse_n else float("nan")
        test_psnr = test_ssim = float("nan")
        if evaluator is not None:
            test_psnr, test_ssim = evaluator(model, cameras)
        rec = ExperimentRecord(it, time.perf_counter() - t_start, rot_err, trans_err,
                               train_psnr, test_psnr, test_ssim, cfg.mode)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        return rec

    make_record(0)
    aborted = None
    done = 0
    for it in range(cfg.iterations):
        bw = cfg.band_weights(it)
        batch = sample_batch(images, cfg.rays_per_batch, batch_rng)
        step = loss_and_grads(batch, cameras, model, enc_cfg, samp, intrinsics, bw, jitter_rng,
                              full_chain=cfg.full_chain, workers=cfg.workers)
        if not np.isfinite(step.loss):
            aborted = f"non-finite loss at iteration {it}"
            log.error(aborted)
            break
        try:
            check_finite(step.grad_params, "field parameter")
            check_finite([step.grad_twists], "pose block")
            adam_step(opt_field, params, step.grad_params,
                      lr_at(it, *cfg.lr_field, cfg.iterations))
            adam_step(opt_pose, [twists], [step.grad_twists],
                      lr_at(it, *cfg.lr_pose, cfg.iterations))
        except NonFiniteError as exc:
            aborted = f"iteration {it}: {exc}"
            log.error(aborted)
            break
        model.touch()
        if cfg.pose_update == "multiplicative":
            # fold the correction into the base pose; the twist restarts at zero
            cameras = [CameraState(CameraState(c.base, tw).pose(), np.zeros(6))
                       for c, tw in zip(cameras, twists)]
            twists[:] = 0.0
        else:
            cameras = [CameraState(c.base, tw.copy()) for c, tw in zip(cameras, twists)]
        mse_acc += step.loss
        mse_n += 1
        if (it + 1) % cfg.eval_every == 0 or it + 1 == cfg.iterations:
            rec = make_record(it + 1)
            mse_acc, mse_n = 0.0, 0
            log.info("iter %d loss %.3e rot %.3f deg trans %.4f", rec.iter, step.loss,
                     rec.rot_err_deg, rec.trans_err)
        done = it + 1
        if (checkpoint is not None and cfg.checkpoint_every
                and done % cfg.checkpoint_every == 0 and done < cfg.iterations):
            checkpoint(done, model, cameras, (opt_field, opt_pose))
    if checkpoint is not None:
        checkpoint(done, model, cameras, (opt_field, opt_pose))
    return TrainResult(model, cameras, records, aborted)
