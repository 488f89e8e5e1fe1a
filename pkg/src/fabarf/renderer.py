"""Volumetric compositing and the reverse pass down to pose twists.

Plain and annealed PE evaluate the field at bin midpoints; integrated PE
evaluates each bin's frustum Gaussian.  Pose gradients flow through the
ray direction d_w and camera centre t_c2w only; per-sample distances and
frustum variances are treated as pose-independent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoding as enc
from . import field
from .sampling import DepthSamples, Rays, camera_directions, footprint_radius, frustum_moments, stratified_depths
from .se3 import PoseSE3, exp_map_jacobian

DEPTH_EPS = 1e-10
WHITE = np.ones(3)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingConfig:
    near: float = 2.0
    far: float = 6.0
    n_samples: int = 32
    background: tuple = (1.0, 1.0, 1.0)


@dataclass
class RenderResult:
    color: np.ndarray          # (R, 3)
    expected_depth: np.ndarray # (R,)
    weights: np.ndarray        # (R, N)
    transmittance: np.ndarray  # (R, N)


@dataclass
class CompositeTape:
    rgb: np.ndarray
    widths: np.ndarray
    weights: np.ndarray
    trans_after: np.ndarray    # T_{i+1}
    trans_final: np.ndarray    # (R,)
    background: np.ndarray


def composite(samples, depths, background=WHITE):
    """Alpha-composite per-sample (RGB, density) along each ray.

    ``samples`` has shape (R, N, 4) (or (N, 4) for one ray) and ``depths``
    holds the N+1 bin edges per ray.  Returns ``(RenderResult, tape)``.
    """
    y = np.asarray(samples, dtype=np.float64)
    bounds = depths.bounds if isinstance(depths, DepthSamples) else np.asarray(depths, dtype=np.float64)
    single = y.ndim == 2
    if single:
        y = y[None]
    bounds = np.broadcast_to(bounds, (y.shape[0], bounds.shape[-1]))
    if bounds.shape[-1] != y.shape[1] + 1:
        raise ShapeError(f"{y.shape[1]} samples but {bounds.shape[-1] - 1} depth bins")
    bg = np.asarray(background, dtype=np.float64)
    rgb, sigma = y[..., :3], y[..., 3]
    widths = np.diff(bounds, axis=-1)
    mids = 0.5 * (bounds[:, 1:] + bounds[:, :-1])
    tau = sigma * widths
    alpha = -np.expm1(-tau)
    cum = np.cumsum(tau, axis=-1)
    trans_after = np.exp(-cum)
    trans = np.concatenate([np.ones((y.shape[0], 1)), trans_after[:, :-1]], axis=-1)
    w = trans * alpha
    t_final = trans_after[:, -1]
    color = (w[..., None] * rgb).sum(axis=1) + t_final[:, None] * bg
    depth = (w * mids).sum(axis=1) / np.maximum(w.sum(axis=1), DEPTH_EPS)
    result = RenderResult(color, depth, w, trans)
    tape = CompositeTape(rgb, widths, w, trans_after, t_final, bg)
    if single:
        result = RenderResult(color[0], depth[0], w[0], trans[0])
    return result, tape


def composite_backward(tape: CompositeTape, d_color):
    """dLoss/d(rgb_i, sigma_i) for every sample, shape (R, N, 4)."""
    g = np.asarray(d_color, dtype=np.float64)
    single = g.ndim == 1
    if single:
        g = g[None]
    cg = (tape.rgb * g[:, None, :]).sum(axis=-1)           # c_i . g
    wcg = tape.weights * cg
    # sum_{j>i} w_j (c_j . g)
    later = np.cumsum(wcg[:, ::-1], axis=1)[:, ::-1] - wcg
    bg_term = tape.trans_final * (g @ tape.background)
    out = np.empty(tape.rgb.shape[:2] + (4,))
    out[..., :3] = tape.weights[..., None] * g[:, None, :]
    out[..., 3] = tape.widths * (tape.trans_after * cg - later - bg_term[:, None])
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Full ray pipeline


@dataclass
class RayTape:
    enc_cache: enc.EncodingCache
    mlp_tape: field.Tape
    comp_tape: CompositeTape
    n_rays: int
    n_samples: int


def render_rays(rays: Rays, model: field.FieldModel, enc_cfg: enc.EncodingConfig,
                samp: SamplingConfig, band_weights=None, rng=None, depths=None):
    """Render a ray bundle; returns ``(RenderResult, RayTape)``."""
    n_rays, n = len(rays), samp.n_samples
    if depths is None:
        depths = stratified_depths(samp.near, samp.far, n, rng=rng, batch=n_rays)
    bounds = np.broadcast_to(depths.bounds, (n_rays, n + 1))
    t0, t1 = bounds[:, :-1], bounds[:, 1:]
    o = rays.origins[:, None, :]
    d = rays.directions[:, None, :]
    if enc_cfg.mode == "integrated_pe":
        mu_t, st2, sr2 = frustum_moments(t0, t1, rays.radii[:, None])
        mean = o + mu_t[..., None] * d
        dd = d * d
        diag = st2[..., None] * dd + sr2[..., None] * (1.0 - dd)
        dirs = np.broadcast_to(d, mean.shape)
        feat, cache = enc.encode_gaussians(
            mean.reshape(-1, 3), diag.reshape(-1, 3), mu_t.ravel(), st2.ravel(), sr2.ravel(),
            dirs.reshape(-1, 3), enc_cfg, band_weights)
    else:
        mids = 0.5 * (t0 + t1)
        x = o + mids[..., None] * d
        feat, cache = enc.encode_points(x.reshape(-1, 3), mids.ravel(), enc_cfg, band_weights)
    y, mlp_tape = field.forward(model, feat)
    result, comp_tape = composite(y.reshape(n_rays, n, 4), bounds, samp.background)
    return result, RayTape(cache, mlp_tape, comp_tape, n_rays, n)


def render_rays_backward(tape: RayTape, d_color, need_params=True, need_pose=True, full_chain=True):
    """Returns ``(param_grads, grad_dirs (R,3), grad_origins (R,3))``."""
    dy = composite_backward(tape.comp_tape, d_color).reshape(-1, 4)
    pgrads, dfeat = field.backward(tape.mlp_tape, dy, need_params=need_params)
    if not need_pose:
        return pgrads, None, None
    gd, gt = enc.pullback(tape.enc_cache, dfeat, full_chain=full_chain)
    gd = gd.reshape(tape.n_rays, tape.n_samples, 3).sum(axis=1)
    gt = gt.reshape(tape.n_rays, tape.n_samples, 3).sum(axis=1)
    return pgrads, gd, gt


# ---------------------------------------------------------------------------
# Pose parameterization: pose = base * exp(twist)


@dataclass
class CameraState:
    """A pose expressed as ``base * exp(twist)`` (body-frame correction)."""

    base: PoseSE3
    twist: np.ndarray

    def pose(self) -> PoseSE3:
        return self.base.compose(_exp_pose(self.twist))

    def with_jacobian(self):
        """(R, t, dR/dtwist (6,3,3), dt/dtwist (6,3)) of the composed pose."""
        r_d, t_d, dr, dt = exp_map_jacobian(self.twist)
        r0, t0 = self.base.rotation, self.base.translation
        return r0 @ r_d, r0 @ t_d + t0, np.einsum("ab,ibc->iac", r0, dr), dt @ r0.T


def _exp_pose(twist):
    r, t, _, _ = exp_map_jacobian(twist)
    return PoseSE3(r, t)


def twist_gradient(jac, grad_rot, grad_trans) -> np.ndarray:
    """Chain dL/dR (3,3) and dL/dt (3,) through the pose Jacobian to dL/dtwist."""
    _, _, dr, dt = jac
    return np.einsum("iab,ab->i", dr, grad_rot) + dt @ grad_trans


def rays_for_pixels(rot, trans, intrinsics, pixels):
    """Rays for a pose given as (R, t) arrays, carrying camera-frame directions."""
    dirs_cam = camera_directions(intrinsics, pixels)
    dirs = dirs_cam @ np.asarray(rot).T
    n = len(dirs)
    return Rays(np.broadcast_to(trans, (n, 3)).copy(), dirs, dirs_cam,
                np.atleast_2d(np.asarray(pixels, dtype=np.float64)),
                np.full(n, footprint_radius(intrinsics)))


def ray_grads_to_pose(rays: Rays, grad_dirs, grad_origins):
    """Per-ray direction/origin gradients -> (dL/dR, dL/dt) for one camera."""
    return grad_dirs.T @ rays.dirs_cam, grad_origins.sum(axis=0)


def render_pixel(camera, intrinsics, pixel, model, enc_cfg, samp, band_weights=None, rng=None,
                 full_chain=True):
    """Render one pixel; returns ``(RenderResult, grad_fn)``.

    ``camera`` is a :class:`CameraState` or a :class:`PoseSE3`.  ``grad_fn``
    maps dLoss/dcolor (3,) to ``(param_grads, dLoss/dtwist)``.
    """
    if isinstance(camera, PoseSE3):
        camera = CameraState(camera, np.zeros(6))
    jac = camera.with_jacobian()
    rays = rays_for_pixels(jac[0], jac[1], intrinsics, np.atleast_2d(pixel))
    res, tape = render_rays(rays, model, enc_cfg, samp, band_weights, rng)

    def grad_fn(d_color):
        pg, gd, go = render_rays_backward(tape, np.atleast_2d(d_color), full_chain=full_chain)
        g_rot, g_t = ray_grads_to_pose(rays, gd, go)
        return pg, twist_gradient(jac, g_rot, g_t)

    single = RenderResult(res.color[0], res.expected_depth[0], res.weights[0], res.transmittance[0])
    return single, grad_fn


def render_image(pose: PoseSE3, intrinsics, width, height, model, enc_cfg, samp,
                 band_weights=None, chunk=4096):
    """Deterministic (unjittered) full-image render; returns (rgb HxWx3, depth HxW)."""
    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    pix = np.stack([cols.ravel(), rows.ravel()], axis=1)
    rgb = np.empty((len(pix), 3))
    depth = np.empty(len(pix))
    for s in range(0, len(pix), chunk):
        rays = rays_for_pixels(pose.rotation, pose.translation, intrinsics, pix[s:s + chunk])
        res, _ = render_rays(rays, model, enc_cfg, samp, band_weights)
        rgb[s:s + chunk] = res.color
        depth[s:s + chunk] = res.expected_depth
    return rgb.reshape(height, width, 3), depth.reshape(height, width)
