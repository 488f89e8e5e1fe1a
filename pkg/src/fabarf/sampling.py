"""Pixel rays, stratified depth bins and conical-frustum Gaussians.

Camera frame: +x right, +y down, +z forward (pinhole, OpenCV layout).
Pixel ``(col, row)`` is unprojected through its centre ``(col + 0.5, row + 0.5)``.
All arrays are batched; a single ray is a bundle of length one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .se3 import PoseSE3

# Radius of a disk with the same variance as a unit-width uniform pixel.
FOOTPRINT_SCALE = 2.0 / np.sqrt(12.0)


class InvalidIntrinsicsError(ValueError):
    pass


class InvalidRangeError(ValueError):
    pass


class InvalidIntervalError(ValueError):
    pass


def intrinsics_matrix(fx, fy, cx, cy) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


@dataclass
class Rays:
    origins: np.ndarray      # (R, 3) camera centres, world frame
    directions: np.ndarray   # (R, 3) unit d_w
    dirs_cam: np.ndarray     # (R, 3) unit d_c
    pixels: np.ndarray       # (R, 2) (col, row)
    radii: np.ndarray        # (R,) cone radius at unit distance

    def __len__(self):
        return len(self.origins)


def camera_directions(intrinsics, pixels) -> np.ndarray:
    """Unit camera-frame directions through pixel centres."""
    k = np.asarray(intrinsics, dtype=np.float64)
    if k.shape != (3, 3) or abs(np.linalg.det(k)) < 1e-12:
        raise InvalidIntrinsicsError("intrinsics must be an invertible 3x3 matrix")
    pix = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    homog = np.concatenate([pix + 0.5, np.ones((len(pix), 1))], axis=1)
    d = homog @ np.linalg.inv(k).T
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def footprint_radius(intrinsics) -> float:
    k = np.asarray(intrinsics, dtype=np.float64)
    return FOOTPRINT_SCALE / float(k[0, 0])


def make_rays(pose: PoseSE3, intrinsics, pixels) -> Rays:
    dirs_cam = camera_directions(intrinsics, pixels)
    dirs = dirs_cam @ pose.rotation.T
    # renormalize against rounding so |d_w| = 1 to the last ulp
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    n = len(dirs)
    return Rays(
        origins=np.broadcast_to(pose.translation, (n, 3)).copy(),
        directions=dirs,
        dirs_cam=dirs_cam,
        pixels=np.atleast_2d(np.asarray(pixels, dtype=np.float64)),
        radii=np.full(n, footprint_radius(intrinsics)),
    )


@dataclass
class DepthSamples:
    bounds: np.ndarray  # (..., N+1) ascending bin edges

    @property
    def n(self) -> int:
        return self.bounds.shape[-1] - 1

    @property
    def t0(self) -> np.ndarray:
        return self.bounds[..., :-1]

    @property
    def t1(self) -> np.ndarray:
        return self.bounds[..., 1:]

    @property
    def mids(self) -> np.ndarray:
        return 0.5 * (self.t0 + self.t1)

    @property
    def widths(self) -> np.ndarray:
        return self.t1 - self.t0


def stratified_depths(near, far, n, rng=None, batch=None) -> DepthSamples:
    """Uniform bin edges on [near, far]; ``rng`` jitters each interior edge.

    Interior edge i moves uniformly within half a bin width on either side,
    so ordering is preserved and the end points stay at near/far.  With
    ``batch`` set, each row gets its own jitter.
    """
    if not 0 < near < far:
        raise InvalidRangeError(f"need 0 < near < far, got near={near}, far={far}")
    if n < 1:
        raise InvalidRangeError("need at least one depth bin")
    edges = np.linspace(near, far, n + 1)
    shape = (n + 1,) if batch is None else (batch, n + 1)
    edges = np.broadcast_to(edges, shape).copy()
    if rng is not None and n > 1:
        h = (far - near) / n
        jitter = rng.uniform(-0.5, 0.5, size=shape[:-1] + (n - 1,)) * h
        edges[..., 1:-1] += jitter
    return DepthSamples(edges)


@dataclass
class FrustumGaussian:
    mean: np.ndarray       # (..., 3)
    diag_cov: np.ndarray   # (..., 3)
    mu_t: np.ndarray       # (...)
    sigma_t2: np.ndarray   # (...)
    sigma_r2: np.ndarray   # (...)


def frustum_moments(t0, t1, radius):
    """(mu_t, sigma_t^2, sigma_r^2) of a cone segment [t0, t1]."""
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    if np.any(t1 <= t0) or np.any(t0 <= 0):
        raise InvalidIntervalError("need 0 < t0 < t1 for every segment")
    mu_t = 0.5 * (t0 + t1)
    sigma_t2 = (t1 - t0) ** 2 / 12.0
    sigma_r2 = (np.asarray(radius) * mu_t) ** 2 / 4.0
    return mu_t, sigma_t2, sigma_r2


def gaussian_from_moments(origins, directions, mu_t, sigma_t2, sigma_r2) -> FrustumGaussian:
    """Broadcast ray (..., 3) against per-sample moments (..., N)."""
    o = np.asarray(origins)[..., None, :]
    d = np.asarray(directions)[..., None, :]
    dd = d * d
    mean = o + mu_t[..., None] * d
    diag = sigma_t2[..., None] * dd + sigma_r2[..., None] * (1.0 - dd)
    return FrustumGaussian(mean, diag, mu_t, sigma_t2, sigma_r2)


def frustum_gaussian(rays: Rays, t0, t1) -> FrustumGaussian:
    """Gaussians of the segments [t0, t1] along each ray.

    ``t0``/``t1`` have shape (R, N) (or anything broadcastable to it); the
    result carries a trailing sample axis.
    """
    radius = rays.radii[:, None]
    t0 = np.broadcast_to(t0, np.broadcast_shapes(np.shape(t0), (len(rays), 1)))
    t1 = np.broadcast_to(t1, t0.shape)
    mu_t, st2, sr2 = frustum_moments(t0, t1, radius)
    return gaussian_from_moments(rays.origins, rays.directions, mu_t, st2, sr2)
