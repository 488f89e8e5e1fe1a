"""Analytic Gaussian-blob scenes, camera rigs, baked datasets and dataset I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .renderer import composite
from .sampling import camera_directions, intrinsics_matrix, stratified_depths
from .se3 import PoseSE3, exp_map


class DatasetError(ValueError):
    """Base class for dataset parse failures."""


class MissingFileError(DatasetError):
    pass


class ManifestError(DatasetError):
    pass


class DimensionError(DatasetError):
    pass


@dataclass(frozen=True)
class Blob:
    center: tuple
    scales: tuple
    peak: float
    color: tuple

    def __post_init__(self):
        if any(s <= 0 for s in self.scales):
            raise ValueError(f"blob scales must be positive, got {self.scales}")
        if self.peak <= 0:
            raise ValueError(f"blob peak density must be positive, got {self.peak}")


DEFAULT_BLOBS = (
    Blob((0.45, 0.0, 0.15), (0.35, 0.25, 0.3), 30.0, (0.9, 0.2, 0.15)),
    Blob((-0.3, 0.4, -0.1), (0.25, 0.4, 0.3), 30.0, (0.15, 0.75, 0.25)),
    Blob((-0.15, -0.45, 0.3), (0.3, 0.3, 0.22), 30.0, (0.2, 0.3, 0.9)),
)


@dataclass
class AnalyticScene:
    blobs: Sequence[Blob] = DEFAULT_BLOBS
    near: float = 2.0
    far: float = 6.0

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")


def density_field(scene: AnalyticScene, x):
    """(sigma, rgb) of the blob field at points x (..., 3).

    Colour is the density-weighted blend of blob colours, computed in log
    space so it stays defined where every density underflows.
    """
    x = np.asarray(x, dtype=np.float64)
    if not scene.blobs:
        return np.zeros(x.shape[:-1]), np.zeros(x.shape)
    centers = np.array([b.center for b in scene.blobs])
    scales = np.array([b.scales for b in scene.blobs])
    peaks = np.array([b.peak for b in scene.blobs])
    colors = np.array([b.color for b in scene.blobs])
    q = (((x[..., None, :] - centers) / scales) ** 2).sum(axis=-1)
    logw = np.log(peaks) - 0.5 * q
    sigma = np.exp(logw).sum(axis=-1)
    w = np.exp(logw - logw.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    return sigma, w @ colors


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> PoseSE3:
    """Camera-to-world pose at ``center`` with +z pointing at ``target``."""
    c = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - c
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return PoseSE3(np.stack([right, down, fwd], axis=1), c)


def sphere_rig(count: int, radius: float = 4.0, elevation=(-10.0, 50.0), seed: Optional[int] = None):
    """Cameras on a sphere looking at the origin.

    Without a seed, azimuths are evenly spaced from 0 and elevations follow
    a golden-ratio sweep of the range; with a seed each camera draws its
    azimuth within its own slot and its elevation uniformly.  Degrees.
    """
    if count < 1 or radius <= 0:
        raise ValueError("need count >= 1 and radius > 0")
    lo, hi = elevation
    if not -89.0 <= lo <= hi <= 89.0:
        raise ValueError("elevation range must lie within [-89, 89] degrees")
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    slots = np.arange(count)
    if seed is None:
        az = 2 * np.pi * slots / count
        el = np.radians(lo + (hi - lo) * ((slots * golden) % 1.0))
    else:
        # stratified azimuth keeps coverage even while staying random
        rng = np.random.default_rng(seed)
        az = 2 * np.pi * (slots + rng.uniform(0, 1, count)) / count
        el = np.radians(rng.uniform(lo, hi, count))
    centers = radius * np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)
    return [look_at(c) for c in centers]


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @property
    def K(self) -> np.ndarray:
        return intrinsics_matrix(self.fx, self.fy, self.cx, self.cy)

    @classmethod
    def default(cls, size: int = 64, focal_scale: float = 1.25) -> "Camera":
        f = focal_scale * size
        return cls(f, f, size / 2, size / 2, size, size)


@dataclass
class Dataset:
    images: list
    poses_gt: list
    camera: Camera
    splits: list = field(default_factory=list)

    def __post_init__(self):
        if not self.splits:
            self.splits = ["train"] * len(self.images)
        if not (len(self.images) == len(self.poses_gt) == len(self.splits)):
            raise DimensionError("images, poses and split tags differ in count")
        for i, img in enumerate(self.images):
            if img.shape != (self.camera.height, self.camera.width, 3):
                raise DimensionError(f"frame {i}: image shape {img.shape} does not match camera")

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def subset(self, split: str) -> "Dataset":
        idx = self.indices(split)
        return Dataset([self.images[i] for i in idx], [self.poses_gt[i] for i in idx],
                       self.camera, [split] * len(idx))


def render_analytic(scene: AnalyticScene, pose: PoseSE3, camera: Camera, samples_per_ray: int,
                    background=(1.0, 1.0, 1.0), chunk: int = 2048) -> np.ndarray:
    """Quadrature render of the analytic field at bin midpoints (no jitter)."""
    cols, rows = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    pix = np.stack([cols.ravel(), rows.ravel()], axis=1)
    dirs = camera_directions(camera.K, pix) @ pose.rotation.T
    depths = stratified_depths(scene.near, scene.far, samples_per_ray)
    mids = depths.mids
    out = np.empty((len(pix), 3))
    for s in range(0, len(pix), chunk):
        d = dirs[s:s + chunk]
        x = pose.translation + mids[None, :, None] * d[:, None, :]
        sigma, rgb = density_field(scene, x)
        y = np.concatenate([rgb, sigma[..., None]], axis=-1)
        res, _ = composite(y, depths.bounds, np.asarray(background))
        out[s:s + chunk] = res.color
    return out.reshape(camera.height, camera.width, 3)


def bake_dataset(scene: AnalyticScene, image_size: int = 64, samples_per_ray: int = 512,
                 seed: Optional[int] = 0, n_train: int = 16, n_test: int = 4,
                 radius: float = 4.0, elevation=(-10.0, 50.0), background=(1.0, 1.0, 1.0)) -> Dataset:
    camera = Camera.default(image_size)
    poses = sphere_rig(n_train + n_test, radius, elevation, seed)
    images = [render_analytic(scene, p, camera, samples_per_ray, background) for p in poses]
    total = n_train + n_test
    test_idx = set(np.linspace(0, total, n_test, endpoint=False).astype(int) + total // max(2 * n_test, 1)) if n_test else set()
    splits = ["test" if i in test_idx else "train" for i in range(total)]
    return Dataset(images, poses, camera, splits)


def perturb_poses(poses, rot_std_deg: float, trans_std: float, seed: int = 0, side: str = "left"):
    """Compose each pose with exp of a Gaussian twist.

    Per-axis standard deviations are ``std / sqrt(3)``, so the RMS rotation
    angle is ``rot_std_deg`` and the RMS translational twist norm is
    ``trans_std``.  ``side='left'`` applies the noise in the world frame.
    """
    if rot_std_deg < 0 or trans_std < 0:
        raise ValueError("standard deviations must be nonnegative")
    if side not in ("left", "right"):
        raise ValueError("side must be 'left' or 'right'")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((len(poses), 6))
    noise[:, :3] *= trans_std / np.sqrt(3)
    noise[:, 3:] *= np.radians(rot_std_deg) / np.sqrt(3)
    out = []
    for p, n in zip(poses, noise):
        e = exp_map(n)
        out.append(e.compose(p) if side == "left" else p.compose(e))
    return out


# ---------------------------------------------------------------------------
# On-disk format (see docs/formats.md)

MANIFEST = "manifest.json"


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_dataset(ds: Dataset, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (img, pose, split) in enumerate(zip(ds.images, ds.poses_gt, ds.splits)):
        name = f"{split}_{i:03d}.png"
        Image.fromarray(to_uint8(img)).save(root / name)
        frames.append({"file": name, "split": split,
                       "camera_to_world": [float(v) for v in pose.matrix().ravel()]})
    cam = ds.camera
    manifest = {
        "camera_intrinsics": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                              "width": cam.width, "height": cam.height},
        "frames": frames,
    }
    out = root / MANIFEST
    out.write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    mf = root / MANIFEST if root.is_dir() else root
    root = mf.parent
    if not mf.exists():
        raise MissingFileError(f"no manifest at {mf}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{mf}: invalid JSON ({exc})") from exc
    try:
        ci = manifest["camera_intrinsics"]
        camera = Camera(float(ci["fx"]), float(ci["fy"]), float(ci["cx"]), float(ci["cy"]),
                        int(ci["width"]), int(ci["height"]))
        frames = manifest["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{mf}: missing or malformed field ({exc})") from exc
    if not isinstance(frames, list) or not frames:
        raise ManifestError(f"{mf}: frames list is empty")
    images, poses, splits = [], [], []
    for i, fr in enumerate(frames):
        try:
            name = fr["file"]
            mat = np.asarray(fr["camera_to_world"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"frame {i}: malformed entry ({exc})") from exc
        if mat.shape != (16,) and mat.shape != (4, 4):
            raise ManifestError(f"frame {i} ({name}): camera_to_world must have 16 numbers, got shape {mat.shape}")
        mat = mat.reshape(4, 4)
        r = mat[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or np.linalg.det(r) <= 0:
            raise ManifestError(f"frame {i} ({name}): rotation block is not a proper rotation")
        f = root / name
        if not f.exists():
            raise MissingFileError(f"frame {i}: image file {f} not found")
        img = np.asarray(Image.open(f).convert("RGB"), dtype=np.float64) / 255.0
        if img.shape != (camera.height, camera.width, 3):
            raise DimensionError(f"frame {i} ({name}): image is {img.shape[1]}x{img.shape[0]}, "
                                 f"manifest says {camera.width}x{camera.height}")
        images.append(img)
        poses.append(PoseSE3(r, mat[:3, 3]))
        splits.append(fr.get("split", "train"))
    return Dataset(images, poses, camera, splits)
