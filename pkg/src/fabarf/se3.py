"""SE(3) poses, exponential/logarithm maps and similarity alignment.

Twist convention: ``twist = (rho, phi)``, translational part first and
rotational part (axis-angle, radians) last.  A pose stores the
camera-to-world rotation ``R_c2w`` and translation ``t_c2w``; the camera
centre in world coordinates is ``t_c2w``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Below this angle the trig coefficients switch to their Taylor series.
_SMALL_ANGLE = 1e-2
# log_map refuses rotations this close to pi (axis extraction is singular).
_PI_MARGIN = 1e-6


class DegenerateRotationError(ValueError):
    pass


class InvalidDirectionError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def _coeffs(theta):
    """A = sin/t, B = (1-cos)/t^2, C = (t-sin)/t^3 and their derivatives over t."""
    t2 = theta * theta
    if theta < _SMALL_ANGLE:
        a = 1 - t2 / 6 + t2 * t2 / 120 - t2 ** 3 / 5040
        b = 0.5 - t2 / 24 + t2 * t2 / 720 - t2 ** 3 / 40320
        c = 1 / 6 - t2 / 120 + t2 * t2 / 5040 - t2 ** 3 / 362880
        # (dA/dt)/t, (dB/dt)/t, (dC/dt)/t
        da = -1 / 3 + t2 / 30 - t2 * t2 / 840
        db = -1 / 12 + t2 / 180 - t2 * t2 / 6720
        dc = -1 / 60 + t2 / 1260 - t2 * t2 / 60480
        return a, b, c, da, db, dc
    s, co = np.sin(theta), np.cos(theta)
    a = s / theta
    b = (1 - co) / t2
    c = (theta - s) / (t2 * theta)
    da = (theta * co - s) / (t2 * theta)
    db = (theta * s - 2 * (1 - co)) / (t2 * t2)
    dc = (3 * s - 2 * theta - theta * co) / (t2 * t2 * theta)
    return a, b, c, da, db, dc


def so3_exp(phi):
    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    a, b, *_ = _coeffs(theta)
    k = skew(phi)
    return np.eye(3) + a * k + b * (k @ k)


def left_jacobian(phi):
    """SO(3) left Jacobian V(phi), maps rho to the translation of exp(twist)."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    _, b, c, *_ = _coeffs(theta)
    k = skew(phi)
    return np.eye(3) + b * k + c * (k @ k)


@dataclass(frozen=True)
class PoseSE3:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def twist(self) -> np.ndarray:
        return log_map(self)

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        if m.shape not in ((4, 4), (3, 4)):
            raise ValueError(f"expected a 3x4 or 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self * other (apply ``other`` first)."""
        return PoseSE3(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)


def exp_map(twist) -> PoseSE3:
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    rho, phi = twist[:3], twist[3:]
    if np.linalg.norm(phi) >= np.pi:
        warnings.warn("rotation angle >= pi; log_map will not invert this pose", stacklevel=2)
    return PoseSE3(so3_exp(phi), left_jacobian(phi) @ rho)


def so3_log(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    theta = float(np.arctan2(np.linalg.norm(w) / 2, (np.trace(r) - 1) / 2))
    if theta >= np.pi - _PI_MARGIN:
        raise DegenerateRotationError(f"rotation angle {theta:.9f} too close to pi")
    if theta < _SMALL_ANGLE:
        a = _coeffs(theta)[0]
        return w / (2 * a)
    return w * theta / (2 * np.sin(theta))


def log_map(pose: PoseSE3) -> np.ndarray:
    phi = so3_log(pose.rotation)
    rho = np.linalg.solve(left_jacobian(phi), pose.translation)
    return np.concatenate([rho, phi])


def exp_map_jacobian(twist):
    """Derivatives of exp(twist) with respect to each twist coordinate.

    Returns ``(rotation, translation, d_rotation, d_translation)`` where
    ``d_rotation[i]`` is dR/dtwist_i (3x3) and ``d_translation[i]`` is
    dt/dtwist_i (3,).
    """
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    rho, phi = twist[:3], twist[3:]
    theta = float(np.linalg.norm(phi))
    a, b, c, da, db, dc = _coeffs(theta)
    k = skew(phi)
    k2 = k @ k
    rot = np.eye(3) + a * k + b * k2
    v = np.eye(3) + b * k + c * k2
    d_rot = np.zeros((6, 3, 3))
    d_trans = np.zeros((6, 3))
    d_trans[:3] = v.T
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        ei = skew(e)
        dk2 = ei @ k + k @ ei
        # d(theta)/dphi_i = phi_i / theta, absorbed into the (dX/dt)/t coefficients
        d_rot[3 + i] = phi[i] * (da * k + db * k2) + a * ei + b * dk2
        dv = phi[i] * (db * k + dc * k2) + b * ei + c * dk2
        d_trans[3 + i] = dv @ rho
    return rot, v @ rho, d_rot, d_trans


def ray_direction_world(pose: PoseSE3, pixel_dir_cam) -> np.ndarray:
    d = np.asarray(pixel_dir_cam, dtype=np.float64)
    n = np.linalg.norm(d)
    if not np.isfinite(n) or n == 0.0:
        raise InvalidDirectionError("camera-space direction must be nonzero and finite")
    return pose.rotation @ (d / n)


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * rotation @ x + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("similarity scale must be positive")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply_points(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.scale * x @ self.rotation.T + self.translation

    def apply_pose(self, pose: PoseSE3) -> PoseSE3:
        return PoseSE3(self.rotation @ pose.rotation, self.apply_points(pose.center))

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)


def procrustes_align(estimated: Sequence[PoseSE3], reference: Sequence[PoseSE3]) -> SimilarityTransform:
    """Similarity mapping estimated camera centres onto reference centres (Umeyama)."""
    if len(estimated) != len(reference):
        raise AlignmentError("pose lists differ in length")
    if len(estimated) < 3:
        raise AlignmentError("need at least 3 poses to align")
    src = np.stack([p.center for p in estimated])
    dst = np.stack([p.center for p in reference])
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs ** 2).sum() / len(src)
    cov = xd.T @ xs / len(src)
    u, sv, vt = np.linalg.svd(cov)
    scale_ref = max(sv[0], 1e-300)
    if var_s <= 1e-24 or sv[1] <= 1e-10 * scale_ref:
        raise AlignmentError("camera centres are degenerate (collinear or coincident)")
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    rot = u @ np.diag(sign) @ vt
    scale = float((sv * sign).sum() / var_s)
    trans = mu_d - scale * rot @ mu_s
    return SimilarityTransform(scale, rot, trans)


def rotation_angle(r) -> float:
    r = np.asarray(r, dtype=np.float64)
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.arctan2(np.linalg.norm(w) / 2, (np.trace(r) - 1) / 2))


def pose_errors(aligned: Sequence[PoseSE3], reference: Sequence[PoseSE3]) -> tuple[float, float]:
    """Mean geodesic rotation error (degrees) and mean camera-centre distance."""
    if len(aligned) != len(reference):
        raise ValueError("pose lists differ in length")
    if not aligned:
        return 0.0, 0.0
    rot = [rotation_angle(a.rotation.T @ b.rotation) for a, b in zip(aligned, reference)]
    trans = [np.linalg.norm(a.center - b.center) for a, b in zip(aligned, reference)]
    return float(np.degrees(np.mean(rot))), float(np.mean(trans))
