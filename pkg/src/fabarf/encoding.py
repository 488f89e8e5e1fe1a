"""Positional encodings and their Jacobians with respect to camera pose.

Feature layout for ``L`` bands (identity prefix enabled)::

    [x0 x1 x2 | sin(x) cos(x) for band 0 | ... | band L-1]

where band ``k`` uses frequency ``2**k`` and each sin/cos block is
coordinate-wise.  Three modes share this layout:

* ``plain_pe``: sinusoids of a point.
* ``annealed_pe``: same, with band ``k`` scaled by a coarse-to-fine weight.
* ``integrated_pe``: the expectation of the sinusoids under a diagonal
  Gaussian, i.e. band ``k`` scaled by ``exp(-4**k * diag(cov) / 2)``.

Pose enters through the ray direction ``d_w`` and the camera centre
``t_c2w``: a sample sits at ``t_c2w + x_t * d_w``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .sampling import FrustumGaussian
from .se3 import InvalidDirectionError

MODES = ("plain_pe", "annealed_pe", "integrated_pe")
# Lower clamp on the IPE attenuation factor.
_GAIN_FLOOR = 1e-300


@dataclass(frozen=True)
class EncodingConfig:
    L: int = 10
    mode: str = "integrated_pe"
    include_identity: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown encoding mode {self.mode!r}; expected one of {MODES}")
        if self.L < 0:
            raise ValueError("L must be >= 0")

    @property
    def dim(self) -> int:
        return 6 * self.L + (3 if self.include_identity else 0)

    @property
    def freqs(self) -> np.ndarray:
        return 2.0 ** np.arange(self.L)


@dataclass(frozen=True)
class AnnealState:
    """Coarse-to-fine progress: alpha ramps linearly from 0 to L over [start, end]."""

    alpha: float
    start: int = 0
    end: int = 1

    @classmethod
    def at_iteration(cls, it: int, start: int, end: int, L: int) -> "AnnealState":
        if end <= start:
            progress = 1.0 if it >= end else 0.0
        else:
            progress = min(max((it - start) / (end - start), 0.0), 1.0)
        return cls(alpha=L * progress, start=start, end=end)


def anneal_weights(state, L: int) -> np.ndarray:
    """Raised-cosine band weights w_k = (1 - cos(pi * clamp(alpha - k, 0, 1))) / 2."""
    alpha = state.alpha if isinstance(state, AnnealState) else float(state)
    x = np.clip(alpha - np.arange(L), 0.0, 1.0)
    return (1.0 - np.cos(np.pi * x)) / 2.0


def _band_weights(cfg: EncodingConfig, weights) -> np.ndarray:
    if weights is None:
        return np.ones(cfg.L)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (cfg.L,):
        raise ValueError(f"expected {cfg.L} band weights, got shape {w.shape}")
    return w


def _assemble(prefix, sin_part, cos_part, cfg):
    # sin/cos parts: (..., L, 3) -> (..., L*6) interleaved per band
    bands = np.stack([sin_part, cos_part], axis=-2)
    bands = bands.reshape(bands.shape[:-3] + (6 * cfg.L,))
    if cfg.include_identity:
        return np.concatenate([prefix, bands], axis=-1)
    return bands


def pe(x, cfg: EncodingConfig, weights=None) -> np.ndarray:
    """Positional encoding of points ``x`` (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    w = _band_weights(cfg, weights)[:, None]
    arg = cfg.freqs[:, None] * x[..., None, :]
    return _assemble(x, w * np.sin(arg), w * np.cos(arg), cfg)


def ipe_gain(diag_cov, cfg: EncodingConfig) -> np.ndarray:
    """exp(-4^k diag / 2), shape (..., L, 3), clamped at a tiny floor."""
    diag_cov = np.asarray(diag_cov, dtype=np.float64)
    return np.maximum(np.exp(-0.5 * (cfg.freqs ** 2)[:, None] * diag_cov[..., None, :]), _GAIN_FLOOR)


def ipe(frustum, cfg: EncodingConfig, weights=None, diag_cov=None) -> np.ndarray:
    """Integrated positional encoding.

    ``frustum`` is a :class:`FrustumGaussian`, or a bare mean array with
    ``diag_cov`` passed separately.
    """
    if isinstance(frustum, FrustumGaussian):
        mean, diag_cov = frustum.mean, frustum.diag_cov
    else:
        mean = np.asarray(frustum, dtype=np.float64)
    w = _band_weights(cfg, weights)[:, None]
    arg = cfg.freqs[:, None] * mean[..., None, :]
    gain = w * ipe_gain(diag_cov, cfg)
    return _assemble(mean, np.sin(arg) * gain, np.cos(arg) * gain, cfg)


@dataclass
class EncodedFeature:
    value: np.ndarray       # (D,)
    d_by_dw: np.ndarray     # (D, 3)
    d_by_t: np.ndarray      # (D, 3)


def _diag_blocks(sin_coef, cos_coef, cfg, prefix_coef):
    """Stack per-band diagonal 3x3 blocks into a (D, 3) Jacobian."""
    eye = np.eye(3)
    blocks = []
    if cfg.include_identity:
        blocks.append(prefix_coef * eye)
    for k in range(cfg.L):
        blocks.append(sin_coef[k][:, None] * eye)
        blocks.append(cos_coef[k][:, None] * eye)
    return np.concatenate(blocks, axis=0) if blocks else np.zeros((0, 3))


def pe_jacobians(x, x_t, cfg: EncodingConfig, weights=None) -> EncodedFeature:
    """PE value and its Jacobians for a sample at distance ``x_t`` along the ray."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    w = _band_weights(cfg, weights)[:, None]
    f = cfg.freqs[:, None]
    arg = f * x[None, :]
    d_sin = w * f * np.cos(arg)
    d_cos = -w * f * np.sin(arg)
    d_t = _diag_blocks(d_sin, d_cos, cfg, 1.0)
    return EncodedFeature(pe(x, cfg, weights), x_t * d_t, d_t)


def _ipe_jacobian_parts(frustum: FrustumGaussian, d_w, cfg: EncodingConfig, weights=None):
    """(value, mean-path d/dd_w, covariance-path d/dd_w, d/dt) for one frustum."""
    d_w = np.asarray(d_w, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(d_w) - 1.0) > 1e-6:
        raise InvalidDirectionError("d_w must be a unit vector")
    mean = np.asarray(frustum.mean, dtype=np.float64).reshape(3)
    diag = np.asarray(frustum.diag_cov, dtype=np.float64).reshape(3)
    mu_t = float(np.asarray(frustum.mu_t))
    w = _band_weights(cfg, weights)[:, None]
    f = cfg.freqs[:, None]
    arg = f * mean[None, :]
    gain = ipe_gain(diag, cfg)
    live = gain > _GAIN_FLOOR
    by_mean = _diag_blocks(w * f * np.cos(arg) * gain, -w * f * np.sin(arg) * gain, cfg, 1.0)
    half_f2 = 0.5 * f ** 2
    c_sin = np.where(live, -w * half_f2 * np.sin(arg) * gain, 0.0)
    c_cos = np.where(live, -w * half_f2 * np.cos(arg) * gain, 0.0)
    by_diag = _diag_blocks(c_sin, c_cos, cfg, 0.0)
    spread = float(np.asarray(frustum.sigma_t2)) - float(np.asarray(frustum.sigma_r2))
    cov_path = by_diag @ (spread * 2.0 * np.diag(d_w))
    value = ipe(mean, cfg, weights, diag_cov=diag)
    return value, mu_t * by_mean, cov_path, by_mean


def ipe_jacobians(frustum: FrustumGaussian, d_w, cfg: EncodingConfig,
                  full_chain: bool = False, weights=None) -> EncodedFeature:
    """IPE value and pose Jacobians for a single frustum.

    The mean path uses d(mu)/d(d_w) = mu_t I and d(mu)/dt = I.  With
    ``full_chain`` the covariance path through diag(cov), whose derivative
    in d_w is (sigma_t^2 - sigma_r^2) * 2 diag(d_w), is added to the
    rotation Jacobian.  mu_t, sigma_t^2 and sigma_r^2 are held fixed.
    """
    value, mean_path, cov_path, by_t = _ipe_jacobian_parts(frustum, d_w, cfg, weights)
    by_dw = mean_path + cov_path if full_chain else mean_path
    return EncodedFeature(value, by_dw, by_t)


def covariance_path(frustum: FrustumGaussian, d_w, cfg: EncodingConfig, weights=None) -> np.ndarray:
    """The covariance-path term of the rotation Jacobian on its own, (D, 3)."""
    return _ipe_jacobian_parts(frustum, d_w, cfg, weights)[2]


# ---------------------------------------------------------------------------
# Batched encode + vector-Jacobian product used by the renderer.


@dataclass
class EncodingCache:
    """Intermediates of a batched encode; band arrays are band-major (L, S, 3)."""

    cfg: EncodingConfig
    weights: np.ndarray
    sin: np.ndarray
    cos: np.ndarray
    x_t: np.ndarray                         # (S,)
    gain: Optional[np.ndarray] = None       # IPE attenuation, (L, S, 3)
    cov_scale: Optional[np.ndarray] = None  # (S, 3): (st2 - sr2) * 2 d_w


def _dyadic_sincos(x, L):
    """sin/cos of 2^k x for k < L by angle doubling, each (L, S, 3).

    Rounding error grows by about 2x per band (~1e-13 at k = 9).
    """
    s = np.empty((L,) + x.shape)
    c = np.empty_like(s)
    if L == 0:
        return s, c
    np.sin(x, out=s[0])
    np.cos(x, out=c[0])
    for k in range(1, L):
        np.multiply(s[k - 1], c[k - 1], out=s[k])
        s[k] *= 2.0
        np.multiply(s[k - 1], s[k - 1], out=c[k])
        c[k] *= -2.0
        c[k] += 1.0
    return s, c


def _dyadic_gain(diag_cov, L):
    """exp(-4^k diag / 2) for k < L by repeated squaring, (L, S, 3), floored."""
    g = np.empty((L,) + diag_cov.shape)
    if L == 0:
        return g
    np.exp(-0.5 * diag_cov, out=g[0])
    for k in range(1, L):
        np.multiply(g[k - 1], g[k - 1], out=g[k])
        g[k] *= g[k]
    return np.maximum(g, _GAIN_FLOOR, out=g)


def _assemble_into(prefix, sin_part, cos_part, cfg, scale=None):
    n = prefix.shape[0]
    out = np.empty((n, cfg.dim))
    off = 3 if cfg.include_identity else 0
    if off:
        out[:, :3] = prefix
    bands = out[:, off:].reshape(n, cfg.L, 2, 3)
    if scale is None:
        sp, cp = sin_part, cos_part
    else:
        sp, cp = sin_part * scale, cos_part * scale
    bands[:, :, 0] = sp.transpose(1, 0, 2)
    bands[:, :, 1] = cp.transpose(1, 0, 2)
    return out


def encode_points(x, x_t, cfg: EncodingConfig, weights=None):
    """Batched PE of points (S, 3) with distances (S,); returns (features, cache)."""
    x = np.asarray(x, dtype=np.float64)
    w = _band_weights(cfg, weights)
    s, c = _dyadic_sincos(x, cfg.L)
    feat = _assemble_into(x, s, c, cfg, None if weights is None else w[:, None, None])
    return feat, EncodingCache(cfg, w, s, c, np.asarray(x_t, dtype=np.float64))


def encode_gaussians(mean, diag_cov, mu_t, sigma_t2, sigma_r2, directions, cfg: EncodingConfig, weights=None):
    """Batched IPE of per-sample Gaussians; every argument has leading axis S."""
    mean = np.asarray(mean, dtype=np.float64)
    w = _band_weights(cfg, weights)
    s, c = _dyadic_sincos(mean, cfg.L)
    gain = _dyadic_gain(np.asarray(diag_cov, dtype=np.float64), cfg.L)
    scale = gain if weights is None else w[:, None, None] * gain
    feat = _assemble_into(mean, s, c, cfg, scale)
    cov_scale = (np.asarray(sigma_t2) - np.asarray(sigma_r2))[:, None] * 2.0 * np.asarray(directions)
    cache = EncodingCache(cfg, w, s, c, np.asarray(mu_t, dtype=np.float64), gain=gain, cov_scale=cov_scale)
    return feat, cache


def pullback(cache: EncodingCache, grad_feat, full_chain: bool = True):
    """Map dLoss/dfeature (S, D) to (dLoss/dd_w, dLoss/dt_c2w), each (S, 3)."""
    cfg = cache.cfg
    grad_feat = np.asarray(grad_feat, dtype=np.float64)
    n = grad_feat.shape[0]
    off = 3 if cfg.include_identity else 0
    g_b = grad_feat[:, off:].reshape(n, cfg.L, 2, 3)
    g_s = np.ascontiguousarray(g_b[:, :, 0].transpose(1, 0, 2))
    g_c = np.ascontiguousarray(g_b[:, :, 1].transpose(1, 0, 2))
    if cache.gain is not None:
        g_s *= cache.gain
        g_c *= cache.gain
    coef = (cache.weights * cfg.freqs)[:, None, None]
    grad_mean = (coef * (g_s * cache.cos - g_c * cache.sin)).sum(axis=0)
    if off:
        grad_mean += grad_feat[:, :3]
    grad_d = cache.x_t[:, None] * grad_mean
    if cache.gain is not None and full_chain:
        # clamped gains carry no derivative
        coef2 = (cache.weights * 0.5 * cfg.freqs ** 2)[:, None, None]
        inner = g_s * cache.sin + g_c * cache.cos
        inner *= cache.gain > _GAIN_FLOOR
        by_diag = -(coef2 * inner).sum(axis=0)
        grad_d += by_diag * cache.cov_scale
    return grad_d, grad_mean


def frequency_response(cfg: EncodingConfig, diag_sigma=None, anneal=None) -> np.ndarray:
    """Per-band gain applied by the encoding mode (diag scalarized by its mean)."""
    if cfg.mode == "integrated_pe":
        s = 0.0 if diag_sigma is None else float(np.mean(diag_sigma))
        if s < 0:
            raise ValueError("diag_sigma must be nonnegative")
        return np.maximum(np.exp(-0.5 * cfg.freqs ** 2 * s), _GAIN_FLOOR)
    if cfg.mode == "annealed_pe":
        if anneal is None:
            return np.ones(cfg.L)
        return anneal_weights(anneal, cfg.L)
    return np.ones(cfg.L)
