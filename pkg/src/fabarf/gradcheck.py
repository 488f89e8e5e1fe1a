"""Finite-difference oracles for every analytic derivative in the pipeline.

Each oracle draws random inputs, evaluates the analytic derivative and a
central difference of the forward function, and reports the worst relative
error ``|a - f| / max(|a|, |f|, floor)`` (Frobenius norms) over its trials.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import encoding as enc
from . import field
from .renderer import (CameraState, SamplingConfig, composite, composite_backward, render_rays,
                       render_rays_backward, rays_for_pixels, ray_grads_to_pose, twist_gradient)
from .sampling import FrustumGaussian, frustum_moments, gaussian_from_moments, intrinsics_matrix
from .scene import look_at
from .se3 import exp_map

COMPONENT_TOL = 1e-5
END_TO_END_TOL = 1e-4
_FLOOR = 1e-10


@dataclass
class OracleResult:
    name: str
    trials: int
    worst_rel: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.trials == 0 or self.worst_rel <= self.tol


def rel_error(a, f) -> float:
    a, f = np.asarray(a, dtype=np.float64), np.asarray(f, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(f), _FLOOR)
    return float(np.linalg.norm(a - f) / den)


def central_diff(fn, x, h):
    """Jacobian (out..., n) of ``fn`` at the flat vector ``x``."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def _unit(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def _enc_cfg(rng, mode="plain_pe"):
    return enc.EncodingConfig(int(rng.integers(1, 7)), mode)


# ---------------------------------------------------------------------------
# Oracles


def check_pe(rng, trials, h=1e-6) -> float:
    worst = 0.0
    for _ in range(trials):
        cfg = _enc_cfg(rng)
        o, d = rng.uniform(-1, 1, 3), _unit(rng)
        t = rng.uniform(0.2, 1.5)
        jac = enc.pe_jacobians(o + t * d, t, cfg)
        fd_d = central_diff(lambda v: enc.pe(o + t * v, cfg), d, h)
        fd_o = central_diff(lambda v: enc.pe(v + t * d, cfg), o, h)
        worst = max(worst, rel_error(jac.d_by_dw, fd_d), rel_error(jac.d_by_t, fd_o))
    return worst


def _random_frustum(rng, cfg_radius=0.05):
    o, d = rng.uniform(-1, 1, 3), _unit(rng)
    t0 = rng.uniform(0.3, 1.0)
    t1 = t0 + rng.uniform(0.05, 0.6)
    mu_t, st2, sr2 = frustum_moments(np.array(t0), np.array(t1), rng.uniform(0.5, 2.0) * cfg_radius)
    g = gaussian_from_moments(o, d, np.atleast_1d(mu_t), np.atleast_1d(st2), np.atleast_1d(sr2))
    return o, d, mu_t, st2, sr2, FrustumGaussian(g.mean[0], g.diag_cov[0], mu_t, st2, sr2)


def check_ipe_approx(rng, trials, h=1e-6) -> float:
    """Mean path only: the covariance is frozen while d_w moves."""
    worst = 0.0
    for _ in range(trials):
        cfg = _enc_cfg(rng, "integrated_pe")
        o, d, mu_t, st2, sr2, fr = _random_frustum(rng)
        jac = enc.ipe_jacobians(fr, d, cfg, full_chain=False)
        fd_d = central_diff(lambda v: enc.ipe(o + mu_t * v, cfg, diag_cov=fr.diag_cov), d, h)
        fd_o = central_diff(lambda v: enc.ipe(v + mu_t * d, cfg, diag_cov=fr.diag_cov), o, h)
        worst = max(worst, rel_error(jac.d_by_dw, fd_d), rel_error(jac.d_by_t, fd_o))
    return worst


def check_ipe_full(rng, trials, h=1e-6) -> float:
    """Mean and covariance both follow d_w."""
    worst = 0.0
    for _ in range(trials):
        cfg = _enc_cfg(rng, "integrated_pe")
        o, d, mu_t, st2, sr2, fr = _random_frustum(rng, cfg_radius=0.3)

        def f(v):
            dd = v * v
            return enc.ipe(o + mu_t * v, cfg, diag_cov=st2 * dd + sr2 * (1.0 - dd))

        jac = enc.ipe_jacobians(fr, d, cfg, full_chain=True)
        worst = max(worst, rel_error(jac.d_by_dw, central_diff(f, d, h)))
    return worst


def check_mlp(rng, trials, h=1e-6) -> float:
    worst = 0.0
    for _ in range(trials):
        widths = [int(rng.integers(2, 9)), 8, 8, 4]
        model = field.init(widths, seed=int(rng.integers(1 << 30)))
        for b in model.biases:
            b += rng.normal(0, 0.3, b.shape)
        model.touch()
        x = rng.standard_normal((3, widths[0]))
        up = rng.standard_normal((3, 4))
        _, tape = field.forward(model, x)
        pgrads, gx = field.backward(tape, up)
        worst = max(worst, rel_error(gx, central_diff(
            lambda v: (field.forward(model, v.reshape(x.shape))[0] * up).sum(), x.ravel(), h).reshape(x.shape)))
        for li, (dw, db) in enumerate(pgrads):
            for arr, g in ((model.weights[li], dw), (model.biases[li], db)):
                base = arr.copy()

                def f(v, arr=arr, base=base):
                    arr[...] = v.reshape(base.shape)
                    model.touch()
                    return (field.forward(model, x)[0] * up).sum()

                fd = central_diff(f, base.ravel(), h).reshape(base.shape)
                arr[...] = base
                model.touch()
                worst = max(worst, rel_error(g, fd))
    return worst


def check_composite(rng, trials, h=1e-6) -> float:
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 9))
        y = np.concatenate([rng.uniform(0, 1, (n, 3)), rng.uniform(0, 3, (n, 1))], axis=1)
        bounds = np.sort(rng.uniform(2, 6, n + 1))
        bg = rng.uniform(0, 1, 3)
        g = rng.standard_normal(3)
        res, tape = composite(y, bounds, bg)
        analytic = composite_backward(tape, g)
        fd = central_diff(lambda v: composite(v.reshape(n, 4), bounds, bg)[0].color @ g, y.ravel(), h)
        worst = max(worst, rel_error(analytic, fd.reshape(n, 4)))
    return worst


def _pixel_loss(cam, K, pixels, target, model, cfg, samp, bw):
    jac = cam.with_jacobian()
    rays = rays_for_pixels(jac[0], jac[1], K, pixels)
    res, tape = render_rays(rays, model, cfg, samp, bw)
    resid = res.color - target
    pattern = tuple((a > 0).tobytes() for a in tape.mlp_tape.inputs[1:])
    return float((resid ** 2).sum()), resid, rays, tape, jac, pattern


def check_end_to_end(rng, trials, h=1e-6) -> float:
    """Photometric loss of a few pixels against the twist of one camera.

    A difference quotient that straddles a ReLU kink measures a one-sided
    mix of slopes; when the activation pattern differs between the two
    probes the step is shrunk until it agrees.
    """
    worst = 0.0
    modes = enc.MODES
    for i in range(trials):
        mode = modes[i % len(modes)]
        cfg = enc.EncodingConfig(int(rng.integers(2, 6)), mode)
        model = field.init([cfg.dim, 16, 16, 4], seed=int(rng.integers(1 << 30)))
        model.biases[-1][3] = rng.uniform(-1.0, 0.5)
        model.touch()
        samp = SamplingConfig(2.0, 6.0, int(rng.integers(4, 17)))
        K = intrinsics_matrix(20.0, 20.0, 8.0, 8.0)
        center = rng.uniform(3.5, 4.5) * _unit(rng)
        base = exp_map(rng.normal(0, 0.05, 6)).compose(look_at(center))
        cam = CameraState(base, rng.normal(0, 0.02, 6))
        pixels = rng.uniform(0, 16, (3, 2))
        target = rng.uniform(0, 1, (3, 3))
        bw = enc.anneal_weights(rng.uniform(0, cfg.L), cfg.L) if mode == "annealed_pe" else None
        _, resid, rays, tape, jac, _ = _pixel_loss(cam, K, pixels, target, model, cfg, samp, bw)
        _, gd, go = render_rays_backward(tape, 2 * resid, need_params=False)
        analytic = twist_gradient(jac, *ray_grads_to_pose(rays, gd, go))
        fd = np.empty(6)
        for k in range(6):
            step = h
            while True:
                e = np.zeros(6)
                e[k] = step
                lp, *_, pp = _pixel_loss(CameraState(base, cam.twist + e), K, pixels, target, model, cfg, samp, bw)
                lm, *_, pm = _pixel_loss(CameraState(base, cam.twist - e), K, pixels, target, model, cfg, samp, bw)
                if pp == pm or step < 1e-9:
                    break
                step /= 10
            fd[k] = (lp - lm) / (2 * step)
        worst = max(worst, rel_error(analytic, fd))
    return worst


ORACLES = (
    ("pe_jacobians", check_pe, COMPONENT_TOL),
    ("ipe_jacobians_approx", check_ipe_approx, COMPONENT_TOL),
    ("ipe_jacobians_full", check_ipe_full, COMPONENT_TOL),
    ("mlp_backward", check_mlp, COMPONENT_TOL),
    ("composite_backward", check_composite, COMPONENT_TOL),
    ("end_to_end_pose", check_end_to_end, END_TO_END_TOL),
)


def run(seed: int = 0, trials: int = 20) -> list[OracleResult]:
    """Run every oracle with ``trials`` random draws each."""
    if trials <= 0:
        warnings.warn("gradcheck with zero trials checks nothing", stacklevel=2)
    rng = np.random.default_rng(seed)
    out = []
    for name, fn, tol in ORACLES:
        t = time.perf_counter()
        worst = fn(rng, max(trials, 0)) if trials > 0 else 0.0
        out.append(OracleResult(name, max(trials, 0), worst, tol, time.perf_counter() - t))
    return out


def format_table(results) -> str:
    lines = [f"{'oracle':22s} {'trials':>6s} {'worst rel':>11s} {'tol':>8s} {'time':>7s}  result"]
    for r in results:
        lines.append(f"{r.name:22s} {r.trials:6d} {r.worst_rel:11.3e} {r.tol:8.0e} {r.seconds:6.1f}s  "
                     + ("pass" if r.passed else "FAIL"))
    return "\n".join(lines)
