import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fabarf import encoding as enc
from fabarf import field
from fabarf.renderer import (CameraState, SamplingConfig, ShapeError, composite, composite_backward,
                             render_image, render_pixel, render_rays, rays_for_pixels)
from fabarf.sampling import intrinsics_matrix
from fabarf.scene import look_at
from fabarf.se3 import exp_map
from oracles import central_diff, composite_loop, rel_err

K = intrinsics_matrix(20.0, 20.0, 8.0, 8.0)


def constant_model(cfg, rgb, sigma):
    """Field whose output ignores the input: fixed colour and density."""
    m = field.init([cfg.dim, 4])
    m.weights[0][...] = 0
    rgb = np.asarray(rgb, float)
    m.biases[0][:3] = np.log(rgb / (1 - rgb))
    m.biases[0][3] = np.log(np.expm1(sigma))
    m.touch()
    return m


def test_empty_ray_shows_background():
    y = np.zeros((5, 4))
    y[:, :3] = 0.3
    res, _ = composite(y, np.linspace(2, 6, 6), background=[0.1, 0.2, 0.9])
    assert np.allclose(res.color, [0.1, 0.2, 0.9], atol=1e-15)


def test_opaque_first_sample_hides_the_rest():
    y = np.array([[0.2, 0.4, 0.6, 1e6], [1.0, 0.0, 0.0, 5.0], [0.0, 1.0, 0.0, 5.0]])
    res, _ = composite(y, [2.0, 3.0, 4.0, 5.0])
    assert np.allclose(res.color, [0.2, 0.4, 0.6], atol=1e-12)
    assert res.expected_depth == pytest.approx(2.5)


@pytest.mark.parametrize("mode", enc.MODES)
def test_constant_density_matches_closed_form(mode):
    cfg = enc.EncodingConfig(4, mode)
    rgb, sigma, bg = np.array([0.2, 0.5, 0.7]), 0.4, np.array([1.0, 1.0, 1.0])
    model = constant_model(cfg, rgb, sigma)
    samp = SamplingConfig(2.0, 6.0, 1024)
    rays = rays_for_pixels(np.eye(3), np.zeros(3), K, [[3.0, 5.0]])
    bw = enc.anneal_weights(2.5, 4) if mode == "annealed_pe" else None
    res, _ = render_rays(rays, model, cfg, samp, bw)
    opacity = 1 - np.exp(-sigma * 4.0)
    assert np.allclose(res.color[0], rgb * opacity + bg * (1 - opacity), atol=1e-3)
    # E[t] for an exponential distribution truncated to [near, far]
    n, f = 2.0, 6.0
    mean_t = n + 1 / sigma - (f - n) * np.exp(-sigma * (f - n)) / opacity
    assert abs(res.expected_depth[0] - mean_t) < 1e-3


@given(st.integers(0, 2 ** 31))
@settings(max_examples=100, deadline=None)
def test_weight_invariants_and_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    y = np.concatenate([rng.uniform(0, 1, (n, 3)), rng.exponential(2.0, (n, 1))], axis=1)
    bounds = np.sort(rng.uniform(2, 6, n + 1))
    bounds[-1] += 1e-3
    bg = rng.uniform(0, 1, 3)
    res, tape = composite(y, bounds, bg)
    assert np.all(res.weights >= 0)
    assert abs(res.weights.sum() + tape.trans_final[0] - 1) < 1e-12
    assert np.allclose(res.color, composite_loop(y[:, :3], y[:, 3], bounds, bg), atol=1e-12)


def test_bin_splitting_is_invariant():
    rng = np.random.default_rng(0)
    n = 12
    y = np.concatenate([rng.uniform(0, 1, (n, 3)), rng.exponential(1.0, (n, 1))], axis=1)
    bounds = np.linspace(2, 6, n + 1)
    fine = np.sort(np.concatenate([bounds, 0.5 * (bounds[1:] + bounds[:-1])]))
    a, _ = composite(y, bounds)
    b, _ = composite(np.repeat(y, 2, axis=0), fine)
    assert np.abs(a.color - b.color).max() < 1e-6


def test_sample_count_mismatch_rejected():
    with pytest.raises(ShapeError):
        composite(np.zeros((4, 4)), np.linspace(2, 6, 4))


def test_composite_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(1, 10))
        y = np.concatenate([rng.uniform(0, 1, (n, 3)), rng.uniform(0, 3, (n, 1))], axis=1)
        bounds = np.sort(rng.uniform(2, 6, n + 1))
        bg = rng.uniform(0, 1, 3)
        g = rng.standard_normal(3)
        _, tape = composite(y, bounds, bg)
        fd = central_diff(lambda v: composite(v.reshape(n, 4), bounds, bg)[0].color @ g, y.ravel())
        assert rel_err(composite_backward(tape, g), fd.reshape(n, 4)) < 1e-6


def test_transparent_ray_density_gradient():
    # with zero density everywhere d colour / d sigma_i = w_i (c_i - bg)
    n = 4
    y = np.zeros((n, 4))
    y[:, :3] = np.linspace(0, 1, n)[:, None]
    bounds = np.linspace(2, 6, n + 1)
    bg = np.array([0.5, 0.5, 0.5])
    _, tape = composite(y, bounds, bg)
    g = np.array([1.0, 0.0, 0.0])
    d = composite_backward(tape, g)
    assert np.allclose(d[:, :3], 0)
    assert np.allclose(d[:, 3], np.diff(bounds) * (y[:, 0] - bg[0]))


def _pixel_loss(cam, pixel, target, model, cfg, samp, bw):
    res, grad_fn = render_pixel(cam, K, pixel, model, cfg, samp, bw)
    resid = res.color - target
    return float(resid @ resid), resid, grad_fn


@pytest.mark.parametrize("mode", enc.MODES)
def test_render_pixel_twist_gradient(mode):
    rng = np.random.default_rng(enc.MODES.index(mode))
    worst = 0.0
    for _ in range(5):
        cfg = enc.EncodingConfig(3, mode)
        model = field.init([cfg.dim, 16, 16, 4], seed=int(rng.integers(1000)))
        samp = SamplingConfig(2.0, 6.0, 8)
        base = look_at(rng.uniform(3.5, 4.5) * np.array([1.0, 0.3, 0.4]) / np.linalg.norm([1, 0.3, 0.4]))
        cam = CameraState(base, rng.normal(0, 0.02, 6))
        pixel = rng.uniform(4, 12, 2)
        target = rng.uniform(0, 1, 3)
        bw = enc.anneal_weights(1.5, 3) if mode == "annealed_pe" else None
        _, resid, grad_fn = _pixel_loss(cam, pixel, target, model, cfg, samp, bw)
        _, g_twist = grad_fn(2 * resid)
        fd = central_diff(lambda tw: _pixel_loss(CameraState(base, tw), pixel, target, model, cfg, samp, bw)[0],
                          cam.twist, h=1e-7)
        worst = max(worst, rel_err(g_twist, fd))
    assert worst < 1e-4


def test_render_pixel_accepts_plain_pose():
    cfg = enc.EncodingConfig(2, "plain_pe")
    model = field.init([cfg.dim, 8, 4], seed=0)
    pose = exp_map([0.1, 0.0, -4.0, 0.0, 0.0, 0.0])
    a, _ = render_pixel(pose, K, [8, 8], model, cfg, SamplingConfig(n_samples=8))
    b, _ = render_pixel(CameraState(pose, np.zeros(6)), K, [8, 8], model, cfg, SamplingConfig(n_samples=8))
    assert np.array_equal(a.color, b.color)


def test_render_image_is_deterministic():
    cfg = enc.EncodingConfig(3, "integrated_pe")
    model = field.init([cfg.dim, 16, 4], seed=2)
    pose = look_at([4.0, 0.0, 1.0])
    samp = SamplingConfig(n_samples=8)
    a = render_image(pose, K, 16, 16, model, cfg, samp, chunk=50)
    b = render_image(pose, K, 16, 16, model, cfg, samp)
    assert a[0].shape == (16, 16, 3) and a[1].shape == (16, 16)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
