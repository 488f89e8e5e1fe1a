import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fabarf import field
from fabarf.field import ShapeError, TapeError
from oracles import central_diff, rel_err


def zero_model(widths):
    m = field.init(widths)
    for w in m.weights:
        w[...] = 0
    m.touch()
    return m


def test_zero_model_output():
    y, _ = field.forward(zero_model([7, 8, 4]), np.ones(7))
    assert np.allclose(y[:3], 0.5, atol=1e-15)
    assert y[3] == pytest.approx(np.log(2), abs=1e-15)


def test_forward_is_bitwise_deterministic():
    m = field.init([9, 16, 16, 4], seed=3)
    x = np.random.default_rng(0).standard_normal((20, 9))
    assert np.array_equal(field.forward(m, x)[0], field.forward(m, x)[0])


@given(st.integers(0, 2 ** 31), st.floats(1e-3, 1e3))
@settings(max_examples=50, deadline=None)
def test_output_ranges(seed, scale):
    rng = np.random.default_rng(seed)
    m = field.init([6, 8, 8, 4], seed=seed)
    y, _ = field.forward(m, scale * rng.standard_normal((10, 6)))
    assert np.all(np.isfinite(y))
    assert np.all(y[:, 3] >= 0)
    assert np.all((y[:, :3] >= 0) & (y[:, :3] <= 1))


def test_zero_upstream_gives_zero_gradients():
    m = field.init([5, 8, 4], seed=1)
    _, tape = field.forward(m, np.ones((3, 5)))
    grads, gx = field.backward(tape, np.zeros((3, 4)))
    assert all(not dw.any() and not db.any() for dw, db in grads)
    assert not gx.any()


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    for trial in range(10):
        m = field.init([6, 8, 8, 4], seed=trial)
        for b in m.biases:
            b += rng.normal(0, 0.2, b.shape)
        m.touch()
        x = rng.standard_normal((4, 6))
        up = rng.standard_normal((4, 4))
        _, tape = field.forward(m, x)
        grads, gx = field.backward(tape, up)

        def loss_of_input(v):
            return (field.forward(m, v.reshape(x.shape))[0] * up).sum()

        assert rel_err(gx, central_diff(loss_of_input, x.ravel()).reshape(x.shape)) < 1e-5
        for li, (dw, db) in enumerate(grads):
            for arr, g in ((m.weights[li], dw), (m.biases[li], db)):
                base = arr.copy()

                def loss_of_param(v, arr=arr, base=base):
                    arr[...] = v.reshape(base.shape)
                    m.touch()
                    return (field.forward(m, x)[0] * up).sum()

                fd = central_diff(loss_of_param, base.ravel()).reshape(base.shape)
                arr[...] = base
                m.touch()
                assert rel_err(g, fd) < 1e-5


def test_linear_model_input_gradient_closed_form():
    rng = np.random.default_rng(3)
    m = field.init([5, 4], seed=4)
    m.biases[0][:] = rng.standard_normal(4)
    m.touch()
    x = rng.standard_normal(5)
    up = rng.standard_normal(4)
    _, tape = field.forward(m, x)
    _, gx = field.backward(tape, up)
    raw = x @ m.weights[0] + m.biases[0]
    s = 1 / (1 + np.exp(-raw))
    head = np.r_[s[:3] * (1 - s[:3]), s[3]]  # sigmoid' for colour, softplus' = sigmoid for density
    assert np.allclose(gx, m.weights[0] @ (head * up), atol=1e-14)


def test_init_reproducible_and_seed_dependent():
    a, b, c = field.init([5, 8, 4], seed=1), field.init([5, 8, 4], seed=1), field.init([5, 8, 4], seed=2)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), c.flat())


def test_init_fan_in_scaling():
    rng = np.random.default_rng(4)
    variances = []
    for seed in range(1000):
        m = field.init([64, 32, 4], seed=seed)
        x = rng.standard_normal((8, 64))
        variances.append(np.var(x @ m.weights[0]))
    v = np.mean(variances)
    assert 0.25 <= v <= 4


def test_shape_errors():
    m = field.init([5, 8, 4])
    with pytest.raises(ShapeError):
        field.forward(m, np.ones(6))
    with pytest.raises(ShapeError):
        field.init([5, 8, 3])


def test_stale_tape_rejected():
    m = field.init([5, 8, 4])
    _, tape = field.forward(m, np.ones(5))
    m.weights[0] += 1
    m.touch()
    with pytest.raises(TapeError):
        field.backward(tape, np.ones(4))


def test_float32_compute_close_to_float64():
    rng = np.random.default_rng(5)
    m64 = field.init([9, 32, 32, 4], seed=5)
    m32 = m64.copy()
    m32.compute_dtype = np.float32
    x = rng.standard_normal((50, 9))
    up = rng.standard_normal((50, 4))
    y64, t64 = field.forward(m64, x)
    y32, t32 = field.forward(m32, x)
    assert np.abs(y64 - y32).max() < 1e-5
    g64, _ = field.backward(t64, up)
    g32, _ = field.backward(t32, up)
    assert all(dw.dtype == np.float64 for dw, _ in g32)
    assert max(rel_err(a[0], b[0]) for a, b in zip(g64, g32)) < 1e-4


def test_checkpoint_roundtrip(tmp_path):
    m = field.init([9, 16, 4], seed=11)
    path = tmp_path / "m.npz"
    field.save_checkpoint(m, path, note=np.array([1.5]))
    back, extra = field.load_checkpoint(path)
    assert back.widths == m.widths and back.seed == 11
    assert np.array_equal(back.flat(), m.flat())
    assert extra["note"][0] == 1.5


def test_checkpoint_version_checked(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, format_version=np.array(99), widths=np.array([3, 4]), seed=np.array(0),
             params=np.zeros(16))
    with pytest.raises(ValueError, match="version"):
        field.load_checkpoint(path)
