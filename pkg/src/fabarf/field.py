"""Coordinate MLP mapping an encoded position to (RGB, density).

Hidden layers use ReLU; the 4-wide output is split into a sigmoid colour
head and a softplus density head.  Forward returns a tape that the reverse
pass consumes; parameters are kept in float64 and an optional float32
compute dtype speeds up large batches.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class FieldModel:
    widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int = 0
    compute_dtype: type = np.float64
    version: int = field(default=0, compare=False)
    _cast: tuple = field(default=(None, None, None), repr=False, compare=False)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def touch(self):
        """Mark parameters as modified (invalidates outstanding tapes)."""
        self.version += 1

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def copy(self) -> "FieldModel":
        return FieldModel(list(self.widths), [w.copy() for w in self.weights],
                          [b.copy() for b in self.biases], self.seed, self.compute_dtype)

    def _compute_params(self):
        ver, dtype, cached = self._cast
        if ver == self.version and dtype == self.compute_dtype:
            return cached
        cast = [(w.astype(self.compute_dtype), b.astype(self.compute_dtype))
                for w, b in zip(self.weights, self.biases)]
        self._cast = (self.version, self.compute_dtype, cast)
        return cast


def init(widths, seed: int = 0, compute_dtype=np.float64) -> FieldModel:
    """He-uniform weights, zero biases; ``widths`` = [in, hidden..., 4]."""
    widths = [int(w) for w in widths]
    if len(widths) < 2 or any(w < 1 for w in widths) or widths[-1] != 4:
        raise ShapeError(f"invalid widths {widths}: need [in, ..., 4] with positive entries")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return FieldModel(widths, weights, biases, seed, compute_dtype)


@dataclass
class Tape:
    model: FieldModel
    version: int
    inputs: list          # per-layer inputs (activations feeding each matmul)
    raw: np.ndarray       # (S, 4) pre-head output


def forward(model: FieldModel, feature):
    """Evaluate the field on features (S, D) or (D,).

    Returns ``(y, tape)`` with ``y[..., :3]`` the colour and ``y[..., 3]``
    the density.
    """
    x = np.asarray(feature)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.shape[-1] != model.in_dim:
        raise ShapeError(f"feature width {x.shape[-1]} does not match model input {model.in_dim}")
    h = x.astype(model.compute_dtype, copy=False)
    inputs = []
    layers = model._compute_params()
    for i, (w, b) in enumerate(layers):
        inputs.append(h)
        h = h @ w + b
        if i < len(layers) - 1:
            np.maximum(h, 0, out=h)
    raw = h
    y = np.empty(raw.shape, dtype=np.float64)
    y[:, :3] = sigmoid(raw[:, :3])
    y[:, 3] = softplus(raw[:, 3])
    tape = Tape(model, model.version, inputs, raw)
    return (y[0] if single else y), tape


def backward(tape: Tape, upstream, need_params: bool = True):
    """Reverse pass for dL/dy = ``upstream``.

    Returns ``(param_grads, input_grad)``; ``param_grads`` is a list of
    (dW, db) float64 pairs mirroring the model (None when ``need_params``
    is false).
    """
    if tape.version != tape.model.version:
        raise TapeError("tape is stale: model parameters changed after forward")
    g = np.asarray(upstream, dtype=np.float64)
    single = g.ndim == 1
    if single:
        g = g[None]
    if g.shape != tape.raw.shape:
        raise TapeError(f"upstream shape {g.shape} does not match tape output {tape.raw.shape}")
    raw = tape.raw
    s = sigmoid(raw[:, :3].astype(np.float64))
    dt = tape.model.compute_dtype
    d = np.empty(raw.shape, dtype=dt)
    d[:, :3] = g[:, :3] * s * (1.0 - s)
    d[:, 3] = g[:, 3] * sigmoid(raw[:, 3].astype(np.float64))
    layers = tape.model._compute_params()
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        a = tape.inputs[i]
        if need_params:
            grads[i] = ((a.T @ d).astype(np.float64), d.sum(axis=0, dtype=np.float64))
        d = d @ w.T
        if i > 0:
            # ReLU mask: inputs[i] is the post-activation of layer i-1
            d *= a > 0
    input_grad = d.astype(np.float64)
    if single:
        input_grad = input_grad[0]
    return (grads if need_params else None), input_grad


def save_checkpoint(model: FieldModel, path, **extra):
    """Write an ``.npz`` container (layout documented in docs/formats.md)."""
    payload = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "widths": np.array(model.widths, dtype=np.int64),
        "seed": np.array(model.seed, dtype=np.int64),
        "params": model.flat(),
    }
    for k, v in extra.items():
        payload[k] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def model_from_flat(widths, flat, seed=0) -> FieldModel:
    flat = np.asarray(flat, dtype=np.float64)
    weights, biases, pos = [], [], 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        n = fan_in * fan_out
        weights.append(flat[pos:pos + n].reshape(fan_in, fan_out).copy())
        pos += n
        biases.append(flat[pos:pos + fan_out].copy())
        pos += fan_out
    if pos != flat.size:
        raise ShapeError(f"parameter vector has {flat.size} entries, widths need {pos}")
    return FieldModel(list(int(w) for w in widths), weights, biases, int(seed))


def load_checkpoint(path):
    """Returns (model, extras dict)."""
    with np.load(Path(path), allow_pickle=False) as z:
        data = {k: z[k] for k in z.files}
    version = int(data.pop("format_version", -1))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    model = model_from_flat(data.pop("widths").tolist(), data.pop("params"), int(data.pop("seed")))
    return model, data
