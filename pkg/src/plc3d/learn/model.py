"""Per-point MLP encoder plus affine vision-language adapter (numpy, manual backprop)."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InvalidInput, InvalidParams

CKPT_MAGIC = b"PLCW"
CKPT_VERSION = 1
INPUT_DIM = 9  # xyz, rgb, voxel mean rgb


@dataclass
class ModelParams:
    """Encoder layers (ReLU after each) followed by a linear adapter to dim d."""

    encoder: list[tuple[np.ndarray, np.ndarray]]
    adapter: tuple[np.ndarray, np.ndarray]
    logit_scale: float = 100.0
    names: list[str] = field(init=False, repr=False)

    def __post_init__(self):
        self.names = [f"enc{i}.{p}" for i in range(len(self.encoder)) for p in "wb"] + ["adapter.w", "adapter.b"]

    @property
    def dim(self):
        return self.adapter[0].shape[1]

    def arrays(self):
        """Flat ``{name: array}`` view sharing memory with the parameters."""
        out = {}
        for i, (w, b) in enumerate(self.encoder):
            out[f"enc{i}.w"] = w
            out[f"enc{i}.b"] = b
        out["adapter.w"], out["adapter.b"] = self.adapter
        return out

    def copy(self):
        return ModelParams(
            [(w.copy(), b.copy()) for w, b in self.encoder],
            (self.adapter[0].copy(), self.adapter[1].copy()),
            self.logit_scale,
        )

    def validate(self):
        if not self.logit_scale > 0:
            raise InvalidParams("logit_scale must be positive")
        for name, arr in self.arrays().items():
            if not np.isfinite(arr).all():
                raise InvalidParams(f"non-finite weights in {name}")


def init_params(dim, hidden=128, depth=3, seed=0, logit_scale=100.0, in_dim=INPUT_DIM):
    rng = np.random.default_rng(seed)
    encoder = []
    fan_in = in_dim
    for _ in range(depth):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, hidden))
        encoder.append((w, np.zeros(hidden)))
        fan_in = hidden
    adapter = (rng.normal(0.0, np.sqrt(1.0 / fan_in), (fan_in, dim)), np.zeros(dim))
    return ModelParams(encoder, adapter, float(logit_scale))


def point_inputs(scene, voxel_size=0.25):
    """Per-point network input: normalized xyz, rgb and mean rgb of the point's voxel."""
    pts = scene.points
    lo = pts.min(axis=0)
    extent = np.maximum(pts.max(axis=0) - lo, 1e-6)
    xyz = 2.0 * (pts - lo) / extent - 1.0
    keys = np.floor((pts - lo) / voxel_size).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    sums = np.stack([np.bincount(inv, weights=scene.colors[:, c]) for c in range(3)], axis=1)
    local = sums[inv] / counts[inv, None]
    return np.concatenate([xyz, scene.colors, local], axis=1)


def forward(params, x):
    """Returns unit-row features and the cache needed by :func:`backward`."""
    acts = [x]
    h = x
    for w, b in params.encoder:
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    y = h @ params.adapter[0] + params.adapter[1]
    norm = np.linalg.norm(y, axis=1, keepdims=True)
    norm = np.maximum(norm, 1e-12)
    f = y / norm
    return f, (acts, f, norm)


def backward(params, cache, grad_f):
    """Gradients of the loss w.r.t. every parameter given dL/df."""
    acts, f, norm = cache
    grad_y = (grad_f - f * np.sum(f * grad_f, axis=1, keepdims=True)) / norm
    grads = {
        "adapter.w": acts[-1].T @ grad_y,
        "adapter.b": grad_y.sum(axis=0),
    }
    g = grad_y @ params.adapter[0].T
    for i in range(len(params.encoder) - 1, -1, -1):
        w, _ = params.encoder[i]
        g = g * (acts[i + 1] > 0)
        grads[f"enc{i}.w"] = acts[i].T @ g
        grads[f"enc{i}.b"] = g.sum(axis=0)
        if i:
            g = g @ w.T
    return grads


def encode_points(params, scene, voxel_size=0.25):
    """Unit-normalized point features for every point of ``scene``."""
    params.validate()
    x = point_inputs(scene, voxel_size)
    if x.shape[1] != params.encoder[0][0].shape[0]:
        raise InvalidInput("encoder input width does not match point features")
    return forward(params, x)[0]


def save_params(params, path):
    """Binary ``PLCW`` checkpoint: header, layer shapes, logit scale, float32 weights."""
    layers = list(params.encoder) + [params.adapter]
    head = [struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(layers))]
    for w, _ in layers:
        head.append(struct.pack("<II", *w.shape))
    head.append(struct.pack("<d", params.logit_scale))
    body = [np.concatenate([w.ravel(), b.ravel()]).astype("<f4").tobytes() for w, b in layers]
    Path(path).write_bytes(b"".join(head + body))


def load_params(path):
    data = Path(path).read_bytes()
    magic, version, n = struct.unpack_from("<4sII", data, 0)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise InvalidInput(f"{path}: not a PLCW v{CKPT_VERSION} checkpoint")
    off = 12
    shapes = []
    for _ in range(n):
        shapes.append(struct.unpack_from("<II", data, off))
        off += 8
    (scale,) = struct.unpack_from("<d", data, off)
    off += 8
    layers = []
    for rows, cols in shapes:
        count = rows * cols + cols
        flat = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float64)
        off += 4 * count
        layers.append((flat[: rows * cols].reshape(rows, cols).copy(), flat[rows * cols :].copy()))
    params = ModelParams(layers[:-1], layers[-1], scale)
    params.validate()
    return params
