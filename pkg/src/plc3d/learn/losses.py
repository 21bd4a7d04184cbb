"""Region-level contrastive losses with analytic gradients w.r.t. point features.

All losses take unit-row point features ``f`` (n_p x d) and caption
embeddings ``F`` (n_t x d); logits are ``scale * f @ F.T``.

* ``clip_style_loss``: average-pool each region, softmax over captions.
* ``pdc_loss``: per-point softmax, mean of point log-probabilities per region.
* ``rpdc_loss``: ``pdc`` with each region weighted by
  ``n_t * |region| / sum(|regions|)``.

Multi-region reductions are means over regions.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInput
from ..geom import IGNORE


@dataclass
class LossResult:
    value: float
    grad_points: np.ndarray


@dataclass
class LossInstance:
    point_features: np.ndarray  # (n_p, d)
    text_embeddings: np.ndarray  # (n_t, d) caption bank rows
    regions: list[tuple[np.ndarray, int]]  # (point index set, caption column)
    check_norms: bool = True

    def __post_init__(self):
        self.point_features = np.asarray(self.point_features, dtype=np.float64)
        self.text_embeddings = np.asarray(self.text_embeddings, dtype=np.float64)
        self.regions = [(np.asarray(idx, dtype=np.int64), int(t)) for idx, t in self.regions]
        n_p, d = self.point_features.shape
        n_t, d2 = self.text_embeddings.shape
        if d != d2:
            raise InvalidInput(f"feature dim {d} != caption dim {d2}")
        if not self.regions:
            raise InvalidInput("loss instance has no regions")
        for idx, t in self.regions:
            if idx.size == 0:
                raise InvalidInput("region with empty point set")
            if idx.min() < 0 or idx.max() >= n_p:
                raise InvalidInput("region point index out of range")
            if not 0 <= t < n_t:
                raise InvalidInput(f"caption target {t} out of range (n_t={n_t})")
        if self.check_norms:
            for name, arr in (("point_features", self.point_features), ("text_embeddings", self.text_embeddings)):
                if not np.allclose(np.linalg.norm(arr, axis=1), 1.0, atol=1e-6, rtol=0):
                    raise InvalidInput(f"{name} rows must be unit-norm")
        self._index = _RegionIndex(self.regions)

    @property
    def n_t(self):
        return len(self.text_embeddings)

    @classmethod
    def from_bank(cls, point_features, bank, pairs):
        regions = [(p.point_indices, int(t)) for p, t in zip(pairs, bank.target_index)]
        return cls(point_features, bank.embeddings, regions)

    def with_features(self, f):
        # regions were validated at construction; skip re-validation
        clone = copy.copy(self)
        clone.point_features = f
        clone.check_norms = False
        return clone


class _RegionIndex:
    """Flattened (region, point) entries shared by all losses."""

    def __init__(self, regions):
        self.idx = np.concatenate([r[0] for r in regions])
        self.sizes = np.array([r[0].size for r in regions])
        self.region_of = np.repeat(np.arange(len(regions)), self.sizes)
        self.targets = np.array([r[1] for r in regions])
        self.starts = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])
        self.used = np.unique(self.idx)
        self.local = np.searchsorted(self.used, self.idx)
        self.entry_t = self.targets[self.region_of]


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def clip_style_loss(inst, scale, with_grad=True):
    f, F = inst.point_features, inst.text_embeddings
    ri = inst._index
    idx, region_of, sizes, targets = ri.idx, ri.region_of, ri.sizes, ri.targets
    n_r = len(sizes)
    pooled = np.add.reduceat(f[idx], ri.starts, axis=0) / sizes[:, None]
    logp = _log_softmax(scale * pooled @ F.T)
    value = -logp[np.arange(n_r), targets].mean()
    if not with_grad:
        return LossResult(float(value), None)
    dz = np.exp(logp)
    dz[np.arange(n_r), targets] -= 1.0
    dpooled = scale * (dz / n_r) @ F
    grad = np.zeros_like(f)
    np.add.at(grad, idx, (dpooled / sizes[:, None])[region_of])
    return LossResult(float(value), grad)


def _weighted_pdc(inst, scale, weights, with_grad=True):
    f, F = inst.point_features, inst.text_embeddings
    ri = inst._index
    region_of, sizes, used, local, entry_t = ri.region_of, ri.sizes, ri.used, ri.local, ri.entry_t
    n_r = len(sizes)
    logp = _log_softmax(scale * f[used] @ F.T)
    per_entry = -logp[local, entry_t]
    coef = (weights / (n_r * sizes))[region_of]
    value = float(np.sum(coef * per_entry))
    if not with_grad:
        return LossResult(value, None)
    dz = np.zeros_like(logp)
    np.add.at(dz, local, coef[:, None] * np.exp(logp[local]))
    np.add.at(dz, (local, entry_t), -coef)
    grad = np.zeros_like(f)
    grad[used] = scale * dz @ F
    return LossResult(value, grad)


def pdc_loss(inst, scale, with_grad=True):
    return _weighted_pdc(inst, scale, np.ones(len(inst.regions)), with_grad)


def region_weights(inst):
    """Region-aware factors ``n_t * |region_r| / sum_i |region_i|``."""
    sizes = np.array([r[0].size for r in inst.regions], dtype=np.float64)
    return inst.n_t * sizes / sizes.sum()


def rpdc_loss(inst, scale, with_grad=True):
    return _weighted_pdc(inst, scale, region_weights(inst), with_grad)


LOSSES = {
    "clip_style": clip_style_loss,
    "pdc": pdc_loss,
    "rpdc": rpdc_loss,
}


def supervised_ce_loss(point_features, class_embeddings, labels, scale, with_grad=True):
    """Mean softmax cross-entropy over labelled points; IGNORE points are skipped."""
    f = np.asarray(point_features, dtype=np.float64)
    E = np.asarray(class_embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(f),):
        raise InvalidInput("one label per point required")
    bad = (labels != IGNORE) & ((labels < 0) | (labels >= len(E)))
    if bad.any():
        raise InvalidInput("label out of range for the given class embeddings")
    keep = np.flatnonzero(labels != IGNORE)
    grad = np.zeros_like(f)
    if keep.size == 0:
        return LossResult(0.0, grad)
    y = labels[keep]
    logp = _log_softmax(scale * f[keep] @ E.T)
    value = -logp[np.arange(keep.size), y].mean()
    if not with_grad:
        return LossResult(float(value), None)
    dz = np.exp(logp)
    dz[np.arange(keep.size), y] -= 1.0
    grad[keep] = scale * (dz / keep.size) @ E
    return LossResult(float(value), grad)


def finite_diff_check(loss_op, inst, scale, step=1e-4, max_coords=10_000, seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``loss_op(inst, scale, with_grad=True)`` must return a :class:`LossResult`. The error is
    ``max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf)`` over the
    checked coordinates (0 when both gradients vanish). Above ``max_coords``
    coordinates a seeded subsample is checked.
    """
    if not step > 0:
        raise InvalidInput("finite-difference step must be positive")
    f0 = inst.point_features
    analytic = loss_op(inst, scale).grad_points
    n = f0.size
    coords = np.arange(n)
    if n > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(n, max_coords, replace=False))
    numeric = np.empty(len(coords))
    flat = f0.ravel()
    for k, c in enumerate(coords):
        plus = flat.copy()
        plus[c] += step
        minus = flat.copy()
        minus[c] -= step
        lp = loss_op(inst.with_features(plus.reshape(f0.shape)), scale, with_grad=False).value
        lm = loss_op(inst.with_features(minus.reshape(f0.shape)), scale, with_grad=False).value
        numeric[k] = (lp - lm) / (2 * step)
    a = analytic.ravel()[coords]
    denom = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if denom == 0.0:
        return 0.0
    return float(np.abs(a - numeric).max() / denom)


def supervised_as_loss_op(class_embeddings, labels):
    """Adapt :func:`supervised_ce_loss` to the ``loss_op(inst, scale)`` signature."""

    def op(inst, scale, with_grad=True):
        return supervised_ce_loss(inst.point_features, class_embeddings, labels, scale, with_grad)

    return op


def random_instance(rng, n_p=64, n_t=8, d=16, n_regions=None, max_region=None):
    """Seeded random loss instance with unit rows, for gradient checks."""
    f = rng.standard_normal((n_p, d))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    F = rng.standard_normal((n_t, d))
    F /= np.linalg.norm(F, axis=1, keepdims=True)
    n_regions = n_regions or n_t
    max_region = max_region or max(2, n_p // 4)
    regions = []
    for r in range(n_regions):
        size = int(rng.integers(1, max_region + 1))
        idx = np.sort(rng.choice(n_p, size=size, replace=False))
        regions.append((idx, r % n_t))
    return LossInstance(f, F, regions)
