"""Training loop: caption contrastive loss plus optional supervised base-class loss."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergedError, InvalidConfig, InvalidInput
from ..evalkit import PartitionSpec
from ..lang import build_caption_bank, embed_categories
from .losses import LOSSES, LossInstance, supervised_ce_loss
from .model import backward, forward, init_params, point_inputs
from .optim import SGD, Adam


@dataclass
class TrainConfig:
    loss_kind: str = "rpdc"
    supervised_weight: float = 1.0
    steps: int = 500
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    batch_scenes: int = 2
    seed: int = 0
    partition: PartitionSpec | None = None
    optimizer: str = "adam"
    hidden: int = 128
    depth: int = 3
    logit_scale: float = 100.0
    voxel_size: float = 0.25
    # "data": one loss over all fused pairs; "loss": one loss per source, summed
    caption_mixing: str = "data"

    def __post_init__(self):
        if isinstance(self.partition, dict):
            self.partition = PartitionSpec(**self.partition)
        self.adam_betas = tuple(self.adam_betas)
        if self.loss_kind not in LOSSES:
            raise InvalidConfig(f"train.loss_kind must be one of {sorted(LOSSES)}")
        if self.steps < 1:
            raise InvalidConfig("train.steps must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidConfig("train.learning_rate must be positive")
        if self.supervised_weight < 0:
            raise InvalidConfig("train.supervised_weight must be >= 0")
        if self.batch_scenes < 1:
            raise InvalidConfig("train.batch_scenes must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidConfig("train.optimizer must be adam or sgd")
        if self.caption_mixing not in ("data", "loss"):
            raise InvalidConfig("train.caption_mixing must be data or loss")
        if not self.logit_scale > 0:
            raise InvalidConfig("train.logit_scale must be positive")


@dataclass
class SceneData:
    scene_id: str
    inputs: np.ndarray
    instances: list[LossInstance]  # caption-loss instances (one per source under loss mixing)
    base_labels: np.ndarray  # index into base classes or IGNORE


@dataclass
class TrainingData:
    scenes: list[SceneData]
    base_embeddings: np.ndarray | None
    dim: int
    log: list = field(default_factory=list)


def prepare(scenes, pairs_by_scene, provider, category_specs, cfg):
    """Precompute network inputs, caption banks and base labels per scene."""
    partition = cfg.partition
    base_emb = None
    if partition is not None and partition.base:
        base_emb = embed_categories(provider, [category_specs[i] for i in partition.base])
        label_map = partition.base_label_map()
    out = []
    for scene in scenes:
        pairs = pairs_by_scene.get(scene.scene_id, [])
        groups = [pairs]
        if cfg.caption_mixing == "loss":
            by_src = {}
            for p in pairs:
                by_src.setdefault(p.source, []).append(p)
            groups = [by_src[k] for k in sorted(by_src, key=lambda s: s.value)]
        instances = []
        x = point_inputs(scene, cfg.voxel_size)
        dummy = np.zeros((len(scene), provider.dim))
        dummy[:, 0] = 1.0
        for group in groups:
            if group:
                bank = build_caption_bank(group, provider)
                instances.append(LossInstance.from_bank(dummy, bank, group))
        if base_emb is not None:
            labels = np.where(scene.labels >= 0, label_map[np.maximum(scene.labels, 0)], -1)
        else:
            labels = np.full(len(scene), -1, dtype=np.int64)
        out.append(SceneData(scene.scene_id, x, instances, labels))
    if not any(s.instances for s in out):
        raise InvalidInput("training needs at least one scene with at least one pair")
    return TrainingData(out, base_emb, provider.dim)


def _scene_loss(params, sd, data, cfg):
    f, cache = forward(params, sd.inputs)
    loss_fn = LOSSES[cfg.loss_kind]
    grad_f = np.zeros_like(f)
    cap = 0.0
    for inst in sd.instances:
        res = loss_fn(inst.with_features(f), params.logit_scale)
        cap += res.value
        grad_f += res.grad_points
    sup = 0.0
    if data.base_embeddings is not None and cfg.supervised_weight > 0:
        res = supervised_ce_loss(f, data.base_embeddings, sd.base_labels, params.logit_scale)
        sup = res.value
        grad_f += cfg.supervised_weight * res.grad_points
    return cap, sup, backward(params, cache, grad_f)


def train(cfg, data, params=None):
    """Optimize encoder + adapter for ``cfg.steps`` steps.

    Returns ``(params, log)``; ``log`` holds one dict per step with keys
    ``step, loss_total, loss_caption, loss_sup`` (batch means).
    """
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(
            data.dim, cfg.hidden, cfg.depth, seed=int(rng.integers(2**63)), logit_scale=cfg.logit_scale
        )
    arrays = params.arrays()
    opt = Adam(cfg.learning_rate, cfg.adam_betas) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)
    n = len(data.scenes)
    bs = min(cfg.batch_scenes, n)
    order = []
    log = []
    for step in range(cfg.steps):
        if len(order) < bs:
            order.extend(rng.permutation(n).tolist())
        batch, order = order[:bs], order[bs:]
        grads = {k: np.zeros_like(v) for k, v in arrays.items()}
        cap_sum = sup_sum = 0.0
        # fixed accumulation order keeps the reduction deterministic
        for i in batch:
            cap, sup, g = _scene_loss(params, data.scenes[i], data, cfg)
            cap_sum += cap
            sup_sum += sup
            for k in grads:
                grads[k] += g[k]
        cap_mean, sup_mean = cap_sum / bs, sup_sum / bs
        total = cap_mean + cfg.supervised_weight * sup_mean
        if not np.isfinite(total):
            raise DivergedError(step)
        for k in grads:
            grads[k] /= bs
        opt.step(arrays, grads)
        log.append({"step": step, "loss_total": total, "loss_caption": cap_mean, "loss_sup": sup_mean})
    return params, log


def write_log(log, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss_total", "loss_caption", "loss_sup"])
        for row in log:
            w.writerow([row["step"], repr(row["loss_total"]), repr(row["loss_caption"]), repr(row["loss_sup"])])
