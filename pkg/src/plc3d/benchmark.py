"""Desk-scale ablation: loss kind and fusion band on shared synthetic data."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import build_config, default_config_dict
from .pipeline import make_scenes, prepare_pairs, run_in_memory

log = logging.getLogger("plc3d")

ABLATION_PRESETS = ("rpdc_sf", "clip_sf", "rpdc_union")
ABLATION_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class AblationResult:
    presets: list[str]
    seeds: list[int]
    novel: dict[str, list[float]] = field(default_factory=dict)
    base: dict[str, list[float]] = field(default_factory=dict)
    seconds: float = 0.0

    def mean_novel(self, preset):
        return float(np.mean(self.novel[preset]))

    def to_json(self):
        return {
            "presets": self.presets,
            "seeds": self.seeds,
            "novel_miou": self.novel,
            "base_miou": self.base,
            "mean_novel_miou": {p: self.mean_novel(p) for p in self.presets},
            "seconds": self.seconds,
        }


def run_ablation(raw=None, presets=ABLATION_PRESETS, seeds=ABLATION_SEEDS, threads=1, base_dir=None):
    """Train and evaluate every preset on every seed.

    Scenes, captions and association depend only on the seed, so they are
    built once per seed and shared, which keeps the comparison paired.
    """
    raw = default_config_dict() if raw is None else raw
    res = AblationResult(list(presets), list(seeds))
    t0 = time.perf_counter()
    for seed in seeds:
        shared = build_config(raw, base_dir, seed=seed, preset=presets[0], environ={})
        scenes = make_scenes(shared, threads)
        pairs = prepare_pairs(shared, scenes, threads)
        for name in presets:
            cfg = build_config(raw, base_dir, seed=seed, preset=name, environ={})
            report, _, _ = run_in_memory(cfg, threads, scenes=scenes, pairs=pairs)
            res.novel.setdefault(name, []).append(report.miou_novel)
            res.base.setdefault(name, []).append(report.miou_base)
            log.info("seed %d %-12s novel %.2f base %.2f", seed, name, report.miou_novel, report.miou_base)
    res.seconds = time.perf_counter() - t0
    return res
