"""Point-set overlap and supplementary-oriented fusion of multi-source pairs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidConfig, InvalidInput
from .geom import SourceTag


@dataclass
class FusionConfig:
    t_low: float = 0.0
    t_high: float = 0.2
    epsilon: float = 0.72
    seed: int = 0
    candidate_order: list[SourceTag] = field(default_factory=list)
    # "growing": compare against primary + already-accepted candidates;
    # "primary": compare against the primary source only
    reference: str = "growing"

    def __post_init__(self):
        self.candidate_order = [SourceTag(s) for s in self.candidate_order]
        self.validate()

    def validate(self):
        bad = []
        if not 0.0 <= self.t_low <= 1.0:
            bad.append("fusion.t_low")
        if not 0.0 < self.t_high <= 1.0:
            bad.append("fusion.t_high")
        if bad:
            raise InvalidConfig(f"out of range: {', '.join(bad)}")
        if self.t_low >= self.t_high:
            raise InvalidConfig(
                f"fusion.t_low ({self.t_low}) must be < fusion.t_high ({self.t_high})"
            )
        if not 0.0 < self.epsilon <= 1.0:
            raise InvalidConfig(f"fusion.epsilon ({self.epsilon}) must be in (0, 1]")
        if self.reference not in ("growing", "primary"):
            raise InvalidConfig(f"fusion.reference must be 'growing' or 'primary'")


@dataclass
class FusionReport:
    kept_primary: int = 0
    kept_per_source: dict[str, int] = field(default_factory=dict)
    dropped_overlap: int = 0
    dropped_ratio: int = 0
    achieved_primary_ratio: float = 1.0

    def to_json(self):
        return asdict(self)


def pointset_iou(a, b):
    """Intersection over union of two point-index sets."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.size == 0 or b.size == 0:
        raise InvalidInput("pointset_iou needs two non-empty sets")
    inter = np.intersect1d(a, b).size
    union = np.union1d(a, b).size
    return inter / union


def max_overlap_ratio(candidate, primary_pairs):
    """Largest IoU between ``candidate`` and any pair in ``primary_pairs`` (0 if none)."""
    best = 0.0
    for p in primary_pairs:
        if p.scene_id != candidate.scene_id:
            raise InvalidInput(
                f"scene mismatch: {candidate.scene_id!r} vs {p.scene_id!r}"
            )
        best = max(best, pointset_iou(candidate.point_indices, p.point_indices))
    return best


def in_band(tau, t_low, t_high):
    return t_low <= tau and (tau < t_high or t_high >= 1.0)


def _check_scene(pairs, scene_id):
    for p in pairs:
        if p.scene_id != scene_id:
            raise InvalidInput(f"scene mismatch: {p.scene_id!r} vs {scene_id!r}")


def sfusion(primary, candidates_by_source, cfg):
    """Fuse candidate sources into the primary source.

    A candidate is accepted when its max IoU against the reference set lies in
    ``[t_low, t_high)``; ``t_high = 1`` closes the interval so that ``[0, 1]``
    keeps every candidate. Afterwards accepted candidates are subsampled (seeded,
    uniform) until the primary share of the fused list is at least ``epsilon``.
    Returns ``(fused, report)``; primary pairs come first and are untouched.
    """
    cfg.validate()
    missing = [s for s in candidates_by_source if SourceTag(s) not in cfg.candidate_order]
    if missing:
        raise InvalidConfig(f"candidate_order does not cover sources {missing}")
    primary = list(primary)
    all_pairs = primary + [c for cs in candidates_by_source.values() for c in cs]
    if all_pairs:
        _check_scene(all_pairs, all_pairs[0].scene_id)

    by_tag = {SourceTag(k): v for k, v in candidates_by_source.items()}
    report = FusionReport(kept_primary=len(primary))
    reference = list(primary)
    accepted = []
    for tag in cfg.candidate_order:
        for cand in by_tag.get(tag, ()):
            tau = max_overlap_ratio(cand, reference)
            if in_band(tau, cfg.t_low, cfg.t_high):
                accepted.append(cand)
                if cfg.reference == "growing":
                    reference.append(cand)
            else:
                report.dropped_overlap += 1

    n_pri = len(primary)
    total = n_pri + len(accepted)
    if accepted and n_pri / total < cfg.epsilon:
        # largest m with n_pri / (n_pri + m) >= epsilon
        m = int(np.floor(n_pri * (1.0 - cfg.epsilon) / cfg.epsilon + 1e-9))
        while m > 0 and n_pri / (n_pri + m) < cfg.epsilon:
            m -= 1
        m = min(m, len(accepted))
        rng = np.random.default_rng(cfg.seed)
        keep = np.sort(rng.choice(len(accepted), size=m, replace=False))
        report.dropped_ratio = len(accepted) - m
        accepted = [accepted[i] for i in keep]

    for tag in cfg.candidate_order:
        report.kept_per_source[tag.value] = 0
    for c in accepted:
        report.kept_per_source[c.source.value] = report.kept_per_source.get(c.source.value, 0) + 1
    fused = primary + accepted
    report.achieved_primary_ratio = n_pri / len(fused) if fused else 1.0
    return fused, report


def save_report(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
