"""Pipeline configuration: JSON file, schema check, seed derivation, presets."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .errors import InvalidConfig
from .evalkit import PartitionSpec, load_partition
from .fusion import FusionConfig
from .geom import SourceTag
from .learn.train import TrainConfig
from .synth import SceneConfig, SourceProfile

WORKDIR_ENV = "PLC_WORKDIR"

# stage ids mixed into the root seed
STAGE_SCENE, STAGE_CAPTION, STAGE_FUSION, STAGE_EMBED, STAGE_TRAIN = 1, 2, 3, 4, 5

# loss kind x fusion band; "union" is the plain data-mixing baseline
PRESETS = {
    "rpdc_sf": {"train": {"loss_kind": "rpdc"}, "fusion": {"t_low": 0.0, "t_high": 0.2, "epsilon": 0.72}},
    "pdc_sf": {"train": {"loss_kind": "pdc"}, "fusion": {"t_low": 0.0, "t_high": 0.2, "epsilon": 0.72}},
    "clip_sf": {"train": {"loss_kind": "clip_style"}, "fusion": {"t_low": 0.0, "t_high": 0.2, "epsilon": 0.72}},
    "rpdc_union": {"train": {"loss_kind": "rpdc"}, "fusion": {"t_low": 0.0, "t_high": 1.0, "epsilon": 1e-9}},
    "clip_union": {"train": {"loss_kind": "clip_style"}, "fusion": {"t_low": 0.0, "t_high": 1.0, "epsilon": 1e-9}},
    "rpdc_loss_mix": {
        "train": {"loss_kind": "rpdc", "caption_mixing": "loss"},
        "fusion": {"t_low": 0.0, "t_high": 1.0, "epsilon": 1e-9},
    },
}


def derive_seed(root, *keys):
    """Deterministic 63-bit child seed from the root seed and integer keys."""
    state = np.random.SeedSequence([int(root), *map(int, keys)]).generate_state(1, dtype=np.uint64)[0]
    return int(state >> np.uint64(1))


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def default_config_dict():
    text = resources.files("plc3d").joinpath("data/default_config.json").read_text(encoding="utf-8")
    return json.loads(text)


def schema():
    text = resources.files("plc3d").joinpath("data/config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _deep_update(base, patch):
    for key, val in patch.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], val)
        else:
            base[key] = copy.deepcopy(val)
    return base


def validate_dict(raw):
    """Schema check; the error names the offending key path, e.g. ``fusion.t_low``."""
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for err in errors:
            where = ".".join(str(p) for p in err.absolute_path) or "<root>"
            msgs.append(f"{where}: {err.message}")
        raise InvalidConfig("invalid config: " + "; ".join(msgs))


@dataclass
class PipelineConfig:
    raw: dict
    seed: int
    scene_count: int
    scene: SceneConfig
    sources: list[SourceProfile]
    primary: SourceTag
    min_points: int
    z_tolerance: float
    fusion: FusionConfig
    embed_kind: str
    embed_dim: int
    embed_table: Path | None
    train: TrainConfig
    partition: PartitionSpec
    workdir: Path

    def scene_config(self, i):
        """Scene ``i`` config with its derived seed."""
        cfg = copy.copy(self.scene)
        cfg.seed = derive_seed(self.seed, STAGE_SCENE, i)
        return cfg

    def scene_ids(self):
        return [f"scene_{i:03d}" for i in range(self.scene_count)]

    def source_seed(self, scene_index, source_index):
        return derive_seed(self.seed, STAGE_CAPTION, scene_index, source_index)

    def dumps(self):
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"


def build_config(raw, base_dir=None, seed=None, preset=None, environ=None):
    """Turn a config dict into a ``PipelineConfig``.

    ``seed`` replaces the root seed, ``preset`` patches loss and fusion
    settings, and ``PLC_WORKDIR`` in ``environ`` replaces ``paths.workdir``.
    Relative file references resolve against ``base_dir``.
    """
    environ = os.environ if environ is None else environ
    raw = copy.deepcopy(raw)
    if preset is not None:
        if preset not in PRESETS:
            raise InvalidConfig(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        _deep_update(raw, PRESETS[preset])
    if seed is not None:
        raw["seed"] = int(seed)
    if environ.get(WORKDIR_ENV):
        raw.setdefault("paths", {})["workdir"] = environ[WORKDIR_ENV]
    validate_dict(raw)
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    root = raw["seed"]

    scene_raw = dict(raw["scene"])
    count = scene_raw.pop("count")
    scene = SceneConfig(**scene_raw)
    sources = [SourceProfile(**s) for s in raw["sources"]]
    kinds = [s.kind for s in sources]
    if len(set(kinds)) != len(kinds):
        raise InvalidConfig("sources: each kind may appear once")
    unknown = {w for s in sources for w in s.vocabulary} - set(scene.names)
    if unknown:
        raise InvalidConfig(f"sources.vocabulary: unknown categories {sorted(unknown)}")

    fusion_raw = dict(raw["fusion"])
    try:
        primary = SourceTag(fusion_raw.pop("primary"))
    except ValueError as exc:
        raise InvalidConfig(f"fusion.primary: {exc}") from None
    if primary not in kinds:
        raise InvalidConfig(f"fusion.primary {primary.value!r} is not among the sources")
    fusion_raw.setdefault("candidate_order", [k.value for k in kinds if k != primary])
    try:
        fusion = FusionConfig(seed=derive_seed(root, STAGE_FUSION), **fusion_raw)
    except ValueError as exc:
        raise InvalidConfig(str(exc)) from None
    if primary in fusion.candidate_order or set(fusion.candidate_order) != set(kinds) - {primary}:
        raise InvalidConfig("fusion.candidate_order must list every non-primary source once")

    emb = raw["embeddings"]
    kind = emb.get("kind", "synthetic_hash")
    table = None
    if kind == "file_table":
        if "table" not in emb:
            raise InvalidConfig("embeddings.table is required for file_table")
        table = (base_dir / emb["table"]).resolve()
        if not table.exists():
            raise InvalidConfig(f"embeddings.table: {table} does not exist")

    ev = raw["eval"]
    if "partition" in ev:
        ppath = (base_dir / ev["partition"]).resolve()
        if not ppath.exists():
            raise InvalidConfig(f"eval.partition: {ppath} does not exist")
        partition = load_partition(ppath)
        if partition.categories != scene.names:
            raise InvalidConfig("eval.partition categories do not match scene categories")
    else:
        novel = ev.get("novel", [])
        missing = set(novel) - set(scene.names)
        if missing:
            raise InvalidConfig(f"eval.novel: unknown categories {sorted(missing)}")
        partition = PartitionSpec.from_names(scene.names, novel, scene.background)

    train = TrainConfig(seed=derive_seed(root, STAGE_TRAIN), partition=partition, **raw["train"])
    workdir = Path(raw["paths"]["workdir"])
    return PipelineConfig(
        raw=raw,
        seed=root,
        scene_count=count,
        scene=scene,
        sources=sources,
        primary=primary,
        min_points=raw.get("association", {}).get("min_points", 5),
        z_tolerance=raw.get("association", {}).get("z_tolerance", 0.05),
        fusion=fusion,
        embed_kind=kind,
        embed_dim=emb.get("dim", 64),
        embed_table=table,
        train=train,
        partition=partition,
        workdir=workdir,
    )


def load_config(path=None, seed=None, preset=None, environ=None):
    """Read a config file (or the packaged default when ``path`` is None)."""
    if path is None:
        return build_config(default_config_dict(), None, seed, preset, environ)
    path = Path(path)
    if not path.exists():
        raise InvalidConfig(f"config file {path} does not exist")
    try:
        raw = _read_json(path)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: not valid JSON ({exc})") from None
    return build_config(raw, path.parent, seed, preset, environ)
