"""Stage functions shared by the CLI and the benchmark.

Each disk stage reads its inputs from the work directory and overwrites its
outputs there:

    scenes/<scene>.plcs
    regions/<scene>/<source>.jsonl
    pairs/<scene>/<source>.jsonl
    fused/<scene>.jsonl, fused/<scene>.report.json
    embeddings/table.plce
    model/params.plcw, model/train_log.csv
    eval/metrics.json, eval/metrics.txt
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import STAGE_EMBED, derive_seed
from .errors import InvalidInput, NotFound
from .evalkit import compute_metrics, confusion_matrix, infer_scores, predict_labels
from .fusion import save_report, sfusion
from .geom import associate_regions, load_pairs, load_regions, load_scene, save_pairs, save_regions, save_scene
from .lang import EmbeddingProvider, embed_categories, write_table
from .learn.model import encode_points, load_params, save_params
from .learn.train import prepare, train, write_log
from .synth import generate_scene, simulate_source

log = logging.getLogger("plc3d")

STAGES = ("gen", "caption", "associate", "fuse", "embed", "train", "eval")


def _map(fn, items, threads=1):
    """Ordered map; a thread pool when ``threads > 1``."""
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# in-memory stages


def make_scenes(cfg, threads=1):
    ids = cfg.scene_ids()
    return _map(lambda i: generate_scene(cfg.scene_config(i), ids[i]), range(cfg.scene_count), threads)


def caption_scene(cfg, i, scene):
    """``{source_tag: {view_id: [Region2D]}}`` for scene ``i``."""
    scene_cfg = cfg.scene_config(i)
    return {
        prof.kind: simulate_source(scene, prof, cfg.source_seed(i, j), scene_cfg, cfg.z_tolerance)
        for j, prof in enumerate(cfg.sources)
    }


def associate_scene(cfg, scene, regions_by_source):
    """Region-language pairs per source, views in ascending order."""
    out = {}
    for tag, by_view in regions_by_source.items():
        pairs = []
        for view_id in sorted(by_view):
            got, _ = associate_regions(scene, view_id, by_view[view_id], cfg.min_points, cfg.z_tolerance)
            pairs.extend(got)
        out[tag] = pairs
    return out


def fuse_scene(cfg, pairs_by_source):
    primary = pairs_by_source.get(cfg.primary, [])
    cands = {t: p for t, p in pairs_by_source.items() if t != cfg.primary}
    if cfg.train.caption_mixing == "loss":
        # loss-level mixing keeps every source and lets training split them
        fused = list(primary) + [p for t in cfg.fusion.candidate_order for p in cands.get(t, [])]
        return fused, None
    return sfusion(primary, cands, cfg.fusion)


def embedding_texts(cfg, fused_by_scene):
    """Every text the model will see: fused captions and category prompts, in first-seen order."""
    seen = {}
    for sid in sorted(fused_by_scene):
        for p in fused_by_scene[sid]:
            seen.setdefault(p.caption, None)
    for spec in cfg.scene.category_specs():
        for prompt in spec.prompts():
            seen.setdefault(prompt, None)
    return list(seen)


def embedding_table(cfg, texts):
    """``{text: float32 vector}`` from the configured provider."""
    if cfg.embed_kind == "file_table":
        src = EmbeddingProvider.from_table_file(cfg.embed_table)
    else:
        src = EmbeddingProvider("synthetic_hash", cfg.embed_dim, seed=derive_seed(cfg.seed, STAGE_EMBED))
    return {t: src.embed(t).astype(np.float32) for t in texts}


def provider_from_table(table):
    dim = len(next(iter(table.values())))
    return EmbeddingProvider("file_table", dim, table=dict(table))


def train_model(cfg, scenes, fused_by_scene, provider):
    specs = cfg.scene.category_specs()
    data = prepare(scenes, fused_by_scene, provider, specs, cfg.train)
    return train(cfg.train, data)


def evaluate(cfg, params, scenes, provider):
    specs = cfg.scene.category_specs()
    emb = embed_categories(provider, specs)
    k = len(specs)
    conf = np.zeros((k, k), dtype=np.int64)
    for scene in scenes:
        f = encode_points(params, scene, cfg.train.voxel_size)
        pred = predict_labels(infer_scores(f, emb, params.logit_scale))
        conf += confusion_matrix(pred, scene.labels, k)
    return compute_metrics(conf, cfg.partition), conf


def run_in_memory(cfg, threads=1, scenes=None, pairs=None):
    """Whole pipeline without touching disk; returns ``(report, params, train_log)``.

    ``scenes`` and per-scene ``pairs`` (``{scene_id: {tag: [pairs]}}``) may be
    passed in to share generated data across configurations.
    """
    if scenes is None:
        scenes = make_scenes(cfg, threads)
    if pairs is None:
        pairs = prepare_pairs(cfg, scenes, threads)
    fused = {s.scene_id: fuse_scene(cfg, pairs[s.scene_id])[0] for s in scenes}
    provider = provider_from_table(embedding_table(cfg, embedding_texts(cfg, fused)))
    params, train_log = train_model(cfg, scenes, fused, provider)
    report, _ = evaluate(cfg, params, scenes, provider)
    return report, params, train_log


def prepare_pairs(cfg, scenes, threads=1):
    def one(i):
        return associate_scene(cfg, scenes[i], caption_scene(cfg, i, scenes[i]))

    got = _map(one, range(len(scenes)), threads)
    return {s.scene_id: g for s, g in zip(scenes, got)}


# ---------------------------------------------------------------------------
# disk stages


class Workdir:
    def __init__(self, root):
        self.root = Path(root)

    def scene(self, sid):
        return self.root / "scenes" / f"{sid}.plcs"

    def regions(self, sid, tag):
        return self.root / "regions" / sid / f"{tag.value}.jsonl"

    def pairs(self, sid, tag):
        return self.root / "pairs" / sid / f"{tag.value}.jsonl"

    def fused(self, sid):
        return self.root / "fused" / f"{sid}.jsonl"

    def fused_report(self, sid):
        return self.root / "fused" / f"{sid}.report.json"

    @property
    def table(self):
        return self.root / "embeddings" / "table.plce"

    @property
    def params(self):
        return self.root / "model" / "params.plcw"

    @property
    def train_log(self):
        return self.root / "model" / "train_log.csv"

    @property
    def metrics_json(self):
        return self.root / "eval" / "metrics.json"

    @property
    def metrics_txt(self):
        return self.root / "eval" / "metrics.txt"


def _need(path):
    if not Path(path).exists():
        raise NotFound(f"missing input {path}; run the earlier stage first")
    return path


def _out(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_scenes(cfg, wd):
    return [load_scene(_need(wd.scene(sid))) for sid in cfg.scene_ids()]


def stage_gen(cfg, wd, threads=1):
    scenes = make_scenes(cfg, threads)
    for s in scenes:
        save_scene(s, _out(wd.scene(s.scene_id)))
    _out(wd.root / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    log.info("gen: wrote %d scenes", len(scenes))
    return {"scenes": len(scenes), "points": int(sum(len(s) for s in scenes))}


def stage_caption(cfg, wd, threads=1):
    scenes = _load_scenes(cfg, wd)
    got = _map(lambda i: caption_scene(cfg, i, scenes[i]), range(len(scenes)), threads)
    counts = {}
    for scene, by_src in zip(scenes, got):
        for tag, regions in by_src.items():
            save_regions(regions, _out(wd.regions(scene.scene_id, tag)))
            counts[tag.value] = counts.get(tag.value, 0) + sum(len(r) for r in regions.values())
    log.info("caption: %s", counts)
    return {"regions": counts}


def stage_associate(cfg, wd, threads=1):
    scenes = _load_scenes(cfg, wd)

    def one(scene):
        regions = {p.kind: load_regions(_need(wd.regions(scene.scene_id, p.kind))) for p in cfg.sources}
        return associate_scene(cfg, scene, regions)

    counts = {}
    for scene, by_src in zip(scenes, _map(one, scenes, threads)):
        for tag, pairs in by_src.items():
            save_pairs(pairs, _out(wd.pairs(scene.scene_id, tag)))
            counts[tag.value] = counts.get(tag.value, 0) + len(pairs)
    log.info("associate: %s", counts)
    return {"pairs": counts}


def stage_fuse(cfg, wd, threads=1):
    cfg.fusion.validate()

    def one(sid):
        pairs = {p.kind: load_pairs(_need(wd.pairs(sid, p.kind))) for p in cfg.sources}
        return fuse_scene(cfg, pairs)

    sids = cfg.scene_ids()
    total = 0
    for sid, (fused, report) in zip(sids, _map(one, sids, threads)):
        save_pairs(fused, _out(wd.fused(sid)))
        if report is not None:
            save_report(report, _out(wd.fused_report(sid)))
        total += len(fused)
    log.info("fuse: %d fused pairs", total)
    return {"fused_pairs": total}


def _load_fused(cfg, wd):
    return {sid: load_pairs(_need(wd.fused(sid))) for sid in cfg.scene_ids()}


def stage_embed(cfg, wd, threads=1):
    texts = embedding_texts(cfg, _load_fused(cfg, wd))
    write_table(embedding_table(cfg, texts), _out(wd.table))
    log.info("embed: %d texts", len(texts))
    return {"texts": len(texts)}


def stage_train(cfg, wd, threads=1):
    scenes = _load_scenes(cfg, wd)
    provider = EmbeddingProvider.from_table_file(_need(wd.table))
    params, train_log = train_model(cfg, scenes, _load_fused(cfg, wd), provider)
    save_params(params, _out(wd.params))
    write_log(train_log, _out(wd.train_log))
    first, last = train_log[0]["loss_total"], train_log[-1]["loss_total"]
    log.info("train: %d steps, loss %.4f -> %.4f", len(train_log), first, last)
    return {"steps": len(train_log), "loss_first": first, "loss_last": last}


def stage_eval(cfg, wd, threads=1):
    scenes = _load_scenes(cfg, wd)
    provider = EmbeddingProvider.from_table_file(_need(wd.table))
    params = load_params(_need(wd.params))
    if params.dim != provider.dim:
        raise InvalidInput(f"model dim {params.dim} does not match embedding dim {provider.dim}")
    report, _ = evaluate(cfg, params, scenes, provider)
    _out(wd.metrics_json).write_text(report.dumps(), encoding="utf-8")
    wd.metrics_txt.write_text(report.table(), encoding="utf-8")
    log.info("eval: hIoU %.2f  mIoU base %.2f  novel %.2f", report.hiou, report.miou_base, report.miou_novel)
    return report.to_json()


STAGE_FUNCS = {
    "gen": stage_gen,
    "caption": stage_caption,
    "associate": stage_associate,
    "fuse": stage_fuse,
    "embed": stage_embed,
    "train": stage_train,
    "eval": stage_eval,
}


def run_pipeline(cfg, wd, threads=1):
    out = {}
    for name in STAGES:
        out[name] = STAGE_FUNCS[name](cfg, wd, threads)
    return out
