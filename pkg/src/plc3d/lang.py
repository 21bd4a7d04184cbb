"""Caption embedding providers, category prompts and per-scene caption banks."""

from __future__ import annotations

import hashlib
import json
import re
import string
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateMean, InvalidConfig, InvalidInput, NotFound

TABLE_MAGIC = b"PLCE"
DEFAULT_TEMPLATES = ("a photo of a {}", "{}")

# tokens carrying no category content; dropped by the bag-of-words hash
_STOPWORDS = frozenset("a an the of in on at with and or this that is are photo".split())
_WS = re.compile(r"\s+")


def normalize_text(text):
    """Lowercase, collapse whitespace, strip punctuation at both ends."""
    return _WS.sub(" ", text.lower()).strip().strip(string.punctuation + " ")


def _token_vector(seed, token, dim):
    digest = hashlib.blake2b(f"{seed}\x00{token}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass
class EmbeddingProvider:
    """Maps caption text to unit vectors.

    ``synthetic_hash`` embeds a text as the normalized sum of seeded random
    unit vectors, one per content word, so texts sharing a category word
    share a direction. ``file_table`` looks texts up in a precomputed table.
    """

    kind: str = "synthetic_hash"
    dim: int = 64
    table: dict[str, np.ndarray] | None = None
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("synthetic_hash", "file_table"):
            raise InvalidConfig(f"unknown embedding provider kind {self.kind!r}")
        if self.dim < 2:
            raise InvalidConfig("embedding dim must be >= 2")
        if self.kind == "file_table":
            if self.table is None:
                raise InvalidConfig("file_table provider needs a table")
            normed = {}
            for text, vec in self.table.items():
                vec = np.asarray(vec, dtype=np.float64)
                if vec.shape != (self.dim,):
                    raise InvalidConfig(f"table row for {text!r} has shape {vec.shape}")
                normed[normalize_text(text)] = vec / np.linalg.norm(vec)
            self.table = normed

    @classmethod
    def from_table_file(cls, path):
        return cls(kind="file_table", **_read_table(path))

    def embed(self, text):
        key = normalize_text(text)
        if not key:
            raise InvalidInput("cannot embed empty text")
        hit = self._cache.get(key)
        if hit is not None:
            return hit.copy()
        if self.kind == "file_table":
            try:
                vec = self.table[key]
            except KeyError:
                raise NotFound(f"text {text!r} not in embedding table") from None
        else:
            tokens = [t.strip(string.punctuation) for t in key.split(" ")]
            tokens = [t for t in tokens if t]
            content = [t for t in tokens if t not in _STOPWORDS] or tokens or [key]
            vec = np.sum([_token_vector(self.seed, t, self.dim) for t in content], axis=0)
            norm = np.linalg.norm(vec)
            vec = vec / norm if norm > 1e-12 else _token_vector(self.seed, key, self.dim)
        self._cache[key] = vec
        return vec.copy()


def embed_text(provider, text):
    return provider.embed(text)


@dataclass
class CategorySpec:
    name: str
    synonyms: list[str] = field(default_factory=list)
    templates: list[str] = field(default_factory=lambda: list(DEFAULT_TEMPLATES))

    def __post_init__(self):
        if not self.synonyms:
            self.synonyms = [self.name]
        for t in self.templates:
            if t.count("{}") != 1:
                raise InvalidConfig(f"template {t!r} must contain exactly one '{{}}' slot")
        if not self.templates:
            raise InvalidConfig(f"category {self.name!r} has no templates")

    def prompts(self):
        return [t.format(s) for t in self.templates for s in self.synonyms]

    def to_json(self):
        return {"name": self.name, "synonyms": list(self.synonyms), "templates": list(self.templates)}


def embed_category(provider, spec):
    """Mean prompt embedding over templates x synonyms, re-normalized."""
    vecs = np.stack([provider.embed(p) for p in spec.prompts()])
    mean = vecs.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-8:
        raise DegenerateMean(f"prompt embeddings of {spec.name!r} cancel out")
    return mean / norm


def embed_categories(provider, specs):
    return np.stack([embed_category(provider, s) for s in specs])


@dataclass
class CaptionBank:
    texts: list[str]
    embeddings: np.ndarray  # (n_t, d), unit rows
    target_index: np.ndarray  # (n_pairs,)

    @property
    def n_t(self):
        return len(self.texts)


def build_caption_bank(pairs, provider):
    """Deduplicate the captions of one scene into a bank.

    Captions equal after normalization share one column; ``target_index[i]``
    is the column of ``pairs[i]``.
    """
    if not pairs:
        raise InvalidInput("caption bank needs at least one pair")
    scene = pairs[0].scene_id
    column = {}
    texts = []
    targets = np.empty(len(pairs), dtype=np.int64)
    for i, p in enumerate(pairs):
        if p.scene_id != scene:
            raise InvalidInput(f"scene mismatch: {p.scene_id!r} vs {scene!r}")
        key = normalize_text(p.caption)
        if key not in column:
            column[key] = len(texts)
            texts.append(p.caption)
        targets[i] = column[key]
    emb = np.stack([provider.embed(t) for t in texts])
    return CaptionBank(texts=texts, embeddings=emb, target_index=targets)


# ---------------------------------------------------------------------------
# file formats


def write_table(entries, path):
    """Write ``{text: vector}`` as a binary ``PLCE`` embedding table."""
    items = list(entries.items())
    if not items:
        raise InvalidInput("empty embedding table")
    dim = len(items[0][1])
    out = [struct.pack("<4sII", TABLE_MAGIC, dim, len(items))]
    for text, vec in items:
        raw = text.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise InvalidInput(f"text too long for table: {text[:40]!r}...")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(np.asarray(vec, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def _read_table(path):
    data = Path(path).read_bytes()
    magic, dim, count = struct.unpack_from("<4sII", data, 0)
    if magic != TABLE_MAGIC:
        raise InvalidInput(f"{path}: not a PLCE embedding table")
    off = 12
    table = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        text = data[off : off + n].decode("utf-8")
        off += n
        table[text] = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float64)
        off += 4 * dim
    return {"dim": dim, "table": table}


def load_category_specs(path):
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return [CategorySpec(**item) for item in raw]


def save_category_specs(specs, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([s.to_json() for s in specs], fh, indent=2)
        fh.write("\n")
