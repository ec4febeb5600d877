"""Corpus formats, checkpoint persistence, and loaders.

On disk a corpus is a manifest tying together four text files and a
directory of binary region-feature files:

    manifest.json      paths + split membership
    entities.jsonl     {"entity_id", "name", "category", "knowledge_text"}
    candidates.jsonl   {"image_id", "candidates": [{"entity_id", "s_iw"}, ...],
                        "gt_entity_id"}   (one line per image)
    queries.jsonl      {"query_id", "text", "image_id", "tags"}
    vocab.txt          one token per line (ids start after the reserved five)
    regions/<image_id>.krff   binary appearance + box features

Both binary formats are little-endian and carry a magic plus a version;
checkpoints additionally end with a SHA-256 of everything before it, so
a flipped bit is caught at load.  All parameter and feature payloads are
32-bit floats regardless of the in-memory dtype.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import DEFAULT_DTYPE, Tensor
from .evaluation import EvalQuery, Gallery, GalleryImage
from .model import AlignmentModel, ModelConfig, RegionFeatureSet
from .retrieval import Candidate, CandidateSet, EntityRecord
from .text import TokenSequence, Vocabulary, encode_query, tokenize
from .training import TrainingSet, TrainItem

log = logging.getLogger(__name__)

REGION_MAGIC = b"KRFF"
REGION_VERSION = 1
CHECKPOINT_MAGIC = b"KRMT"
CHECKPOINT_VERSION = 1
QUERY_TAGS = {"commonsense", "factual", "visual"}


class CorpusFormatError(ValueError):
    """A corpus file failed to parse or cross-validate."""


class CheckpointError(ValueError):
    """A checkpoint is malformed, corrupted, or from another config."""


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    text: str
    image_id: str
    tags: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"query {self.query_id}: empty text")
        bad = set(self.tags) - QUERY_TAGS
        if bad:
            raise ValueError(f"query {self.query_id}: unknown tags {sorted(bad)}")


@dataclass
class Split:
    image_ids: list[str] = field(default_factory=list)
    query_ids: list[str] = field(default_factory=list)


@dataclass
class CorpusManifest:
    entities: str
    images_dir: str
    candidates: str
    queries: str
    vocab: str
    splits: dict[str, Split] = field(default_factory=dict)

    def to_json(self) -> str:
        blob = {
            "entities": self.entities,
            "images_dir": self.images_dir,
            "candidates": self.candidates,
            "queries": self.queries,
            "vocab": self.vocab,
            "splits": {name: {"image_ids": s.image_ids, "query_ids": s.query_ids}
                       for name, s in sorted(self.splits.items())},
        }
        return json.dumps(blob, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "CorpusManifest":
        raw = json.loads(blob)
        splits = {name: Split(**s) for name, s in raw.pop("splits", {}).items()}
        return cls(splits=splits, **raw)


@dataclass
class Corpus:
    """A fully cross-validated in-memory corpus."""

    entities: dict[str, EntityRecord]
    images: dict[str, GalleryImage]
    queries: dict[str, QueryRecord]
    vocab: Vocabulary
    splits: dict[str, Split]
    root: Path

    def queries_for(self, split: str) -> list[QueryRecord]:
        return [self.queries[q] for q in self.splits[split].query_ids]

    def images_for(self, split: str) -> list[GalleryImage]:
        return [self.images[i] for i in self.splits[split].image_ids]


# -- region feature files ------------------------------------------------------


def write_region_file(path: str | Path, regions: RegionFeatureSet) -> None:
    """KRFF: magic, u32 version, u32 N, u32 dim, features f32, boxes f32."""
    n = regions.n
    dim = regions.appearance.shape[1] if n else 0
    with open(path, "wb") as fh:
        fh.write(REGION_MAGIC)
        fh.write(struct.pack("<III", REGION_VERSION, n, dim))
        fh.write(regions.appearance.astype("<f4").tobytes())
        fh.write(regions.boxes.astype("<f4").tobytes())


def read_region_file(path: str | Path, expect_dim: int | None = None) -> RegionFeatureSet:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != REGION_MAGIC:
        raise CorpusFormatError(f"{path}: bad region-file magic {blob[:4]!r}")
    if len(blob) < 16:
        raise CorpusFormatError(f"{path}: truncated header")
    version, n, dim = struct.unpack_from("<III", blob, 4)
    if version != REGION_VERSION:
        raise CorpusFormatError(
            f"{path}: region format version {version}, expected {REGION_VERSION}"
        )
    if expect_dim is not None and n > 0 and dim != expect_dim:
        raise CorpusFormatError(
            f"{path}: appearance width {dim} does not match expected {expect_dim}"
        )
    need = 16 + 4 * n * dim + 16 * n
    if len(blob) != need:
        raise CorpusFormatError(f"{path}: expected {need} bytes, found {len(blob)}")
    feats = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=16)
    boxes = np.frombuffer(blob, dtype="<f4", count=n * 4, offset=16 + 4 * n * dim)
    return RegionFeatureSet(
        appearance=feats.reshape(n, dim).astype(DEFAULT_DTYPE),
        boxes=boxes.reshape(n, 4).astype(DEFAULT_DTYPE),
    )


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(params: dict[str, Tensor], cfg: ModelConfig,
                    path: str | Path) -> None:
    """KRMT: header + config JSON + named f32 blobs + trailing SHA-256."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    config_blob = cfg.to_json().encode()
    parts.append(struct.pack("<I", len(config_blob)))
    parts.append(config_blob)
    parts.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        data = params[name].data
        encoded = name.encode()
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.astype("<f4").tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(hashlib.sha256(payload).digest())


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None
                    ) -> tuple[dict[str, np.ndarray], ModelConfig]:
    """Read parameters (as float64) and the embedded config, verifying both."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 44 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: integrity hash mismatch — file corrupted")

    off = 4
    (version,) = struct.unpack_from("<I", payload, off); off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    (config_len,) = struct.unpack_from("<I", payload, off); off += 4
    cfg = ModelConfig.from_json(payload[off:off + config_len].decode()); off += config_len
    if expected_config is not None and cfg != expected_config:
        diff = [
            f"{k}: checkpoint={getattr(cfg, k)} expected={getattr(expected_config, k)}"
            for k in vars(cfg) if getattr(cfg, k) != getattr(expected_config, k)
        ]
        raise CheckpointError(
            f"{path}: config mismatch — " + "; ".join(diff)
        )

    (n_params,) = struct.unpack_from("<I", payload, off); off += 4
    params: dict[str, np.ndarray] = {}
    try:
        for _ in range(n_params):
            (name_len,) = struct.unpack_from("<I", payload, off); off += 4
            name = payload[off:off + name_len].decode(); off += name_len
            (ndim,) = struct.unpack_from("<I", payload, off); off += 4
            shape = struct.unpack_from(f"<{ndim}I", payload, off); off += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
            off += 4 * count
            params[name] = data.reshape(shape).astype(DEFAULT_DTYPE)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated parameter table ({exc})") from exc
    if off != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - off} trailing bytes")
    return params, cfg


def load_model(path: str | Path) -> AlignmentModel:
    """Rebuild a model from a checkpoint (architecture from embedded config)."""
    params, cfg = load_checkpoint(path)
    model = AlignmentModel(cfg, seed=0)
    live = model.parameters()
    missing = sorted(set(live) - set(params))
    extra = sorted(set(params) - set(live))
    if missing or extra:
        raise CheckpointError(
            f"{path}: parameter names do not match model "
            f"(missing {missing[:3]}, extra {extra[:3]})"
        )
    for name, tensor in live.items():
        if tensor.data.shape != params[name].shape:
            raise CheckpointError(
                f"{path}: {name} has shape {params[name].shape}, "
                f"model expects {tensor.data.shape}"
            )
        tensor.data = params[name]
    return model


# -- JSONL plumbing --------------------------------------------------------------


def _read_jsonl(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed JSON ({exc})") from exc


def _require(obj: dict, key: str, path: Path, lineno: int):
    if key not in obj:
        raise CorpusFormatError(f"{path}:{lineno}: missing field {key!r}")
    return obj[key]


# -- corpus writer / loader -------------------------------------------------------


def write_corpus(
    root: str | Path,
    entities: list[EntityRecord],
    images: list[GalleryImage],
    queries: list[QueryRecord],
    vocab: Vocabulary,
    splits: dict[str, Split],
) -> Path:
    """Lay a corpus out on disk; returns the manifest path."""
    root = Path(root)
    (root / "regions").mkdir(parents=True, exist_ok=True)
    with open(root / "entities.jsonl", "w", encoding="utf-8") as fh:
        for e in entities:
            fh.write(json.dumps({
                "entity_id": e.entity_id, "name": e.name,
                "category": e.category, "knowledge_text": e.knowledge_text,
            }, sort_keys=True) + "\n")
    with open(root / "candidates.jsonl", "w", encoding="utf-8") as fh:
        for im in images:
            fh.write(json.dumps({
                "image_id": im.image_id,
                "candidates": [{"entity_id": c.entity_id, "s_iw": c.likelihood}
                               for c in im.candidates.candidates],
                "gt_entity_id": im.gt_entity_id,
            }, sort_keys=True) + "\n")
    with open(root / "queries.jsonl", "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps({
                "query_id": q.query_id, "text": q.text,
                "image_id": q.image_id, "tags": list(q.tags),
            }, sort_keys=True) + "\n")
    vocab.save(root / "vocab.txt")
    for im in images:
        write_region_file(root / "regions" / f"{im.image_id}.krff", im.regions)
    manifest = CorpusManifest(
        entities="entities.jsonl", images_dir="regions",
        candidates="candidates.jsonl", queries="queries.jsonl",
        vocab="vocab.txt", splits=splits,
    )
    manifest_path = root / "manifest.json"
    manifest_path.write_text(manifest.to_json() + "\n")
    return manifest_path


def load_corpus(manifest_path: str | Path, expect_dim: int | None = None) -> Corpus:
    """Load and cross-validate a corpus; every dangling id is an error."""
    manifest_path = Path(manifest_path)
    try:
        manifest = CorpusManifest.from_json(manifest_path.read_text())
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise CorpusFormatError(f"{manifest_path}: unreadable manifest ({exc})") from exc
    root = manifest_path.parent

    entities: dict[str, EntityRecord] = {}
    path = root / manifest.entities
    for lineno, obj in _read_jsonl(path):
        record = EntityRecord(
            entity_id=_require(obj, "entity_id", path, lineno),
            name=_require(obj, "name", path, lineno),
            category=_require(obj, "category", path, lineno),
            knowledge_text=_require(obj, "knowledge_text", path, lineno),
        )
        if record.entity_id in entities:
            raise CorpusFormatError(f"{path}:{lineno}: duplicate entity {record.entity_id}")
        entities[record.entity_id] = record

    images: dict[str, GalleryImage] = {}
    path = root / manifest.candidates
    for lineno, obj in _read_jsonl(path):
        image_id = _require(obj, "image_id", path, lineno)
        if image_id in images:
            raise CorpusFormatError(f"{path}:{lineno}: duplicate image {image_id}")
        raw_cands = _require(obj, "candidates", path, lineno)
        try:
            cands = CandidateSet(image_id, [
                Candidate(c["entity_id"], c["s_iw"]) for c in raw_cands
            ])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(f"{path}:{lineno}: bad candidate list ({exc})") from exc
        gt = obj.get("gt_entity_id")
        for entity_id in cands.entity_ids() + ([gt] if gt else []):
            if entity_id not in entities:
                raise CorpusFormatError(
                    f"{path}:{lineno}: image {image_id} references unknown "
                    f"entity {entity_id}"
                )
        region_path = root / manifest.images_dir / f"{image_id}.krff"
        if not region_path.exists():
            raise CorpusFormatError(
                f"{path}:{lineno}: image {image_id} has no region file at {region_path}"
            )
        regions = read_region_file(region_path, expect_dim=expect_dim)
        images[image_id] = GalleryImage(image_id, regions, cands, gt_entity_id=gt)

    queries: dict[str, QueryRecord] = {}
    path = root / manifest.queries
    for lineno, obj in _read_jsonl(path):
        try:
            record = QueryRecord(
                query_id=_require(obj, "query_id", path, lineno),
                text=_require(obj, "text", path, lineno),
                image_id=_require(obj, "image_id", path, lineno),
                tags=tuple(obj.get("tags", [])),
            )
        except ValueError as exc:
            raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
        if record.query_id in queries:
            raise CorpusFormatError(f"{path}:{lineno}: duplicate query {record.query_id}")
        if record.image_id not in images:
            raise CorpusFormatError(
                f"{path}:{lineno}: query {record.query_id} references unknown "
                f"image {record.image_id}"
            )
        queries[record.query_id] = record

    vocab = Vocabulary.load(root / manifest.vocab)

    for name, split in manifest.splits.items():
        for image_id in split.image_ids:
            if image_id not in images:
                raise CorpusFormatError(
                    f"{manifest_path}: split {name!r} references unknown image {image_id}"
                )
        for query_id in split.query_ids:
            if query_id not in queries:
                raise CorpusFormatError(
                    f"{manifest_path}: split {name!r} references unknown query {query_id}"
                )

    lengths = [len(tokenize(q.text)) for q in queries.values()]
    log.info(
        "corpus at %s: %d images, %d queries, %d entities, mean query length %.1f",
        root, len(images), len(queries), len(entities),
        float(np.mean(lengths)) if lengths else 0.0,
    )
    return Corpus(entities, images, queries, vocab, manifest.splits, root)


# -- corpus -> model-ready containers ----------------------------------------------


def knowledge_sequences(corpus: Corpus, cfg: ModelConfig) -> dict[str, TokenSequence]:
    return {e.entity_id: encode_query(e.knowledge_text, corpus.vocab, cfg.knowledge_len)
            for e in corpus.entities.values()}


def to_training_set(corpus: Corpus, cfg: ModelConfig, split: str = "train") -> TrainingSet:
    items = [
        TrainItem(q.query_id, encode_query(q.text, corpus.vocab, cfg.query_len), q.image_id)
        for q in corpus.queries_for(split)
    ]
    images = {im.image_id: im for im in corpus.images_for(split)}
    return TrainingSet(items, images, knowledge_sequences(corpus, cfg))


def to_gallery(corpus: Corpus, cfg: ModelConfig, split: str = "gallery_small") -> Gallery:
    return Gallery(corpus.images_for(split), knowledge_sequences(corpus, cfg))


def to_eval_queries(corpus: Corpus, cfg: ModelConfig,
                    split: str = "gallery_small") -> list[EvalQuery]:
    return [
        EvalQuery(q.query_id, encode_query(q.text, corpus.vocab, cfg.query_len),
                  q.image_id, tags=q.tags)
        for q in corpus.queries_for(split)
    ]
