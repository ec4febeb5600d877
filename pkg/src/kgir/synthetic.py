"""Deterministic synthetic corpus with a controllable knowledge gap.

The construction makes "needs knowledge" a structural property rather
than a statistical accident:

* Every entity owns four exclusive words (two factual, two commonsense)
  that appear in its knowledge text and nowhere else in the visual
  world.  A query built from them cannot be resolved by region features
  alone — only by reading the right knowledge text.
* Scene and detail words, by contrast, are loud visual signals: each
  word owns a fixed random direction in appearance space and images
  carry their scene/detail directions as strong regions.  Entity
  appearance clusters are deliberately weak and overlapping.
* Within one entity's gallery images the scenes are all distinct, so
  (entity, scene) pins a unique gallery image: a model that reads both
  modalities can hit rank 1, a vision-only model is left guessing
  between look-alike entities.
* Candidate likelihoods are noisy on purpose: the ground truth is the
  top-1 candidate only `top1_rate` of the time (else a close second or
  third), which is exactly the headroom query-aware reranking can win.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import QueryRecord, Split, write_corpus
from .evaluation import GalleryImage
from .model import RegionFeatureSet
from .retrieval import Candidate, CandidateSet, EntityRecord
from .text import build_vocab

SCENE_WORDS = (
    "street", "beach", "market", "forest", "stadium", "museum",
    "harbor", "desert", "rooftop", "garden", "subway", "bridge",
)
DETAIL_WORDS = (
    "red", "blue", "green", "golden", "wooden", "glass", "neon", "vintage",
    "crowd", "umbrella", "bicycle", "fountain", "lantern", "awning", "mural",
    "scaffold", "pigeon", "kiosk", "bench", "staircase", "archway", "balcony",
    "canopy", "cobblestone", "railing", "signpost", "shutter", "chimney",
    "doorway", "hedge", "pillar", "plaque", "puddle", "rooftile", "statue",
    "steps", "tarp", "terrace", "trellis", "turnstile", "vane", "vendor",
    "wagon", "wreath", "ladder", "mailbox", "gutter", "flagpole",
)
CATEGORIES = ("brand", "celebrity", "landmark")

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SyntheticSpec:
    """Generator knobs; the defaults are the desk-scale reference corpus."""

    n_entities: int = 16
    n_train_images: int = 200
    n_gallery_images: int = 64
    n_queries: int = 900
    d_app: int = 64
    n_regions: int = 8
    knowledge_dependence: float = 0.7
    top1_rate: float = 0.6
    n_candidates: int = 5
    seed: int = 0

    def __post_init__(self):
        n_images = self.n_train_images + self.n_gallery_images
        if self.n_entities < 2:
            raise ValueError("need at least 2 entities")
        if n_images < self.n_entities:
            raise ValueError("need at least as many images as entities")
        if self.n_gallery_images < self.n_entities:
            raise ValueError("every entity needs at least one gallery image")
        if self.n_gallery_images > self.n_entities * len(SCENE_WORDS):
            raise ValueError(
                "gallery too large: an entity's gallery images need distinct scenes "
                f"and only {len(SCENE_WORDS)} scene words exist"
            )
        if self.n_queries < 1:
            raise ValueError("need at least one query")
        if not 0.0 <= self.knowledge_dependence <= 1.0:
            raise ValueError("knowledge_dependence must lie in [0, 1]")
        if not 0.0 <= self.top1_rate <= 1.0:
            raise ValueError("top1_rate must lie in [0, 1]")
        if not 2 <= self.n_candidates <= self.n_entities:
            raise ValueError("n_candidates must lie in [2, n_entities]")
        if self.n_regions < 4:
            raise ValueError("need >= 4 regions (entity, scene, two details)")
        if self.d_app < 8:
            raise ValueError("d_app too small to separate word directions")


def _pseudo_word(rng: np.random.Generator, taken: set[str]) -> str:
    """A fresh pronounceable nonsense word, e.g. 'zubori'."""
    while True:
        n_syllables = int(rng.integers(2, 4))
        word = "".join(
            _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(n_syllables)
        )
        if word not in taken:
            taken.add(word)
            return word


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _random_box(rng: np.random.Generator) -> np.ndarray:
    x0, y0 = rng.uniform(0.0, 0.6, size=2)
    w, h = rng.uniform(0.2, 0.4, size=2)
    return np.array([x0, y0, min(x0 + w, 1.0), min(y0 + h, 1.0)])


@dataclass
class _Entity:
    record: EntityRecord
    factual: tuple[str, str]
    commonsense: tuple[str, str]
    center: np.ndarray


def _make_entities(spec: SyntheticSpec, rng: np.random.Generator) -> list[_Entity]:
    taken = set(SCENE_WORDS) | set(DETAIL_WORDS)
    entities = []
    for i in range(spec.n_entities):
        name = _pseudo_word(rng, taken)
        factual = (_pseudo_word(rng, taken), _pseudo_word(rng, taken))
        commonsense = (_pseudo_word(rng, taken), _pseudo_word(rng, taken))
        category = CATEGORIES[i % len(CATEGORIES)]
        text = (
            f"{name} is a {category} known for {factual[0]} and {factual[1]} "
            f"and often linked with {commonsense[0]} {commonsense[1]}"
        )
        entities.append(_Entity(
            record=EntityRecord(f"e{i:03d}", name, category, text),
            factual=factual,
            commonsense=commonsense,
            # Weak, overlapping visual identity: vision alone should
            # struggle to tell entities apart.
            center=0.5 * rng.normal(size=spec.d_app),
        ))
    return entities


def _n_details(spec: SyntheticSpec) -> int:
    """Detail words per image: fill regions up to four details, after the
    entity and scene rows, leaving any remainder as background noise."""
    return max(2, min(4, spec.n_regions - 4))


def _make_regions(spec: SyntheticSpec, rng: np.random.Generator,
                  entity: _Entity, scene: str, details: tuple[str, ...],
                  word_vec: dict[str, np.ndarray]) -> RegionFeatureSet:
    # Word regions are deliberately clean: an image's visual identity is
    # (almost) nothing but its word set, so the only matching strategy
    # that separates same-entity images on held-out galleries is reading
    # the word directions, not memorizing per-image noise signatures.
    rows = np.empty((spec.n_regions, spec.d_app))
    rows[0] = entity.center + 0.5 * rng.normal(size=spec.d_app)
    words = (scene, *details)
    for j, word in enumerate(words, start=1):
        rows[j] = 3.0 * word_vec[word] + 0.15 * rng.normal(size=spec.d_app)
    for j in range(1 + len(words), spec.n_regions):
        rows[j] = 0.2 * rng.normal(size=spec.d_app)
    boxes = np.stack([_random_box(rng) for _ in range(spec.n_regions)])
    return RegionFeatureSet(rows, boxes)


def _make_candidates(spec: SyntheticSpec, rng: np.random.Generator,
                     image_id: str, gt_index: int) -> CandidateSet:
    others = [i for i in range(spec.n_entities) if i != gt_index]
    distractors = list(rng.choice(others, size=spec.n_candidates - 1, replace=False))
    if rng.random() < spec.top1_rate:
        scored = [(gt_index, rng.uniform(0.80, 0.95))]
        scored += [(d, rng.uniform(0.30, 0.70)) for d in distractors]
    else:
        # Ground truth demoted to a close second/third place: recoverable
        # by reranking, lost to a likelihood-only baseline.
        scored = [(distractors[0], rng.uniform(0.80, 0.95)),
                  (gt_index, rng.uniform(0.65, 0.79))]
        scored += [(d, rng.uniform(0.30, 0.60)) for d in distractors[1:]]
    scored.sort(key=lambda pair: -pair[1])
    return CandidateSet(image_id, [
        Candidate(f"e{i:03d}", round(float(s), 6)) for i, s in scored
    ])


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Write a complete corpus under `out_dir`; returns the manifest path.

    Identical specs produce byte-identical corpora: every random draw
    comes from one seeded generator in fixed order.
    """
    rng = np.random.default_rng(spec.seed)
    entities = _make_entities(spec, rng)
    word_vec = {w: _unit(rng, spec.d_app) for w in SCENE_WORDS + DETAIL_WORDS}

    n_images = spec.n_train_images + spec.n_gallery_images
    images: list[GalleryImage] = []
    image_entity: list[int] = []
    image_scene: list[str] = []
    image_details: list[tuple[str, ...]] = []

    # Gallery images first: per entity, a block of distinct scenes.
    gallery_scene_pool: dict[int, list[str]] = {}
    for idx in range(n_images):
        image_id = f"im{idx:04d}"
        is_gallery = idx >= spec.n_train_images
        entity_index = idx % spec.n_entities
        if is_gallery:
            pool = gallery_scene_pool.setdefault(
                entity_index, list(rng.permutation(SCENE_WORDS)))
            scene = pool.pop()
        else:
            scene = SCENE_WORDS[rng.integers(len(SCENE_WORDS))]
        details = tuple(rng.choice(DETAIL_WORDS, size=_n_details(spec), replace=False))
        regions = _make_regions(spec, rng, entities[entity_index], scene,
                                details, word_vec)
        candidates = _make_candidates(spec, rng, image_id, entity_index)
        images.append(GalleryImage(image_id, regions, candidates,
                                   gt_entity_id=f"e{entity_index:03d}"))
        image_entity.append(entity_index)
        image_scene.append(scene)
        image_details.append(details)

    queries: list[QueryRecord] = []
    for q_idx in range(spec.n_queries):
        idx = q_idx % n_images
        entity = entities[image_entity[idx]]
        scene = image_scene[idx]
        # Queries are terse word lists on purpose: every token then names
        # either the scene, a visible detail, or a knowledge-exclusive
        # word, so each one carries ranking signal.
        if rng.random() < spec.knowledge_dependence:
            if rng.random() < 0.5:
                words, tag = entity.factual, "factual"
            else:
                words, tag = entity.commonsense, "commonsense"
            w0, w1 = rng.permutation(words)
            text = f"{scene} {w0} {w1}"
            tags = (tag,)
        else:
            n_mention = min(3, len(image_details[idx]))
            picked = rng.choice(image_details[idx], size=n_mention, replace=False)
            text = " ".join([scene, *picked])
            tags = ("visual",)
        queries.append(QueryRecord(f"q{q_idx:04d}", text, f"im{idx:04d}", tags))

    corpus_texts = [e.record.knowledge_text for e in entities] + [q.text for q in queries]
    vocab = build_vocab(corpus_texts)

    train_images = [im.image_id for im in images[:spec.n_train_images]]
    gallery_images = [im.image_id for im in images[spec.n_train_images:]]
    train_set = set(train_images)
    train_queries = [q.query_id for q in queries if q.image_id in train_set]
    gallery_queries = [q.query_id for q in queries if q.image_id not in train_set]
    splits = {
        "train": Split(train_images, train_queries),
        "gallery_small": Split(gallery_images, gallery_queries),
        # Same held-out queries, every image as a distractor haystack.
        "gallery_large": Split(train_images + gallery_images, gallery_queries),
    }
    return write_corpus(Path(out_dir), [e.record for e in entities], images,
                        queries, vocab, splits)
