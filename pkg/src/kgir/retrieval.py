"""Query-aware selection of entity knowledge for an image.

An upstream recognizer proposes candidate entities per image, each with
a likelihood.  At query time every candidate's knowledge text is scored
against the query (pooled-feature cosine), the two signals are fused as
a weighted sum, and the best candidate's knowledge text travels forward
into the joint encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class EntityRecord:
    entity_id: str
    name: str
    category: str            # e.g. brand / celebrity / landmark
    knowledge_text: str


@dataclass
class Candidate:
    entity_id: str
    likelihood: float        # recognizer confidence in [0, 1]


@dataclass
class CandidateSet:
    """Recognizer proposals for one image, best first.

    Invariants checked on construction: non-empty, likelihoods within
    [0, 1] and non-increasing, entity ids unique.
    """

    image_id: str
    candidates: list[Candidate]

    def __post_init__(self):
        if not self.candidates:
            raise ValueError(f"image {self.image_id}: empty candidate list")
        ids = [c.entity_id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise ValueError(f"image {self.image_id}: duplicate candidate entity")
        liks = [c.likelihood for c in self.candidates]
        if any(l < 0.0 or l > 1.0 for l in liks):
            raise ValueError(f"image {self.image_id}: likelihood outside [0, 1]")
        if any(a < b for a, b in zip(liks, liks[1:])):
            raise ValueError(f"image {self.image_id}: candidates not sorted by likelihood")

    def entity_ids(self) -> list[str]:
        return [c.entity_id for c in self.candidates]


@dataclass
class FusionConfig:
    """Weights and knobs for combining likelihood with query similarity."""

    likelihood_weight: float = 0.5
    similarity_weight: float = 0.5
    top_k: int = 5
    normalize: bool = True   # min-max each score list over the candidates
    mode: str = "argmax"     # argmax | oracle | none

    def __post_init__(self):
        if self.mode not in ("argmax", "oracle", "none"):
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass
class SelectionResult:
    """Outcome of knowledge selection for one (query, image) pair."""

    entity_id: str | None               # chosen knowledge source (None for mode=none)
    fused: np.ndarray                   # fused score per considered candidate
    selection: np.ndarray               # one-hot over considered candidates (all-zero
                                        # when nothing in the list was chosen)
    considered: list[str] = field(default_factory=list)  # candidate ids, list order


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two vectors; zero whenever either has zero norm."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def score_query_knowledge(query_pooled: np.ndarray, knowledge_pooled: np.ndarray) -> float:
    """Query-to-knowledge affinity: cosine of pooled text features."""
    return cosine_similarity(query_pooled, knowledge_pooled)


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return x  # fewer than two distinct values: leave untouched
    return (x - lo) / (hi - lo)


def fuse_scores(cands: CandidateSet, query_scores: np.ndarray, cfg: FusionConfig) -> np.ndarray:
    """Weighted sum of likelihood and query similarity over the top-k.

    `query_scores` must align with `cands.candidates`; only the first
    `cfg.top_k` candidates (already sorted best-first) are considered.
    With `cfg.normalize` both score lists are min-max rescaled over the
    considered candidates first.
    """
    k = min(cfg.top_k, len(cands.candidates))
    lik = np.array([c.likelihood for c in cands.candidates[:k]], dtype=float)
    sim = np.asarray(query_scores, dtype=float)[:k]
    if cfg.normalize:
        lik, sim = _minmax(lik), _minmax(sim)
    return cfg.likelihood_weight * lik + cfg.similarity_weight * sim


def select_knowledge(
    cands: CandidateSet,
    query_scores: np.ndarray,
    cfg: FusionConfig,
    gt_entity_id: str | None = None,
) -> SelectionResult:
    """Pick the knowledge source for one (query, image) pair.

    argmax: highest fused score wins, ties to the lowest index (i.e. the
    higher-likelihood candidate).  oracle: the ground-truth entity wins
    outright whenever known, even if absent from the candidate list.
    none: knowledge is suppressed downstream; nothing is selected.
    """
    k = min(cfg.top_k, len(cands.candidates))
    considered = cands.entity_ids()[:k]
    fused = fuse_scores(cands, query_scores, cfg)
    selection = np.zeros(k)

    if cfg.mode == "none":
        return SelectionResult(None, fused, selection, considered)

    if cfg.mode == "oracle":
        if gt_entity_id is None:
            raise ValueError("oracle selection requires the ground-truth entity id")
        if gt_entity_id in considered:
            selection[considered.index(gt_entity_id)] = 1.0
        return SelectionResult(gt_entity_id, fused, selection, considered)

    best = int(np.argmax(fused))  # argmax takes the earliest maximum
    selection[best] = 1.0
    return SelectionResult(considered[best], fused, selection, considered)
