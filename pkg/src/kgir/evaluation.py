"""Gallery ranking and retrieval / entity-linking metrics.

A query is scored against every gallery image in three steps: pick a
knowledge text for the (query, image) pair via score fusion, run the
joint alignment forward, and sort by logit.  Ties break by ascending
image id so rankings are reproducible.  The knowledge-only baseline
skips the joint model entirely and ranks by pooled-text cosine.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import no_grad
from .model import AlignmentModel, ModelConfig, RegionFeatureSet, stack_regions
from .retrieval import CandidateSet, FusionConfig, SelectionResult, select_knowledge
from .text import PAD_ID, TextEncoder, TokenSequence

# How each ablation maps onto (default fusion mode, joint-forward mode).
# Modes whose default is "argmax" let the caller's FusionConfig.mode win,
# e.g. a knowledge-only ranking against oracle-selected texts; the
# ablations that exist to pin selection (no_knowledge, oracle) do not.
EVAL_MODES = {
    "full": ("argmax", "full"),
    "no_knowledge": ("none", "no_knowledge"),
    "no_vision": ("argmax", "no_vision"),
    "oracle": ("oracle", "full"),
    "knowledge_only": ("argmax", None),  # no joint forward at all
}


@dataclass
class GalleryImage:
    image_id: str
    regions: RegionFeatureSet
    candidates: CandidateSet
    gt_entity_id: str | None = None


@dataclass
class Gallery:
    """A fixed set of images to rank, plus the knowledge they can link to."""

    images: list[GalleryImage]
    knowledge: dict[str, TokenSequence]   # entity_id -> tokenized knowledge text

    def __post_init__(self):
        if not self.images:
            raise ValueError("gallery must contain at least one image")
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            raise ValueError("gallery image ids must be unique")
        for im in self.images:
            for entity_id in im.candidates.entity_ids():
                if entity_id not in self.knowledge:
                    raise ValueError(
                        f"image {im.image_id}: candidate {entity_id} has no knowledge text"
                    )

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class EvalQuery:
    query_id: str
    tokens: TokenSequence
    gt_image_id: str
    tags: tuple[str, ...] = ()


@dataclass
class RankingResult:
    query_id: str
    ordering: list[str]        # image ids, best score first
    gt_rank: int | None        # 1-based position of the ground-truth image
    scores: np.ndarray = field(repr=False, default=None)
    selections: dict[str, SelectionResult] = field(repr=False, default_factory=dict)


class GalleryScorer:
    """Reusable per-gallery state: stacked regions and encoded knowledge.

    Build one per (model snapshot, gallery) and feed it many queries;
    everything here is read-only after construction.
    """

    def __init__(self, model: AlignmentModel, gallery: Gallery,
                 fusion_cfg: FusionConfig | None = None, batch_size: int = 64):
        self.model = model
        self.gallery = gallery
        self.fusion_cfg = fusion_cfg if fusion_cfg is not None else FusionConfig()
        self.batch_size = batch_size
        cfg = model.cfg

        region_sets = [im.regions for im in gallery.images]
        self.app, self.box, self.r_mask = stack_regions(region_sets, cfg)

        self.entity_ids = sorted(gallery.knowledge)
        self.entity_index = {e: i for i, e in enumerate(self.entity_ids)}
        k_ids, k_mask = TextEncoder.stack([gallery.knowledge[e] for e in self.entity_ids])
        self.k_ids, self.k_mask = k_ids, k_mask
        with no_grad():
            pooled = []
            for lo in range(0, len(self.entity_ids), batch_size):
                _, p = model.text_encoder(k_ids[lo:lo + batch_size],
                                          k_mask[lo:lo + batch_size])
                pooled.append(p.data)
            self.knowledge_pooled = np.concatenate(pooled, axis=0)
        # Unit rows make the per-query similarity a single matmul.
        norms = np.linalg.norm(self.knowledge_pooled, axis=1, keepdims=True)
        self.knowledge_unit = np.divide(
            self.knowledge_pooled, norms, out=np.zeros_like(self.knowledge_pooled),
            where=norms > 0,
        )

    def query_similarities(self, query: TokenSequence) -> np.ndarray:
        """s_qk between one query and every knowledge text (cosine).

        Computed row by row rather than as one matvec: blocked BLAS
        kernels can give bitwise-different dots for identical rows,
        which would break exact ties between identical knowledge texts.
        """
        with no_grad():
            _, pooled = self.model.text_encoder(query.ids[None, :], query.mask[None, :])
        q = pooled.data[0]
        nq = np.linalg.norm(q)
        if nq == 0.0:
            return np.zeros(len(self.entity_ids))
        qn = q / nq
        return np.array([float(np.dot(row, qn)) for row in self.knowledge_unit])

    def select_for_images(self, query: TokenSequence, mode: str
                          ) -> tuple[list[SelectionResult], np.ndarray, np.ndarray]:
        """Run fusion per image; return selections plus knowledge id/mask rows."""
        default_fusion, _ = EVAL_MODES[mode]
        fusion_mode = self.fusion_cfg.mode if default_fusion == "argmax" else default_fusion
        cfg = self.model.cfg
        sims = self.query_similarities(query)
        fusion = FusionConfig(
            likelihood_weight=self.fusion_cfg.likelihood_weight,
            similarity_weight=self.fusion_cfg.similarity_weight,
            top_k=self.fusion_cfg.top_k,
            normalize=self.fusion_cfg.normalize,
            mode=fusion_mode,
        )
        g = len(self.gallery)
        k_ids = np.full((g, cfg.knowledge_len), PAD_ID, dtype=np.int64)
        k_mask = np.zeros((g, cfg.knowledge_len))
        selections = []
        for i, im in enumerate(self.gallery.images):
            per_cand = np.array([sims[self.entity_index[e]]
                                 for e in im.candidates.entity_ids()])
            sel = select_knowledge(im.candidates, per_cand, fusion,
                                   gt_entity_id=im.gt_entity_id)
            selections.append(sel)
            if sel.entity_id is not None and sel.entity_id in self.gallery.knowledge:
                seq = self.gallery.knowledge[sel.entity_id]
                k_ids[i] = seq.ids
                k_mask[i] = seq.mask
        return selections, k_ids, k_mask

    def score(self, query: TokenSequence, mode: str = "full"
              ) -> tuple[np.ndarray, list[SelectionResult]]:
        """Alignment score of `query` against every gallery image."""
        if mode not in EVAL_MODES:
            raise ValueError(f"unknown evaluation mode {mode!r}")
        _, forward_mode = EVAL_MODES[mode]
        selections, k_ids, k_mask = self.select_for_images(query, mode)
        g = len(self.gallery)

        if forward_mode is None:  # knowledge_only: cosine against selected text
            sims = self.query_similarities(query)
            scores = np.array([
                sims[self.entity_index[sel.entity_id]] if sel.entity_id in self.entity_index
                else 0.0
                for sel in selections
            ])
            return scores, selections

        q_ids = np.tile(query.ids, (g, 1))
        q_mask = np.tile(query.mask, (g, 1))
        scores = np.empty(g)
        with no_grad():
            for lo in range(0, g, self.batch_size):
                hi = min(lo + self.batch_size, g)
                out = self.model.forward(
                    q_ids[lo:hi], q_mask[lo:hi], k_ids[lo:hi], k_mask[lo:hi],
                    self.app[lo:hi], self.box[lo:hi], self.r_mask[lo:hi],
                    mode=forward_mode,
                )
                scores[lo:hi] = out.align_logit.data
        return scores, selections


def _sorted_ordering(scores: np.ndarray, image_ids: list[str]) -> list[int]:
    return sorted(range(len(image_ids)), key=lambda i: (-scores[i], image_ids[i]))


def rank_gallery(
    query: EvalQuery,
    gallery: Gallery,
    model: AlignmentModel,
    fusion_cfg: FusionConfig | None = None,
    mode: str = "full",
    scorer: GalleryScorer | None = None,
) -> RankingResult:
    """Rank every gallery image for one query, best first.

    Ties in score break by ascending image id, so the ground truth's
    rank equals 1 + #strictly-better + #equal-with-lower-id.  Pass a
    prebuilt `scorer` when ranking many queries against one gallery.
    """
    if scorer is None:
        scorer = GalleryScorer(model, gallery, fusion_cfg)
    scores, selections = scorer.score(query.tokens, mode)
    image_ids = [im.image_id for im in gallery.images]
    order = _sorted_ordering(scores, image_ids)
    ordering = [image_ids[i] for i in order]
    gt_rank = ordering.index(query.gt_image_id) + 1 if query.gt_image_id in set(image_ids) else None
    return RankingResult(
        query_id=query.query_id,
        ordering=ordering,
        gt_rank=gt_rank,
        scores=scores,
        selections={im.image_id: sel for im, sel in zip(gallery.images, selections)},
    )


def knowledge_only_rank(
    query: EvalQuery,
    gallery: Gallery,
    model: AlignmentModel,
    fusion_cfg: FusionConfig | None = None,
    scorer: GalleryScorer | None = None,
) -> RankingResult:
    """Rank by query-to-selected-knowledge cosine alone (no visual input)."""
    return rank_gallery(query, gallery, model, fusion_cfg,
                        mode="knowledge_only", scorer=scorer)


# -- metrics ---------------------------------------------------------------


def recall_at_k(ranks: list[int], k: int) -> float:
    """Fraction of 1-based ranks that land within the top k."""
    if not ranks:
        raise ValueError("recall over an empty rank list is undefined")
    if k < 1:
        raise ValueError("k must be >= 1")
    return sum(1 for r in ranks if r <= k) / len(ranks)


def median_rank(ranks: list[int]) -> int:
    """Median rank; even-length lists take the lower middle element."""
    if not ranks:
        raise ValueError("median of an empty rank list is undefined")
    ordered = sorted(ranks)
    return ordered[(len(ordered) - 1) // 2]


def _linking_hits(selection: SelectionResult, gt_entity_id: str, k: int) -> bool:
    """Is the ground-truth entity within the top-k linked candidates?

    The selected entity counts as rank 1; the rest of the considered
    list follows in fused-score order.  (For argmax selection this is
    exactly the fused ordering; for oracle the ground truth leads.)
    """
    ranked = []
    if selection.entity_id is not None:
        ranked.append(selection.entity_id)
    by_fused = sorted(range(len(selection.considered)),
                      key=lambda i: -selection.fused[i])
    ranked.extend(selection.considered[i] for i in by_fused
                  if selection.considered[i] not in ranked)
    return gt_entity_id in ranked[:k]


def wikification_accuracy(selections: list[SelectionResult],
                          gt_entity_ids: list[str], k: int = 1) -> float:
    """Top-k accuracy of entity linking over parallel selection/gt lists."""
    if len(selections) != len(gt_entity_ids):
        raise ValueError("selections and ground-truth lists differ in length")
    if not selections:
        raise ValueError("no selections to score")
    hits = sum(_linking_hits(sel, gt, k) for sel, gt in zip(selections, gt_entity_ids))
    return hits / len(selections)


# -- full evaluation run ----------------------------------------------------


@dataclass
class QueryOutcome:
    query_id: str
    gt_rank: int
    selected_entity: str | None   # selection made on the ground-truth image
    tags: tuple[str, ...] = ()


def evaluate(
    model: AlignmentModel,
    gallery: Gallery,
    queries: list[EvalQuery],
    fusion_cfg: FusionConfig | None = None,
    mode: str = "full",
    wikification_k: int = 5,
    batch_size: int = 64,
) -> tuple[dict, list[QueryOutcome]]:
    """Score every query against the gallery and reduce to a report.

    Returns (report, per-query outcomes).  The report is the flat JSON
    shape written by the command-line tools; recall numbers are
    query-weighted.  Wikification accuracy judges the fusion selection
    each query induced on its own ground-truth image.
    """
    if not queries:
        raise ValueError("no queries to evaluate")
    scorer = GalleryScorer(model, gallery, fusion_cfg, batch_size=batch_size)
    image_pos = {im.image_id: i for i, im in enumerate(gallery.images)}

    outcomes: list[QueryOutcome] = []
    gt_selections: list[SelectionResult] = []
    gt_entities: list[str] = []
    for q in queries:
        if q.gt_image_id not in image_pos:
            raise ValueError(f"query {q.query_id}: ground-truth image "
                             f"{q.gt_image_id} not in gallery")
        result = rank_gallery(q, gallery, model, mode=mode, scorer=scorer)
        sel = result.selections[q.gt_image_id]
        outcomes.append(QueryOutcome(q.query_id, result.gt_rank, sel.entity_id, q.tags))
        gt_image = gallery.images[image_pos[q.gt_image_id]]
        if gt_image.gt_entity_id is not None:
            gt_selections.append(sel)
            gt_entities.append(gt_image.gt_entity_id)

    ranks = [o.gt_rank for o in outcomes]
    report = {
        "r1": recall_at_k(ranks, 1),
        "r5": recall_at_k(ranks, 5),
        "r10": recall_at_k(ranks, 10),
        "mdr": median_rank(ranks),
        "wikification_top1": (wikification_accuracy(gt_selections, gt_entities, 1)
                              if gt_selections else None),
        "wikification_topk": (wikification_accuracy(gt_selections, gt_entities,
                                                    wikification_k)
                              if gt_selections else None),
        "n_queries": len(queries),
        "config_hash": model.cfg.hash(),
    }
    return report, outcomes


def write_outcomes_csv(outcomes: list[QueryOutcome], path: str | Path) -> None:
    """Per-query detail next to the JSON report."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "gt_rank", "selected_entity", "tags"])
        for o in outcomes:
            writer.writerow([o.query_id, o.gt_rank, o.selected_entity or "",
                             " ".join(o.tags)])
