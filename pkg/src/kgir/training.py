"""Pair sampling, MLM masking, loss composition, and the phase schedule.

Training alternates two objectives over (query, knowledge, image)
triples: binary alignment classification on sampled positive/negative
pairs, and masked-token prediction on the text spans of positives.
Knowledge travels with the image — a selection cache picks one
knowledge text per (query, image) pair from the image's candidates and
is refreshed between epochs as the text encoder moves.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .evaluation import EvalQuery, Gallery, GalleryImage, GalleryScorer, evaluate
from .model import AlignmentModel, stack_regions
from .optim import Adam
from .retrieval import FusionConfig, select_knowledge
from .text import MASK_ID, N_RESERVED, PAD_ID, TextEncoder, TokenSequence, empty_sequence

OBJECTIVES = ("itm_mlm", "mlm_only", "itm_only")
PHASE_MODES = ("full", "no_knowledge")


@dataclass
class TrainingExample:
    query: TokenSequence
    image_id: str
    regions: "RegionFeatureSet"
    knowledge: TokenSequence      # all-pad when the modality is ablated
    label: int                    # 1 aligned, 0 misaligned

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass
class TrainItem:
    """One ground-truth (query, image) pair — the positive pool."""

    query_id: str
    query: TokenSequence
    image_id: str


@dataclass
class TrainingSet:
    """Everything sampling needs: positives, images, knowledge texts."""

    items: list[TrainItem]
    images: dict[str, GalleryImage]
    knowledge: dict[str, TokenSequence]

    def __post_init__(self):
        for item in self.items:
            if item.image_id not in self.images:
                raise ValueError(
                    f"query {item.query_id}: image {item.image_id} not in training set"
                )
        self.gt_pairs = {(it.query_id, it.image_id) for it in self.items}
        self.image_ids = sorted(self.images)
        # Inverted index from content token to the queries containing it
        # and the images those queries describe.  Hard-negative sampling
        # swaps within one token's pool, producing textually confusable
        # pairs: share an entity word and only the visible scene differs,
        # share a scene word and only entity/details differ, and so on.
        self.items_by_token: dict[int, list[TrainItem]] = {}
        self.images_by_token: dict[int, list[str]] = {}
        seen: dict[int, set[str]] = {}
        for item in self.items:
            for token in item.query.content_ids():
                token = int(token)
                self.items_by_token.setdefault(token, []).append(item)
                if item.image_id not in seen.setdefault(token, set()):
                    seen[token].add(item.image_id)
                    self.images_by_token.setdefault(token, []).append(item.image_id)


class SelectionCache:
    """Pooled text embeddings for cheap per-pair knowledge selection.

    Fusion needs a query-to-knowledge similarity for every candidate of
    every sampled pair; encoding on demand would dwarf the training
    step.  Instead all knowledge texts and all training queries are
    pooled once per refresh (between epochs) and selection becomes a
    few dot products.  Selection is intentionally off-graph: no
    gradient flows through the retrieval decision.
    """

    def __init__(self, model: AlignmentModel, training_set: TrainingSet,
                 fusion_cfg: FusionConfig, batch_size: int = 64):
        self.model = model
        self.training_set = training_set
        self.fusion_cfg = fusion_cfg
        self.batch_size = batch_size
        self.entity_ids = sorted(training_set.knowledge)
        self.entity_index = {e: i for i, e in enumerate(self.entity_ids)}
        self.refresh()

    def _pool_unit(self, seqs: list[TokenSequence]) -> np.ndarray:
        rows = []
        with no_grad():
            for lo in range(0, len(seqs), self.batch_size):
                ids, mask = TextEncoder.stack(seqs[lo:lo + self.batch_size])
                _, pooled = self.model.text_encoder(ids, mask)
                rows.append(pooled.data)
        out = np.concatenate(rows, axis=0)
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        return np.divide(out, norms, out=np.zeros_like(out), where=norms > 0)

    def refresh(self) -> None:
        ts = self.training_set
        self.knowledge_unit = self._pool_unit([ts.knowledge[e] for e in self.entity_ids])
        self.query_unit = {
            item.query_id: row
            for item, row in zip(ts.items, self._pool_unit([it.query for it in ts.items]))
        }

    def select(self, query_id: str, image: GalleryImage) -> tuple[str | None, TokenSequence]:
        """Fused knowledge choice for one pair: (entity id, its text)."""
        q = self.query_unit[query_id]
        sims = np.array([
            float(np.dot(self.knowledge_unit[self.entity_index[e]], q))
            for e in image.candidates.entity_ids()
        ])
        sel = select_knowledge(image.candidates, sims, self.fusion_cfg,
                               gt_entity_id=image.gt_entity_id)
        if sel.entity_id is None or sel.entity_id not in self.training_set.knowledge:
            length = len(next(iter(self.training_set.knowledge.values())).ids)
            return None, empty_sequence(length)
        return sel.entity_id, self.training_set.knowledge[sel.entity_id]


# -- pair sampling -----------------------------------------------------------


def _check_sampleable(dataset: TrainingSet) -> None:
    if len(dataset.images) < 2:
        raise ValueError("negative sampling needs at least 2 distinct images")
    if len(dataset.items) < 2:
        raise ValueError("negative sampling needs at least 2 queries")


def make_negative(dataset: TrainingSet, positive: TrainItem,
                  rng: np.random.Generator, max_attempts: int = 100,
                  hard: bool = False) -> tuple[TokenSequence, str, str]:
    """Corrupt one side of a positive: swap the image XOR the query.

    Returns (query tokens, query_id, image_id) of the corrupted pair.
    A hard negative samples one content token from the positive's query
    and swaps within that token's pool, yielding a textually confusable
    pair: the replacement shares a word with the original, so the pair
    can only be rejected by checking the parts that differ — details
    against regions, entity words against knowledge.  That is the
    discrimination a gallery ranker actually faces.  Tokens whose pool
    is too small to supply a swap fall back to the uniform pools.  A
    candidate replacement colliding with any ground-truth pair is
    resampled; after `max_attempts` the dataset is considered
    degenerate.
    """
    image_pool: list[str] = dataset.image_ids
    item_pool: list[TrainItem] = dataset.items
    if hard:
        tokens = positive.query.content_ids()
        if len(tokens):
            token = int(tokens[rng.integers(len(tokens))])
            shared_images = dataset.images_by_token.get(token, [])
            shared_items = dataset.items_by_token.get(token, [])
            if len(shared_images) >= 2:
                image_pool = shared_images
            if len(shared_items) >= 2:
                item_pool = shared_items
    for _ in range(max_attempts):
        if rng.random() < 0.5:  # swap the image
            new_image = image_pool[rng.integers(len(image_pool))]
            if (positive.query_id, new_image) not in dataset.gt_pairs:
                return positive.query, positive.query_id, new_image
        else:                   # swap the query
            other = item_pool[rng.integers(len(item_pool))]
            if (other.query_id, positive.image_id) not in dataset.gt_pairs:
                return other.query, other.query_id, positive.image_id
    raise RuntimeError(
        "could not build a non-ground-truth negative pair after "
        f"{max_attempts} attempts; dataset too degenerate"
    )


def sample_pairs(
    dataset: TrainingSet,
    rng: np.random.Generator,
    n_examples: int,
    negative_ratio: float = 1.0,
    selector: SelectionCache | None = None,
    knowledge_len: int | None = None,
) -> list[TrainingExample]:
    """Draw a batch of labeled pairs.

    Each emitted example is a fresh uniform positive with probability
    1/(1+negative_ratio), otherwise a negative corrupted from one.
    Knowledge comes from `selector` when given (fused choice for the
    pair as sampled), else stays empty at `knowledge_len`.
    """
    _check_sampleable(dataset)
    if negative_ratio < 0:
        raise ValueError("negative_ratio must be >= 0")
    p_positive = 1.0 / (1.0 + negative_ratio)
    out = []
    for _ in range(n_examples):
        positive = dataset.items[rng.integers(len(dataset.items))]
        if rng.random() < p_positive:
            query, query_id, image_id, label = (positive.query, positive.query_id,
                                                positive.image_id, 1)
        else:
            query, query_id, image_id = make_negative(dataset, positive, rng)
            label = 0
        image = dataset.images[image_id]
        if selector is not None:
            _, knowledge = selector.select(query_id, image)
        else:
            if knowledge_len is None:
                raise ValueError("need knowledge_len when sampling without a selector")
            knowledge = empty_sequence(knowledge_len)
        out.append(TrainingExample(query, image_id, image.regions, knowledge, label))
    return out


# -- masking -----------------------------------------------------------------


def apply_mlm_mask(seq: TokenSequence, rng: np.random.Generator, p: float = 0.15
                   ) -> tuple[TokenSequence, np.ndarray, np.ndarray]:
    """Independently replace eligible tokens with [MASK].

    Eligible means a real (mask=1) non-reserved token; [CLS]/[SEP]/[PAD]
    and friends are never touched.  Returns the masked sequence, the
    original ids at masked slots (0 elsewhere), and a float indicator of
    masked positions.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"mask probability must lie in [0, 1], got {p}")
    eligible = (seq.ids >= N_RESERVED) & (seq.mask > 0)
    draw = rng.random(len(seq.ids)) < p
    hit = eligible & draw
    ids = np.where(hit, MASK_ID, seq.ids)
    targets = np.where(hit, seq.ids, PAD_ID)
    masked = TokenSequence(ids, seq.mask.copy(), seq.true_length)
    return masked, targets.astype(np.int64), hit.astype(float)


# -- batches and steps --------------------------------------------------------


@dataclass
class Batch:
    q_ids: np.ndarray
    q_mask: np.ndarray
    k_ids: np.ndarray
    k_mask: np.ndarray
    app: np.ndarray
    box: np.ndarray
    r_mask: np.ndarray
    labels: np.ndarray        # [B] float
    mlm_targets: np.ndarray   # [B, L+M] int
    mlm_scored: np.ndarray    # [B, L+M] float, 1 where a prediction is scored
    mode: str = "full"

    @property
    def size(self) -> int:
        return self.q_ids.shape[0]


def build_batch(
    examples: list[TrainingExample],
    cfg,
    rng: np.random.Generator,
    mlm_prob: float = 0.15,
    mask_text: bool = True,
    mode: str = "full",
) -> Batch:
    """Stack examples into arrays, masking text for MLM.

    Every example gets masked — negatives included.  If only aligned
    pairs were masked, the presence of a mask token would give away the
    matching label and the alignment head would learn to detect masks
    instead of content (and collapse to chance on mask-free evaluation
    inputs).  The MLM loss itself is still scored only on aligned
    examples: predicting the text of a deliberately mismatched pair
    would train against noise.  Under the no_knowledge mode the
    knowledge span is left untouched.
    """
    queries, knowledges, targets, scored = [], [], [], []
    for ex in examples:
        q, k = ex.query, ex.knowledge
        q_t = np.zeros(len(q.ids), dtype=np.int64)
        q_s = np.zeros(len(q.ids))
        k_t = np.zeros(len(k.ids), dtype=np.int64)
        k_s = np.zeros(len(k.ids))
        if mask_text:
            q, q_t, q_s = apply_mlm_mask(q, rng, mlm_prob)
            if mode == "full":
                k, k_t, k_s = apply_mlm_mask(k, rng, mlm_prob)
        if ex.label != 1:
            q_s[:] = 0.0
            k_s[:] = 0.0
        queries.append(q)
        knowledges.append(k)
        targets.append(np.concatenate([q_t, k_t]))
        scored.append(np.concatenate([q_s, k_s]))
    q_ids, q_mask = TextEncoder.stack(queries)
    k_ids, k_mask = TextEncoder.stack(knowledges)
    app, box, r_mask = stack_regions([ex.regions for ex in examples], cfg)
    return Batch(
        q_ids, q_mask, k_ids, k_mask, app, box, r_mask,
        labels=np.array([float(ex.label) for ex in examples]),
        mlm_targets=np.stack(targets),
        mlm_scored=np.stack(scored),
        mode=mode,
    )


def train_step(model: AlignmentModel, batch: Batch, optimizer: Adam,
               objective: str = "itm_mlm") -> tuple[float, float]:
    """One forward/backward/update; returns (itm_loss, mlm_loss).

    Inactive objectives contribute exactly zero.  A non-finite total
    aborts with the offending values spelled out rather than letting the
    optimizer walk into NaNs.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    model.zero_grad()
    out = model.forward(batch.q_ids, batch.q_mask, batch.k_ids, batch.k_mask,
                        batch.app, batch.box, batch.r_mask, mode=batch.mode)

    zero = Tensor(np.zeros(()))
    if objective in ("itm_mlm", "itm_only"):
        itm = ag.tensor_mean(ag.bce_with_logits(out.align_logit, batch.labels))
    else:
        itm = zero
    if objective in ("itm_mlm", "mlm_only"):
        b, lm, v = out.mlm_logits.shape
        flat = ag.reshape(out.mlm_logits, (b * lm, v))
        mlm = ag.cross_entropy(flat, batch.mlm_targets.reshape(-1),
                               batch.mlm_scored.reshape(-1))
    else:
        mlm = zero
    loss = itm + mlm

    itm_val, mlm_val = float(itm.data), float(mlm.data)
    if not math.isfinite(itm_val + mlm_val):
        raise RuntimeError(
            f"non-finite loss: itm={itm_val}, mlm={mlm_val} "
            f"(batch of {batch.size}, objective {objective})"
        )
    loss.backward()
    optimizer.step()
    return itm_val, mlm_val


# -- the schedule -------------------------------------------------------------


@dataclass
class TrainPhase:
    objective: str            # "itm_mlm" | "mlm_only" | "itm_only"
    epochs: int
    lr: float
    batch_size: int = 64
    mode: str = "full"        # forward mode: "full" | "no_knowledge"
    # Fraction of this phase's negatives swapped within the positive's
    # ground-truth entity (see make_negative).  Per-phase so schedules
    # can run a curriculum: uniform negatives bootstrap the matching
    # head, same-entity negatives then force scene discrimination.
    hard_negative_fraction: float = 0.0
    # Per-example probability that a full-mode example travels with
    # empty knowledge, so the matcher also learns the knowledge-free
    # input distribution it will face under ablated evaluation.
    knowledge_dropout: float = 0.0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.mode not in PHASE_MODES:
            raise ValueError(f"unknown phase mode {self.mode!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.hard_negative_fraction <= 1.0:
            raise ValueError("hard_negative_fraction must lie in [0, 1]")
        if not 0.0 <= self.knowledge_dropout <= 1.0:
            raise ValueError("knowledge_dropout must lie in [0, 1]")


@dataclass
class TrainSchedule:
    phases: list[TrainPhase]
    seed: int = 0
    mlm_prob: float = 0.15
    negative_ratio: float = 1.0
    text_lr_multiplier: float = 0.1
    eval_every: int = 0       # validate every N epochs (0 = never)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainSchedule":
        phases = [TrainPhase(**p) for p in raw.get("phases", [])]
        rest = {k: v for k, v in raw.items() if k != "phases"}
        return cls(phases=phases, **rest)

    def to_dict(self) -> dict:
        return {
            "phases": [vars(p).copy() for p in self.phases],
            "seed": self.seed,
            "mlm_prob": self.mlm_prob,
            "negative_ratio": self.negative_ratio,
            "text_lr_multiplier": self.text_lr_multiplier,
            "eval_every": self.eval_every,
        }


METRIC_COLUMNS = ["epoch", "phase", "itm_loss", "mlm_loss", "r1", "r5", "r10", "mdr"]


@dataclass
class Validation:
    """Optional per-epoch retrieval check against a held-out gallery."""

    gallery: Gallery
    queries: list[EvalQuery]
    fusion_cfg: FusionConfig | None = None
    mode: str = "full"


def _epoch_batches(dataset: TrainingSet, phase: TrainPhase,
                   schedule: TrainSchedule, rng: np.random.Generator,
                   selector: SelectionCache | None, knowledge_len: int):
    """Walk all positives once (shuffled), pairing in fresh negatives."""
    order = rng.permutation(len(dataset.items))
    if phase.objective == "mlm_only":
        chunk = phase.batch_size
    else:
        chunk = max(1, round(phase.batch_size / (1.0 + schedule.negative_ratio)))

    def pick_knowledge(query_id: str, image: GalleryImage) -> TokenSequence:
        if selector is None or rng.random() < phase.knowledge_dropout:
            return empty_sequence(knowledge_len)
        _, knowledge = selector.select(query_id, image)
        return knowledge

    for lo in range(0, len(order), chunk):
        positives = [dataset.items[i] for i in order[lo:lo + chunk]]
        examples = []
        for item in positives:
            image = dataset.images[item.image_id]
            examples.append(TrainingExample(item.query, item.image_id,
                                            image.regions,
                                            pick_knowledge(item.query_id, image), 1))
        if phase.objective in ("itm_mlm", "itm_only"):
            n_neg = round(len(positives) * schedule.negative_ratio)
            for _ in range(n_neg):
                source = dataset.items[rng.integers(len(dataset.items))]
                hard = rng.random() < phase.hard_negative_fraction
                query, query_id, image_id = make_negative(dataset, source, rng,
                                                          hard=hard)
                image = dataset.images[image_id]
                examples.append(TrainingExample(query, image_id, image.regions,
                                                pick_knowledge(query_id, image), 0))
        yield examples


def run_schedule(
    model: AlignmentModel,
    dataset: TrainingSet,
    schedule: TrainSchedule,
    checkpoint_dir: str | Path,
    fusion_cfg: FusionConfig | None = None,
    validation: Validation | None = None,
) -> tuple[Path, list[dict]]:
    """Execute every phase in order; returns (final checkpoint, metrics rows).

    Each epoch covers every positive once (shuffled) with negatives mixed
    in per `schedule.negative_ratio`, checkpoints the parameters, and
    appends one metrics row.  The knowledge-selection cache refreshes at
    every epoch boundary so retrieval follows the moving text encoder.
    An empty schedule still writes `final.krmt` with the initial
    parameters.  A fresh optimizer starts each phase (the paper-style
    schedule changes both the rate and the objective between phases).
    """
    from .data import save_checkpoint  # deferred: data imports model too

    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(schedule.seed)
    cfg = model.cfg
    fusion_cfg = fusion_cfg if fusion_cfg is not None else FusionConfig()

    needs_knowledge = any(p.mode == "full" for p in schedule.phases)
    selector = (SelectionCache(model, dataset, fusion_cfg)
                if needs_knowledge and dataset.knowledge else None)

    rows: list[dict] = []
    global_epoch = 0
    for phase_idx, phase in enumerate(schedule.phases):
        if phase.objective in ("itm_mlm", "itm_only"):
            _check_sampleable(dataset)
        optimizer = Adam(model.parameters(), lr=phase.lr,
                         lr_multipliers={"text.": schedule.text_lr_multiplier})
        for _ in range(phase.epochs):
            global_epoch += 1
            if selector is not None:
                selector.refresh()
            phase_selector = selector if phase.mode == "full" else None
            itm_sum = mlm_sum = 0.0
            n_steps = 0
            for examples in _epoch_batches(dataset, phase, schedule, rng,
                                           phase_selector, cfg.knowledge_len):
                # itm_only trains on unmasked text: the matching head sees
                # exactly the distribution evaluation will feed it
                batch = build_batch(examples, cfg, rng, schedule.mlm_prob,
                                    mask_text=phase.objective != "itm_only",
                                    mode=phase.mode)
                itm, mlm = train_step(model, batch, optimizer, phase.objective)
                itm_sum, mlm_sum, n_steps = itm_sum + itm, mlm_sum + mlm, n_steps + 1

            row = {
                "epoch": global_epoch,
                "phase": phase_idx,
                "itm_loss": itm_sum / max(n_steps, 1),
                "mlm_loss": mlm_sum / max(n_steps, 1),
                "r1": "", "r5": "", "r10": "", "mdr": "",
            }
            if (validation is not None and schedule.eval_every > 0
                    and global_epoch % schedule.eval_every == 0):
                report, _ = evaluate(model, validation.gallery, validation.queries,
                                     validation.fusion_cfg, mode=validation.mode)
                row.update({k: report[k] for k in ("r1", "r5", "r10", "mdr")})
            rows.append(row)
            save_checkpoint(model.parameters(), cfg,
                            checkpoint_dir / f"phase{phase_idx}_epoch{global_epoch}.krmt")

    final_path = checkpoint_dir / "final.krmt"
    save_checkpoint(model.parameters(), cfg, final_path)
    with open(checkpoint_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return final_path, rows
