"""The joint query/knowledge/region alignment model.

One sequence per (query, image) pair:

    [CLS] q_1..q_L [SEP] k_1..k_M [SEP] r_1..r_N        (length L+M+N+3)

Query and knowledge slots carry text-encoder features plus a learned
joint positional embedding; region slots carry projected detector
features with no positional embedding, so region order cannot matter.
A transformer stack mixes the three spans; the [CLS] output feeds a
small MLP that scores alignment, and the text-slot outputs feed a
vocabulary projection for masked-token prediction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import Linear, ParamStore, TransformerLayer
from .text import TextEncoder


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 768
    n_joint_layers: int = 3
    n_heads: int = 8
    query_len: int = 40
    knowledge_len: int = 80
    n_regions: int = 50
    d_app: int = 2048          # detector appearance feature width
    align_hidden: int = 512
    n_text_layers: int = 2

    def __post_init__(self):
        positive = {k: v for k, v in asdict(self).items() if k != "n_joint_layers"}
        for name, value in positive.items():
            if value < 1:
                raise ValueError(f"ModelConfig.{name} must be positive, got {value}")
        if self.n_joint_layers < 0:
            raise ValueError("n_joint_layers must be >= 0")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )

    @classmethod
    def desk_scale(cls, vocab_size: int, **overrides) -> "ModelConfig":
        """Small defaults that train in minutes on one CPU."""
        base = dict(d_model=64, n_joint_layers=2, n_heads=4, query_len=12,
                    knowledge_len=24, n_regions=8, d_app=64, align_hidden=128,
                    n_text_layers=2)
        base.update(overrides)
        return cls(vocab_size=vocab_size, **base)

    @property
    def joint_len(self) -> int:
        return self.query_len + self.knowledge_len + self.n_regions + 3

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "ModelConfig":
        return cls(**json.loads(blob))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]


@dataclass
class RegionFeatureSet:
    """Detector outputs for one image: appearance rows plus boxes.

    Boxes are (x_min, y_min, x_max, y_max) normalised to [0, 1].
    A zero-region image is legal; downstream padding masks it out.
    """

    appearance: np.ndarray   # [n, d_app]
    boxes: np.ndarray        # [n, 4]

    def __post_init__(self):
        self.appearance = np.asarray(self.appearance, dtype=float)
        self.boxes = np.asarray(self.boxes, dtype=float)
        if self.appearance.ndim != 2 or self.boxes.ndim != 2 or self.boxes.shape[1] != 4:
            raise ValueError(
                f"bad region shapes: appearance {self.appearance.shape}, boxes {self.boxes.shape}"
            )
        if self.appearance.shape[0] != self.boxes.shape[0]:
            raise ValueError("appearance/box row counts differ")
        if self.boxes.size:
            if self.boxes.min() < 0.0 or self.boxes.max() > 1.0:
                raise ValueError("box coordinates must lie in [0, 1]")
            if (self.boxes[:, 0] > self.boxes[:, 2]).any() or (self.boxes[:, 1] > self.boxes[:, 3]).any():
                raise ValueError("box min corner exceeds max corner")

    @property
    def n(self) -> int:
        return self.appearance.shape[0]


def stack_regions(
    sets: list[RegionFeatureSet], cfg: ModelConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad/truncate per-image regions to cfg.n_regions and batch them.

    Returns (appearance [B, N, d_app], boxes [B, N, 4], mask [B, N]).
    """
    b, n = len(sets), cfg.n_regions
    app = np.zeros((b, n, cfg.d_app))
    box = np.zeros((b, n, 4))
    mask = np.zeros((b, n))
    for i, rs in enumerate(sets):
        if rs.n and rs.appearance.shape[1] != cfg.d_app:
            raise ValueError(
                f"region width {rs.appearance.shape[1]} != config d_app {cfg.d_app}"
            )
        keep = min(rs.n, n)
        app[i, :keep] = rs.appearance[:keep]
        box[i, :keep] = rs.boxes[:keep]
        mask[i, :keep] = 1.0
    return app, box, mask


@dataclass
class SequenceLayout:
    """Slot positions inside the assembled joint sequence."""

    cls: int
    query: slice
    sep1: int
    knowledge: slice
    sep2: int
    regions: slice
    total: int

    @classmethod
    def for_config(cls, cfg: ModelConfig) -> "SequenceLayout":
        l, m, n = cfg.query_len, cfg.knowledge_len, cfg.n_regions
        return cls(
            cls=0,
            query=slice(1, 1 + l),
            sep1=1 + l,
            knowledge=slice(2 + l, 2 + l + m),
            sep2=2 + l + m,
            regions=slice(3 + l + m, 3 + l + m + n),
            total=l + m + n + 3,
        )


@dataclass
class JointSequence:
    """Assembled per-pair input: features, attention mask, layout."""

    features: Tensor         # [B, S, d]
    mask: np.ndarray         # [B, S]
    layout: SequenceLayout

    def __post_init__(self):
        if self.features.shape[1] != self.layout.total:
            raise ValueError(
                f"joint length {self.features.shape[1]} != layout total {self.layout.total}"
            )
        if self.mask.shape != self.features.shape[:2]:
            raise ValueError("mask shape mismatch")
        # special slots are always attended
        for pos in (self.layout.cls, self.layout.sep1, self.layout.sep2):
            if not (self.mask[:, pos] == 1.0).all():
                raise ValueError("CLS/SEP positions must be unmasked")


@dataclass
class ForwardOutput:
    align_logit: Tensor                  # [B]
    mlm_logits: Tensor                   # [B, L+M, V]
    joint: Tensor                        # [B, S, d]
    sequence_mask: np.ndarray            # [B, S]
    attention: list[np.ndarray] | None   # per joint layer, when collected


MODES = ("full", "no_knowledge", "no_vision")


class AlignmentModel:
    """Knowledge-infused joint encoder with alignment and MLM heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.layout = SequenceLayout.for_config(cfg)
        store = ParamStore(np.random.default_rng(seed))
        self.store = store
        d = cfg.d_model
        self.text_encoder = TextEncoder(
            store, "text", cfg.vocab_size, d, cfg.n_text_layers, cfg.n_heads,
            max_len=max(cfg.query_len, cfg.knowledge_len),
        )
        self.app_proj = store.normal("vis.app_proj", (cfg.d_app, d))
        self.box_proj = store.normal("vis.box_proj", (4, d))
        self.ln_app_gain = store.ones("vis.ln_app.gain", (d,))
        self.ln_app_shift = store.zeros("vis.ln_app.shift", (d,))
        self.ln_box_gain = store.ones("vis.ln_box.gain", (d,))
        self.ln_box_shift = store.zeros("vis.ln_box.shift", (d,))
        self.cls_emb = store.normal("joint.cls_emb", (d,))
        self.sep_emb = store.normal("joint.sep_emb", (d,))
        self.joint_pos = store.normal(
            "joint.pos_emb", (cfg.query_len + cfg.knowledge_len, d)
        )
        self.joint_layers = [
            TransformerLayer(store, f"joint.layer{i}", d, cfg.n_heads)
            for i in range(cfg.n_joint_layers)
        ]
        self.align_hidden = Linear(store, "align.hidden", d, cfg.align_hidden)
        self.align_out = Linear(store, "align.out", cfg.align_hidden, 1)
        self.mlm_proj = Linear(store, "mlm.proj", d, cfg.vocab_size)

    def parameters(self) -> dict[str, Tensor]:
        return self.store.params

    def zero_grad(self) -> None:
        for p in self.store.params.values():
            p.grad = None

    # -- pieces ----------------------------------------------------------

    def project_regions(self, appearance: np.ndarray, boxes: np.ndarray) -> Tensor:
        """Sum of the two normalised linear branches (appearance + box)."""
        app_branch = ag.layer_norm(
            ag.matmul(Tensor(np.asarray(appearance, dtype=float)), self.app_proj),
            self.ln_app_gain, self.ln_app_shift,
        )
        box_branch = ag.layer_norm(
            ag.matmul(Tensor(np.asarray(boxes, dtype=float)), self.box_proj),
            self.ln_box_gain, self.ln_box_shift,
        )
        return app_branch + box_branch

    def assemble_sequence(
        self,
        query_feats: Tensor,
        query_mask: np.ndarray,
        knowledge_feats: Tensor,
        knowledge_mask: np.ndarray,
        region_feats: Tensor,
        region_mask: np.ndarray,
    ) -> JointSequence:
        """Interleave spans with CLS/SEP slots and add joint positions."""
        cfg, lay = self.cfg, self.layout
        b = query_feats.shape[0]
        d = cfg.d_model
        if query_feats.shape[1] != cfg.query_len:
            raise ValueError(f"query span {query_feats.shape[1]} != {cfg.query_len}")
        if knowledge_feats.shape[1] != cfg.knowledge_len:
            raise ValueError(f"knowledge span {knowledge_feats.shape[1]} != {cfg.knowledge_len}")
        if region_feats.shape[1] != cfg.n_regions:
            raise ValueError(f"region span {region_feats.shape[1]} != {cfg.n_regions}")

        q_pos = self.joint_pos[: cfg.query_len]
        k_pos = self.joint_pos[cfg.query_len :]
        cls_tile = ag.broadcast_to(ag.reshape(self.cls_emb, (1, 1, d)), (b, 1, d))
        sep_tile = ag.broadcast_to(ag.reshape(self.sep_emb, (1, 1, d)), (b, 1, d))
        feats = ag.concat(
            [cls_tile, query_feats + q_pos, sep_tile,
             knowledge_feats + k_pos, sep_tile, region_feats],
            axis=1,
        )
        ones = np.ones((b, 1))
        mask = np.concatenate(
            [ones, np.asarray(query_mask, dtype=float), ones,
             np.asarray(knowledge_mask, dtype=float), ones,
             np.asarray(region_mask, dtype=float)],
            axis=1,
        )
        return JointSequence(feats, mask, lay)

    def encode_joint(self, seq: JointSequence, collect_attention: bool = False) -> tuple[Tensor, list[np.ndarray] | None]:
        x = seq.features
        collected: list[np.ndarray] = []
        for layer in self.joint_layers:
            x = layer(x, seq.mask, collect=collect_attention)
            if collect_attention:
                collected.append(layer.attn.last_weights)
        return x, (collected if collect_attention else None)

    def alignment_logit(self, joint: Tensor) -> Tensor:
        cls_out = joint[:, self.layout.cls, :]
        hidden = ag.relu(self.align_hidden(cls_out))
        return ag.reshape(self.align_out(hidden), (joint.shape[0],))

    def mlm_logits(self, joint: Tensor) -> Tensor:
        lay = self.layout
        text_out = ag.concat([joint[:, lay.query, :], joint[:, lay.knowledge, :]], axis=1)
        return self.mlm_proj(text_out)

    # -- full forward ------------------------------------------------------

    def forward(
        self,
        query_ids: np.ndarray,
        query_mask: np.ndarray,
        knowledge_ids: np.ndarray,
        knowledge_mask: np.ndarray,
        region_app: np.ndarray,
        region_box: np.ndarray,
        region_mask: np.ndarray,
        mode: str = "full",
        encode_masked_knowledge: bool = False,
        collect_attention: bool = False,
    ) -> ForwardOutput:
        """Score a batch of (query, knowledge, image) triples.

        mode="no_knowledge" hides the knowledge span from attention; by
        default its features are skipped outright (constant zeros), while
        `encode_masked_knowledge=True` still encodes them — the logits
        must be identical either way, which tests assert.
        mode="no_vision" hides the region span the same way.
        """
        if mode not in MODES:
            raise ValueError(f"unknown forward mode {mode!r}")
        cfg = self.cfg
        b = query_ids.shape[0]

        q_feats, _ = self.text_encoder(query_ids, query_mask)

        k_mask = np.asarray(knowledge_mask, dtype=float)
        if mode == "no_knowledge":
            k_mask = np.zeros_like(k_mask)
            if encode_masked_knowledge:
                k_feats, _ = self.text_encoder(knowledge_ids, knowledge_mask)
            else:
                k_feats = Tensor(np.zeros((b, cfg.knowledge_len, cfg.d_model)))
        else:
            k_feats, _ = self.text_encoder(knowledge_ids, knowledge_mask)

        r_mask = np.asarray(region_mask, dtype=float)
        if mode == "no_vision":
            r_mask = np.zeros_like(r_mask)
        r_feats = self.project_regions(region_app, region_box)

        seq = self.assemble_sequence(q_feats, query_mask, k_feats, k_mask, r_feats, r_mask)
        joint, attn = self.encode_joint(seq, collect_attention=collect_attention)
        return ForwardOutput(
            align_logit=self.alignment_logit(joint),
            mlm_logits=self.mlm_logits(joint),
            joint=joint,
            sequence_mask=seq.mask,
            attention=attn,
        )
