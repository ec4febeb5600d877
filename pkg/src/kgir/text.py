"""Tokenization, vocabulary management, and the text encoder.

Five reserved ids sit at the front of every vocabulary:

    0 [PAD]  1 [UNK]  2 [CLS]  3 [SEP]  4 [MASK]

Real tokens are assigned ids from 5 upward, ordered by descending corpus
count with ties broken alphabetically, so a vocabulary is a pure
function of its corpus.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import ParamStore, TransformerLayer, masked_mean

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3
MASK_ID = 4
RESERVED = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
N_RESERVED = len(RESERVED)


def _strip_punct(token: str) -> str:
    start, end = 0, len(token)
    while start < end and unicodedata.category(token[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(token[end - 1]).startswith("P"):
        end -= 1
    return token[start:end]


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation, drop empties.

    Interior punctuation survives ("t-shirt" stays one token).
    """
    out = []
    for raw in text.lower().split():
        tok = _strip_punct(raw)
        if tok:
            out.append(tok)
    return out


class VocabularyError(ValueError):
    pass


class Vocabulary:
    """Token <-> id mapping with the five reserved ids implicit."""

    def __init__(self, tokens: list[str]):
        seen = set()
        for t in tokens:
            if t in seen:
                raise VocabularyError(f"duplicate token {t!r}")
            seen.add(t)
        self._tokens = list(tokens)
        self._ids = {t: i + N_RESERVED for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return N_RESERVED + len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if 0 <= idx < N_RESERVED:
            return RESERVED[idx]
        if N_RESERVED <= idx < len(self):
            return self._tokens[idx - N_RESERVED]
        raise VocabularyError(f"id {idx} outside vocabulary of size {len(self)}")

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self._tokens) + ("\n" if self._tokens else ""), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def build_vocab(corpus: list[str], min_count: int = 1) -> Vocabulary:
    """Count tokens over `corpus`, keep those with count >= min_count.

    Kept tokens are ordered by (count desc, token asc).  An empty or
    all-whitespace corpus is an error.
    """
    counts: dict[str, int] = {}
    for text in corpus:
        for tok in tokenize(text):
            counts[tok] = counts.get(tok, 0) + 1
    if not counts:
        raise VocabularyError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass
class TokenSequence:
    """Fixed-length id row with its attention mask and true length."""

    ids: np.ndarray          # [target_len] int64
    mask: np.ndarray         # [target_len] float, 1 = real token
    true_length: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=float)
        if self.ids.shape != self.mask.shape:
            raise ValueError("ids and mask shapes differ")
        if ((self.mask == 0) & (self.ids != PAD_ID)).any():
            raise ValueError("non-pad id under a zero mask")

    def content_ids(self) -> np.ndarray:
        """Real, non-reserved token ids (vocabulary words only)."""
        return self.ids[(self.mask > 0) & (self.ids >= N_RESERVED)]


def pad_truncate(tokens: list[str], vocab: Vocabulary, target_len: int) -> TokenSequence:
    """Map tokens to ids, then right-pad or truncate to `target_len`."""
    ids = [vocab.id_of(t) for t in tokens[:target_len]]
    n = len(ids)
    ids = ids + [PAD_ID] * (target_len - n)
    mask = [1.0] * n + [0.0] * (target_len - n)
    return TokenSequence(np.array(ids), np.array(mask), n)


def encode_query(text: str, vocab: Vocabulary, target_len: int) -> TokenSequence:
    return pad_truncate(tokenize(text), vocab, target_len)


def empty_sequence(target_len: int) -> TokenSequence:
    """An all-pad sequence: what an absent modality looks like."""
    return TokenSequence(np.zeros(target_len, dtype=np.int64),
                         np.zeros(target_len), 0)


class TextEncoder:
    """Token + learned-position embeddings through a transformer stack.

    Shared between queries and knowledge snippets: one parameter set
    encodes both (they only differ in target length).  The pooled output
    is the mask-weighted mean of the final layer; an all-pad sequence
    pools to exact zeros.
    """

    def __init__(self, store: ParamStore, prefix: str, vocab_size: int,
                 d_model: int, n_layers: int, n_heads: int, max_len: int):
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.token_emb = store.normal(f"{prefix}.token_emb", (vocab_size, d_model))
        self.pos_emb = store.normal(f"{prefix}.pos_emb", (max_len, d_model))
        self.layers = [
            TransformerLayer(store, f"{prefix}.layer{i}", d_model, n_heads)
            for i in range(n_layers)
        ]

    def __call__(self, ids: np.ndarray, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """ids, mask: [B, S] -> (features [B, S, d], pooled [B, d])."""
        ids = np.asarray(ids)
        mask = np.asarray(mask, dtype=float)
        if ids.ndim != 2:
            raise ValueError(f"expected [B, S] ids, got shape {ids.shape}")
        s = ids.shape[1]
        if s > self.max_len:
            raise ValueError(f"sequence length {s} exceeds encoder max {self.max_len}")
        if ids.max(initial=0) >= self.vocab_size:
            raise VocabularyError(
                f"token id {ids.max()} outside vocabulary of size {self.vocab_size}"
            )
        x = ag.embedding(self.token_emb, ids) + self.pos_emb[:s]
        for layer in self.layers:
            x = layer(x, mask)
        pooled = masked_mean(x, mask)  # all-pad rows pool to exact zeros
        return x, pooled

    @staticmethod
    def stack(seqs: list[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
        """Batch TokenSequences into [B, S] id and mask arrays."""
        return (np.stack([s.ids for s in seqs]),
                np.stack([s.mask for s in seqs]))
