"""Condition encoder: fingerprint description -> token-level embeddings.

Byte-level embedding table plus sinusoidal positions. Deliberately never
pools over the sequence axis; the full token sequence is the interface
to the parameter generator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import FLOAT, ParameterStore, RngState, Tensor
from .lm import VOCAB_SIZE, Tokenizer

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    d_embed: int = 128
    max_description_len: int = 192
    freeze_embeddings: bool = False
    positional_kind: str = "sinusoidal"

    def __post_init__(self):
        if self.d_embed <= 0 or self.max_description_len <= 0:
            raise ValueError("d_embed and max_description_len must be positive")
        if self.positional_kind != "sinusoidal":
            raise ValueError(f"unsupported positional_kind: {self.positional_kind}")


@dataclass
class TokenEmbeddings:
    embeddings: Tensor  # (L, d_embed)
    mask: np.ndarray  # (L,), all ones here (single sequence, no padding)

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    out = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return out.astype(FLOAT)


class ConditionEncoder:
    """Owns the byte embedding table; encode() is its only surface."""

    def __init__(self, cfg: EncoderConfig, rng: RngState):
        self.cfg = cfg
        self.store = ParameterStore()
        table = rng.generator().normal(0.0, 0.02, size=(VOCAB_SIZE, cfg.d_embed)).astype(FLOAT)
        self.store.add("cond_emb", table, frozen=cfg.freeze_embeddings)
        self._pos = sinusoidal_positions(cfg.max_description_len, cfg.d_embed)
        self.tokenizer = Tokenizer()

    def encode(self, description) -> TokenEmbeddings:
        ids = self.tokenizer.encode(description)
        if len(ids) == 0:
            raise ValueError("empty fingerprint description")
        if len(ids) > self.cfg.max_description_len:
            log.warning(
                "description of %d bytes truncated to %d",
                len(ids), self.cfg.max_description_len,
            )
            ids = ids[: self.cfg.max_description_len]
        emb = ag.embedding(self.store["cond_emb"], np.asarray(ids, dtype=np.int64))
        emb = ag.add(emb, Tensor(self._pos[: len(ids)]))
        return TokenEmbeddings(emb, np.ones(len(ids), dtype=np.int64))


def encode_description(description, encoder: ConditionEncoder) -> TokenEmbeddings:
    return encoder.encode(description)
