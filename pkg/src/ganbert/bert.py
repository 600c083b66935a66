"""Bidirectional transformer discriminator with NSP and MLM heads.

NSP classifies a ``[BEGIN] MRI [SEP] PET [END]`` sequence as carrying a real
(class 0) or generated (class 1) PET. MLM predicts the real value ids at
masked slots.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import SEGMENTS, TOTAL_LEN, VALUE_MAX, VOCAB_SIZE, MaskPlan, Segment, TokenSequence

REAL = 0
GENERATED = 1


class BertError(ValueError):
    pass


@dataclass
class BertConfig:
    layers: int = 4
    hidden: int = 256
    heads: int = 4
    feedforward: int = 1024
    vocab_size: int = VOCAB_SIZE
    max_len: int = TOTAL_LEN
    dropout: float = 0.0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise BertError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.max_len < TOTAL_LEN:
            raise BertError(f"max_len must be >= {TOTAL_LEN}")
        if self.vocab_size < VOCAB_SIZE:
            raise BertError(f"vocab_size must be >= {VOCAB_SIZE}")

    @classmethod
    def base(cls) -> "BertConfig":
        """BERT-Base geometry: 12 layers, 768 hidden, 12 heads."""
        return cls(layers=12, hidden=768, heads=12, feedforward=3072, dropout=0.1)

    def to_dict(self):
        return asdict(self)


class ValueEmbedding(nn.Embedding):
    """Token embedding that can carry a straight-through gradient.

    With ``ste`` (zero-valued, differentiable) the lookup becomes
    ``E[id] + ste * (E[id + 1] - E[id])``: identical in the forward pass, and
    piecewise linear in the underlying continuous value for the backward pass.
    """

    def forward(self, ids: torch.Tensor, ste: Optional[torch.Tensor] = None) -> torch.Tensor:
        emb = super().forward(ids)
        if ste is None:
            return emb
        upper = ids < VALUE_MAX
        nb = torch.where(upper, ids + 1, ids - 1)
        direction = torch.where(upper, 1.0, -1.0).to(emb.dtype)
        slope = (super().forward(nb) - emb) * direction[..., None]
        return emb + ste[..., None].to(emb.dtype) * slope


class Discriminator(nn.Module):
    def __init__(self, config: Optional[BertConfig] = None):
        super().__init__()
        self.config = config = config or BertConfig()
        self.token_embedding = ValueEmbedding(config.vocab_size, config.hidden)
        self.position_embedding = nn.Embedding(config.max_len, config.hidden)
        self.segment_embedding = nn.Embedding(len(Segment), config.hidden)
        self.embedding_norm = nn.LayerNorm(config.hidden)
        layer = nn.TransformerEncoderLayer(
            config.hidden, config.heads, config.feedforward, config.dropout,
            activation="gelu", batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, config.layers, enable_nested_tensor=False)
        self.pooler = nn.Sequential(nn.Linear(config.hidden, config.hidden), nn.Tanh())
        self.nsp_head = nn.Linear(config.hidden, 2)
        self.mlm_transform = nn.Sequential(
            nn.Linear(config.hidden, config.hidden), nn.GELU(), nn.LayerNorm(config.hidden)
        )
        self.mlm_head = nn.Linear(config.hidden, config.vocab_size)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module):
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, std=0.02)
            if isinstance(module, nn.Linear) and module.bias is not None:
                nn.init.zeros_(module.bias)

    def encode(self, ids: torch.Tensor, segments: Optional[torch.Tensor] = None,
               ste: Optional[torch.Tensor] = None) -> torch.Tensor:
        """``(B, L)`` ids -> ``(B, L, hidden)``; full bidirectional attention."""
        if ids.dim() != 2:
            raise BertError(f"ids must be (B, L), got {tuple(ids.shape)}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise BertError(f"token id out of range [0, {self.config.vocab_size})")
        length = ids.shape[1]
        if segments is None:
            segments = torch.from_numpy(SEGMENTS[:length]).to(ids.device).expand_as(ids)
        positions = torch.arange(length, device=ids.device)
        x = self.token_embedding(ids, ste) + self.position_embedding(positions)[None] + self.segment_embedding(segments)
        return self.encoder(self.embedding_norm(x))

    def nsp_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.nsp_head(self.pooler(hidden[:, 0]))

    def mlm_logits(self, hidden: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """``positions`` is ``(B, K)``; returns ``(B, K, vocab_size)``."""
        if positions.numel() == 0:
            raise BertError("empty mask plan")
        picked = hidden.gather(1, positions[..., None].expand(-1, -1, hidden.shape[-1]))
        return self.mlm_head(self.mlm_transform(picked))

    def forward(self, ids, segments=None, ste=None, mlm_positions=None):
        hidden = self.encode(ids, segments, ste)
        mlm = None if mlm_positions is None else self.mlm_logits(hidden, mlm_positions)
        return self.nsp_logits(hidden), mlm


# single-sequence helpers over TokenSequence / MaskPlan


def encode(model: Discriminator, seq: TokenSequence) -> torch.Tensor:
    ids = torch.from_numpy(seq.ids)[None]
    segments = torch.from_numpy(seq.segments)[None]
    return model.encode(ids, segments)[0]


def nsp_logits(model: Discriminator, hidden: torch.Tensor) -> torch.Tensor:
    return model.nsp_logits(hidden[None])[0]


def mlm_logits(model: Discriminator, hidden: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
    if len(plan) == 0:
        raise BertError("empty mask plan")
    positions = torch.as_tensor(plan.masked_positions, dtype=torch.long)[None]
    return model.mlm_logits(hidden[None], positions)[0]


def mlm_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))
