"""Turn volumes into BERT-style integer token sequences.

A volume is summarized into 512 values (signed abs-max over an 8x8x8 grid of
sub-regions), scaled by 1000 and rounded into the value band ``[1, 10000]``.
Values that fall outside the band are folded into ``[1, 1000)``:

* ``q <= 0``     -> ``|q| mod 500`` (0 becomes 1, never PAD)
* ``q > 10000``  -> ``(q mod 500) + 500``

Special tokens live above the value band so they can never collide with a
quantized value.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence, Tuple, Union

import numpy as np
import torch

from .volume import Modality, Volume

GRID = 8
SEQ_LEN = GRID ** 3
TOTAL_LEN = 1 + SEQ_LEN + 1 + SEQ_LEN + 1
SCALE = 1000.0
VALUE_MAX = 10_000
FOLD = 500

PAD = 0
BEGIN = VALUE_MAX + 1
SEP = VALUE_MAX + 2
END = VALUE_MAX + 3
MASK = VALUE_MAX + 4
VOCAB_SIZE = VALUE_MAX + 5
SPECIAL_IDS = (PAD, BEGIN, SEP, END, MASK)

MRI_MASK_FRACTION = 0.05
PET_MASK_FRACTION = 0.25
N_MRI_MASKED = round(MRI_MASK_FRACTION * SEQ_LEN)
N_PET_MASKED = round(PET_MASK_FRACTION * SEQ_LEN)

MRI_OFFSET = 1
SEP_POS = 1 + SEQ_LEN
PET_OFFSET = SEP_POS + 1
END_POS = TOTAL_LEN - 1


class Segment(IntEnum):
    BEGIN = 0
    MRI = 1
    SEP = 2
    PET = 3
    END = 4


SEGMENTS = np.array(
    [Segment.BEGIN] + [Segment.MRI] * SEQ_LEN + [Segment.SEP] + [Segment.PET] * SEQ_LEN + [Segment.END],
    dtype=np.int64,
)


class TokenizerError(ValueError):
    pass


@dataclass(eq=False)
class SummarySequence:
    values: np.ndarray
    source_modality: Modality

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (SEQ_LEN,):
            raise TokenizerError(f"summary must have {SEQ_LEN} values, got {self.values.shape}")


@dataclass(eq=False)
class TokenSequence:
    ids: np.ndarray
    segments: np.ndarray = None
    positions: np.ndarray = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.segments is None:
            self.segments = SEGMENTS.copy()
        if self.positions is None:
            self.positions = np.arange(TOTAL_LEN, dtype=np.int64)
        if self.ids.shape != (TOTAL_LEN,):
            raise TokenizerError(f"token sequence must have length {TOTAL_LEN}, got {self.ids.shape}")


@dataclass(eq=False)
class MaskPlan:
    masked_positions: np.ndarray
    original_ids: np.ndarray

    def __len__(self):
        return len(self.masked_positions)


# --------------------------------------------------------------------------- #
# summarization


def region_bounds(n: int, parts: int = GRID) -> np.ndarray:
    """Boundaries ``floor(i * n / parts)`` for ``i = 0..parts``."""
    return np.array([(i * n) // parts for i in range(parts + 1)], dtype=np.int64)


def _region_index(n: int) -> torch.Tensor:
    # (GRID, longest region) gather table; short regions repeat their last index
    if n < GRID:
        raise TokenizerError(f"spatial dims must be >= {GRID}, got {n}")
    b = region_bounds(n)
    width = int(np.max(np.diff(b)))
    idx = np.empty((GRID, width), dtype=np.int64)
    for i in range(GRID):
        r = np.arange(b[i], b[i + 1])
        idx[i] = np.concatenate([r, np.full(width - len(r), r[-1])])
    return torch.from_numpy(idx)


def summarize_tensor(x: torch.Tensor) -> torch.Tensor:
    """Signed abs-max pooling of ``(B, T, D, H, W)`` into ``(B, 512)``.

    Each of the 8x8x8 sub-regions spans every time-step; regions are ordered
    row-major over the grid. Ties resolve to the first element in (t, d, h, w)
    order. Differentiable: gradient reaches the selected voxel only.
    """
    if x.dim() != 5:
        raise TokenizerError(f"expected (B, T, D, H, W), got {tuple(x.shape)}")
    b, t, d, h, w = x.shape
    i_d, i_h, i_w = (_region_index(n).to(x.device) for n in (d, h, w))
    g = x[:, :, i_d[:, :, None, None, None, None], i_h[:, :, None, None], i_w]
    # (B, T, 8, mD, 8, mH, 8, mW) -> (B, 8, 8, 8, T*mD*mH*mW)
    g = g.permute(0, 2, 4, 6, 1, 3, 5, 7).reshape(b, SEQ_LEN, -1)
    pick = g.abs().argmax(dim=-1, keepdim=True)
    return g.gather(-1, pick).squeeze(-1)


def summarize(vol: Volume) -> SummarySequence:
    data = torch.from_numpy(vol.data)
    if vol.modality is Modality.MRI:
        data = data[None]
    values = summarize_tensor(data[None])[0]
    return SummarySequence(values.double().numpy(), vol.modality)


# --------------------------------------------------------------------------- #
# quantization


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_values(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise TokenizerError("cannot quantize NaN or infinite values")
    q = _round_half_away(v * SCALE).astype(np.int64)
    ids = q.copy()
    neg = q <= 0
    ids[neg] = np.abs(q[neg]) % FOLD
    ids[neg & (ids == 0)] = 1
    over = q > VALUE_MAX
    ids[over] = q[over] % FOLD + FOLD
    return ids


def quantize(seq: Union[SummarySequence, Sequence[float], np.ndarray]) -> np.ndarray:
    values = seq.values if isinstance(seq, SummarySequence) else seq
    return quantize_values(values)


def dequantize(ids) -> np.ndarray:
    """Inverse of :func:`quantize` for unfolded ids only (``id / 1000``)."""
    ids = np.asarray(ids, dtype=np.int64)
    if np.any((ids < 1) | (ids > VALUE_MAX)):
        raise TokenizerError("dequantize got a special-token or out-of-band id")
    return ids / SCALE


def quantize_tensor(values: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Torch twin of :func:`quantize_values` with a straight-through offset.

    Returns ``(ids, ste)`` where ``ste`` is zero-valued but carries gradient
    ``d q / d v = 1000`` on the unfolded band and no gradient through a fold.
    Feeding ``ste`` into an embedding interpolation lets rounding act as the
    identity in the backward pass.
    """
    if not torch.isfinite(values).all():
        raise TokenizerError("cannot quantize NaN or infinite values")
    scaled = values * SCALE
    raw = values.detach().double() * SCALE
    q = (torch.sign(raw) * torch.floor(raw.abs() + 0.5)).long()
    ids = q.clone()
    neg = q <= 0
    ids = torch.where(neg, q.abs() % FOLD, ids)
    ids = torch.where(neg & (ids == 0), torch.ones_like(ids), ids)
    over = q > VALUE_MAX
    ids = torch.where(over, q % FOLD + FOLD, ids)
    in_band = ~(neg | over)
    ste = torch.where(in_band, scaled - scaled.detach(), torch.zeros_like(scaled))
    return ids, ste


# --------------------------------------------------------------------------- #
# assembly and masking


def assemble(mri_ids, pet_ids) -> TokenSequence:
    mri_ids = np.asarray(mri_ids, dtype=np.int64)
    pet_ids = np.asarray(pet_ids, dtype=np.int64)
    if mri_ids.shape != (SEQ_LEN,) or pet_ids.shape != (SEQ_LEN,):
        raise TokenizerError(f"need two {SEQ_LEN}-length id lists, got {mri_ids.shape} and {pet_ids.shape}")
    ids = np.concatenate([[BEGIN], mri_ids, [SEP], pet_ids, [END]])
    return TokenSequence(ids)


def assemble_tensor(mri_ids: torch.Tensor, pet_ids: torch.Tensor) -> torch.Tensor:
    """Batched :func:`assemble`: ``(B, 512) x 2 -> (B, 1027)``."""
    b = mri_ids.shape[0]

    def col(tok):
        return torch.full((b, 1), tok, dtype=torch.long, device=mri_ids.device)

    return torch.cat([col(BEGIN), mri_ids, col(SEP), pet_ids, col(END)], dim=1)


def sample_mask_positions(rng_seed) -> np.ndarray:
    rng = np.random.default_rng(rng_seed)
    mri = rng.choice(SEQ_LEN, N_MRI_MASKED, replace=False) + MRI_OFFSET
    pet = rng.choice(SEQ_LEN, N_PET_MASKED, replace=False) + PET_OFFSET
    return np.sort(np.concatenate([mri, pet]))


def plan_mask(seq: TokenSequence, rng_seed) -> Tuple[TokenSequence, MaskPlan]:
    """Mask 26 MRI and 128 PET slots, chosen uniformly without replacement."""
    positions = sample_mask_positions(rng_seed)
    plan = MaskPlan(positions, seq.ids[positions].copy())
    ids = seq.ids.copy()
    ids[positions] = MASK
    return TokenSequence(ids, seq.segments.copy(), seq.positions.copy()), plan


def unmask(seq: TokenSequence, plan: MaskPlan) -> TokenSequence:
    ids = seq.ids.copy()
    ids[plan.masked_positions] = plan.original_ids
    return TokenSequence(ids, seq.segments.copy(), seq.positions.copy())


def tokenize_pair(mri: Volume, pet: Volume) -> TokenSequence:
    return assemble(quantize(summarize(mri)), quantize(summarize(pet)))


def dumps_tokens(seq: TokenSequence) -> str:
    """Two lines: the ids, then the segment labels."""
    return " ".join(map(str, seq.ids.tolist())) + "\n" + " ".join(map(str, seq.segments.tolist())) + "\n"


def loads_tokens(text: str) -> TokenSequence:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    ids = [int(t) for t in lines[0].split()]
    segments = [int(t) for t in lines[1].split()] if len(lines) > 1 else None
    return TokenSequence(ids, None if segments is None else np.asarray(segments, dtype=np.int64))
