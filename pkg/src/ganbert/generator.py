"""3D U-Net-like generator: normalized MRI -> 2-frame normalized PET.

The encoder bottleneck is squeezed to one channel on an 8x8x8 grid, i.e. a
512-vector aligned with the summarization grid, averaged with the summarized
MRI and expanded again before decoding. The decoder climbs back to the
coarsest power-of-two level that still covers the requested PET grid and
finishes with a trilinear resize and an unbounded ``tanhshrink`` activation.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import GRID, SEQ_LEN, summarize_tensor
from .volume import Modality, Volume


class GeneratorError(ValueError):
    pass


def tanhshrink(x):
    """``x - tanh(x)``; accepts floats, numpy arrays or tensors."""
    if isinstance(x, torch.Tensor):
        return F.tanhshrink(x)
    return np.asarray(x) - np.tanh(x) if not np.isscalar(x) else float(x - np.tanh(x))


def tanhshrink_grad(x):
    # 1 - sech^2(x) == tanh^2(x)
    return np.tanh(x) ** 2


def bottleneck_fusion(bottleneck, mri_summary):
    """Element-wise average of the bottleneck vector and the MRI summary."""
    if isinstance(bottleneck, torch.Tensor):
        if bottleneck.shape != mri_summary.shape:
            raise GeneratorError(f"fusion shape mismatch {tuple(bottleneck.shape)} vs {tuple(mri_summary.shape)}")
        return (bottleneck + mri_summary) / 2
    b = np.asarray(bottleneck, dtype=np.float64)
    s = np.asarray(mri_summary, dtype=np.float64)
    if b.shape != s.shape:
        raise GeneratorError(f"fusion length mismatch {b.shape} vs {s.shape}")
    return (b + s) / 2


_ACTIVATIONS = {"tanhshrink": F.tanhshrink, "tanh": torch.tanh, "identity": lambda x: x}


@dataclass
class GeneratorConfig:
    input_dims: Tuple[int, int, int] = (64, 64, 64)
    output_dims: Tuple[int, int, int, int] = (2, 24, 19, 19)
    depth: int = 3
    base_channels: int = 8
    bottleneck_width: int = SEQ_LEN
    output_activation: str = "tanhshrink"
    norm: str = "instance"
    # fixed multiplier on the head output before the activation
    output_gain: float = 10.0

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        self.output_dims = tuple(int(d) for d in self.output_dims)
        if len(self.input_dims) != 3 or len(self.output_dims) != 4:
            raise GeneratorError("input_dims must be (D, H, W) and output_dims (T, D, H, W)")
        if min(self.input_dims) < 8 or min(self.output_dims[1:]) < 8 or self.output_dims[0] < 1:
            raise GeneratorError("all spatial dims must be >= 8")
        if self.bottleneck_width != SEQ_LEN:
            raise GeneratorError(f"bottleneck_width must be {SEQ_LEN}")
        if self.depth < 1 or any(d % (2 ** self.depth) for d in self.input_dims):
            raise GeneratorError(f"input_dims {self.input_dims} must be divisible by 2**depth={2 ** self.depth}")
        if self.output_activation not in _ACTIVATIONS:
            raise GeneratorError(f"unknown output_activation {self.output_activation!r}")
        if self.norm not in ("instance", "batch", "none"):
            raise GeneratorError(f"unknown norm {self.norm!r}")

    @property
    def decoder_level(self) -> int:
        """Coarsest encoder level whose grid still covers the output grid."""
        for level in range(self.depth, -1, -1):
            if all(d // 2 ** level >= o for d, o in zip(self.input_dims, self.output_dims[1:])):
                return level
        return 0

    def to_dict(self):
        return asdict(self)


def _norm(kind: str, ch: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm3d(ch, affine=True)
    if kind == "batch":
        return nn.BatchNorm3d(ch)
    return nn.Identity()


def conv_block(in_ch: int, out_ch: int, norm: str) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, kernel_size=3, padding=1),
        _norm(norm, out_ch),
        nn.LeakyReLU(0.2, inplace=True),
        nn.Conv3d(out_ch, out_ch, kernel_size=3, padding=1),
        _norm(norm, out_ch),
        nn.LeakyReLU(0.2, inplace=True),
    )


class Generator(nn.Module):
    def __init__(self, config: Optional[GeneratorConfig] = None):
        super().__init__()
        self.config = config = config or GeneratorConfig()
        ch = [config.base_channels * 2 ** i for i in range(config.depth + 1)]
        self.encoders = nn.ModuleList(
            [conv_block(1 if i == 0 else ch[i - 1], ch[i], config.norm) for i in range(config.depth)]
        )
        self.pool = nn.MaxPool3d(2)
        self.bottleneck = conv_block(ch[config.depth - 1], ch[config.depth], config.norm)
        self.to_vector = nn.Conv3d(ch[config.depth], 1, kernel_size=1)
        self.from_vector = nn.Sequential(nn.Conv3d(1, ch[config.depth], kernel_size=1), nn.LeakyReLU(0.2))

        stop = config.decoder_level
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in range(config.depth - 1, stop - 1, -1):
            self.ups.append(nn.ConvTranspose3d(ch[level + 1], ch[level], kernel_size=2, stride=2))
            self.decoders.append(conv_block(2 * ch[level], ch[level], config.norm))
        self.head = nn.Conv3d(ch[stop], config.output_dims[0], kernel_size=1)
        # levels whose skip connection is cut (diagnostics only)
        self.disabled_skips: set = set()

    def forward(self, mri: torch.Tensor, mri_summary: Optional[torch.Tensor] = None) -> torch.Tensor:
        """``(B, 1, D, H, W)`` normalized MRI -> ``(B, T, D', H', W')`` normalized PET."""
        cfg = self.config
        if tuple(mri.shape[-3:]) != cfg.input_dims or mri.dim() != 5 or mri.shape[1] != 1:
            raise GeneratorError(f"expected (B, 1, {cfg.input_dims}), got {tuple(mri.shape)}")
        if mri_summary is None:
            mri_summary = summarize_tensor(mri)

        skips = []
        x = mri
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)

        grid = x.shape[-3:]
        vec = self.to_vector(x)
        if tuple(grid) != (GRID,) * 3:
            vec = F.adaptive_avg_pool3d(vec, GRID)
        vec = bottleneck_fusion(vec.flatten(1), mri_summary.to(vec.dtype)).view(-1, 1, GRID, GRID, GRID)
        if tuple(grid) != (GRID,) * 3:
            vec = F.interpolate(vec, size=tuple(grid), mode="trilinear", align_corners=False)
        x = self.from_vector(vec)

        level = cfg.depth - 1
        for up, dec in zip(self.ups, self.decoders):
            x = up(x)
            skip = skips[level]
            if level in self.disabled_skips:
                skip = torch.zeros_like(skip)
            x = dec(torch.cat([x, skip], dim=1))
            level -= 1

        x = self.head(x)
        out_spatial = cfg.output_dims[1:]
        if tuple(x.shape[-3:]) != out_spatial:
            x = F.interpolate(x, size=out_spatial, mode="trilinear", align_corners=False)
        return _ACTIVATIONS[cfg.output_activation](cfg.output_gain * x)


def forward(model: Generator, mri: Volume) -> Volume:
    """Run the generator on one normalized MRI volume."""
    if mri.modality is not Modality.MRI:
        raise GeneratorError("generator input must be an MRI volume")
    if mri.dims != model.config.input_dims:
        raise GeneratorError(f"MRI dims {mri.dims} != configured {model.config.input_dims}")
    x = torch.from_numpy(mri.data)[None, None]
    with torch.no_grad():
        out = model(x)
    return Volume(out[0].numpy(), Modality.PET)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
