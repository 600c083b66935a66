"""Image-quality metrics and intensity histograms for restored PET volumes.

All metrics take the *real* volume first; its ``max - min`` is the data range
used by PSNR and by the SSIM stabilizing constants.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .volume import Volume

SSIM_WINDOW = 7
K1, K2 = 0.01, 0.03


class MetricsError(ValueError):
    pass


def _arrays(real, gen) -> Tuple[np.ndarray, np.ndarray]:
    r = np.asarray(real.data if isinstance(real, Volume) else real, dtype=np.float64)
    g = np.asarray(gen.data if isinstance(gen, Volume) else gen, dtype=np.float64)
    if r.shape != g.shape:
        raise MetricsError(f"shape mismatch {r.shape} vs {g.shape}")
    return r, g


def data_range(real) -> float:
    r = np.asarray(real.data if isinstance(real, Volume) else real, dtype=np.float64)
    return float(r.max() - r.min())


def rmse(real, gen) -> float:
    r, g = _arrays(real, gen)
    return float(np.sqrt(np.mean((r - g) ** 2)))


def psnr(real, gen) -> float:
    """``10 log10(range^2 / MSE)``; identical inputs give ``inf``."""
    r, g = _arrays(real, gen)
    mse = float(np.mean((r - g) ** 2))
    if mse == 0.0:
        return math.inf
    rng = data_range(r)
    if rng == 0.0:
        return -math.inf
    return 10.0 * math.log10(rng ** 2 / mse)


def _box_mean(a: np.ndarray, w: int) -> np.ndarray:
    """Mean over every fully contained ``w**3`` window (valid mode)."""
    s = a
    for axis in range(3):
        c = np.cumsum(s, axis=axis)
        pad = [(0, 0)] * 3
        pad[axis] = (1, 0)
        c = np.pad(c, pad)
        hi = [slice(None)] * 3
        lo = [slice(None)] * 3
        hi[axis] = slice(w, None)
        lo[axis] = slice(None, -w)
        s = c[tuple(hi)] - c[tuple(lo)]
    return s / w ** 3


def _ssim3d(r: np.ndarray, g: np.ndarray, c1: float, c2: float, w: int) -> float:
    mr, mg = _box_mean(r, w), _box_mean(g, w)
    vr = _box_mean(r * r, w) - mr ** 2
    vg = _box_mean(g * g, w) - mg ** 2
    cov = _box_mean(r * g, w) - mr * mg
    num = (2 * mr * mg + c1) * (2 * cov + c2)
    den = (mr ** 2 + mg ** 2 + c1) * (vr + vg + c2)
    return float(np.mean(num / den))


def ssim(real, gen, window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM over uniform ``window**3`` cubes (valid positions only).

    Population (co)variances per window, ``C1 = (0.01 R)^2``,
    ``C2 = (0.03 R)^2`` with ``R`` the real volume's range. 4D inputs are
    scored per time-step and averaged.
    """
    r, g = _arrays(real, gen)
    if r.ndim not in (3, 4):
        raise MetricsError(f"ssim expects 3D or 4D volumes, got {r.ndim}D")
    if min(r.shape[-3:]) < window:
        raise MetricsError(f"spatial dims {r.shape[-3:]} smaller than window {window}")
    rng = data_range(r)
    c1, c2 = (K1 * rng) ** 2, (K2 * rng) ** 2
    if r.ndim == 3:
        return _ssim3d(r, g, c1, c2, window)
    return float(np.mean([_ssim3d(r[t], g[t], c1, c2, window) for t in range(r.shape[0])]))


# --------------------------------------------------------------------------- #
# reports


@dataclass
class PairMetrics:
    id: str
    psnr: float
    ssim: float
    rmse: float
    data_range: float


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    rmse: float
    n_pairs: int
    data_range: float
    pairs: List[PairMetrics] = field(default_factory=list)
    generated_fraction_small: Optional[float] = None
    generated_max: Optional[float] = None
    generated_min: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, allow_nan=True)


def score_pair(real, gen, pair_id: str = "") -> PairMetrics:
    return PairMetrics(pair_id, psnr(real, gen), ssim(real, gen), rmse(real, gen), data_range(real))


def evaluate_pairs(pairs: Iterable[Tuple[str, np.ndarray, np.ndarray]]) -> MetricsReport:
    """Per-volume metrics, then the mean over volumes.

    ``pairs`` yields ``(id, real, generated)`` in restored intensity units.
    """
    scored, gen_vals = [], []
    for pid, real, gen in pairs:
        scored.append(score_pair(real, gen, pid))
        gen_vals.append(np.asarray(gen.data if isinstance(gen, Volume) else gen, dtype=np.float64).ravel())
    if not scored:
        raise MetricsError("no pairs to evaluate")
    g = np.concatenate(gen_vals)
    return MetricsReport(
        psnr=float(np.mean([p.psnr for p in scored])),
        ssim=float(np.mean([p.ssim for p in scored])),
        rmse=float(np.mean([p.rmse for p in scored])),
        n_pairs=len(scored),
        data_range=float(np.mean([p.data_range for p in scored])),
        pairs=scored,
        generated_fraction_small=float(np.mean(np.abs(g) < 1.0)),
        generated_max=float(g.max()),
        generated_min=float(g.min()),
    )


@dataclass
class HistogramReport:
    edges: np.ndarray
    counts: np.ndarray
    label: str = ""
    min: float = 0.0
    max: float = 0.0
    fraction_small: float = 0.0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def modal_bin(self) -> Tuple[float, float]:
        i = int(np.argmax(self.counts))
        return float(self.edges[i]), float(self.edges[i + 1])

    def to_dict(self):
        return {
            "label": self.label,
            "edges": self.edges.tolist(),
            "counts": self.counts.tolist(),
            "min": self.min,
            "max": self.max,
            "fraction_small": self.fraction_small,
            "total": self.total,
        }


def histogram(values, n_bins: int = 100, value_range: Sequence[float] = (-100.0, 1000.0),
              label: str = "") -> HistogramReport:
    """Uniform-bin counts; values outside ``value_range`` land in the edge bins."""
    if n_bins < 1:
        raise MetricsError("n_bins must be >= 1")
    lo, hi = float(value_range[0]), float(value_range[1])
    if not hi > lo:
        raise MetricsError(f"degenerate histogram range ({lo}, {hi})")
    v = np.asarray(values.data if isinstance(values, Volume) else values, dtype=np.float64).ravel()
    edges = np.linspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(np.clip(v, lo, hi), bins=edges)
    return HistogramReport(
        edges=edges,
        counts=counts.astype(np.int64),
        label=label,
        min=float(v.min()) if v.size else 0.0,
        max=float(v.max()) if v.size else 0.0,
        fraction_small=float(np.mean(np.abs(v) < 1.0)) if v.size else 0.0,
    )


def plot_histograms(reports: Sequence[HistogramReport], path, log: bool = True) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for rep in reports:
        centers = (rep.edges[:-1] + rep.edges[1:]) / 2
        ax.step(centers, rep.counts, where="mid", label=rep.label or None)
    if log:
        ax.set_yscale("log")
    ax.set_xlabel("intensity")
    ax.set_ylabel("voxels")
    if any(r.label for r in reports):
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
