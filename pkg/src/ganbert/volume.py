"""Volume container, MRI-statistics normalization and the synthetic paired-data generator.

PET intensities are normalized with the statistics of the *paired* MRI scaled
by 1/10, so that the absolute PET values can be recovered after synthesis from
nothing but the MRI that went in.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

EPS = 1e-8

MAGIC = b"GBVL"
# magic, modality, ndim, 4 dims (unused slots are 0)
HEADER = struct.Struct("<4sII4I")


class Modality(str, Enum):
    MRI = "MRI"
    PET = "PET"


_MODALITY_CODES = {Modality.MRI: 1, Modality.PET: 2}
_CODE_MODALITIES = {v: k for k, v in _MODALITY_CODES.items()}


class VolumeError(ValueError):
    pass


class VolumeFormatError(VolumeError):
    """Raised when a volume file cannot be decoded.

    ``code`` is one of ``"bad_magic"``, ``"bad_header"``, ``"truncated_payload"``
    or ``"dim_mismatch"``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    modality: Modality

    def __post_init__(self):
        modality = Modality(self.modality)
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.size == 0:
            raise VolumeError("empty volume")
        if modality is Modality.MRI and data.ndim != 3:
            raise VolumeError(f"MRI volumes are 3D, got shape {data.shape}")
        if modality is Modality.PET and data.ndim != 4:
            raise VolumeError(f"PET volumes are 4D (T, D, H, W), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise VolumeError("volume contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "modality", modality)

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.modality)

    def __repr__(self):
        return f"Volume({self.modality.value}, dims={self.dims})"


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise VolumeError(f"std must be positive, got {self.std}")


def compute_stats(vol: Volume) -> NormalizationStats:
    """Mean and population standard deviation over all voxels.

    A constant volume has std clamped to ``EPS`` instead of raising.
    """
    values = vol.data.astype(np.float64)
    return NormalizationStats(float(values.mean()), max(float(values.std()), EPS))


def normalize_mri(vol: Volume) -> Tuple[Volume, NormalizationStats]:
    if vol.modality is not Modality.MRI:
        raise VolumeError(f"normalize_mri expects an MRI volume, got {vol.modality.value}")
    stats = compute_stats(vol)
    out = (vol.data.astype(np.float64) - stats.mean) / stats.std
    return vol.with_data(out), stats


def _pet_scale(mri_stats: NormalizationStats) -> Tuple[float, float]:
    return mri_stats.mean / 10.0, max(mri_stats.std / 10.0, EPS)


def normalize_pet(pet: Volume, mri_stats: NormalizationStats) -> Volume:
    if pet.modality is not Modality.PET:
        raise VolumeError(f"normalize_pet expects a PET volume, got {pet.modality.value}")
    shift, scale = _pet_scale(mri_stats)
    return pet.with_data((pet.data.astype(np.float64) - shift) / scale)


def restore_pet(norm_pet: Volume, mri_stats: NormalizationStats) -> Volume:
    shift, scale = _pet_scale(mri_stats)
    return norm_pet.with_data(norm_pet.data.astype(np.float64) * scale + shift)


def restore_pet_array(values: np.ndarray, mri_stats: NormalizationStats) -> np.ndarray:
    shift, scale = _pet_scale(mri_stats)
    return np.asarray(values, dtype=np.float64) * scale + shift


# --------------------------------------------------------------------------- #
# synthetic paired data


@dataclass
class DataConfig:
    mri_dims: Tuple[int, int, int] = (64, 64, 64)
    pet_dims: Tuple[int, int, int, int] = (2, 24, 19, 19)
    seed: int = 0
    mri_range: Tuple[float, float] = (0.0, 255.0)
    # peak uptake and deepest negative dip, in raw PET units
    pet_range: Tuple[float, float] = (-100.0, 1000.0)
    noise_scale: float = 0.25

    def __post_init__(self):
        self.mri_dims = tuple(int(d) for d in self.mri_dims)
        self.pet_dims = tuple(int(d) for d in self.pet_dims)
        self.mri_range = tuple(float(v) for v in self.mri_range)
        self.pet_range = tuple(float(v) for v in self.pet_range)
        if len(self.mri_dims) != 3 or min(self.mri_dims) < 8:
            raise VolumeError(f"mri_dims must be 3 ints >= 8, got {self.mri_dims}")
        if len(self.pet_dims) != 4 or self.pet_dims[0] < 1 or min(self.pet_dims[1:]) < 8:
            raise VolumeError(f"pet_dims must be (T>=1, D, H, W >= 8), got {self.pet_dims}")
        if self.mri_range[0] >= self.mri_range[1] or self.pet_range[0] >= 0 or self.pet_range[1] <= 0:
            raise VolumeError("invalid intensity ranges")


@dataclass(eq=False)
class PairSample:
    mri: Volume
    pet: Volume
    mri_stats: NormalizationStats
    id: str = ""


def _unit_grid(dims: Sequence[int]):
    axes = [np.linspace(-1.0, 1.0, n) for n in dims]
    return np.meshgrid(*axes, indexing="ij")


def _resize(arr: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    factors = [t / s for t, s in zip(dims, arr.shape)]
    out = ndimage.zoom(arr, factors, order=1, mode="nearest", grid_mode=True)
    return out[tuple(slice(0, d) for d in dims)]


def _synth_mri(rng: np.random.Generator, cfg: DataConfig) -> np.ndarray:
    dims = cfg.mri_dims
    z, y, x = _unit_grid(dims)
    radii = rng.uniform(0.7, 0.9, size=3)
    center = rng.uniform(-0.08, 0.08, size=3)
    head = ((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + ((x - center[2]) / radii[2]) ** 2
    inside = head <= 1.0

    field = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=max(dims) / 12.0, mode="wrap")
    field = (field - field.mean()) / (field.std() + EPS)
    # logistic squashing keeps most tissue mid-grey, a few bright folds
    tissue = 1.0 / (1.0 + np.exp(-1.6 * field))
    lo, hi = cfg.mri_range
    mri = np.where(inside, lo + 0.2 * (hi - lo) + 0.8 * (hi - lo) * tissue, lo)
    mri = ndimage.gaussian_filter(mri, sigma=0.6)
    return np.clip(mri, lo, hi)


def _synth_pet(rng: np.random.Generator, mri: np.ndarray, cfg: DataConfig) -> np.ndarray:
    t_steps, *spatial = cfg.pet_dims
    lo, hi = cfg.mri_range
    m = _resize((mri - lo) / (hi - lo), spatial)
    neg_peak, pos_peak = cfg.pet_range

    # broad moderate uptake over bright tissue plus rare hot spots at the very top
    uptake = 0.06 * np.clip((m - 0.45) / 0.55, 0.0, 1.0) ** 2
    hot = np.clip((m - 0.93) / 0.06, 0.0, 1.0) ** 3
    # negative dips along tissue boundaries
    edges = ndimage.gaussian_gradient_magnitude(m, sigma=0.8)
    dips = np.clip((edges - 0.12) / 0.15, 0.0, 1.0) ** 2

    frames = []
    for t in range(t_steps):
        gain = rng.uniform(0.85, 1.15) * (1.0 - 0.15 * t)
        frame = gain * pos_peak * (uptake + hot) + 0.3 * neg_peak * dips
        # structured noise: a couple of smooth blobs not explained by the MRI
        for _ in range(2):
            c = rng.integers(0, spatial)
            g = np.zeros(spatial)
            g[tuple(c)] = 1.0
            blob = ndimage.gaussian_filter(g, sigma=1.5)
            frame += rng.uniform(-15.0, 15.0) * blob / blob.max() * (m > 0.05)
        frame += rng.laplace(0.0, cfg.noise_scale, size=spatial)
        frames.append(frame)
    return np.stack(frames)


def synth_pair(seed: int, cfg: Optional[DataConfig] = None) -> PairSample:
    """Generate one deterministic MRI/PET pair.

    The PET is a smooth nonlinear function of the local MRI intensity (bright
    tissue takes up tracer, tissue boundaries dip negative) plus a few
    MRI-independent blobs and Laplace noise, so values pile up around zero
    while spanning roughly ``cfg.pet_range``.
    """
    cfg = cfg or DataConfig()
    rng = np.random.default_rng([int(cfg.seed), int(seed)])
    mri = Volume(_synth_mri(rng, cfg), Modality.MRI)
    pet = Volume(_synth_pet(rng, mri.data.astype(np.float64), cfg), Modality.PET)
    return PairSample(mri, pet, compute_stats(mri), id=f"pair-{cfg.seed}-{seed:05d}")


# --------------------------------------------------------------------------- #
# file container


def save_volume(path: Union[str, Path], vol: Volume) -> None:
    dims = list(vol.dims) + [0] * (4 - vol.data.ndim)
    header = HEADER.pack(MAGIC, _MODALITY_CODES[vol.modality], vol.data.ndim, *dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(vol.data.astype("<f4", copy=False).tobytes(order="C"))


def load_volume(path: Union[str, Path]) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise VolumeFormatError("bad_magic", f"{path} is not a volume file")
    if len(raw) < HEADER.size:
        raise VolumeFormatError("truncated_payload", f"{path}: header cut short")
    _, code, ndim, *dims = HEADER.unpack_from(raw)
    if code not in _CODE_MODALITIES or ndim not in (3, 4):
        raise VolumeFormatError("bad_header", f"{path}: modality={code} ndim={ndim}")
    shape = tuple(dims[:ndim])
    payload = raw[HEADER.size:]
    # a partial float means the file was cut; a whole number of the wrong count is a header mismatch
    if len(payload) % 4:
        raise VolumeFormatError("truncated_payload", f"{path}: {len(payload)} payload bytes")
    n = len(payload) // 4
    expected = int(np.prod(shape))
    if n != expected:
        raise VolumeFormatError("dim_mismatch", f"{path}: header says {shape} ({expected} floats), found {n}")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return Volume(data, _CODE_MODALITIES[code])
