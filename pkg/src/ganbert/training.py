"""Alternating adversarial training of the generator against the BERT discriminator.

Generator objective per sample::

    lambda_nsp * CE(NSP(gen seq), real) + lambda_mlm * CE(MLM(gen seq), real ids)
        + lambda_l1 * |G(mri) - pet|

The discriminator minimizes NSP cross-entropy on a per-sample fair coin of
real/generated PET plus MLM cross-entropy toward the real ids. Each model has
its own Adam optimizer; one training step is a discriminator update followed
by a generator update, each accumulated over ``accumulation_steps``
micro-batches.

All per-sample randomness (coin, mask positions, batch draw) is keyed on
``(seed, step, slot)`` so a run resumed from a checkpoint replays exactly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .bert import GENERATED, REAL, BertConfig, Discriminator
from .checkpoint import load_checkpoint, save_checkpoint
from .generator import Generator, GeneratorConfig
from .tokenizer import (
    MASK,
    SEQ_LEN,
    assemble_tensor,
    quantize_tensor,
    sample_mask_positions,
    summarize_tensor,
)
from .volume import PairSample, normalize_mri, normalize_pet

log = logging.getLogger(__name__)

CSV_FIELDS = ["step", "lr", "g_total", "g_nsp", "g_mlm", "g_l1", "d_nsp", "d_mlm"]
CNN_FIELDS = ["g_cnn", "d_cnn"]


class TrainingError(RuntimeError):
    pass


class NonFiniteLoss(TrainingError):
    pass


class TrainingDiverged(TrainingError):
    pass


@dataclass
class LossWeights:
    nsp: float = 20.0
    mlm: float = 1.0
    l1: float = 20.0

    def __post_init__(self):
        if min(self.nsp, self.mlm, self.l1) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    micro_batch: int = 2
    accumulation_steps: int = 2
    base_lr: float = 1e-4
    warmup_fraction: float = 0.05
    total_steps: int = 1000
    seed: int = 0
    use_cnn_d: bool = False
    betas: Sequence[float] = (0.9, 0.999)
    # "normalized" or "restored"
    l1_space: str = "normalized"
    # weight of MLM inside the discriminator objective
    d_mlm_weight: float = 1.0
    # discriminator lr = base_lr * d_lr_scale (two-timescale updates)
    d_lr_scale: float = 1.0
    # multiplier on the straight-through gradient into the generator
    ste_scale: float = 1.0
    divergence_factor: float = 1e3
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in (0, 1)")
        if self.micro_batch < 1 or self.accumulation_steps < 1 or self.total_steps < 1:
            raise ValueError("micro_batch, accumulation_steps and total_steps must be >= 1")
        if self.d_lr_scale <= 0:
            raise ValueError("d_lr_scale must be positive")
        if self.ste_scale < 0:
            raise ValueError("ste_scale must be non-negative")
        if self.l1_space not in ("normalized", "restored"):
            raise ValueError(f"unknown l1_space {self.l1_space!r}")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accumulation_steps


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``base_lr`` over the first ``warmup_fraction`` of steps, flat after."""
    warmup = cfg.warmup_fraction * cfg.total_steps
    if step < warmup:
        return cfg.base_lr * step / warmup
    return cfg.base_lr


# --------------------------------------------------------------------------- #
# data


@dataclass
class PreparedData:
    """Stacked, normalized tensors for a list of pairs."""

    ids: List[str]
    mri: torch.Tensor          # (N, 1, D, H, W)
    pet: torch.Tensor          # (N, T, D', H', W')
    mri_summary: torch.Tensor  # (N, 512)
    mri_ids: torch.Tensor      # (N, 512)
    pet_ids: torch.Tensor      # (N, 512)
    pet_shift: torch.Tensor    # (N,) MRI mean / 10
    pet_scale: torch.Tensor    # (N,) MRI std / 10

    def __len__(self):
        return len(self.ids)

    def select(self, index) -> "PreparedData":
        index = torch.as_tensor(index, dtype=torch.long)
        return PreparedData(
            [self.ids[i] for i in index.tolist()],
            *(getattr(self, f)[index] for f in ("mri", "pet", "mri_summary", "mri_ids", "pet_ids", "pet_shift", "pet_scale")),
        )


def prepare_pairs(pairs: Sequence[PairSample]) -> PreparedData:
    mri, pet, shift, scale = [], [], [], []
    for p in pairs:
        m, stats = normalize_mri(p.mri)
        mri.append(torch.from_numpy(m.data)[None])
        pet.append(torch.from_numpy(normalize_pet(p.pet, stats).data))
        shift.append(stats.mean / 10.0)
        scale.append(stats.std / 10.0)
    mri_t = torch.stack(mri)
    pet_t = torch.stack(pet)
    mri_summary = summarize_tensor(mri_t)
    return PreparedData(
        ids=[p.id for p in pairs],
        mri=mri_t,
        pet=pet_t,
        mri_summary=mri_summary,
        mri_ids=quantize_tensor(mri_summary)[0],
        pet_ids=quantize_tensor(summarize_tensor(pet_t))[0],
        pet_shift=torch.tensor(shift, dtype=torch.float32),
        pet_scale=torch.tensor(scale, dtype=torch.float32),
    )


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def mask_positions(seed: int, step: int, slots: Sequence[int]) -> torch.Tensor:
    return torch.from_numpy(np.stack([sample_mask_positions([seed, step, s, 1]) for s in slots]))


def coin_real(seed: int, step: int, slots: Sequence[int]) -> torch.Tensor:
    """Per-sample fair coin: True -> the sequence carries the real PET."""
    return torch.tensor([bool(_rng(seed, step, s, 2).random() < 0.5) for s in slots])


def draw_batch(seed: int, step: int, n: int, size: int) -> np.ndarray:
    return _rng(seed, step, 0).choice(n, size=size, replace=n < size)


# --------------------------------------------------------------------------- #
# sequences and losses


def build_sequence(mri_ids, pet_ids, positions, pet_ste=None):
    """Assemble a masked batch of sequences.

    Returns ``(ids, ste, targets_positions)``; ``ste`` is None when no
    straight-through path is requested.
    """
    ids = assemble_tensor(mri_ids, pet_ids)
    ste = None
    if pet_ste is not None:
        zeros = torch.zeros(mri_ids.shape[0], 1 + SEQ_LEN + 1, dtype=pet_ste.dtype)
        ste = torch.cat([zeros, pet_ste, zeros[:, :1]], dim=1)
        ste = ste.scatter(1, positions, 0.0)
    ids = ids.scatter(1, positions, MASK)
    return ids, ste


def real_targets(data: PreparedData, positions: torch.Tensor) -> torch.Tensor:
    real_ids = assemble_tensor(data.mri_ids, data.pet_ids)
    return real_ids.gather(1, positions)


def _mlm_ce(logits, targets):
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


def combine(components: Dict[str, float], weights: LossWeights) -> float:
    """Weighted sum of ``nsp``/``mlm``/``l1`` (and ``cnn`` at the NSP weight)."""
    total = weights.nsp * components["nsp"] + weights.mlm * components["mlm"] + weights.l1 * components["l1"]
    if "cnn" in components:
        total = total + weights.nsp * components["cnn"]
    return total


class CNNDiscriminator(nn.Module):
    """Five strided 3D convolutions over the 4D PET; patch logits are averaged."""

    def __init__(self, time_steps: int = 2, width: int = 16):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            nn.Conv3d(time_steps, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv3d(w, 2 * w, 4, stride=2, padding=1), nn.GroupNorm(4, 2 * w), nn.LeakyReLU(0.2),
            nn.Conv3d(2 * w, 4 * w, 4, stride=2, padding=1), nn.GroupNorm(4, 4 * w), nn.LeakyReLU(0.2),
            nn.Conv3d(4 * w, 4 * w, 3, stride=1, padding=1), nn.LeakyReLU(0.2),
            nn.Conv3d(4 * w, 2, 3, stride=1, padding=1),
        )

    def forward(self, pet: torch.Tensor) -> torch.Tensor:
        return self.net(pet).mean(dim=(2, 3, 4))


def generator_loss(generator, discriminator, data: PreparedData, positions, weights: LossWeights,
                   cnn_d=None, l1_space: str = "normalized", ste_scale: float = 1.0):
    """Returns ``(total, components)`` averaged over the batch."""
    fake = generator(data.mri, data.mri_summary)
    pet_ids, pet_ste = quantize_tensor(summarize_tensor(fake))
    if ste_scale != 1.0:
        pet_ste = pet_ste * ste_scale
    ids, ste = build_sequence(data.mri_ids, pet_ids, positions, pet_ste)
    nsp, mlm = discriminator(ids, ste=ste, mlm_positions=positions)
    b = fake.shape[0]
    comps = {
        "nsp": F.cross_entropy(nsp, torch.full((b,), REAL)),
        "mlm": _mlm_ce(mlm, real_targets(data, positions)),
    }
    diff = (fake - data.pet).abs()
    if l1_space == "restored":
        diff = diff * data.pet_scale.view(-1, 1, 1, 1, 1)
    comps["l1"] = diff.mean()
    if cnn_d is not None:
        comps["cnn"] = F.cross_entropy(cnn_d(fake), torch.full((b,), REAL))
    return combine(comps, weights), comps


def discriminator_loss(generator, discriminator, data: PreparedData, positions, is_real,
                       mlm_weight: float = 1.0, fake=None):
    """NSP on a real/generated mix chosen by ``is_real`` plus MLM toward real ids."""
    if fake is None:
        with torch.no_grad():
            fake = generator(data.mri, data.mri_summary)
    gen_ids = quantize_tensor(summarize_tensor(fake))[0]
    pet_ids = torch.where(is_real[:, None], data.pet_ids, gen_ids)
    ids, _ = build_sequence(data.mri_ids, pet_ids, positions)
    nsp, mlm = discriminator(ids, mlm_positions=positions)
    labels = torch.where(is_real, REAL, GENERATED)
    comps = {"nsp": F.cross_entropy(nsp, labels), "mlm": _mlm_ce(mlm, real_targets(data, positions))}
    return comps["nsp"] + mlm_weight * comps["mlm"], comps


def cnn_discriminator_loss(cnn_d, real_pet, fake_pet):
    b = real_pet.shape[0]
    logits = cnn_d(torch.cat([real_pet, fake_pet.detach()]))
    labels = torch.cat([torch.full((b,), REAL), torch.full((b,), GENERATED)])
    return F.cross_entropy(logits, labels)


# --------------------------------------------------------------------------- #
# trainer


def _set_trainable(model: Optional[nn.Module], flag: bool) -> None:
    if model is not None:
        for p in model.parameters():
            p.requires_grad_(flag)


def _check_finite(name: str, value: torch.Tensor, step: int, comps: Dict[str, torch.Tensor]) -> None:
    if not torch.isfinite(value):
        detail = ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in comps.items())
        raise NonFiniteLoss(f"non-finite {name} loss at step {step}: {detail}")


@dataclass
class TrainState:
    generator: Generator
    discriminator: Discriminator
    g_opt: torch.optim.Adam
    d_opt: torch.optim.Adam
    cnn_d: Optional[CNNDiscriminator] = None
    c_opt: Optional[torch.optim.Adam] = None
    step: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)
    initial_total: Optional[float] = None


class Trainer:
    def __init__(self, data: PreparedData, gen_cfg: Optional[GeneratorConfig] = None,
                 bert_cfg: Optional[BertConfig] = None, cfg: Optional[TrainConfig] = None,
                 weights: Optional[LossWeights] = None, init_seed: Optional[int] = None):
        self.data = data
        self.gen_cfg = gen_cfg or GeneratorConfig()
        self.bert_cfg = bert_cfg or BertConfig()
        self.cfg = cfg or TrainConfig()
        self.weights = weights or LossWeights()
        torch.manual_seed(self.cfg.seed if init_seed is None else init_seed)
        generator = Generator(self.gen_cfg)
        discriminator = Discriminator(self.bert_cfg)
        cnn_d = CNNDiscriminator(self.gen_cfg.output_dims[0]) if self.cfg.use_cnn_d else None
        betas = tuple(self.cfg.betas)
        self.state = TrainState(
            generator=generator,
            discriminator=discriminator,
            g_opt=torch.optim.Adam(generator.parameters(), lr=0.0, betas=betas),
            d_opt=torch.optim.Adam(discriminator.parameters(), lr=0.0, betas=betas),
            cnn_d=cnn_d,
            c_opt=torch.optim.Adam(cnn_d.parameters(), lr=0.0, betas=betas) if cnn_d is not None else None,
        )

    # -- batching -------------------------------------------------------

    def batch_for(self, step: int) -> PreparedData:
        return self.data.select(draw_batch(self.cfg.seed, step, len(self.data), self.cfg.effective_batch))

    def _micro_slices(self):
        mb = self.cfg.micro_batch
        return [range(i * mb, (i + 1) * mb) for i in range(self.cfg.accumulation_steps)]

    # -- gradients ------------------------------------------------------

    def compute_gradients(self, phase: str, step: int, batch: Optional[PreparedData] = None,
                          mlm_weight: Optional[float] = None) -> Dict[str, float]:
        """Zero and accumulate gradients for one phase; returns averaged components.

        Each micro-batch loss is a per-sample mean scaled by
        ``1 / accumulation_steps`` so the accumulated gradient equals the
        gradient of the mean over the effective batch.
        """
        st, cfg = self.state, self.cfg
        batch = batch if batch is not None else self.batch_for(step)
        acc = cfg.accumulation_steps
        sums: Dict[str, float] = {}
        is_gen = phase == "generator"
        _set_trainable(st.generator, is_gen)
        _set_trainable(st.discriminator, not is_gen)
        _set_trainable(st.cnn_d, not is_gen)
        models = [st.generator] if is_gen else [st.discriminator] + ([st.cnn_d] if st.cnn_d is not None else [])
        for m in models:
            m.zero_grad(set_to_none=True)
        for slots in self._micro_slices():
            micro = batch.select(list(slots))
            positions = mask_positions(cfg.seed, step, slots)
            if is_gen:
                total, comps = generator_loss(st.generator, st.discriminator, micro, positions, self.weights,
                                              st.cnn_d, cfg.l1_space, cfg.ste_scale)
            else:
                with torch.no_grad():
                    fake = st.generator(micro.mri, micro.mri_summary)
                w = cfg.d_mlm_weight if mlm_weight is None else mlm_weight
                total, comps = discriminator_loss(st.generator, st.discriminator, micro, positions,
                                                  coin_real(cfg.seed, step, slots), w, fake=fake)
                if st.cnn_d is not None:
                    comps["cnn"] = cnn_discriminator_loss(st.cnn_d, micro.pet, fake)
                    total = total + comps["cnn"]
            _check_finite(phase, total, step, comps)
            (total / acc).backward()
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach()) / acc
            sums["total"] = sums.get("total", 0.0) + float(total.detach()) / acc
        _set_trainable(st.generator, True)
        _set_trainable(st.discriminator, True)
        _set_trainable(st.cnn_d, True)
        return sums

    def _apply(self, opts, lr: float) -> None:
        for opt in opts:
            if opt is None:
                continue
            for group in opt.param_groups:
                group["lr"] = lr
            opt.step()

    # -- steps ----------------------------------------------------------

    def discriminator_step(self, step: Optional[int] = None, mlm_weight: Optional[float] = None) -> Dict[str, float]:
        step = self.state.step + 1 if step is None else step
        comps = self.compute_gradients("discriminator", step, mlm_weight=mlm_weight)
        self._apply([self.state.d_opt, self.state.c_opt], lr_at(step, self.cfg) * self.cfg.d_lr_scale)
        return comps

    def generator_step(self, step: Optional[int] = None) -> Dict[str, float]:
        step = self.state.step + 1 if step is None else step
        comps = self.compute_gradients("generator", step)
        self._apply([self.state.g_opt], lr_at(step, self.cfg))
        return comps

    def train_step(self) -> Dict[str, float]:
        """One discriminator update followed by one generator update."""
        st = self.state
        step = st.step + 1
        d = self.discriminator_step(step)
        g = self.generator_step(step)
        row = {
            "step": step,
            "lr": lr_at(step, self.cfg),
            "g_total": g["total"],
            "g_nsp": g["nsp"],
            "g_mlm": g["mlm"],
            "g_l1": g["l1"],
            "d_nsp": d["nsp"],
            "d_mlm": d["mlm"],
        }
        if st.cnn_d is not None:
            row["g_cnn"] = g["cnn"]
            row["d_cnn"] = d["cnn"]
        if st.initial_total is None:
            st.initial_total = g["total"]
        elif g["total"] > self.cfg.divergence_factor * max(abs(st.initial_total), 1e-12):
            raise TrainingDiverged(
                f"generator loss {g['total']:.4g} at step {step} exceeds "
                f"{self.cfg.divergence_factor:g}x its initial value {st.initial_total:.4g}"
            )
        st.step = step
        st.history.append(row)
        return row

    def run(self, steps: int, callback: Optional[Callable[[Dict[str, float]], None]] = None) -> List[Dict[str, float]]:
        rows = []
        for _ in range(steps):
            row = self.train_step()
            log.debug("step %d g=%.4f d=%.4f", row["step"], row["g_total"], row["d_nsp"])
            rows.append(row)
            if callback is not None:
                callback(row)
        return rows

    @property
    def csv_fields(self) -> List[str]:
        return CSV_FIELDS + (CNN_FIELDS if self.state.cnn_d is not None else [])

    # -- inference ------------------------------------------------------

    @torch.no_grad()
    def generate(self, data: Optional[PreparedData] = None) -> torch.Tensor:
        data = data if data is not None else self.data
        outs = [self.state.generator(data.mri[i:i + 1], data.mri_summary[i:i + 1]) for i in range(len(data))]
        return torch.cat(outs)

    @torch.no_grad()
    def nsp_accuracy(self, data: PreparedData, step: int = 0) -> float:
        """Accuracy of NSP on every pair shown once real and once generated."""
        st = self.state
        slots = list(range(len(data)))
        positions = mask_positions(self.cfg.seed + 7919, step, slots)
        fake = self.generate(data)
        gen_ids = quantize_tensor(summarize_tensor(fake))[0]
        correct = 0
        for pet_ids, label in ((data.pet_ids, REAL), (gen_ids, GENERATED)):
            ids, _ = build_sequence(data.mri_ids, pet_ids, positions)
            preds = st.discriminator(ids)[0].argmax(-1)
            correct += int((preds == label).sum())
        return correct / (2 * len(data))

    # -- persistence ----------------------------------------------------

    def save(self, path) -> None:
        st = self.state
        save_checkpoint(path, "train_state", {
            "generator_config": self.gen_cfg.to_dict(),
            "bert_config": self.bert_cfg.to_dict(),
            "train_config": asdict(self.cfg),
            "weights": asdict(self.weights),
            "generator": st.generator.state_dict(),
            "discriminator": st.discriminator.state_dict(),
            "g_opt": st.g_opt.state_dict(),
            "d_opt": st.d_opt.state_dict(),
            "cnn_d": st.cnn_d.state_dict() if st.cnn_d is not None else None,
            "c_opt": st.c_opt.state_dict() if st.c_opt is not None else None,
            "step": st.step,
            "history": st.history,
            "initial_total": st.initial_total,
        })

    @classmethod
    def load(cls, path, data: PreparedData, cfg_override: Optional[TrainConfig] = None) -> "Trainer":
        a = load_checkpoint(path, "train_state")
        trainer = cls(
            data,
            GeneratorConfig(**a["generator_config"]),
            BertConfig(**a["bert_config"]),
            cfg_override or TrainConfig(**a["train_config"]),
            LossWeights(**a["weights"]),
        )
        st = trainer.state
        st.generator.load_state_dict(a["generator"])
        st.discriminator.load_state_dict(a["discriminator"])
        st.g_opt.load_state_dict(a["g_opt"])
        st.d_opt.load_state_dict(a["d_opt"])
        if st.cnn_d is not None:
            if a["cnn_d"] is None:
                raise TrainingError("checkpoint has no CNN discriminator but use_cnn_d is set")
            st.cnn_d.load_state_dict(a["cnn_d"])
            st.c_opt.load_state_dict(a["c_opt"])
        st.step = a["step"]
        st.history = list(a["history"])
        st.initial_total = a["initial_total"]
        return trainer


def gradient_norms(model: nn.Module) -> Dict[str, float]:
    return {n: (0.0 if p.grad is None else float(p.grad.norm())) for n, p in model.named_parameters()}


def is_finite_number(x: float) -> bool:
    return not (math.isnan(x) or math.isinf(x))
