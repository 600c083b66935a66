"""MRI-to-PET synthesis with a U-Net generator and a BERT sequence discriminator."""

__version__ = "0.1.0"

from .bert import BertConfig, Discriminator
from .generator import Generator, GeneratorConfig
from .metrics import MetricsReport, HistogramReport, evaluate_pairs, histogram, psnr, rmse, ssim
from .tokenizer import TokenSequence, plan_mask, quantize, summarize, tokenize_pair
from .training import LossWeights, TrainConfig, Trainer, prepare_pairs
from .volume import DataConfig, Modality, NormalizationStats, PairSample, Volume, synth_pair

__all__ = [
    "BertConfig", "DataConfig", "Discriminator", "Generator", "GeneratorConfig", "HistogramReport",
    "LossWeights", "MetricsReport", "Modality", "NormalizationStats", "PairSample", "TokenSequence",
    "TrainConfig", "Trainer", "Volume", "evaluate_pairs", "histogram", "plan_mask", "prepare_pairs",
    "psnr", "quantize", "rmse", "ssim", "summarize", "synth_pair", "tokenize_pair",
]
