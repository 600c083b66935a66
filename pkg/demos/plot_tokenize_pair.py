"""
From volumes to a token sequence
================================

Walk one synthetic MRI/PET pair through normalization, 8x8x8
summarization, quantization and masking.
"""

import numpy as np

from ganbert.tokenizer import MASK, dumps_tokens, plan_mask, quantize, summarize, tokenize_pair
from ganbert.volume import normalize_mri, normalize_pet, restore_pet, synth_pair

pair = synth_pair(0)
print("MRI", pair.mri.dims, "PET", pair.pet.dims)

# MRI is z-scored; PET uses the MRI statistics divided by ten
mri, stats = normalize_mri(pair.mri)
pet = normalize_pet(pair.pet, stats)
print(f"MRI mean {stats.mean:.2f} std {stats.std:.2f}")
print(f"normalized PET range [{pet.data.min():.2f}, {pet.data.max():.2f}]")

# the round trip is exact up to float32 rounding
back = restore_pet(pet, stats)
print("max restore error", float(np.abs(back.data - pair.pet.data).max()))

###############################################################################
# Each volume collapses to 512 signed abs-max values, one per region.

summary = summarize(pet)
ids = quantize(summary)
print("first PET summary values", np.round(summary.values[:6], 3))
print("their token ids          ", ids[:6])

###############################################################################
# The full sequence is ``[BEGIN] MRI [SEP] PET [END]``, 1027 tokens.

seq = tokenize_pair(mri, pet)
masked, plan = plan_mask(seq, rng_seed=0)
print("sequence length", len(seq.ids), "masked", int(np.sum(masked.ids == MASK)))
print(dumps_tokens(masked)[:120], "...")
