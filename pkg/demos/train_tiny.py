"""
A few adversarial steps at toy scale
====================================

Small volumes and a one-layer discriminator so this finishes in well under
a minute on CPU. The same loop drives ``ganbert train``.
"""

import numpy as np

from ganbert.bert import BertConfig
from ganbert.generator import GeneratorConfig
from ganbert.metrics import evaluate_pairs
from ganbert.training import LossWeights, TrainConfig, Trainer, prepare_pairs
from ganbert.volume import DataConfig, synth_pair

data_cfg = DataConfig(mri_dims=(32, 32, 32), pet_dims=(2, 10, 9, 9))
pairs = [synth_pair(i, data_cfg) for i in range(4)]
data = prepare_pairs(pairs)

trainer = Trainer(
    data,
    GeneratorConfig(input_dims=(32, 32, 32), output_dims=(2, 10, 9, 9), depth=2, base_channels=4),
    BertConfig(layers=1, hidden=32, heads=2, feedforward=64),
    TrainConfig(total_steps=40, base_lr=1e-3, d_lr_scale=0.05, ste_scale=0.1),
    LossWeights(nsp=20, mlm=1, l1=20),
)

for row in trainer.run(40):
    if row["step"] % 10 == 0:
        print(f"step {row['step']:3d}  g_l1 {row['g_l1']:.3f}  g_nsp {row['g_nsp']:.3f}  d_nsp {row['d_nsp']:.3f}")

###############################################################################
# Restore generated PET to intensity units and score it.

fake = trainer.generate().numpy()
scale = data.pet_scale.numpy()[:, None, None, None, None]
shift = data.pet_shift.numpy()[:, None, None, None, None]
restored = fake * scale + shift
report = evaluate_pairs((p.id, p.pet, restored[i]) for i, p in enumerate(pairs))
print(f"PSNR {report.psnr:.2f} dB  SSIM {report.ssim:.3f}  RMSE {report.rmse:.2f}")
print(f"generated max {report.generated_max:.1f}, |v|<1 fraction {report.generated_fraction_small:.2f}")
print("NSP accuracy on the training pairs:", trainer.nsp_accuracy(data))
