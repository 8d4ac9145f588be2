# %% [markdown]
# # Attention entropy under FP4
#
# With 16-dimensional heads the attention logits are dot products of two
# quantized 16-vectors, so the softmax sees a coarse set of values. This
# looks at the entropy of the attention rows and the prediction histogram
# for the fragile Swin configuration.

# %%
import numpy as np

from nvfp4qat.modelzoo import attention_row_stats, model_config
from nvfp4qat.segdata import generate_dataset, prepare_arrays, split_patients
from nvfp4qat.trainlab import TrainConfig, train_run

cfg = model_config("swin", "micro-fragile")
print(cfg)

# %% [markdown]
# Reference points: uniform rows over a 16-token window have entropy
# log(16); one-hot rows have entropy 0.

# %%
print(attention_row_stats(np.full((4, 16), 1 / 16)))
print(attention_row_stats(np.eye(16)))

# %%
patients = generate_dataset(0)
data = prepare_arrays(patients, split_patients(patients, seed=0))
for recipe in ("nvfp4-full", "2d-rht-sr"):
    rec = train_run(cfg, recipe, data, TrainConfig(epochs=5, seed=0))
    print(f"{recipe:12s} AUPRC {rec.test_auprc:.3f}  spikiness {rec.spikiness:.3f}  "
          f"entropy {rec.mean_attention_entropy():.3f}")
