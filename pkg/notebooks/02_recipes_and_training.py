# %% [markdown]
# # Recipes, footprints and a short training run
#
# Each recipe fixes the precision, block geometry, rounding and rotation of
# the six GEMM operands in a linear layer. The quant log records what
# actually happened on the first step, which is then checked against the
# recipe's expected footprint.

# %%
from nvfp4qat.modelzoo import model_config
from nvfp4qat.qatlayer import RECIPES, conformance_check, expected_footprint, probe_step
from nvfp4qat.segdata import generate_dataset, positive_fraction, prepare_arrays, split_patients
from nvfp4qat.trainlab import TrainConfig, train_run

for name in RECIPES:
    rep = conformance_check(RECIPES[name], probe_step(RECIPES[name]))
    print(f"{name:14s} conformant={rep.passed}  events={len(probe_step(RECIPES[name]))}")

# %%
for key, row in sorted(expected_footprint(RECIPES["2d-rht-sr"]).items()):
    print(key, row)

# %% [markdown]
# The synthetic cohort: 40 patients, 12 slices each, about 35% of slices
# carrying an anomaly. Splits are made per patient.

# %%
patients = generate_dataset(0)
print("positive slice fraction", round(positive_fraction(patients), 3))
split = split_patients(patients, seed=0)
data = prepare_arrays(patients, split)
print({k: len(v) for k, v in split.to_dict().items() if k != "fold"})

# %% [markdown]
# A few epochs of the small CNN with the fully quantized recipe. Raise
# `epochs` to 100 for the numbers quoted in the README.

# %%
rec = train_run(model_config("cnn", "s"), "nvfp4-full", data, TrainConfig(epochs=5, seed=0),
                progress=lambda e: print(e["epoch"], round(e["train_loss"], 4), round(e["val_loss"], 4)))
print("test AUPRC %.3f  spikiness %.3f" % (rec.test_auprc, rec.spikiness))
