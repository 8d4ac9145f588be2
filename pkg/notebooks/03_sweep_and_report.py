# %% [markdown]
# # A tiny sweep, end to end
#
# Same path as `nvfp4qat sweep --spec ...`: enumerate the grid, train each
# run into its own directory, then build the normalized report.

# %%
import json
import tempfile
from pathlib import Path

from nvfp4qat.cli import main

root = Path(tempfile.mkdtemp())
spec = {
    "archs": ["cnn"], "tiers": ["s"], "recipes": ["baseline-bf16", "2d-rht-sr"], "seeds": [0, 1],
    "data": {"n_patients": 12, "slices_per_patient": 6},
    "train": {"epochs": 3},
}
(root / "spec.json").write_text(json.dumps(spec))
code = main(["sweep", "--spec", str(root / "spec.json"), "--out", str(root / "runs")])
print("exit code", code)

# %%
report = json.loads((root / "runs" / "report.json").read_text())
for g in report["groups"]:
    n = g["normalized"]
    print(f"{g['recipe']:14s} {n['mean']:6.1f}% +- {n['ci_half']:.1f}")
print(sorted(p.name for p in (root / "runs" / "report").iterdir())[:6])

# %% [markdown]
# Running the same command again skips every completed run.

# %%
main(["sweep", "--spec", str(root / "spec.json"), "--out", str(root / "runs")])
