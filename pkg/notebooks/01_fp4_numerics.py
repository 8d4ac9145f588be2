# %% [markdown]
# # FP4 numerics by hand
#
# Walk through the E2M1 grid, block scaling, and why square 16x16 tiles
# keep weight quantization consistent between a matrix and its transpose.

# %%
import numpy as np

from nvfp4qat.fp4core import (
    BlockGeometry, E2M1_GRID, RoundingMode, decode_e4m3, fake_quantize, quantization_stats, quantize,
)
from nvfp4qat.rht import RhtTransform, apply_rht

rng = np.random.default_rng(0)
print("E2M1 magnitudes:", E2M1_GRID)

# %% [markdown]
# Every 16 consecutive values share one E4M3 block scale, and the whole
# tensor shares a power-of-two FP32 scale on top.

# %%
x = rng.normal(size=(4, 32)).astype(np.float32)
q = quantize(x)
print("tensor scale", q.tensor_scale)
print("block scales", decode_e4m3(q.block_scales).ravel())
err = fake_quantize(x) - x
print("rmse %.4f  max abs %.4f" % (np.sqrt(np.mean(err ** 2)), np.abs(err).max()))

# %% [markdown]
# Nearest rounding is biased on a fixed input; stochastic rounding is not.

# %%
v = np.full((1, 16), 1.0)
v[0, 0] = 6.0  # pin the block max
v[0, 1] = 1.2
draws = [fake_quantize(v, mode=RoundingMode.sr(s))[0, 1] for s in range(4000)]
print("nearest:", fake_quantize(v)[0, 1], " SR mean:", np.mean(draws))

# %% [markdown]
# Transpose behaviour: 1x16 rows quantize W and W.T along different axes,
# so the two copies disagree. 16x16 tiles see the same 256 values either way.

# %%
w = rng.normal(size=(32, 48))
w[3, 40] = 9.0
rows = fake_quantize(w.T).T
rows_t = fake_quantize(w)
tiles = fake_quantize(w, BlockGeometry.SQUARE_16x16)
tiles_t = fake_quantize(w.T, BlockGeometry.SQUARE_16x16).T
print("1x16 mismatches :", int(np.sum(rows != rows_t)))
print("16x16 mismatches:", int(np.sum(tiles != tiles_t)))

# %% [markdown]
# A single outlier pushes every other block scale below the E4M3 normal
# range. A random Hadamard rotation spreads the outlier over its block first.

# %%
a = rng.normal(size=(32, 64)) * 0.5
a[5, 7] = 40.0
t = RhtTransform.random(16, rng)
for name, data in (("plain", a), ("rotated", apply_rht(a, t, axis=1))):
    s = quantization_stats(data, quantize(data))
    print(f"{name:8s} saturated blocks {s['saturation_fraction']:.3f}")
