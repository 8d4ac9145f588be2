"""Gradient-check cases shared by the unit and acceptance suites."""

import numpy as np

from nvfp4qat import tensorgrad as tg
from nvfp4qat.modelzoo import build_model, model_config
from nvfp4qat.trainlab import loss as seg_loss

RNG = np.random.default_rng(1234)


def _r(*shape, scale=1.0):
    return (RNG.standard_normal(shape) * scale).astype(np.float32)


def _weighted(t, w):
    return tg.sum_all(t * tg.Tensor(w.astype(t.dtype)))


W43 = _r(4, 3)
W_SM = _r(3, 5)
W_CONV = _r(2, 4, 6, 6)
W_CT = _r(2, 3, 8, 8)
W_PATCH = _r(2, 4, 48)
W_UNP = _r(2, 3, 8, 8)
W_WIN = _r(8, 4, 3)
W_BN = _r(2, 3, 4, 4)
W_LN = _r(4, 6)
W_IM = _r(18, 27)
W_BMM = _r(2, 3, 5)
W_WREV = _r(2, 4, 4, 3)
Y_MASK = (RNG.uniform(size=(2, 1, 4, 4)) < 0.3).astype(np.float32)
BN_STATE = tg.BatchNormState(3, dtype=np.float64)

OP_CASES = {
    "add_broadcast": (lambda a, b: _weighted(a + b, W43), [_r(4, 3), _r(3)]),
    "mul": (lambda a, b: _weighted(a * b, W43), [_r(4, 3), _r(4, 3)]),
    "sub_neg": (lambda a, b: _weighted(a - (-b), W43), [_r(4, 3), _r(4, 3)]),
    "relu": (lambda a: _weighted(tg.relu(a), W43), [_r(4, 3) + np.sign(_r(4, 3)) * 0.1]),
    "gelu": (lambda a: _weighted(tg.gelu(a), W43), [_r(4, 3)]),
    "sigmoid": (lambda a: _weighted(tg.sigmoid(a), W43), [_r(4, 3)]),
    "softmax": (lambda a: _weighted(tg.softmax(a, -1), W_SM), [_r(3, 5)]),
    "mean_all": (lambda a: tg.mean_all(a * a), [_r(4, 3)]),
    "reshape_transpose": (lambda a: _weighted(tg.transpose(tg.reshape(a, (3, 4)), (1, 0)), W43), [_r(2, 6)]),
    "roll": (lambda a: _weighted(tg.roll(a, (1,), (0,)), W43), [_r(4, 3)]),
    "concat": (lambda a, b: _weighted(tg.concat([a, b], axis=0), W43), [_r(1, 3), _r(3, 3)]),
    "getitem": (lambda a: _weighted(tg.getitem(a, (slice(None), slice(0, 3))), W43), [_r(4, 5)]),
    "matmul": (lambda a, b: _weighted(tg.matmul(a, b), W43), [_r(4, 5), _r(5, 3)]),
    "matmul_batched": (lambda a, b: _weighted(tg.matmul(a, b), W_BMM), [_r(2, 3, 4), _r(2, 4, 5)]),
    "linear_bias": (lambda x, w, b: _weighted(tg.linear(x, w, b), W43), [_r(4, 6), _r(6, 3), _r(3)]),
    "im2col": (lambda x: _weighted(tg.im2col(x, 3, 1, 1), W_IM), [_r(2, 3, 3, 3)]),
    "conv2d": (lambda x, w, b: _weighted(tg.conv2d(x, w, b, stride=2, padding=1), W_CONV),
               [_r(2, 3, 12, 12), _r(4, 3, 3, 3, scale=0.3), _r(4)]),
    "conv_transpose2d": (lambda x, w, b: _weighted(tg.conv_transpose2d(x, w, b, stride=2), W_CT),
                         [_r(2, 4, 4, 4), _r(4, 3, 2, 2, scale=0.3), _r(3)]),
    "patchify": (lambda x: _weighted(tg.patchify(x, 4), W_PATCH), [_r(2, 3, 8, 8)]),
    "unpatchify": (lambda x: _weighted(tg.unpatchify(x, 4, 3, 8, 8), W_UNP), [_r(2, 4, 48)]),
    "window_shift_partition": (
        lambda x: _weighted(tg.window_partition(tg.window_shift(x, 1), 2), W_WIN), [_r(2, 4, 4, 3)]),
    "window_reverse": (lambda x: _weighted(tg.window_reverse(x, 2, 4, 4), W_WREV), [_r(8, 4, 3)]),
    "layernorm": (lambda x, g, b: _weighted(tg.layernorm(x, g, b), W_LN), [_r(4, 6), _r(6), _r(6)]),
    "batchnorm2d_train": (lambda x, g, b: _weighted(tg.batchnorm2d(x, g, b, BN_STATE, True), W_BN),
                          [_r(2, 3, 4, 4), _r(3), _r(3)]),
    "batchnorm2d_eval": (lambda x, g, b: _weighted(tg.batchnorm2d(x, g, b, BN_STATE, False), W_BN),
                         [_r(2, 3, 4, 4), _r(3), _r(3)]),
    "bce_tversky_loss": (lambda z: seg_loss(z, Y_MASK.astype(z.dtype)), [_r(2, 1, 4, 4)]),
}


def model_gradcheck(arch: str, tier: str = "s", seed: int = 0, batch: int = 2, max_coords: int = 24) -> float:
    """Worst relative error over the input and every parameter of a baseline micro-model.

    Parameters are swapped for the check's leaf tensors, so the same forward
    runs with FP32 leaves (analytic gradient) and float64 leaves (finite differences).
    """
    cfg = model_config(arch, tier)
    model = build_model(cfg, "baseline-bf16", seed)
    model.astype(np.float64)
    names = sorted(model.params)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, 3, cfg.image_size, cfg.image_size)).astype(np.float32)
    y = (rng.uniform(size=(batch, 1, cfg.image_size, cfg.image_size)) < 0.2).astype(np.float32)
    originals = dict(model.params)

    def fn(xt, *ps):
        for k, p in zip(names, ps):
            model.params[k] = p
        try:
            z = model(xt, training=True)
            return seg_loss(z, y.astype(z.dtype))
        finally:
            model.params.update(originals)

    arrays = [x] + [originals[k].data.astype(np.float32) for k in names]
    # a small step keeps ReLU pre-activations from crossing zero; float64 differences stay accurate
    return tg.gradcheck(fn, arrays, eps=1e-6, max_coords=max_coords, directions=3, seed=seed)
