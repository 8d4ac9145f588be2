"""Desk-scale CNN, ViT and Swin segmentation models with NVFP4 GEMMs.

All three map an (N, 3, H, W) batch to (N, 1, H, W) logits. Layers listed in
``ModelConfig.exempt`` run at full precision; every other GEMM goes through a
:class:`~nvfp4qat.qatlayer.QuantLinear` with the model's recipe.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensorgrad as tg
from .qatlayer import RECIPES, QuantLinear, QuantLog, RecipeConfig

ARCHS = ("cnn", "vit", "swin")


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    tier: str = "s"
    depth: int = 2  # CNN stages or transformer blocks
    width: int = 32  # CNN base width or embed dim d
    heads: int = 1
    window: int = 4
    patch: int = 4
    mlp_ratio: int = 4
    widths: tuple = ()  # CNN per-stage channels
    image_size: int = 32
    in_channels: int = 3
    exempt: tuple = ()

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["exempt"] = list(self.exempt)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d.get("widths", ()))
        d["exempt"] = tuple(d.get("exempt", ()))
        return cls(**d)


# Tiers keep Table-2-like proportions at 32x32 input: transformers grow d and
# depth together, CNN grows stages and width. Counts are checked in the tests.
TIERS = {
    ("cnn", "s"): ModelConfig("cnn", "s", depth=3, widths=(16, 16, 32),
                              exempt=("enc1", "bottleneck", "head")),
    ("cnn", "m"): ModelConfig("cnn", "m", depth=4, widths=(16, 32, 32, 64),
                              exempt=("enc1", "bottleneck", "head")),
    ("cnn", "l"): ModelConfig("cnn", "l", depth=5, widths=(32, 32, 48, 80, 96),
                              exempt=("enc1", "bottleneck", "head")),
    ("vit", "s"): ModelConfig("vit", "s", depth=2, width=32, heads=1, exempt=("patch_embed", "head")),
    ("vit", "m"): ModelConfig("vit", "m", depth=4, width=48, heads=1, exempt=("patch_embed", "head")),
    ("vit", "l"): ModelConfig("vit", "l", depth=4, width=96, heads=3, exempt=("patch_embed", "head")),
    ("swin", "s"): ModelConfig("swin", "s", depth=2, width=32, heads=1, exempt=("patch_embed", "dec1", "dec2")),
    ("swin", "m"): ModelConfig("swin", "m", depth=4, width=48, heads=1, exempt=("patch_embed", "dec1", "dec2")),
    ("swin", "l"): ModelConfig("swin", "l", depth=4, width=96, heads=3, exempt=("patch_embed", "dec1", "dec2")),
    # smallest Swin with 16-dim heads: the low-SNR attention regime
    ("swin", "micro-fragile"): ModelConfig("swin", "micro-fragile", depth=2, width=32, heads=2,
                                           exempt=("patch_embed", "dec1", "dec2")),
}


def model_config(arch: str, tier: str = "s") -> ModelConfig:
    try:
        return TIERS[(arch, tier)]
    except KeyError:
        valid = sorted(f"{a}/{t}" for a, t in TIERS)
        raise ValueError(f"unknown model {arch}/{tier}; valid: {', '.join(valid)}") from None


def _trunc_normal(rng, shape, std=0.02):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(bad.sum())
        bad = np.abs(out) > 2
    return (out * std).astype(np.float32)


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


class SegModel:
    """Parameter registry plus a forward function."""

    def __init__(self, cfg: ModelConfig, recipe: RecipeConfig, seed: int = 0):
        self.cfg = cfg
        self.recipe = recipe
        self.params: dict[str, tg.Tensor] = {}
        self.bn: dict[str, tg.BatchNormState] = {}
        self.qlayers: dict[str, QuantLinear] = {}
        self.quant_log = QuantLog(enabled=False)
        self.capture_attention = False
        self.attention_maps: list = []
        self._init_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        self._quant_seq = np.random.SeedSequence([seed, 1])
        self.build()

    # -- registry helpers -------------------------------------------------
    def _param(self, name, value):
        self.params[name] = tg.Parameter(value, name=name)
        return self.params[name]

    def _qlayer(self, name):
        layer = QuantLinear(name, self.recipe, quantize=name not in self.cfg.exempt,
                            seed=self._quant_seq.spawn(1)[0], log=self.quant_log)
        self.qlayers[name] = layer
        return layer

    def add_linear(self, name, din, dout, init="trunc"):
        rng = self._init_rng
        w = _trunc_normal(rng, (din, dout)) if init == "trunc" else _kaiming_uniform(rng, (din, dout), din)
        self._param(f"{name}.w", w)
        self._param(f"{name}.b", np.zeros(dout, np.float32))
        self._qlayer(name)

    def add_conv(self, name, cin, cout, k, bias=True):
        self._param(f"{name}.w", _kaiming_uniform(self._init_rng, (cout, cin, k, k), cin * k * k))
        if bias:
            self._param(f"{name}.b", np.zeros(cout, np.float32))
        self._qlayer(name)

    def add_convT(self, name, cin, cout, k, bias=True):
        self._param(f"{name}.w", _kaiming_uniform(self._init_rng, (cin, cout, k, k), cin))
        if bias:
            self._param(f"{name}.b", np.zeros(cout, np.float32))
        self._qlayer(name)

    def add_norm(self, name, dim, batchnorm=False):
        self._param(f"{name}.g", np.ones(dim, np.float32))
        self._param(f"{name}.b", np.zeros(dim, np.float32))
        if batchnorm:
            self.bn[name] = tg.BatchNormState(dim)

    def linear(self, name, x):
        return tg.linear(x, self.params[f"{name}.w"], self.params.get(f"{name}.b"), self.qlayers[name])

    def conv(self, name, x, stride=1, padding=0):
        return tg.conv2d(x, self.params[f"{name}.w"], self.params.get(f"{name}.b"), stride, padding,
                         self.qlayers[name])

    def convT(self, name, x, stride=2):
        return tg.conv_transpose2d(x, self.params[f"{name}.w"], self.params.get(f"{name}.b"), stride, 0,
                                   self.qlayers[name])

    def layernorm(self, name, x):
        return tg.layernorm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def batchnorm(self, name, x, training):
        return tg.batchnorm2d(x, self.params[f"{name}.g"], self.params[f"{name}.b"], self.bn[name], training)

    # -- API --------------------------------------------------------------
    def build(self):
        raise NotImplementedError

    def forward(self, x, training: bool = False) -> tg.Tensor:
        raise NotImplementedError

    def __call__(self, x, training: bool = False) -> tg.Tensor:
        x = x if isinstance(x, tg.Tensor) else tg.Tensor(np.asarray(x, np.float32))
        n, c, h, w = x.shape
        if c != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {c}")
        self._check_spatial(h, w)
        self.attention_maps = []
        return self.forward(x, training)

    def _check_spatial(self, h, w):
        raise NotImplementedError

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        out = {k: p.data.copy() for k, p in self.params.items()}
        for k, st in self.bn.items():
            out[f"{k}.running_mean"] = st.running_mean.copy()
            out[f"{k}.running_var"] = st.running_var.copy()
        return out

    def load_state_dict(self, state: dict):
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=p.data.dtype).reshape(p.shape)
        for k, st in self.bn.items():
            st.running_mean = np.array(state[f"{k}.running_mean"], dtype=np.float32)
            st.running_var = np.array(state[f"{k}.running_var"], dtype=np.float32)

    def astype(self, dtype):
        """Cast parameters and buffers (float64 is used by the gradient checks)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        for st in self.bn.values():
            st.running_mean = st.running_mean.astype(dtype)
            st.running_var = st.running_var.astype(dtype)
        return self


class UNetCNN(SegModel):
    """Stride-2 conv/BN/ReLU encoder, transposed-conv decoder with concatenated skips.

    Convolutions feeding a BatchNorm carry no bias; the norm would cancel it.
    """

    def build(self):
        ws = self.cfg.widths
        if len(ws) != self.cfg.depth:
            raise ValueError("CNN widths must list one channel count per stage")
        if any(w % 16 for w in ws):
            raise ValueError(f"CNN channel widths must be multiples of 16, got {ws}")
        cin = self.cfg.in_channels
        for i, w in enumerate(ws, start=1):
            self.add_conv(f"enc{i}", cin, w, 3, bias=False)
            self.add_norm(f"enc{i}_bn", w, batchnorm=True)
            cin = w
        self.add_conv("bottleneck", ws[-1], ws[-1], 3, bias=False)
        self.add_norm("bottleneck_bn", ws[-1], batchnorm=True)
        cur = ws[-1]
        for i in range(len(ws), 1, -1):
            self.add_convT(f"up{i}", cur, ws[i - 2], 2, bias=False)
            self.add_norm(f"up{i}_bn", ws[i - 2], batchnorm=True)
            self.add_conv(f"fuse{i}", 2 * ws[i - 2], ws[i - 2], 3, bias=False)
            self.add_norm(f"fuse{i}_bn", ws[i - 2], batchnorm=True)
            cur = ws[i - 2]
        self.add_convT("up1", cur, ws[0], 2, bias=False)
        self.add_norm("up1_bn", ws[0], batchnorm=True)
        self.add_conv("head", ws[0], 1, 1)

    def _check_spatial(self, h, w):
        f = 2 ** self.cfg.depth
        if h % f or w % f:
            raise ValueError(f"CNN with {self.cfg.depth} stages needs H, W divisible by {f}, got {(h, w)}")

    def _cbr(self, name, x, training, stride=1, padding=1):
        return tg.relu(self.batchnorm(f"{name}_bn", self.conv(name, x, stride, padding), training))

    def forward(self, x, training=False):
        skips = []
        for i in range(1, self.cfg.depth + 1):
            x = self._cbr(f"enc{i}", x, training, stride=2)
            skips.append(x)
        x = self._cbr("bottleneck", x, training)
        for i in range(self.cfg.depth, 1, -1):
            x = tg.relu(self.batchnorm(f"up{i}_bn", self.convT(f"up{i}", x), training))
            x = tg.concat([x, skips[i - 2]], axis=1)
            x = self._cbr(f"fuse{i}", x, training)
        x = tg.relu(self.batchnorm("up1_bn", self.convT("up1", x), training))
        return self.conv("head", x)


class _Transformer(SegModel):
    def _grid(self):
        g = self.cfg.image_size // self.cfg.patch
        return g, g

    def _check_spatial(self, h, w):
        p = self.cfg.patch
        if h % p or w % p:
            raise ValueError(f"H, W must be divisible by patch size {p}, got {(h, w)}")
        if (h // p, w // p) != self._grid():
            raise ValueError(f"model built for {self.cfg.image_size}x{self.cfg.image_size} inputs, got {(h, w)}")

    def build_blocks(self):
        d = self.cfg.width
        if d % self.cfg.heads:
            raise ValueError(f"embed dim {d} not divisible by heads {self.cfg.heads}")
        hidden = d * self.cfg.mlp_ratio
        for i in range(self.cfg.depth):
            self.add_norm(f"blk{i}.ln1", d)
            self.add_linear(f"blk{i}.qkv", d, 3 * d)
            self.add_linear(f"blk{i}.proj", d, d)
            self.add_norm(f"blk{i}.ln2", d)
            self.add_linear(f"blk{i}.fc1", d, hidden)
            self.add_linear(f"blk{i}.fc2", hidden, d)
        self.add_norm("ln_f", d)

    def attention(self, i, x, mask=None):
        """x: (B, n, d) token groups; mask: (groups, n, n) additive or None."""
        b, n, d = x.shape
        h = self.cfg.heads
        dh = d // h
        qkv = self.linear(f"blk{i}.qkv", x)
        qkv = tg.transpose(tg.reshape(qkv, (b, n, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = (tg.getitem(qkv, j) for j in range(3))
        scores = tg.mul(tg.matmul(q, tg.transpose(k, (0, 1, 3, 2))), dh ** -0.5)
        if mask is not None:
            groups = mask.shape[0]
            scores = tg.reshape(scores, (b // groups, groups, h, n, n))
            scores = tg.add(scores, mask[None, :, None].astype(scores.dtype))
            scores = tg.reshape(scores, (b, h, n, n))
        attn = tg.softmax(scores, axis=-1)
        if self.capture_attention:
            self.attention_maps.append((f"blk{i}", attn.data.copy()))
        out = tg.matmul(attn, v)
        out = tg.reshape(tg.transpose(out, (0, 2, 1, 3)), (b, n, d))
        return self.linear(f"blk{i}.proj", out)

    def mlp(self, i, x):
        return self.linear(f"blk{i}.fc2", tg.gelu(self.linear(f"blk{i}.fc1", x)))

    def embed(self, x):
        p = self.cfg.patch
        tokens = self.linear("patch_embed", tg.patchify(x, p))
        return tg.add(tokens, self.params["pos"])


class ViT(_Transformer):
    def build(self):
        d, p = self.cfg.width, self.cfg.patch
        gh, gw = self._grid()
        self.add_linear("patch_embed", self.cfg.in_channels * p * p, d)
        self._param("pos", np.zeros((gh * gw, d), np.float32))
        self.build_blocks()
        self.add_linear("head", d, p * p)

    def forward(self, x, training=False):
        h = w = self.cfg.image_size
        t = self.embed(x)
        for i in range(self.cfg.depth):
            t = tg.add(t, self.attention(i, self.layernorm(f"blk{i}.ln1", t)))
            t = tg.add(t, self.mlp(i, self.layernorm(f"blk{i}.ln2", t)))
        t = self.layernorm("ln_f", t)
        pix = self.linear("head", t)  # (N, L, p*p)
        return tg.unpatchify(pix, self.cfg.patch, 1, h, w)


def shifted_window_mask(gh: int, gw: int, ws: int, shift: int) -> np.ndarray:
    """Additive (-100) mask keeping attention inside the regions a cyclic shift glued together."""
    region = np.zeros((gh, gw), dtype=np.int64)
    cuts = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
    r = 0
    for hs in cuts:
        for wsl in cuts:
            region[hs, wsl] = r
            r += 1
    win = region.reshape(gh // ws, ws, gw // ws, ws).transpose(0, 2, 1, 3).reshape(-1, ws * ws)
    diff = win[:, :, None] != win[:, None, :]
    return np.where(diff, -100.0, 0.0).astype(np.float32)


class Swin(_Transformer):
    """Single-stage Swin: alternating W-MSA / SW-MSA blocks, transposed-conv decoder."""

    def build(self):
        d, p, ws = self.cfg.width, self.cfg.patch, self.cfg.window
        gh, gw = self._grid()
        if p != 4:
            raise ValueError("Swin decoder assumes patch size 4")
        if gh % ws or gw % ws:
            raise ValueError(f"token grid {(gh, gw)} not divisible by window {ws}")
        self.add_linear("patch_embed", self.cfg.in_channels * p * p, d)
        self._param("pos", np.zeros((gh * gw, d), np.float32))
        self.build_blocks()
        self.add_convT("dec1", d, d // 2, 2)
        self.add_convT("dec2", d // 2, 1, 2)
        shift = ws // 2
        self._mask = shifted_window_mask(gh, gw, ws, shift) if gh > ws else None

    def forward(self, x, training=False):
        n = x.shape[0]
        d, ws = self.cfg.width, self.cfg.window
        gh, gw = self._grid()
        t = self.embed(x)
        for i in range(self.cfg.depth):
            shift = ws // 2 if (i % 2 == 1 and gh > ws) else 0
            y = tg.reshape(self.layernorm(f"blk{i}.ln1", t), (n, gh, gw, d))
            if shift:
                y = tg.window_shift(y, shift)
            y = tg.window_partition(y, ws)
            y = self.attention(i, y, self._mask if shift else None)
            y = tg.window_reverse(y, ws, gh, gw)
            if shift:
                y = tg.window_shift(y, -shift)
            t = tg.add(t, tg.reshape(y, (n, gh * gw, d)))
            t = tg.add(t, self.mlp(i, self.layernorm(f"blk{i}.ln2", t)))
        t = self.layernorm("ln_f", t)
        fmap = tg.transpose(tg.reshape(t, (n, gh, gw, d)), (0, 3, 1, 2))
        fmap = tg.gelu(self.convT("dec1", fmap))
        return self.convT("dec2", fmap)


_CLASSES = {"cnn": UNetCNN, "vit": ViT, "swin": Swin}


def build_model(cfg: ModelConfig, recipe: RecipeConfig | str = "baseline-bf16", seed: int = 0) -> SegModel:
    """Construct a model; initial weights depend only on (cfg, seed), never on the recipe."""
    if isinstance(recipe, str):
        recipe = RECIPES[recipe]
    try:
        cls = _CLASSES[cfg.arch]
    except KeyError:
        raise ValueError(f"unknown arch {cfg.arch!r}; expected one of {ARCHS}") from None
    return cls(cfg, recipe, seed)


def attention_stats(model: SegModel, batch) -> list[dict]:
    """Per-block entropy (nats), mean max weight, and near-binary row fraction."""
    if not isinstance(model, _Transformer):
        raise ValueError("attention_stats needs a ViT or Swin model")
    model.capture_attention = True
    try:
        model(batch, training=False)
        maps = model.attention_maps
    finally:
        model.capture_attention = False
        model.attention_maps = []
    return [attention_row_stats(a, name) for name, a in maps]


def attention_row_stats(attn: np.ndarray, name: str = "") -> dict:
    p = np.asarray(attn, dtype=np.float64).reshape(-1, attn.shape[-1])
    ent = -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)
    mx = p.max(axis=1)
    return {"layer": name, "entropy": float(ent.mean()), "max_weight": float(mx.mean()),
            "near_binary_fraction": float(np.mean(mx > 0.99))}
