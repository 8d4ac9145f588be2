"""Recipe-configurable NVFP4 linear layer for quantization-aware training.

For ``Y = X @ W`` with ``X: (M, K)`` and ``W: (K, N)`` the three GEMMs are::

    FPROP  Y  = Q(X) @ Q(W)
    DGRAD  dX = Q_g(G) @ Q(W).T
    WGRAD  dW = Q(rht(X.T)) @ Q_g(rht(G.T)).T

Every FP4 operand is quantized with its 16-element blocks laid along the
GEMM's contracted axis. ``Q_g`` uses stochastic rounding when the recipe asks
for it. Quantizers are straight-through: the backward GEMMs above *are* the
gradients, with no extra Jacobian for the rounding.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensorgrad as tg
from .fp4core import NEAREST, BlockGeometry, RoundingMode, fake_quantize
from .rht import DEFAULT_RHT_SIZE, RhtTransform, apply_rht

ROWS = BlockGeometry.ROWS_1x16
SQUARE = BlockGeometry.SQUARE_16x16

FPROP, DGRAD, WGRAD = "FPROP", "DGRAD", "WGRAD"
FP4, HIGH = "FP4", "HIGH"


@dataclass(frozen=True)
class RecipeConfig:
    name: str
    quantize: bool = True
    two_d: bool = False
    rht: bool = False
    sr: bool = False
    fwd_only: bool = False
    chain_rule: bool = False
    literal_scaling: bool = False

    @property
    def bwd_operands(self) -> str:
        """Precision of W/X in the backward GEMMs (the "Bwd W/X" column)."""
        if not self.quantize:
            return "-"
        return HIGH if self.fwd_only else FP4

    @property
    def upstream_gradient(self) -> str:
        if not self.quantize:
            return "-"
        return HIGH if (self.fwd_only or self.chain_rule) else FP4

    def to_dict(self) -> dict:
        return asdict(self)


RECIPES = {
    "baseline-bf16": RecipeConfig("baseline-bf16", quantize=False),
    "nvfp4-full": RecipeConfig("nvfp4-full"),
    "fwd-only": RecipeConfig("fwd-only", fwd_only=True),
    "fwd-rht": RecipeConfig("fwd-rht", rht=True, fwd_only=True),
    "chain-rule": RecipeConfig("chain-rule", chain_rule=True),
    "sr-only": RecipeConfig("sr-only", sr=True),
    "2d-rht": RecipeConfig("2d-rht", two_d=True, rht=True),
    "2d-rht-sr": RecipeConfig("2d-rht-sr", two_d=True, rht=True, sr=True),
}


def recipe_from_name(name: str, literal_scaling: bool = False) -> RecipeConfig:
    try:
        recipe = RECIPES[name]
    except KeyError:
        raise ValueError(f"unknown recipe {name!r}; valid names: {', '.join(RECIPES)}") from None
    return replace(recipe, literal_scaling=True) if literal_scaling else recipe


# --------------------------------------------------------------------------
# instrumentation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantEvent:
    layer: str
    pass_: str
    role: str  # X, W or G
    precision: str  # FP4 or HIGH
    geometry: str | None = None
    rounding: str | None = None
    rht: bool = False
    reused: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("pass_")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QuantEvent":
        d = dict(d)
        d["pass_"] = d.pop("pass")
        return cls(**d)


class QuantLog:
    """Collects QuantEvents while ``enabled``."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.events: list[QuantEvent] = []

    def add(self, event: QuantEvent) -> None:
        if self.enabled:
            self.events.append(event)

    def clear(self) -> None:
        self.events.clear()

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.events)

    @staticmethod
    def from_jsonl(text: str) -> list[QuantEvent]:
        return [QuantEvent.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]

    def summary(self) -> dict:
        counts: dict = {}
        for e in self.events:
            key = f"{e.pass_}/{e.role}/{e.precision}"
            counts[key] = counts.get(key, 0) + 1
        return dict(sorted(counts.items()))


# --------------------------------------------------------------------------
# functional kernels
# --------------------------------------------------------------------------


def _pad_axis(a: np.ndarray, axis: int, multiple: int) -> np.ndarray:
    n = a.shape[axis]
    extra = (-n) % multiple
    if not extra:
        return a
    widths = [(0, 0)] * a.ndim
    widths[axis] = (0, extra)
    return np.pad(a, widths)


def _fp4_qdq(a, geometry, mode, literal):
    return fake_quantize(a, geometry, mode, literal)


@dataclass
class LinearContext:
    """What the forward pass leaves for backward."""

    recipe: RecipeConfig
    x: np.ndarray
    w: np.ndarray
    x_hat: np.ndarray | None = None
    w_hat: np.ndarray | None = None
    layer: str = "linear"
    sr_rng: np.random.Generator | None = None
    rht_rng: np.random.Generator | None = None
    log: QuantLog | None = None
    qdq: object = None
    rht_size: int = DEFAULT_RHT_SIZE
    backward_operands: dict = field(default_factory=dict)
    consumed: bool = False

    def emit(self, pass_, role, precision, geometry=None, rounding=None, rht=False, reused=False):
        if self.log is not None:
            self.log.add(QuantEvent(self.layer, pass_, role, precision,
                                    geometry.value if geometry is not None else None,
                                    rounding, rht, reused))


def _quantizer(ctx: LinearContext):
    qdq = ctx.qdq or _fp4_qdq
    lit = ctx.recipe.literal_scaling
    return lambda a, geometry=ROWS, mode=NEAREST: qdq(a, geometry, mode, lit)


def _grad_mode(ctx: LinearContext) -> RoundingMode:
    if ctx.recipe.sr:
        if ctx.sr_rng is None:
            raise ValueError(f"{ctx.layer}: stochastic rounding needs an rng stream")
        return RoundingMode(True, ctx.sr_rng)
    return NEAREST


def _rht_transform(ctx: LinearContext) -> RhtTransform:
    if ctx.rht_rng is None:
        raise ValueError(f"{ctx.layer}: RHT needs an rng stream")
    return RhtTransform.random(ctx.rht_size, ctx.rht_rng)


def qlinear_forward(X, W, recipe: RecipeConfig, *, layer: str = "linear", sr_rng=None, rht_rng=None,
                    log: QuantLog | None = None, qdq=None, rht_size: int = DEFAULT_RHT_SIZE):
    """FPROP of a quantized linear layer. Returns ``(Y, ctx)``."""
    X = np.asarray(X)
    W = np.asarray(W)
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[0]:
        raise ValueError(f"qlinear: shape mismatch {X.shape} @ {W.shape}")
    ctx = LinearContext(recipe, X, W, layer=layer, sr_rng=sr_rng, rht_rng=rht_rng, log=log, qdq=qdq,
                        rht_size=rht_size)
    if not recipe.quantize:
        return X @ W, ctx
    q = _quantizer(ctx)
    if recipe.rht and recipe.fwd_only:
        # rotate the shared K axis of both operands so the product is preserved
        t = _rht_transform(ctx)
        Xr = apply_rht(_pad_axis(X, 1, t.size), t, axis=1)
        Wr = apply_rht(_pad_axis(W, 0, t.size), t, axis=0)
        x_hat = q(Xr)
        w_hat = q(Wr.T).T
        ctx.emit(FPROP, "X", FP4, ROWS, "nearest", rht=True)
        ctx.emit(FPROP, "W", FP4, ROWS, "nearest", rht=True)
        return (x_hat @ w_hat).astype(X.dtype), ctx
    x_hat = q(X)
    w_hat = q(W, SQUARE) if recipe.two_d else q(W.T).T
    ctx.emit(FPROP, "X", FP4, ROWS, "nearest")
    ctx.emit(FPROP, "W", FP4, SQUARE if recipe.two_d else ROWS, "nearest")
    if recipe.chain_rule:
        ctx.x_hat = x_hat
    if recipe.chain_rule or recipe.two_d:
        ctx.w_hat = w_hat
    return (x_hat @ w_hat).astype(X.dtype), ctx


def dgrad(ctx: LinearContext, G: np.ndarray) -> np.ndarray:
    r = ctx.recipe
    if not r.quantize:
        return G @ ctx.w.T
    if r.fwd_only:
        ctx.emit(DGRAD, "G", HIGH)
        ctx.emit(DGRAD, "W", HIGH)
        ctx.backward_operands.update(dgrad_g=G, dgrad_w=ctx.w)
        return G @ ctx.w.T
    if r.chain_rule:
        ctx.emit(DGRAD, "G", HIGH)
        ctx.emit(DGRAD, "W", FP4, SQUARE if r.two_d else ROWS, "nearest", reused=True)
        ctx.backward_operands.update(dgrad_g=G, dgrad_w=ctx.w_hat)
        return G @ ctx.w_hat.T
    q = _quantizer(ctx)
    mode = _grad_mode(ctx)
    g_hat = q(G, ROWS, mode)
    ctx.emit(DGRAD, "G", FP4, ROWS, mode.name)
    if r.two_d:
        w_hat = ctx.w_hat
        ctx.emit(DGRAD, "W", FP4, SQUARE, "nearest", reused=True)
    else:
        w_hat = q(ctx.w)  # (K, N): fresh 1x16 blocks along N
        ctx.emit(DGRAD, "W", FP4, ROWS, "nearest")
    ctx.backward_operands.update(dgrad_g=g_hat, dgrad_w=w_hat)
    return g_hat @ w_hat.T


def wgrad(ctx: LinearContext, G: np.ndarray) -> np.ndarray:
    r = ctx.recipe
    X = ctx.x
    if not r.quantize:
        return X.T @ G
    if r.fwd_only:
        ctx.emit(WGRAD, "X", HIGH)
        ctx.emit(WGRAD, "G", HIGH)
        ctx.backward_operands.update(wgrad_x=X, wgrad_g=G)
        return X.T @ G
    if r.chain_rule:
        ctx.emit(WGRAD, "X", FP4, ROWS, "nearest", reused=True)
        ctx.emit(WGRAD, "G", HIGH)
        ctx.backward_operands.update(wgrad_x=ctx.x_hat, wgrad_g=G)
        return ctx.x_hat.T @ G
    q = _quantizer(ctx)
    mode = _grad_mode(ctx)
    xt = _pad_axis(X.T, 1, ctx.rht_size)  # (K, M), contracted axis last
    gt = _pad_axis(G.T, 1, ctx.rht_size)  # (N, M)
    if r.rht:
        t = _rht_transform(ctx)
        xt = apply_rht(xt, t, axis=1)
        gt = apply_rht(gt, t, axis=1)
    x_hat = q(xt)
    g_hat = q(gt, ROWS, mode)
    ctx.emit(WGRAD, "X", FP4, ROWS, "nearest", rht=r.rht)
    ctx.emit(WGRAD, "G", FP4, ROWS, mode.name, rht=r.rht)
    ctx.backward_operands.update(wgrad_x=x_hat, wgrad_g=g_hat)
    return x_hat @ g_hat.T


def qlinear_backward(ctx: LinearContext | None, G, recipe: RecipeConfig | None = None):
    """DGRAD and WGRAD for a saved forward context. Returns ``(dX, dW)``."""
    if ctx is None:
        raise RuntimeError("qlinear backward called before forward")
    if recipe is not None and recipe != ctx.recipe:
        raise ValueError("backward recipe differs from the forward recipe")
    G = np.asarray(G)
    if G.shape != (ctx.x.shape[0], ctx.w.shape[1]):
        raise ValueError(f"qlinear backward: gradient shape {G.shape} != output shape "
                         f"{(ctx.x.shape[0], ctx.w.shape[1])}")
    dx = dgrad(ctx, G).astype(ctx.x.dtype)
    dw = wgrad(ctx, G).astype(ctx.w.dtype)
    ctx.consumed = True
    return dx, dw


# --------------------------------------------------------------------------
# autodiff-facing layer
# --------------------------------------------------------------------------


class QuantLinear:
    """Per-layer quantization state: recipe, RNG streams, event log.

    ``quantize=False`` marks a layer kept at full precision regardless of recipe.
    """

    def __init__(self, name: str, recipe: RecipeConfig, quantize: bool = True, seed=None,
                 log: QuantLog | None = None, rht_size: int = DEFAULT_RHT_SIZE, qdq=None):
        self.name = name
        self.recipe = recipe
        self.quantize = quantize
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        sr_ss, rht_ss = ss.spawn(2)
        self.sr_rng = np.random.default_rng(sr_ss)
        self.rht_rng = np.random.default_rng(rht_ss)
        self.log = log
        self.rht_size = rht_size
        self.qdq = qdq
        self.last_ctx: LinearContext | None = None

    @property
    def active(self) -> bool:
        return self.quantize and self.recipe.quantize

    def __call__(self, x: tg.Tensor, w: tg.Tensor) -> tg.Tensor:
        if not self.active:
            return tg.matmul(x, w)
        y, ctx = qlinear_forward(x.data, w.data, self.recipe, layer=self.name, sr_rng=self.sr_rng,
                                 rht_rng=self.rht_rng, log=self.log, qdq=self.qdq, rht_size=self.rht_size)
        self.last_ctx = ctx
        return tg.record_op(y, (x, w), lambda g: qlinear_backward(ctx, g), "qlinear")


# --------------------------------------------------------------------------
# conformance
# --------------------------------------------------------------------------


def expected_footprint(recipe: RecipeConfig) -> dict:
    """(pass, role) -> expected event attributes for one quantized layer, or {} for baseline."""
    if not recipe.quantize:
        return {}
    fwd_rht = recipe.rht and recipe.fwd_only
    w_geom = SQUARE.value if recipe.two_d else ROWS.value
    fp = {
        (FPROP, "X"): dict(precision=FP4, geometry=ROWS.value, rounding="nearest", rht=fwd_rht),
        (FPROP, "W"): dict(precision=FP4, geometry=ROWS.value if fwd_rht else w_geom, rounding="nearest",
                           rht=fwd_rht),
    }
    if recipe.fwd_only:
        for key in ((DGRAD, "G"), (DGRAD, "W"), (WGRAD, "X"), (WGRAD, "G")):
            fp[key] = dict(precision=HIGH)
        return fp
    grad_round = "stochastic" if recipe.sr else "nearest"
    if recipe.chain_rule:
        fp[(DGRAD, "G")] = dict(precision=HIGH)
        fp[(DGRAD, "W")] = dict(precision=FP4, geometry=w_geom, reused=True)
        fp[(WGRAD, "X")] = dict(precision=FP4, geometry=ROWS.value, reused=True)
        fp[(WGRAD, "G")] = dict(precision=HIGH)
        return fp
    fp[(DGRAD, "G")] = dict(precision=FP4, geometry=ROWS.value, rounding=grad_round)
    fp[(DGRAD, "W")] = dict(precision=FP4, geometry=w_geom, reused=recipe.two_d)
    fp[(WGRAD, "X")] = dict(precision=FP4, geometry=ROWS.value, rounding="nearest", rht=recipe.rht)
    fp[(WGRAD, "G")] = dict(precision=FP4, geometry=ROWS.value, rounding=grad_round, rht=recipe.rht)
    return fp


@dataclass
class ConformanceReport:
    recipe: str
    passed: bool
    failures: list
    layers: int

    def to_dict(self) -> dict:
        return asdict(self)


def conformance_check(recipe: RecipeConfig, events, exempt=()) -> ConformanceReport:
    """Compare one step's event log with the recipe's expected per-layer footprint."""
    events = list(events)
    failures = []
    expected = expected_footprint(recipe)
    by_layer: dict = {}
    for e in events:
        if e.layer in exempt:
            failures.append(f"{e.layer}: exempt layer produced {e.pass_}/{e.role}")
        by_layer.setdefault(e.layer, []).append(e)
    if not expected:
        if events:
            failures.append(f"{recipe.name}: expected no quantization events, got {len(events)}")
        return ConformanceReport(recipe.name, not failures, failures, len(by_layer))
    if not by_layer:
        failures.append(f"{recipe.name}: no quantized layer produced events")
    for layer, evs in by_layer.items():
        seen: dict = {}
        for e in evs:
            key = (e.pass_, e.role)
            if key in seen:
                failures.append(f"{layer}: duplicate event {key}")
            seen[key] = e
        for key, attrs in expected.items():
            e = seen.get(key)
            if e is None:
                failures.append(f"{layer}: missing {key[0]}/{key[1]} event")
                continue
            for attr, want in attrs.items():
                got = getattr(e, attr)
                if got != want:
                    failures.append(f"{layer}: {key[0]}/{key[1]} {attr}={got!r}, expected {want!r}")
        for key in seen.keys() - expected.keys():
            failures.append(f"{layer}: unexpected event {key}")
    return ConformanceReport(recipe.name, not failures, failures, len(by_layer))


def probe_step(recipe: RecipeConfig, seed: int = 0, widths=(32, 48, 16), batch: int = 16) -> list[QuantEvent]:
    """One training step of a small two-layer GELU network; returns the logged events."""
    rng = np.random.default_rng(seed)
    log = QuantLog()
    ss = np.random.SeedSequence(seed)
    layers = [QuantLinear(f"fc{i}", recipe, seed=s, log=log) for i, s in enumerate(ss.spawn(len(widths) - 1))]
    weights = [tg.Parameter(rng.standard_normal((a, b)).astype(np.float32) / np.sqrt(a), name=f"fc{i}")
               for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
    x = tg.Tensor(rng.standard_normal((batch, widths[0])).astype(np.float32))
    with tg.Tape() as tape:
        h = x
        for i, (layer, w) in enumerate(zip(layers, weights)):
            h = layer(h, w)
            if i < len(layers) - 1:
                h = tg.gelu(h)
        out = tg.mean_all(h * h)
    tape.backward(out)
    return list(log.events)
