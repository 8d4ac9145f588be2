"""Loss, optimizers, LR schedule, early stopping, metrics and the seeded training loop."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import tensorgrad as tg
from .modelzoo import ModelConfig, attention_stats, build_model
from .qatlayer import RecipeConfig, conformance_check, recipe_from_name
from .segdata import SplitArrays, apply_augment, normalize, sample_augment_params

__all__ = [
    "LossConfig", "loss", "loss_value", "tversky_term", "auprc", "prc_curve", "auprc_per_image",
    "pred_histogram", "spikiness", "OptimizerPreset", "OPTIMIZERS", "Optimizer", "PlateauScheduler",
    "EarlyStopping", "TrainConfig", "RunRecord", "train_run", "normalize_to_baseline", "aggregate",
    "LOGIT_CLAMP",
]

LOGIT_CLAMP = 20.0


# -- loss ------------------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.3  # false-positive weight
    beta: float = 0.7  # false-negative weight
    eps: float = 1e-6

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("Tversky weights must be positive")


def _soft_counts(p, y):
    tp = float(np.sum(p * y))
    fp = float(np.sum(p * (1 - y)))
    fn = float(np.sum((1 - p) * y))
    return tp, fp, fn


def tversky_term(p, y, cfg: LossConfig = LossConfig()) -> float:
    """``1 - TP/(TP + a*FP + b*FN)`` on probabilities; the denominator is floored at eps."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    tp, fp, fn = _soft_counts(p, y)
    return 1.0 - tp / max(tp + cfg.alpha * fp + cfg.beta * fn, cfg.eps)


def _loss_and_grad(z, y, cfg):
    z = z.astype(np.float64)
    y = y.astype(np.float64)
    n = z.size
    p = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
    bce = float(np.mean(np.logaddexp(0.0, z) - y * z))
    tp, fp, fn = _soft_counts(p, y)
    d = tp + cfg.alpha * fp + cfg.beta * fn
    if d > cfg.eps:
        dd = y + cfg.alpha * (1 - y) - cfg.beta * y
        dt_dp = (y * d - tp * dd) / (d * d)
        tv = 1.0 - tp / d
    else:
        dt_dp = y / cfg.eps
        tv = 1.0 - tp / cfg.eps
    grad = (p - y) / n - dt_dp * p * (1 - p)
    return bce + tv, grad


def loss(z: tg.Tensor, y, cfg: LossConfig = LossConfig()) -> tg.Tensor:
    """Fused BCE-with-logits plus Tversky term, soft counts pooled over the whole batch."""
    y = np.asarray(y.data if isinstance(y, tg.Tensor) else y)
    if y.shape != z.shape:
        raise ValueError(f"logits {z.shape} and targets {y.shape} differ in shape")
    value, grad = _loss_and_grad(z.data, y, cfg)
    dtype = z.data.dtype
    return tg.record_op(np.asarray(value, dtype=dtype), (z,),
                        lambda g: (np.asarray(g * grad, dtype=dtype),), op="bce_tversky")


def loss_value(z, y, cfg: LossConfig = LossConfig()) -> float:
    return _loss_and_grad(np.asarray(z), np.asarray(y), cfg)[0]


# -- metrics ---------------------------------------------------------------

def _pr_steps(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("AUPRC undefined: labels contain a single class")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores = one threshold
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return tp / n_pos, tp / (tp + fp), s[last]


def auprc(scores, labels) -> float:
    """Step-wise average precision: sum of (R_k - R_{k-1}) * P_k over descending thresholds."""
    recall, precision, _ = _pr_steps(scores, labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def prc_curve(scores, labels, max_points: int | None = None) -> list[tuple[float, float]]:
    """(recall, precision) at every distinct threshold, highest threshold first.

    ``max_points`` thins the curve by keeping evenly spaced thresholds plus the last one.
    """
    recall, precision, _ = _pr_steps(scores, labels)
    idx = np.arange(recall.size)
    if max_points is not None and recall.size > max_points:
        idx = np.unique(np.r_[np.linspace(0, recall.size - 1, max_points).round().astype(int)])
    return [(float(recall[i]), float(precision[i])) for i in idx]


def auprc_per_image(probs, masks) -> float:
    """Mean AUPRC over images that contain both classes; nan when none do."""
    vals = []
    for p, m in zip(probs, masks):
        pos = m.sum()
        if 0 < pos < m.size:
            vals.append(auprc(p, m))
    return float(np.mean(vals)) if vals else float("nan")


def pred_histogram(probs, bins: int = 101) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64).ravel()
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return np.histogram(p, bins=bins, range=(0.0, 1.0))[0]


def spikiness(hist, top: int = 5) -> float:
    """Share of the mass held by the ``top`` heaviest bins."""
    h = np.asarray(hist, dtype=np.float64)
    total = h.sum()
    if total == 0:
        return 0.0
    return float(np.sort(h)[::-1][:top].sum() / total)


# -- optimizers ------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerPreset:
    name: str
    lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


OPTIMIZERS = {
    "adamax": OptimizerPreset("adamax", 5e-4, 0.0),
    "adamw": OptimizerPreset("adamw", 1e-4, 1e-4),
}
ARCH_OPTIMIZER = {"cnn": "adamax", "vit": "adamw", "swin": "adamw"}


class Optimizer:
    """Adamax (infinity-norm second moment) or AdamW (decoupled weight decay)."""

    def __init__(self, params: dict, preset: OptimizerPreset | str):
        self.preset = OPTIMIZERS[preset] if isinstance(preset, str) else preset
        if self.preset.name not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.preset.name}")
        self.params = params
        self.lr = self.preset.lr
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        pr = self.preset
        self.t += 1
        b1, b2 = pr.beta1, pr.beta2
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            if pr.name == "adamw":
                if pr.weight_decay:
                    p.data *= 1 - self.lr * pr.weight_decay
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                mhat = m / (1 - b1 ** self.t)
                vhat = v / (1 - b2 ** self.t)
                p.data -= (self.lr * mhat / (np.sqrt(vhat) + pr.eps)).astype(p.data.dtype)
            else:
                if pr.weight_decay:
                    g = g + pr.weight_decay * p.data
                m *= b1
                m += (1 - b1) * g
                np.maximum(v * b2, np.abs(g), out=v)
                p.data -= (self.lr / (1 - b1 ** self.t) * m / (v + pr.eps)).astype(p.data.dtype)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "t": self.t}


# -- protocol state machines -----------------------------------------------

@dataclass
class PlateauScheduler:
    """Multiply the LR by ``factor`` once ``patience`` consecutive epochs fail to improve."""
    factor: float = 0.5
    patience: int = 10
    best: float = float("inf")
    bad: int = 0

    def step(self, value: float, opt: Optimizer | None = None) -> bool:
        if value < self.best:
            self.best = value
            self.bad = 0
            return False
        self.bad += 1
        if self.bad >= self.patience:
            self.bad = 0
            if opt is not None:
                opt.lr *= self.factor
            return True
        return False


@dataclass
class EarlyStopping:
    """Stop after ``patience`` non-improving epochs, never at or before epoch ``warmup`` (1-indexed)."""
    patience: int = 20
    warmup: int = 40
    best: float = float("inf")
    best_epoch: int = 0
    bad: int = 0

    def step(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.bad = value, epoch, 0
        else:
            self.bad += 1
        return epoch > self.warmup and self.bad >= self.patience


# -- training --------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    optimizer: str | None = None  # None picks the architecture default
    lr: float | None = None
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    early_patience: int = 20
    warmup: int = 40
    augment: bool = True
    eval_batch: int = 64
    prc_points: int = 400
    loss: LossConfig = LossConfig()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("loss"), dict):
            d["loss"] = LossConfig(**d["loss"])
        return cls(**d)


@dataclass
class RunRecord:
    config: dict
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    best_val_loss: float = float("inf")
    test_auprc: float = float("nan")
    test_auprc_per_image: float = float("nan")
    auprc_pooling: str = "pooled-pixels"
    prc: list = field(default_factory=list)
    histogram: list = field(default_factory=list)
    spikiness: float = float("nan")
    attention: list = field(default_factory=list)
    quant_summary: dict = field(default_factory=dict)
    conformance: dict = field(default_factory=dict)
    checkpoint: str | None = None
    seconds: float = 0.0

    @property
    def key(self) -> tuple:
        c = self.config
        return (c["model"]["arch"], c["model"]["tier"], c["recipe"]["name"], c["train"]["seed"])

    def metrics(self) -> dict:
        """Everything except timing and file locations; same-seed runs agree here bitwise."""
        d = asdict(self)
        d.pop("seconds")
        d.pop("checkpoint")
        for e in d["epochs"]:
            e.pop("seconds", None)
        return d

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))

    def mean_attention_entropy(self) -> float:
        if not self.attention:
            return float("nan")
        return float(np.mean([a["entropy"] for a in self.attention]))

    def write(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "epochs.jsonl").write_text("".join(json.dumps(e) + "\n" for e in self.epochs))
        (d / "prc.csv").write_text(_csv(["recall", "precision"], self.prc))
        edges = np.linspace(0, 1, len(self.histogram) + 1) if self.histogram else []
        (d / "histogram.csv").write_text(
            _csv(["bin_low", "bin_high", "count"],
                 [(f"{edges[i]:.6f}", f"{edges[i + 1]:.6f}", c) for i, c in enumerate(self.histogram)]))
        tmp = d / "record.json.tmp"
        tmp.write_text(self.to_json())
        tmp.replace(d / "record.json")  # record.json marks the run complete
        return d / "record.json"

    @classmethod
    def read(cls, directory) -> "RunRecord":
        return cls.from_json((Path(directory) / "record.json").read_text())


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _predict(model, images, batch):
    outs = []
    for i in range(0, len(images), batch):
        outs.append(model(normalize(images[i:i + batch]), training=False).data)
    return np.concatenate(outs).astype(np.float64)


def train_run(model_cfg: ModelConfig, recipe: RecipeConfig | str, data: SplitArrays,
              cfg: TrainConfig = TrainConfig(), out_dir=None, data_config: dict | None = None,
              progress=None, extra_config: dict | None = None) -> RunRecord:
    """Train one model with the given recipe and evaluate the best-validation checkpoint on test."""
    if isinstance(recipe, str):
        recipe = recipe_from_name(recipe)
    t_start = time.perf_counter()
    model = build_model(model_cfg, recipe, seed=cfg.seed)
    opt = Optimizer(model.params, cfg.optimizer or ARCH_OPTIMIZER[model_cfg.arch])
    if cfg.lr is not None:
        opt.lr = cfg.lr
    sched = PlateauScheduler(cfg.plateau_factor, cfg.plateau_patience)
    stopper = EarlyStopping(cfg.early_patience, cfg.warmup)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

    x_train, y_train = data["train"]
    x_val, y_val = data["val"]
    n_pos = int(data["test"][1].sum())
    if n_pos == 0 or n_pos == data["test"][1].size:
        raise ValueError("test split holds a single class; AUPRC undefined")
    record = RunRecord(config={
        "model": model_cfg.to_dict(), "recipe": recipe.to_dict(), "train": cfg.to_dict(),
        "optimizer": asdict(opt.preset) | {"lr": opt.lr}, "data": data_config or {},
    } | (extra_config or {}))
    best_state = model.state_dict()
    first_step = True
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(x_train))
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            if cfg.augment:
                pairs = [apply_augment(x_train[i], y_train[i, 0], sample_augment_params(rng)) for i in idx]
                xb = np.stack([p[0] for p in pairs])
                yb = np.stack([p[1] for p in pairs])[:, None].astype(np.float32)
            else:
                xb, yb = normalize(x_train[idx]), y_train[idx]
            if first_step:
                model.quant_log.enabled = True
            model.zero_grad()
            with tg.Tape() as tape:
                value = loss(model(xb, training=True), yb, cfg.loss)
            tape.backward(value)
            if first_step:
                rep = conformance_check(recipe, model.quant_log.events, exempt=model_cfg.exempt)
                record.conformance = rep.to_dict()
                record.quant_summary = model.quant_log.summary()
                model.quant_log.enabled = False
                model.quant_log.clear()
                first_step = False
            opt.step()
            losses.append(float(value.data))
        val = loss_value(_predict(model, x_val, cfg.eval_batch), y_val, cfg.loss)
        reduced = sched.step(val, opt)
        stop = stopper.step(epoch, val)
        if stopper.best_epoch == epoch:
            best_state = model.state_dict()
            record.best_epoch, record.best_val_loss = epoch, val
        record.epochs.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val,
                              "lr": opt.lr, "lr_reduced": reduced, "seconds": time.perf_counter() - t0})
        if progress is not None:
            progress(record.epochs[-1])
        if stop:
            break
    record.stopped_epoch = epoch

    model.load_state_dict(best_state)
    x_test, y_test = data["test"]
    z = _predict(model, x_test, cfg.eval_batch)
    probs = 1.0 / (1.0 + np.exp(-np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)))
    record.test_auprc = auprc(probs, y_test)
    record.test_auprc_per_image = auprc_per_image(probs[:, 0], y_test[:, 0])
    record.prc = [list(p) for p in prc_curve(probs, y_test, cfg.prc_points)]
    hist = pred_histogram(probs)
    record.histogram = hist.tolist()
    record.spikiness = spikiness(hist)
    if model_cfg.arch != "cnn":
        record.attention = attention_stats(model, normalize(x_test[:cfg.eval_batch]))
    if out_dir is not None:
        ck = tg.save_checkpoint(Path(out_dir) / "checkpoint", model.state_dict(),
                                {"model": model_cfg.to_dict(), "recipe": recipe.to_dict(),
                                 "epoch": record.best_epoch})
        record.checkpoint = str(Path(ck).relative_to(Path(out_dir)))
    record.seconds = time.perf_counter() - t_start
    if out_dir is not None:
        record.write(out_dir)
    return record


# -- aggregation -----------------------------------------------------------

BASELINE = "baseline-bf16"


def normalize_to_baseline(records) -> list[dict]:
    """Percent of the same-seed baseline AUPRC for every record, grouped by (arch, tier, seed)."""
    base = {}
    for r in records:
        arch, tier, recipe, seed = r.key
        if recipe == BASELINE:
            base[(arch, tier, seed)] = r.test_auprc
    rows = []
    for r in records:
        arch, tier, recipe, seed = r.key
        if (arch, tier, seed) not in base:
            raise ValueError(f"missing {BASELINE} record for {arch}/{tier} seed {seed}")
        b = base[(arch, tier, seed)]
        rows.append({"arch": arch, "tier": tier, "recipe": recipe, "seed": seed, "auprc": r.test_auprc,
                     "baseline_auprc": b, "normalized": 100.0 * r.test_auprc / b})
    rows.sort(key=lambda d: (d["arch"], d["tier"], d["recipe"], d["seed"]))
    return rows


def aggregate(values, confidence: float = 0.95) -> dict:
    """Mean with a Student-t confidence interval over seeds."""
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    if n == 0:
        raise ValueError("nothing to aggregate")
    mean = float(v.mean())
    std = float(v.std(ddof=1)) if n > 1 else 0.0
    half = float(stats.t.ppf(0.5 + confidence / 2, n - 1) * std / np.sqrt(n)) if n > 1 and std > 0 else 0.0
    return {"n": n, "mean": mean, "std": std, "ci_low": mean - half, "ci_high": mean + half, "ci_half": half}
