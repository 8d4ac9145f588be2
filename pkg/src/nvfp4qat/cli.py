"""Command-line entry point: runs, sweeps, cross-validation, tensor quantization, conformance, reports."""

from __future__ import annotations

import argparse
import json
import struct
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .fp4core import BlockGeometry, QuantizationError, RoundingMode, dequantize, quantization_stats, quantize
from .modelzoo import TIERS, build_model, model_config
from .qatlayer import RECIPES, conformance_check, probe_step, recipe_from_name
from .report import write_report
from .rht import DEFAULT_RHT_SIZE, RhtTransform, apply_rht
from .segdata import generate_dataset, kfold, load_dataset, prepare_arrays, split_patients
from .trainlab import RunRecord, TrainConfig, aggregate, train_run

TENSOR_MAGIC = b"NVQT"


class SpecError(ValueError):
    pass


# -- experiment spec -------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    n_patients: int = 40
    slices_per_patient: int = 12
    positive_rate: float = 0.349
    size: int = 32
    split_seed: int = 0
    root: str | None = None  # load image/mask pairs from here instead of generating


@dataclass(frozen=True)
class ExperimentSpec:
    archs: tuple = ("cnn",)
    tiers: tuple = ("s",)
    recipes: tuple = ("baseline-bf16",)
    seeds: tuple = (0,)
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()
    out: str = "runs"
    literal_scaling: bool = False
    folds: int = 5

    def __post_init__(self):
        for name in ("archs", "tiers", "recipes", "seeds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not (self.archs and self.tiers and self.recipes and self.seeds):
            raise SpecError("archs, tiers, recipes and seeds must all be non-empty")
        for a in self.archs:
            for t in self.tiers:
                if (a, t) not in TIERS:
                    raise SpecError(f"unknown model {a}/{t}")
        for r in self.recipes:
            if r not in RECIPES:
                raise SpecError(f"unknown recipe {r!r}; valid: {', '.join(RECIPES)}")
        if not all(isinstance(s, int) for s in self.seeds):
            raise SpecError("seeds must be integers")

    def runs(self) -> list[tuple]:
        """Deterministic cartesian product (arch, tier, recipe, seed)."""
        return [(a, t, r, s) for a in self.archs for t in self.tiers for r in self.recipes for s in self.seeds]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("archs", "tiers", "recipes", "seeds"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown spec keys: {sorted(extra)}")
        try:
            if "data" in d:
                d["data"] = DataConfig(**d["data"])
            if "train" in d:
                d["train"] = TrainConfig.from_dict(d["train"])
            return cls(**d)
        except TypeError as exc:
            raise SpecError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SpecError(f"cannot read spec {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise SpecError("spec must be a JSON object")
        return cls.from_dict(raw)


def run_dir_name(arch, tier, recipe, seed, fold=None) -> str:
    base = f"{arch}_{tier}_{recipe}_s{seed}"
    return base if fold is None else f"{base}_fold{fold}"


def build_data(dc: DataConfig):
    if dc.root:
        return load_dataset(dc.root, dc.size)
    return generate_dataset(dc.seed, dc.n_patients, dc.slices_per_patient, dc.positive_rate, dc.size)


def _execute(spec_dict: dict, arch, tier, recipe, seed, run_dir, fold=None, split_dict=None) -> dict:
    from .segdata import SplitSpec

    spec = ExperimentSpec.from_dict(spec_dict)
    patients = build_data(spec.data)
    split = SplitSpec.from_dict(split_dict) if split_dict else split_patients(patients, seed=spec.data.split_seed)
    data = prepare_arrays(patients, split)
    extra = {"spec": spec.to_dict()} | ({"fold": fold} if fold is not None else {})
    rec = train_run(model_config(arch, tier), recipe_from_name(recipe, spec.literal_scaling), data,
                    replace(spec.train, seed=seed), out_dir=run_dir,
                    data_config={"config": asdict(spec.data), "split": split.to_dict()}, extra_config=extra)
    return {"run": str(run_dir), "auprc": rec.test_auprc, "conformance": rec.conformance.get("passed", False)}


def _run_all(jobs: list, n_jobs: int, log) -> list[dict]:
    todo = [j for j in jobs if not (Path(j[5]) / "record.json").exists()]
    for j in jobs:
        if j not in todo:
            log(f"skip {j[5]} (complete)")
    results = []
    if n_jobs <= 1:
        for j in todo:
            log(f"train {j[5]}")
            results.append(_execute(*j))
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            futures = [pool.submit(_execute, *j) for j in todo]
            for j, f in zip(todo, futures):
                results.append(f.result())
                log(f"done {j[5]}")
    return results


def _all_conformant(out: Path, names) -> bool:
    ok = True
    for n in names:
        rec = RunRecord.read(out / n)
        if not rec.conformance.get("passed", False):
            ok = False
    return ok


# -- commands --------------------------------------------------------------

def _spec_from_args(args) -> ExperimentSpec:
    spec = ExperimentSpec.load(args.spec) if args.spec else ExperimentSpec()
    over = {}
    if getattr(args, "arch", None):
        over["archs"] = (args.arch,)
    if getattr(args, "tier", None):
        over["tiers"] = (args.tier,)
    if getattr(args, "recipe", None):
        over["recipes"] = (args.recipe,)
    if args.seed is not None:
        over["seeds"] = (args.seed,)
    if args.out:
        over["out"] = args.out
    if args.literal_scaling:
        over["literal_scaling"] = True
    if getattr(args, "epochs", None):
        over["train"] = replace(spec.train, epochs=args.epochs)
    return replace(spec, **over) if over else spec


def cmd_run(args) -> int:
    spec = _spec_from_args(args)
    runs = spec.runs()
    if len(runs) != 1:
        raise SpecError(f"run needs exactly one (arch, tier, recipe, seed); spec gives {len(runs)}")
    out = Path(spec.out)
    name = run_dir_name(*runs[0])
    _run_all([(spec.to_dict(), *runs[0], str(out / name))], 1, _log(args))
    rec = RunRecord.read(out / name)
    print(f"{name}: test AUPRC {rec.test_auprc:.4f}, conformance {'ok' if rec.conformance.get('passed') else 'FAILED'}")
    return 0 if rec.conformance.get("passed") else 1


def cmd_sweep(args) -> int:
    spec = _spec_from_args(args)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1))
    names = [run_dir_name(*r) for r in spec.runs()]
    jobs = [(spec.to_dict(), *r, str(out / n)) for r, n in zip(spec.runs(), names)]
    _run_all(jobs, args.jobs, _log(args))
    report = write_report(out, out / "report")
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    for flag in report["flags"]:
        print(f"flag: {flag}")
    return 0 if _all_conformant(out, names) else 1


def cmd_cv(args) -> int:
    spec = _spec_from_args(args)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    patients = build_data(spec.data)
    folds = kfold(patients, k=spec.folds, seed=spec.data.split_seed)
    tested = [p for f in folds for p in f.test]
    if sorted(tested) != sorted(p.patient_id for p in patients):
        raise RuntimeError("fold test sets do not partition the patients")
    jobs, names = [], []
    for arch, tier, recipe, seed in spec.runs():
        for f in folds:
            n = run_dir_name(arch, tier, recipe, seed, f.fold)
            names.append(n)
            jobs.append((spec.to_dict(), arch, tier, recipe, seed, str(out / n), f.fold, f.to_dict()))
    _run_all(jobs, args.jobs, _log(args))
    summary = []
    for arch, tier, recipe, seed in spec.runs():
        vals = [RunRecord.read(out / run_dir_name(arch, tier, recipe, seed, f.fold)).test_auprc for f in folds]
        agg = aggregate(vals)
        summary.append({"arch": arch, "tier": tier, "recipe": recipe, "seed": seed, "folds": vals,
                        "mean": agg["mean"], "std": agg["std"]})
        print(f"{arch}/{tier}/{recipe} s{seed}: AUPRC {agg['mean']:.4f} +- {agg['std']:.4f} over {len(vals)} folds")
    (out / "cv.json").write_text(json.dumps({"folds": [f.to_dict() for f in folds], "summary": summary}, indent=1))
    return 0 if _all_conformant(out, names) else 1


def read_tensor(path) -> tuple[np.ndarray, dict]:
    """Read ``NVQT | uint32 header length | JSON header | float32 LE data``."""
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise QuantizationError(f"bad magic at offset 0: {raw[:4]!r}")
    if len(raw) < 8:
        raise QuantizationError("file ends inside the header length at offset 4")
    (n,) = struct.unpack("<I", raw[4:8])
    if 8 + n > len(raw):
        raise QuantizationError(f"header of {n} bytes at offset 8 runs past end of file ({len(raw)} bytes)")
    try:
        header = json.loads(raw[8:8 + n].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise QuantizationError(f"malformed header at offset 8: {exc}") from None
    count = int(np.prod(shape)) if shape else 1
    body = raw[8 + n:]
    if len(body) != 4 * count:
        raise QuantizationError(f"data at offset {8 + n}: expected {4 * count} bytes for shape {shape}, "
                                f"found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32), header


def write_tensor(path, x, **header) -> Path:
    x = np.asarray(x, dtype="<f4")
    meta = json.dumps({"shape": list(x.shape), **header}).encode("utf-8")
    Path(path).write_bytes(TENSOR_MAGIC + struct.pack("<I", len(meta)) + meta + x.tobytes())
    return Path(path)


def quantize_file(path, out, geometry=None, mode=None, seed=None, rht=False, literal_scaling=False) -> dict:
    x, header = read_tensor(path)
    geometry = BlockGeometry.parse(geometry or header.get("geometry", "1x16"))
    mode_name = mode or header.get("mode", "nearest")
    seed = seed if seed is not None else int(header.get("seed", 0))
    if mode_name not in ("nearest", "stochastic"):
        raise QuantizationError(f"unknown rounding mode {mode_name!r}")
    rm = RoundingMode.sr(seed) if mode_name == "stochastic" else RoundingMode()
    src = x
    t = None
    if rht:
        if x.ndim == 0 or x.shape[-1] % DEFAULT_RHT_SIZE:
            raise QuantizationError(f"RHT needs the last axis divisible by {DEFAULT_RHT_SIZE}, got {x.shape}")
        t = RhtTransform.random(DEFAULT_RHT_SIZE, np.random.default_rng(np.random.SeedSequence([seed, 7])))
        src = apply_rht(x, t, -1).astype(np.float32)
    q = quantize(src, geometry, rm, literal_scaling=literal_scaling)
    stats = quantization_stats(src, q, literal_scaling)
    if t is not None:
        # report reconstruction error in the original basis
        xhat = _inverse_rht(dequantize(q).astype(np.float64), t)
        err = xhat - x.astype(np.float64)
        stats["max_abs_err"] = float(np.max(np.abs(err))) if err.size else 0.0
        stats["rmse"] = float(np.sqrt(np.mean(err ** 2))) if err.size else 0.0
    stats.update({"geometry": geometry.value, "mode": rm.name, "seed": seed, "rht": bool(rht),
                  "literal_scaling": bool(literal_scaling)})
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "codes.bin").write_bytes(q.codes.astype(np.uint8).tobytes())
    (out / "scales.bin").write_bytes(q.block_scales.astype(np.uint8).tobytes())
    (out / "quantized.json").write_text(json.dumps({
        "shape": list(q.shape), "padded_shape": list(q.padded_shape), "geometry": geometry.value,
        "tensor_scale": float(q.tensor_scale), "codes": "codes.bin", "block_scales": "scales.bin",
        "rht_signs": t.signs.astype(int).tolist() if t is not None else None,
    }, indent=1))
    (out / "stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True))
    return stats


def _inverse_rht(y, t: RhtTransform):
    m = t.matrix
    blocks = y.reshape(y.shape[:-1] + (y.shape[-1] // t.size, t.size))
    return (blocks @ m.T).reshape(y.shape)


def cmd_quantize(args) -> int:
    if not args.input:
        raise SpecError("quantize needs an input tensor file")
    out = args.out or str(Path(args.input).with_suffix("")) + "_q"
    stats = quantize_file(args.input, out, args.geometry, args.mode, args.seed, args.rht, args.literal_scaling)
    print(json.dumps({k: stats[k] for k in ("max_abs_err", "rmse", "saturation_fraction")}))
    return 0


def run_conformance(recipes=None, archs=(), seed: int = 0, literal_scaling=False) -> list[dict]:
    """Probe-network conformance for each recipe, plus first-step checks on the named architectures."""
    results = []
    for name in recipes or list(RECIPES):
        recipe = recipe_from_name(name, literal_scaling)
        rep = conformance_check(recipe, probe_step(recipe, seed))
        results.append({"target": "probe", **rep.to_dict()})
        for arch in archs:
            from . import tensorgrad as tg

            cfg = model_config(arch, "s")
            model = build_model(cfg, recipe, seed)
            model.quant_log.enabled = True
            x = np.random.default_rng(seed).standard_normal((2, 3, cfg.image_size, cfg.image_size))
            with tg.Tape() as tape:
                y = tg.mean_all(model(x.astype(np.float32), training=True))
            tape.backward(y)
            rep = conformance_check(recipe, model.quant_log.events, exempt=cfg.exempt)
            results.append({"target": arch, **rep.to_dict()})
    return results


def cmd_conformance(args) -> int:
    recipes = [args.recipe] if getattr(args, "recipe", None) else None
    archs = [args.arch] if getattr(args, "arch", None) else []
    seed = args.seed if args.seed is not None else 0
    results = run_conformance(recipes, archs, seed, args.literal_scaling)
    for r in results:
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status} {r['recipe']:<14} {r['target']:<6} layers={r['layers']}")
        for f in r["failures"]:
            print(f"    {f}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "conformance.json").write_text(json.dumps(results, indent=1))
    return 0 if all(r["passed"] for r in results) else 1


def cmd_report(args) -> int:
    src = args.records or (ExperimentSpec.load(args.spec).out if args.spec else None)
    if not src:
        raise SpecError("report needs a records directory")
    report = write_report(src, args.out)
    print(f"{report['runs']} runs, {len(report['figures'])} figures")
    for flag in report["flags"]:
        print(f"flag: {flag}")
    return 0


def _log(args):
    quiet = getattr(args, "quiet", False)
    return (lambda msg: None) if quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nvfp4qat", description="NVFP4 quantization-aware training emulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--spec", help="experiment spec JSON")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="parallel training processes")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--literal-scaling", action="store_true",
                        help="use the block max itself as the block scale (no /6)")
        sp.add_argument("--quiet", action="store_true")
        return sp

    for name, fn in (("run", cmd_run), ("sweep", cmd_sweep), ("cv", cmd_cv)):
        sp = common(sub.add_parser(name))
        sp.add_argument("--arch", choices=sorted({a for a, _ in TIERS}))
        sp.add_argument("--tier")
        sp.add_argument("--recipe", choices=list(RECIPES))
        sp.add_argument("--epochs", type=int)
        sp.set_defaults(func=fn)

    sp = common(sub.add_parser("quantize"))
    sp.add_argument("input", nargs="?", help="NVQT tensor file")
    sp.add_argument("--geometry", choices=["1x16", "16x16"])
    sp.add_argument("--mode", choices=["nearest", "stochastic"])
    sp.add_argument("--rht", action="store_true", help="rotate the last axis with a random Hadamard transform first")
    sp.set_defaults(func=cmd_quantize)

    sp = common(sub.add_parser("conformance"))
    sp.add_argument("--recipe", choices=list(RECIPES))
    sp.add_argument("--arch", choices=sorted({a for a, _ in TIERS}))
    sp.set_defaults(func=cmd_conformance)

    sp = common(sub.add_parser("report"))
    sp.add_argument("records", nargs="?", help="directory containing run records")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SpecError, QuantizationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
