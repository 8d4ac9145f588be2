"""Synthetic patient-grouped segmentation data, patient-level splits and augmentation.

Each synthetic patient is a short stack of 3-channel slices.  Backgrounds are
smooth correlated noise; positive slices carry 1 to 3 soft elliptical blobs
whose colour and size follow a per-patient style, so neighbouring slices of
one patient look alike.  Splits are always made over patient ids, never over
slices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "IMAGENET_MEAN", "IMAGENET_STD", "PatientVolume", "SplitSpec", "SplitArrays", "AugmentParams",
    "generate_dataset", "positive_fraction", "split_patients", "kfold", "normalize", "augment",
    "sample_augment_params", "apply_augment", "prepare_arrays", "save_dataset", "load_dataset",
    "load_image_folder",
]

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class PatientVolume:
    patient_id: str
    images: list  # each (3, H, W) float32 in [0, 1]
    masks: list  # each (H, W) uint8 in {0, 1}

    def __post_init__(self):
        if len(self.images) != len(self.masks):
            raise ValueError(f"patient {self.patient_id}: {len(self.images)} images vs {len(self.masks)} masks")
        for k, m in enumerate(self.masks):
            if ((m != 0) & (m != 1)).any():
                raise ValueError(f"patient {self.patient_id}: mask {k} is not binary")

    def __len__(self):
        return len(self.images)

    @property
    def positive(self) -> np.ndarray:
        return np.array([m.any() for m in self.masks], dtype=bool)


# -- generator -------------------------------------------------------------

def _smooth_noise(rng, shape, sigma):
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _allocate_positives(rng, n_patients, slices, total):
    """Spread ``total`` positive slices over patients with uneven but bounded counts."""
    w = rng.uniform(0.3, 1.7, n_patients)
    counts = np.minimum(np.floor(total * w / w.sum()).astype(int), slices)
    while counts.sum() < total:
        room = np.flatnonzero(counts < slices)
        counts[rng.choice(room)] += 1
    return counts


def _blob(h, w, cy, cx, ry, rx, angle, softness):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = np.cos(angle), np.sin(angle)
    u = ((xx - cx) * c + (yy - cy) * s) / rx
    v = (-(xx - cx) * s + (yy - cy) * c) / ry
    r = np.sqrt(u * u + v * v)
    return 1.0 / (1.0 + np.exp((r - 1.0) / softness))


def generate_dataset(seed: int = 0, n_patients: int = 40, slices_per_patient: int = 12,
                     positive_rate: float = 0.349, size: int = 32, contrast: float = 0.6,
                     noise: float = 0.05, radius=(4.0, 7.0)) -> list[PatientVolume]:
    """Build a deterministic synthetic cohort.

    The realized positive-slice fraction is ``round(positive_rate * N) / N``
    where N is the slice count, so it sits within half a slice of the target.
    """
    if not 0.0 < positive_rate < 1.0:
        raise ValueError(f"positive_rate must lie in (0, 1), got {positive_rate}")
    if n_patients < 1 or slices_per_patient < 1:
        raise ValueError("need at least one patient and one slice")
    root = np.random.SeedSequence(seed)
    alloc_rng, *patient_seqs = [np.random.default_rng(s) for s in root.spawn(n_patients + 1)]
    total = int(round(positive_rate * n_patients * slices_per_patient))
    counts = _allocate_positives(alloc_rng, n_patients, slices_per_patient, total)

    out = []
    for pid, (rng, k) in enumerate(zip(patient_seqs, counts)):
        tint = rng.uniform(0.35, 0.55, 3)
        # blob style shared by every slice of the patient
        colour = tint + np.sign(rng.uniform(-0.3, 1.0)) * contrast * rng.uniform(0.7, 1.0, 3)
        base_radius = rng.uniform(*radius)
        n_blobs = int(rng.integers(1, 4))
        centres = rng.uniform(0.25 * size, 0.75 * size, (n_blobs, 2))
        anatomy = _smooth_noise(rng, (size, size), 4.0)
        start = int(rng.integers(0, slices_per_patient - k + 1))
        images, masks = [], []
        for j in range(slices_per_patient):
            bg = np.stack([tint[c] + 0.08 * anatomy + noise * _smooth_noise(rng, (size, size), 1.5)
                           for c in range(3)])
            mask = np.zeros((size, size), dtype=np.uint8)
            if start <= j < start + k:
                # cross-sections grow towards the middle of the positive run
                pos = (j - start + 0.5) / k
                scale = 0.6 + 0.4 * np.sin(np.pi * pos)
                alpha = np.zeros((size, size))
                for cy, cx in centres:
                    ry = base_radius * scale * rng.uniform(0.7, 1.3)
                    rx = base_radius * scale * rng.uniform(0.7, 1.3)
                    jy, jx = rng.normal(0, 1.0, 2)
                    alpha = np.maximum(alpha, _blob(size, size, cy + jy, cx + jx, ry, rx,
                                                    rng.uniform(0, np.pi), 0.12))
                mask = (alpha > 0.5).astype(np.uint8)
                if not mask.any():
                    mask[int(centres[0, 0]), int(centres[0, 1])] = 1
                bg = bg * (1 - alpha) + (colour[:, None, None] + 0.5 * noise * bg) * alpha
            images.append(np.clip(bg, 0.0, 1.0).astype(np.float32))
            masks.append(mask)
        out.append(PatientVolume(f"{pid:03d}", images, masks))
    return out


def positive_fraction(patients) -> float:
    pos = sum(int(p.positive.sum()) for p in patients)
    return pos / sum(len(p) for p in patients)


# -- splits ----------------------------------------------------------------

@dataclass
class SplitSpec:
    train: tuple
    val: tuple
    test: tuple
    fold: int | None = None

    def __post_init__(self):
        self.train, self.val, self.test = (tuple(sorted(s)) for s in (self.train, self.val, self.test))
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise ValueError(f"patient leakage between partitions: {sorted((a & b) | (a & c) | (b & c))}")

    @property
    def all_ids(self) -> set:
        return set(self.train) | set(self.val) | set(self.test)

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test), "fold": self.fold}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(d["train"], d["val"], d["test"], d.get("fold"))


def _ids(patients):
    return [p.patient_id if isinstance(p, PatientVolume) else str(p) for p in patients]


def split_patients(patients, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitSpec:
    ids = _ids(patients)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patient ids")
    if len(ratios) != 3 or min(ratios) <= 0:
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    n = len(ids)
    total = float(sum(ratios))
    n_val = int(round(n * ratios[1] / total))
    n_test = int(round(n * ratios[2] / total))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"too few patients ({n}) for a {ratios} split")
    order = np.random.default_rng(seed).permutation(n)
    ids = [ids[i] for i in order]
    return SplitSpec(ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:])


def kfold(patients, k: int = 5, seed: int = 0, val_fraction: float = 0.1) -> list[SplitSpec]:
    """Patient-level k-fold; each fold also carves a validation set out of its training patients."""
    ids = _ids(patients)
    n = len(ids)
    n_val = max(1, int(round(n * val_fraction)))
    if k < 2 or n < k or n - n // k - n_val < 1 or n // k < 1:
        raise ValueError(f"too few patients ({n}) for {k}-fold cross-validation")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(n)]
    chunks = np.array_split(np.arange(n), k)
    folds = []
    for f, chunk in enumerate(chunks):
        test = [order[i] for i in chunk]
        rest = [order[i] for i in range(n) if i not in set(chunk.tolist())]
        pick = rng.permutation(len(rest))
        val = [rest[i] for i in pick[:n_val]]
        train = [rest[i] for i in pick[n_val:]]
        folds.append(SplitSpec(train, val, test, fold=f))
    return folds


# -- augmentation ----------------------------------------------------------

def normalize(image: np.ndarray) -> np.ndarray:
    """Per-channel ImageNet normalization of a (3, H, W) or (N, 3, H, W) array in [0, 1]."""
    shape = (3, 1, 1) if image.ndim == 3 else (1, 3, 1, 1)
    return ((image - IMAGENET_MEAN.reshape(shape)) / IMAGENET_STD.reshape(shape)).astype(np.float32)


@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    brightness: float = 0.0
    contrast: float = 0.0
    shift: tuple = (0.0, 0.0)  # fraction of (H, W)
    scale: float = 1.0
    rotate: float = 0.0  # degrees

    @property
    def is_geometric_identity(self) -> bool:
        return self.shift == (0.0, 0.0) and self.scale == 1.0 and self.rotate == 0.0


def sample_augment_params(rng, flip_p=0.5, jitter=0.2, shift=0.1, scale=0.1, rotate=15.0) -> AugmentParams:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    u = rng.uniform(size=2)
    return AugmentParams(
        hflip=bool(u[0] < flip_p), vflip=bool(u[1] < flip_p),
        brightness=float(rng.uniform(-jitter, jitter)), contrast=float(rng.uniform(-jitter, jitter)),
        shift=(float(rng.uniform(-shift, shift)), float(rng.uniform(-shift, shift))),
        scale=float(rng.uniform(1 - scale, 1 + scale)), rotate=float(rng.uniform(-rotate, rotate)),
    )


def _affine(a, params: AugmentParams, order):
    h, w = a.shape[-2:]
    th = np.deg2rad(params.rotate)
    # output -> input mapping: inverse rotation and scale about the centre
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]) / params.scale
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - rot @ (centre + np.array(params.shift) * (h, w))
    return ndimage.affine_transform(a, rot, offset=offset, order=order, mode="mirror")


def apply_augment(image: np.ndarray, mask: np.ndarray, params: AugmentParams, normalize_output=True):
    img = np.asarray(image, dtype=np.float32)
    m = np.asarray(mask)
    if params.hflip:
        img, m = img[..., ::-1], m[..., ::-1]
    if params.vflip:
        img, m = img[..., ::-1, :], m[..., ::-1, :]
    if params.brightness or params.contrast:
        img = np.clip(img * (1 + params.contrast) + params.brightness, 0.0, 1.0)
    if not params.is_geometric_identity:
        img = np.stack([_affine(c, params, 1) for c in img])
        m = _affine(m.astype(np.uint8), params, 0)
    img = np.ascontiguousarray(img, dtype=np.float32)
    m = np.ascontiguousarray(m).astype(np.uint8)
    return (normalize(img) if normalize_output else img), m


def augment(image, mask, seed=None):
    """Training-time augmentation: flips, brightness/contrast, shift-scale-rotate, then normalization."""
    return apply_augment(image, mask, sample_augment_params(seed))


# -- array views -----------------------------------------------------------

@dataclass
class SplitArrays:
    """Stacked raw images (N, 3, H, W) in [0, 1], masks (N, 1, H, W) and patient ids per slice."""
    images: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    patients: dict = field(default_factory=dict)

    def __getitem__(self, part):
        return self.images[part], self.masks[part]


def prepare_arrays(patients, split: SplitSpec) -> SplitArrays:
    by_id = {p.patient_id: p for p in patients}
    missing = split.all_ids - set(by_id)
    if missing:
        raise ValueError(f"split names unknown patients: {sorted(missing)}")
    out = SplitArrays()
    for part in ("train", "val", "test"):
        vols = [by_id[i] for i in getattr(split, part)]
        out.images[part] = np.stack([im for v in vols for im in v.images]).astype(np.float32)
        out.masks[part] = np.stack([m for v in vols for m in v.masks])[:, None].astype(np.float32)
        out.patients[part] = np.array([v.patient_id for v in vols for _ in v.images])
    return out


# -- on-disk layout --------------------------------------------------------

def _to_u8(a):
    return np.round(np.clip(a, 0, 1) * 255).astype(np.uint8)


def save_dataset(patients, root) -> Path:
    """Write ``patient_<id>/slice_<k>.ppm`` (or ``.pgm`` for grey images) plus masks and a manifest."""
    from PIL import Image

    root = Path(root)
    manifest = {"format": "nvfp4qat-seg/1", "patients": {}}
    for p in patients:
        d = root / f"patient_{p.patient_id}"
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for k, (im, m) in enumerate(zip(p.images, p.masks)):
            grey = np.array_equal(im[0], im[1]) and np.array_equal(im[0], im[2])
            ext = "pgm" if grey else "ppm"
            pixels = _to_u8(im[0]) if grey else _to_u8(im.transpose(1, 2, 0))
            Image.fromarray(pixels).save(d / f"slice_{k}.{ext}")
            Image.fromarray((m * 255).astype(np.uint8)).save(d / f"slice_{k}_mask.pgm")
            entries.append({"image": f"{d.name}/slice_{k}.{ext}", "mask": f"{d.name}/slice_{k}_mask.pgm"})
        manifest["patients"][p.patient_id] = entries
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def _read_pair(image_path, mask_path, size):
    from PIL import Image

    im = Image.open(image_path)
    m = Image.open(mask_path).convert("L")
    if size is not None and im.size != (size, size):
        im = im.resize((size, size), Image.BILINEAR)
        m = m.resize((size, size), Image.NEAREST)
    a = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return a.transpose(2, 0, 1).copy(), (np.asarray(m) > 127).astype(np.uint8)


def load_dataset(root, size: int | None = None) -> list[PatientVolume]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        return load_image_folder(root, size)
    manifest = json.loads(manifest_path.read_text())
    out = []
    for pid, entries in manifest["patients"].items():
        pairs = [_read_pair(root / e["image"], root / e["mask"], size) for e in entries]
        out.append(PatientVolume(pid, [a for a, _ in pairs], [b for _, b in pairs]))
    return out


_IMAGE_EXT = {".pgm", ".ppm", ".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp"}


def load_image_folder(root, size: int | None = None) -> list[PatientVolume]:
    """Load ``<name>.<ext>`` / ``<name>_mask.<ext>`` pairs; the parent directory names the patient."""
    root = Path(root)
    groups: dict = {}
    for path in sorted(root.rglob("*")):
        if path.suffix.lower() not in _IMAGE_EXT or path.stem.endswith("_mask"):
            continue
        masks = [m for m in path.parent.glob(path.stem + "_mask.*") if m.suffix.lower() in _IMAGE_EXT]
        if not masks:
            raise FileNotFoundError(f"no mask found for {path}")
        pid = path.parent.name if path.parent != root else path.stem
        groups.setdefault(pid, []).append(_read_pair(path, masks[0], size))
    if not groups:
        raise FileNotFoundError(f"no image/mask pairs under {root}")
    return [PatientVolume(pid, [a for a, _ in v], [b for _, b in v]) for pid, v in groups.items()]
