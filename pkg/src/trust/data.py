"""Procedural two-device breast-ultrasound-like corpora.

Each sample is a textured background with one hypoechoic lesion. Benign
lesions are smooth ellipses with posterior enhancement; malignant ones have
a radially perturbed (spiculated) boundary and cast a posterior shadow.
A :class:`DomainSpec` then applies the device "style": speckle grain and
strength, contrast, brightness, gamma and vignetting.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, GenerationError, StratificationError

MIN_RESOLUTION = 16
MALIGNANT_MIN_IRREGULARITY = 0.15


@dataclass(frozen=True)
class DomainSpec:
    name: str
    brightness: float = 0.0
    contrast: float = 1.0
    gamma: float = 1.0
    grain: float = 1.0
    speckle: float = 0.0
    vignette: float = 0.0
    seed: int = 0

    def __post_init__(self):
        checks = [
            ("brightness", self.brightness, -0.3, 0.3),
            ("contrast", self.contrast, 0.6, 1.6),
            ("gamma", self.gamma, 0.5, 2.0),
            ("speckle", self.speckle, 0.0, 0.5),
            ("vignette", self.vignette, 0.0, 0.5),
        ]
        for key, val, lo, hi in checks:
            if not lo <= val <= hi:
                raise ConfigError(f"{self.name}: {key}={val} outside [{lo}, {hi}]")
        if self.grain <= 0:
            raise ConfigError(f"{self.name}: speckle grain must be positive")


# Source device: washed out, bright, fine grain. Target device: high contrast,
# dark, coarse grain with strong vignetting.
DEVICE_A = DomainSpec("device-A", brightness=0.12, contrast=0.65, gamma=0.6, grain=0.7,
                      speckle=0.35, vignette=0.0, seed=101)
DEVICE_B = DomainSpec("device-B", brightness=-0.1, contrast=1.5, gamma=1.6, grain=2.0,
                      speckle=0.2, vignette=0.35, seed=202)
DEFAULT_SPECS = {DEVICE_A.name: DEVICE_A, DEVICE_B.name: DEVICE_B}


@dataclass
class Dataset:
    images: np.ndarray  # [n, H, W] float32 in [0, 1]
    labels: np.ndarray  # [n] int64, 0 benign / 1 malignant
    masks: np.ndarray  # [n, H, W] uint8 in {0, 1}
    domain: str
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def resolution(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.masks[idx], self.domain, self.ids[idx])

    def model_inputs(self, idx=None) -> np.ndarray:
        """Grayscale replicated to three channels: [n, H, W, 3] float32."""
        imgs = self.images if idx is None else self.images[idx]
        return np.repeat(imgs[..., None], 3, axis=-1).astype(np.float32)


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    z = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    sd = z.std()
    return z / sd if sd > 0 else z


def lesion_mask(res: int, center, radii, angle: float, irregularity: float, harmonics, phases) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    dx, dy = xx - center[0], yy - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    phi = np.arctan2(v, u)
    base = 1.0 / np.sqrt((np.cos(phi) / radii[0]) ** 2 + (np.sin(phi) / radii[1]) ** 2)
    wobble = np.zeros_like(phi)
    for k, ph in zip(harmonics, phases):
        wobble += np.sin(k * phi + ph)
    wobble /= max(len(harmonics), 1)
    boundary = base * (1.0 + irregularity * wobble)
    return (np.hypot(u, v) <= boundary).astype(np.uint8)


def posterior_field(mask: np.ndarray, strength: float, fade: float) -> np.ndarray:
    """Multiplicative gain below the lesion: ``1 + strength`` right under its
    lower edge, fading with depth, blurred sideways."""
    res = mask.shape[0]
    rows = np.arange(res)[:, None]
    has = mask.any(axis=0)
    bottom = np.where(has, res - 1 - np.argmax(mask[::-1], axis=0), res)
    depth = rows - bottom[None, :]
    band = np.where((depth > 0) & has[None, :], np.exp(-depth / (fade * res)), 0.0)
    band = gaussian_filter(band, sigma=(0.5, res / 32))
    return 1.0 + strength * band


def generate_content(res: int, label: int, rng: np.random.Generator, max_tries: int = 20):
    """Pre-style image and exact mask for one sample of the given class."""
    if res < MIN_RESOLUTION:
        raise GenerationError(f"resolution {res} is too small to place a lesion (minimum {MIN_RESOLUTION})")
    background = 0.55 + 0.07 * _smooth_noise(rng, (res, res), res / 8)
    rows = np.linspace(0, 1, res)[:, None]
    background = background + 0.05 * np.sin(2 * np.pi * (3 * rows + rng.uniform()))
    for _ in range(max_tries):
        center = rng.uniform(0.32, 0.68, size=2) * res
        radii = rng.uniform(0.13, 0.22, size=2) * res
        angle = rng.uniform(0, np.pi)
        if label == 1:
            irregularity = rng.uniform(0.3, 0.45)
            harmonics = rng.integers(5, 9, size=2)
            phases = rng.uniform(0, 2 * np.pi, size=2)
            posterior = -rng.uniform(0.6, 0.75)
        else:
            irregularity, harmonics, phases = 0.0, (), ()
            posterior = rng.uniform(0.35, 0.5)
        mask = lesion_mask(res, center, radii, angle, irregularity, harmonics, phases)
        frac = mask.mean()
        if 0.01 <= frac <= 0.40:
            break
    else:
        raise GenerationError(f"could not fit a lesion covering 1-40% of a {res}×{res} image")
    background = background * posterior_field(mask, posterior, rng.uniform(0.25, 0.4))
    interior = rng.uniform(0.12, 0.22)
    img = np.where(mask == 1, interior + 0.03 * _smooth_noise(rng, (res, res), 1.5), background)
    return np.clip(img, 0.0, 1.0), mask


def apply_style(image: np.ndarray, spec: DomainSpec, rng: np.random.Generator, clamp: bool = True) -> np.ndarray:
    """Device styling. With zero speckle and vignette, unit contrast and gamma
    and zero brightness this is the identity."""
    y = image.astype(np.float64)
    if spec.speckle > 0:
        y = y * (1.0 + spec.speckle * _smooth_noise(rng, y.shape, spec.grain))
    if spec.contrast != 1.0 or spec.brightness != 0.0:
        y = (y - 0.5) * spec.contrast + 0.5 + spec.brightness
    if spec.gamma != 1.0:
        y = np.clip(y, 0.0, 1.0) ** spec.gamma
    if spec.vignette > 0:
        h, w = y.shape
        yy, xx = np.mgrid[0:h, 0:w]
        r2 = ((yy - (h - 1) / 2) ** 2 + (xx - (w - 1) / 2) ** 2) / (((h - 1) / 2) ** 2 + ((w - 1) / 2) ** 2)
        y = y * (1.0 - spec.vignette * r2)
    return np.clip(y, 0.0, 1.0) if clamp else y


def _sample_rngs(spec: DomainSpec, index: int):
    seq = np.random.SeedSequence([spec.seed, index])
    content, style = seq.spawn(2)
    return np.random.default_rng(content), np.random.default_rng(style)


def generate_domain(spec: DomainSpec, n: int, resolution: int = 64, clamp: bool = True) -> Dataset:
    """``n`` samples with alternating labels, deterministic per (spec.seed, index)."""
    if n < 2:
        raise ConfigError("need at least two samples so both classes are present")
    images = np.empty((n, resolution, resolution), dtype=np.float32 if clamp else np.float64)
    masks = np.empty((n, resolution, resolution), dtype=np.uint8)
    labels = np.arange(n, dtype=np.int64) % 2
    for i in range(n):
        content_rng, style_rng = _sample_rngs(spec, i)
        pre, masks[i] = generate_content(resolution, int(labels[i]), content_rng)
        images[i] = apply_style(pre, spec, style_rng, clamp=clamp)
    return Dataset(images, labels, masks, spec.name)


def split(dataset: Dataset, ratio: float = 0.7, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded stratified split; the train side gets round(ratio * n) samples."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(dataset.labels, return_counts=True)
    if (counts < 2).any():
        raise StratificationError("every class needs at least two samples to stratify")
    target = int(round(ratio * len(dataset)))
    ideal = ratio * counts
    take = np.floor(ideal).astype(int)
    order = np.argsort(-(ideal - take), kind="stable")
    for j in order[: target - take.sum()]:
        take[j] += 1
    take = np.clip(take, 1, counts - 1)
    train_idx, test_idx = [], []
    for cls, k in zip(classes, take):
        members = rng.permutation(np.flatnonzero(dataset.labels == cls))
        train_idx.extend(members[:k])
        test_idx.extend(members[k:])
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(test_idx))


def select_labeled(dataset: Dataset, per_class: int, seed: int = 0) -> np.ndarray:
    """Seeded subsample of ``per_class`` indices from each class."""
    rng = np.random.default_rng(seed)
    picked = []
    for cls in np.unique(dataset.labels):
        members = np.flatnonzero(dataset.labels == cls)
        if len(members) < per_class:
            raise ConfigError(f"class {cls} has {len(members)} samples, fewer than the labelled budget {per_class}")
        picked.extend(rng.choice(members, size=per_class, replace=False))
    return np.sort(np.asarray(picked, dtype=np.int64))


def split_dir(root, domain: str, split_name: str) -> Path:
    return Path(root) / domain / split_name


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_dataset(dataset: Dataset, directory) -> Path:
    """Write ``images/NNNN.png``, ``masks/NNNN.png`` and ``labels.csv`` under ``directory``."""
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    with open(d / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"])
        for i in range(len(dataset)):
            sid = int(dataset.ids[i])
            Image.fromarray(_to_u8(dataset.images[i]), mode="L").save(d / "images" / f"{sid:04d}.png")
            Image.fromarray(dataset.masks[i].astype(np.uint8) * 255, mode="L").save(d / "masks" / f"{sid:04d}.png")
            writer.writerow([sid, int(dataset.labels[i])])
    return d


def _read_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"))
    except OSError as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc


def load_dataset(directory, domain: Optional[str] = None) -> Dataset:
    d = Path(directory)
    index = d / "labels.csv"
    if not index.is_file():
        raise DataError(f"missing index file: {index}")
    ids, labels = [], []
    with open(index, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "label"} <= set(reader.fieldnames):
            raise DataError(f"malformed index {index}: expected columns id,label")
        for lineno, row in enumerate(reader, start=2):
            try:
                ids.append(int(row["id"]))
                labels.append(int(row["label"]))
            except (TypeError, ValueError):
                raise DataError(f"malformed index {index} at line {lineno}") from None
    if not ids:
        raise DataError(f"empty index: {index}")
    images, masks = [], []
    for sid in ids:
        images.append(_read_png(d / "images" / f"{sid:04d}.png").astype(np.float32) / 255.0)
        masks.append((_read_png(d / "masks" / f"{sid:04d}.png") > 127).astype(np.uint8))
    if domain is None:
        domain = d.parent.name if d.parent.name else d.name
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), np.stack(masks), domain,
                   np.asarray(ids, dtype=np.int64))


def build_corpus(source: DomainSpec = DEVICE_A, target: DomainSpec = DEVICE_B, n: int = 1000,
                 resolution: int = 64, ratio: float = 0.7, seed: int = 0) -> dict[str, dict[str, Dataset]]:
    """Both domains generated and split 7:3: ``{domain: {"train": ..., "test": ...}}``."""
    corpus = {}
    for spec in (source, target):
        train, test = split(generate_domain(spec, n, resolution), ratio, seed)
        corpus[spec.name] = {"train": train, "test": test}
    return corpus


def with_overrides(spec: DomainSpec, **kwargs) -> DomainSpec:
    return replace(spec, **kwargs)

