"""Slice loading, synthetic CT-like slices, augmentation and class rebalancing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

MAX_ROTATION_DEG = 35.0


@dataclass
class SegmentationSample:
    """One slice. ``infection_mask`` holds 0 background, 1 GGO, 2 CON (binary data uses 0/1)."""

    image: np.ndarray
    infection_mask: np.ndarray
    lung_mask: np.ndarray | None = None
    source: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim == 3:
            self.image = self.image[0]
        self.infection_mask = np.asarray(self.infection_mask, dtype=np.uint8)
        if self.lung_mask is not None:
            self.lung_mask = np.asarray(self.lung_mask).astype(bool)

    @property
    def infected(self) -> bool:
        return bool(self.infection_mask.any())

    def problems(self) -> list[str]:
        out = []
        if self.infection_mask.shape != self.image.shape:
            out.append(f"infection mask {self.infection_mask.shape} vs image {self.image.shape}")
        if self.lung_mask is not None and self.lung_mask.shape != self.image.shape:
            out.append(f"lung mask {self.lung_mask.shape} vs image {self.image.shape}")
        extra = set(np.unique(self.infection_mask).tolist()) - {0, 1, 2}
        if extra:
            out.append(f"infection labels outside {{0,1,2}}: {sorted(extra)}")
        if not out and self.lung_mask is not None and np.any((self.infection_mask > 0) & ~self.lung_mask):
            out.append("infection pixels outside the lung mask")
        return out


# ----------------------------------------------------------------------
# files


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            scale = 65535.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
            scale = 255.0
    return (arr / scale).astype(np.float32)


def _read_labels(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).astype(np.uint8)


def load_dataset(manifest_path: str | Path) -> tuple[list[SegmentationSample], list[str]]:
    """Read every manifest entry in order.

    Returns the valid samples and a list of per-entry error messages; a bad
    entry does not stop the load.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    entries = json.loads(manifest_path.read_text())
    samples, errors = [], []
    for i, entry in enumerate(entries):
        try:
            image = _read_image(root / entry["image"])
            inf = _read_labels(root / entry["infection_mask"])
            lung_path = entry.get("lung_mask")
            lung = _read_labels(root / lung_path) > 0 if lung_path else None
        except (OSError, KeyError) as exc:
            errors.append(f"entry {i}: {exc}")
            continue
        sample = SegmentationSample(image, inf, lung, source=str(entry["image"]))
        problems = sample.problems()
        if problems:
            errors.append(f"entry {i} ({entry['image']}): " + "; ".join(problems))
            continue
        samples.append(sample)
    for err in errors:
        log.warning("skipped %s", err)
    return samples, errors


def save_dataset(samples: list[SegmentationSample], directory: str | Path) -> Path:
    """Write 16-bit image PNGs, 8-bit label PNGs and a manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        stem = f"slice_{i:04d}"
        img16 = np.round(np.clip(s.image, 0, 1) * 65535).astype(np.uint16)
        Image.fromarray(img16).save(directory / f"{stem}_image.png")
        Image.fromarray(s.infection_mask.astype(np.uint8)).save(directory / f"{stem}_infection.png")
        entry = {"image": f"{stem}_image.png", "infection_mask": f"{stem}_infection.png", "lung_mask": None}
        if s.lung_mask is not None:
            Image.fromarray(s.lung_mask.astype(np.uint8)).save(directory / f"{stem}_lung.png")
            entry["lung_mask"] = f"{stem}_lung.png"
        entries.append(entry)
    path = directory / "manifest.json"
    path.write_text(json.dumps(entries, indent=2))
    return path


# ----------------------------------------------------------------------
# synthetic slices


@dataclass
class SyntheticSpec:
    size: int = 128
    lung_axes: tuple[float, float] = (0.34, 0.16)  # semi-axes (rows, cols) as image fractions
    lung_jitter: float = 0.03
    lesion_count: tuple[int, int] = (1, 4)
    lesion_radius: tuple[float, float] = (3.0, 9.0)  # pixels
    con_probability: float = 0.35
    background: float = 0.02
    body: float = 0.55
    lung: float = 0.12
    ggo: float = 0.42
    con: float = 0.85
    noise_sigma: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise ValueError(f"bad lesion count range {self.lesion_count}")
        min_axis = self.size * (min(self.lung_axes) - self.lung_jitter)
        if self.lesion_radius[1] >= min_axis or self.lesion_radius[0] <= 0 or self.lesion_radius[1] < self.lesion_radius[0]:
            raise ValueError(
                f"lesion radius range {self.lesion_radius} does not fit inside lungs of"
                f" minimum semi-axis {min_axis:.1f} px")


def _ellipse(rr, cc, centre, axes):
    return ((rr - centre[0]) / axes[0]) ** 2 + ((cc - centre[1]) / axes[1]) ** 2


def _draw_lesion_centre(rng, centre, axes, radius) -> tuple[float, float]:
    # a disk of `radius` fits inside the ellipse if its centre lies in the ellipse shrunk by `radius`
    inner = (axes[0] - radius, axes[1] - radius)
    while True:
        u, v = rng.uniform(-1, 1, size=2)
        if u * u + v * v <= 1:
            return centre[0] + u * inner[0], centre[1] + v * inner[1]


def synth_generate(spec: SyntheticSpec, n: int) -> list[SegmentationSample]:
    """Two dark lung ellipses in a bright body; soft mid-grey GGO, sharp bright CON."""
    if n < 1:
        raise ValueError("need at least one slice")
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    rr, cc = np.mgrid[0:s, 0:s].astype(np.float64)
    out = []
    for i in range(n):
        body = _ellipse(rr, cc, (s / 2, s / 2), (0.46 * s, 0.47 * s)) <= 1
        image = np.where(body, spec.body, spec.background)
        lung = np.zeros((s, s), dtype=bool)
        lungs = []
        for side in (0.3, 0.7):
            centre = (s * (0.5 + rng.uniform(-1, 1) * spec.lung_jitter / 2), s * side)
            axes = tuple(s * (a + rng.uniform(-1, 1) * spec.lung_jitter) for a in spec.lung_axes)
            lungs.append((centre, axes))
            lung |= _ellipse(rr, cc, centre, axes) <= 1
        image = np.where(lung, spec.lung, image)
        labels = np.zeros((s, s), dtype=np.uint8)
        count = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
        for _ in range(count):
            centre, axes = lungs[int(rng.integers(2))]
            radius = rng.uniform(*spec.lesion_radius)
            cy, cx = _draw_lesion_centre(rng, centre, axes, radius)
            dist = np.sqrt((rr - cy) ** 2 + (cc - cx) ** 2)
            disk = (dist <= radius) & lung
            if rng.random() < spec.con_probability:
                image = np.where(disk, spec.con, image)
                labels[disk] = 2
            else:
                falloff = np.clip(1.0 - (dist / radius) ** 2, 0, 1) ** 0.5
                blend = spec.lung + (spec.ggo - spec.lung) * (0.35 + 0.65 * falloff)
                image = np.where(disk & (labels != 2), blend, image)
                labels[disk & (labels != 2)] = 1
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
        out.append(SegmentationSample(np.clip(image, 0, 1), labels, lung, source=f"synth-{spec.seed}-{i}"))
    return out


# ----------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    angle: float = 0.0
    hflip: bool = False
    vflip: bool = False


def draw_augment_params(rng: np.random.Generator, max_angle: float = MAX_ROTATION_DEG) -> AugmentParams:
    angle = float(rng.uniform(-max_angle, max_angle))
    return AugmentParams(angle, bool(rng.random() < 0.5), bool(rng.random() < 0.5))


def _geometric(arr: np.ndarray, p: AugmentParams, order: int) -> np.ndarray:
    out = arr
    if p.angle != 0.0:
        out = ndimage.rotate(out, p.angle, reshape=False, order=order, mode="constant", cval=0)
    if p.hflip:
        out = out[:, ::-1]
    if p.vflip:
        out = out[::-1, :]
    return np.ascontiguousarray(out)


def apply_augmentation(sample: SegmentationSample, p: AugmentParams) -> SegmentationSample:
    """Same rotation and flips for image (bilinear) and masks (nearest)."""
    image = _geometric(sample.image, p, order=1)
    inf = _geometric(sample.infection_mask, p, order=0)
    lung = None if sample.lung_mask is None else _geometric(sample.lung_mask.astype(np.uint8), p, order=0)
    return replace(sample, image=image, infection_mask=inf, lung_mask=lung)


def augment(sample: SegmentationSample, seed) -> SegmentationSample:
    return apply_augmentation(sample, draw_augment_params(np.random.default_rng(seed)))


# ----------------------------------------------------------------------
# rebalancing and batching


def retained_noninfected(n_infected: int, target_fraction: float) -> int:
    """Largest k with k / (n_infected + k) <= target_fraction."""
    if target_fraction >= 1:
        return math.inf
    k = int(math.floor(target_fraction * n_infected / (1 - target_fraction)))
    while (k + 1) <= target_fraction * (n_infected + k + 1):
        k += 1
    while k > 0 and k > target_fraction * (n_infected + k):
        k -= 1
    return k


def undersample_noninfected(samples: list[SegmentationSample], target_fraction: float = 0.30,
                            seed: int = 0) -> list[SegmentationSample]:
    """Randomly drop non-infected slices until they make up at most ``target_fraction``.

    Infected slices are all kept; relative order is preserved.
    """
    infected = [s.infected for s in samples]
    n_inf = sum(infected)
    non_idx = [i for i, flag in enumerate(infected) if not flag]
    if not samples or len(non_idx) <= target_fraction * len(samples):
        return list(samples)
    keep_n = retained_noninfected(n_inf, target_fraction)
    rng = np.random.default_rng(seed)
    kept = set(rng.choice(non_idx, size=keep_n, replace=False).tolist()) if keep_n else set()
    return [s for i, s in enumerate(samples) if infected[i] or i in kept]


@dataclass
class Batch:
    images: np.ndarray
    infection: np.ndarray
    lung: np.ndarray
    lung_available: np.ndarray
    sources: list[str] = field(default_factory=list)


def collate(samples: list[SegmentationSample]) -> Batch:
    images = np.stack([s.image for s in samples])[:, None].astype(np.float32)
    infection = np.stack([s.infection_mask for s in samples])
    avail = np.array([s.lung_mask is not None for s in samples])
    lung = np.stack([s.lung_mask if s.lung_mask is not None else np.zeros_like(s.infection_mask, bool)
                     for s in samples]).astype(np.uint8)
    return Batch(images, infection, lung, avail, [s.source for s in samples])


def iterate_batches(samples: list[SegmentationSample], batch_size: int, seed: int, epoch: int,
                    augment_data: bool = False, shuffle: bool = True) -> Iterator[Batch]:
    """Batches for one epoch; the stream depends only on (seed, epoch)."""
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(samples)) if shuffle else np.arange(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        if augment_data:
            chunk = [apply_augmentation(s, draw_augment_params(rng)) for s in chunk]
        yield collate(chunk)
