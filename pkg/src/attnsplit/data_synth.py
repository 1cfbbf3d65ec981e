"""Procedural toy scenes for the three translation domains.

SOURCE scenes carry flat, hard-edged ("CAD-like") objects at a high pixel
frequency, TARGET scenes carry textured, soft-edged objects at a low
frequency, INTERMEDIATE scenes carry no objects at all. Every domain shares
the same background generator; TARGET and INTERMEDIATE backgrounds use the
target palette, SOURCE backgrounds are offset from it by ``palette_shift``.

Pixels are quantized to 8 bit on creation so that PNG persistence is lossless.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

BACKGROUND = 0
OBJECT = 1
CLASS_NAMES = ("background", "object")

MAX_PLACEMENT_ATTEMPTS = 100


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"
    INTERMEDIATE = "intermediate"


_DOMAIN_CODE = {Domain.SOURCE: 0, Domain.TARGET: 1, Domain.INTERMEDIATE: 2}


class ShapeError(ValueError):
    """Raised when an image size is incompatible with the network depth."""


class PlacementWarning(UserWarning):
    """Object placement could not reach the requested count."""


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray  # (3, H, W) float32 in [0, 1]
    domain: Domain
    id: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]


@dataclass(frozen=True)
class SemanticMap:
    labels: np.ndarray  # (1, H, W) uint8 over {BACKGROUND, OBJECT}

    def class_mask(self, class_id: int) -> "ClassMask":
        return ClassMask((self.labels[0] == class_id).astype(np.uint8), class_id)


@dataclass(frozen=True)
class ClassMask:
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    class_id: int

    @classmethod
    def ones(cls, height: int, width: int, class_id: int = -1) -> "ClassMask":
        return cls(np.ones((height, width), np.uint8), class_id)

    @classmethod
    def zeros(cls, height: int, width: int, class_id: int = -1) -> "ClassMask":
        return cls(np.zeros((height, width), np.uint8), class_id)


def class_masks(labels: SemanticMap) -> list[ClassMask]:
    """One binary mask per declared class; together they partition the grid."""
    return [labels.class_mask(c) for c in range(len(CLASS_NAMES))]


@dataclass
class DatasetSpec:
    n_source: int = 500
    n_target: int = 500
    n_intermediate: int = 500
    height: int = 32
    width: int = 32
    # images must stay divisible by 2**size_divisor_log2 (discriminator depth)
    size_divisor_log2: int = 3
    min_objects: int = 0
    max_objects: int = 8
    min_object_size: int = 4
    max_object_size: int = 8
    # comma-separated subset of {rect, ellipse}, drawn uniformly
    shape_kinds: str = "rect,ellipse"
    source_frequency: float = 0.08
    target_frequency: float = 0.01
    target_palette: tuple[float, float, float] = (0.40, 0.42, 0.45)
    # SOURCE background palette = target_palette - palette_shift
    palette_shift: tuple[float, float, float] = (0.04, 0.02, -0.03)
    # INTERMEDIATE palette = target_palette - intermediate_position * palette_shift (0 target, 1 source)
    intermediate_position: float = 0.5
    noise_amplitude: float = 0.02
    gradient_strength: float = 0.12
    source_object_color: tuple[float, float, float] = (0.95, 0.60, 0.10)
    target_object_color: tuple[float, float, float] = (0.85, 0.15, 0.20)
    target_texture_amplitude: float = 0.08
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("source_frequency", "target_frequency"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        for name in ("n_source", "n_target", "n_intermediate"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("object count range must satisfy 0 <= min <= max")
        if not 1 <= self.min_object_size <= self.max_object_size:
            raise ValueError("object size range must satisfy 1 <= min <= max")
        if not self.kinds or set(self.kinds) - {"rect", "ellipse"}:
            raise ValueError(f"unknown shape kinds {self.shape_kinds!r}")
        check_size(self.height, self.width, self.size_divisor_log2)

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(k.strip() for k in self.shape_kinds.split(",") if k.strip())

    @property
    def frequency_ratio(self) -> float:
        return self.source_frequency / self.target_frequency

    def count(self, domain: Domain) -> int:
        return {Domain.SOURCE: self.n_source, Domain.TARGET: self.n_target,
                Domain.INTERMEDIATE: self.n_intermediate}[domain]

    def frequency(self, domain: Domain) -> float:
        if domain is Domain.SOURCE:
            return self.source_frequency
        if domain is Domain.TARGET:
            return self.target_frequency
        return 0.0


def check_size(height: int, width: int, divisor_log2: int = 3) -> None:
    step = 2 ** divisor_log2
    if height <= 0 or width <= 0 or height % step or width % step:
        raise ShapeError(f"image size {height}x{width} must be positive multiples of {step}")


def _quantize(x: np.ndarray) -> np.ndarray:
    levels = np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.float32)
    return levels / np.float32(255.0)


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def background_field(domain: Domain, height: int, width: int, seed: int,
                     spec: DatasetSpec | None = None) -> np.ndarray:
    """Unquantized background; the structure depends only on ``seed``."""
    spec = spec or DatasetSpec()
    rng = _rng(seed, 101)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    ramp = (np.cos(angle) * (xx / max(width - 1, 1) - 0.5)
            + np.sin(angle) * (yy / max(height - 1, 1) - 0.5))
    blotches = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma=3.0, mode="wrap")
    blotches /= blotches.std() + 1e-12
    noise = rng.uniform(-1.0, 1.0, size=(3, height, width))

    palette = np.asarray(spec.target_palette, dtype=np.float64)
    if domain is Domain.SOURCE:
        palette = palette - np.asarray(spec.palette_shift, dtype=np.float64)
    elif domain is Domain.INTERMEDIATE:
        palette = palette - spec.intermediate_position * np.asarray(spec.palette_shift, dtype=np.float64)
    structure = spec.gradient_strength * ramp + 0.03 * blotches
    return palette[:, None, None] + structure[None] + spec.noise_amplitude * noise


def generate_background(domain: Domain, size: tuple[int, int], seed: int,
                        spec: DatasetSpec | None = None) -> tuple[ImageSample, SemanticMap]:
    """Render an object-free scene, deterministic in ``(domain, size, seed)``."""
    domain = Domain(domain)
    height, width = size
    check_size(height, width, (spec or DatasetSpec()).size_divisor_log2)
    pixels = _quantize(background_field(domain, height, width, seed, spec))
    labels = SemanticMap(np.zeros((1, height, width), np.uint8))
    return ImageSample(pixels, domain, f"{domain.value}-bg-{seed}"), labels


def _shape_mask(kind: str, h: int, w: int) -> np.ndarray:
    if kind == "rect":
        return np.ones((h, w), bool)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ry, rx = h / 2.0, w / 2.0
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def expected_object_area(spec: DatasetSpec) -> float:
    sizes = np.arange(spec.min_object_size, spec.max_object_size + 1)
    total = 0.0
    for kind in spec.kinds:
        areas = [_shape_mask(kind, h, w).sum() for h in sizes for w in sizes]
        total += float(np.mean(areas)) / len(spec.kinds)
    return total


def _object_count(rng: np.random.Generator, spec: DatasetSpec, frequency: float) -> int:
    if spec.max_objects == spec.min_objects:
        return spec.min_objects
    lam = frequency * spec.height * spec.width / expected_object_area(spec)
    return int(np.clip(rng.poisson(lam), spec.min_objects, spec.max_objects))


def _style_object(domain: Domain, spec: DatasetSpec, shape: np.ndarray,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return (color patch (3,h,w), alpha (h,w)) for one object."""
    h, w = shape.shape
    if domain is Domain.TARGET:
        base = np.asarray(spec.target_object_color, dtype=np.float64)
        grain = rng.uniform(-1.0, 1.0, size=(1, h, w))
        stripes = np.cos(np.arange(h) * 2.0 * math.pi / 3.0)[None, :, None]
        color = base[:, None, None] + spec.target_texture_amplitude * (0.6 * grain + 0.4 * stripes)
        interior = ndimage.binary_erosion(shape, structure=np.ones((3, 3)), border_value=0)
        alpha = np.where(interior, 1.0, 0.5) * shape
    else:
        base = np.asarray(spec.source_object_color, dtype=np.float64)
        color = np.broadcast_to(base[:, None, None], (3, h, w))
        alpha = shape.astype(np.float64)
    return color, alpha


def in_paint_objects(scene: ImageSample, labels: SemanticMap, spec: DatasetSpec, seed: int,
                     count: int | None = None) -> tuple[ImageSample, SemanticMap]:
    """Blend non-overlapping objects into an object-free scene.

    Objects keep a one pixel gap so that connected components of the label map
    recover individual instances. A placement that fails after
    ``MAX_PLACEMENT_ATTEMPTS`` tries is skipped and reported through a
    ``PlacementWarning`` carrying the achieved object fraction.
    """
    if labels.labels.any():
        raise ValueError("in_paint_objects expects a scene without object pixels")
    rng = _rng(seed, 202)
    if count is None:
        count = _object_count(rng, spec, spec.frequency(scene.domain))
    height, width = scene.shape
    pixels = scene.pixels.astype(np.float64)
    occupied = np.zeros((height, width), bool)
    placed = 0
    for _ in range(count):
        h = int(rng.integers(spec.min_object_size, spec.max_object_size + 1))
        w = int(rng.integers(spec.min_object_size, spec.max_object_size + 1))
        kind = spec.kinds[int(rng.integers(0, len(spec.kinds)))]
        if h > height or w > width:
            continue
        shape = _shape_mask(kind, h, w)
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            y0, x0 = max(top - 1, 0), max(left - 1, 0)
            if not occupied[y0:top + h + 1, x0:left + w + 1].any():
                break
        else:
            continue
        color, alpha = _style_object(scene.domain, spec, shape, rng)
        window = pixels[:, top:top + h, left:left + w]
        pixels[:, top:top + h, left:left + w] = alpha * color + (1.0 - alpha) * window
        occupied[top:top + h, left:left + w] |= shape
        placed += 1
    if placed < count:
        warnings.warn(
            f"placed {placed}/{count} objects in {scene.id}; "
            f"achieved object fraction {occupied.mean():.4f}",
            PlacementWarning,
            stacklevel=2,
        )
    new_labels = SemanticMap(occupied[None].astype(np.uint8))
    return ImageSample(_quantize(pixels), scene.domain, scene.id), new_labels


@dataclass
class Dataset:
    """A batch of samples from one domain, stored as stacked arrays."""

    domain: Domain
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N, H, W) uint8
    ids: list[str]
    seeds: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[tuple[ImageSample, SemanticMap]]:
        for i in range(len(self)):
            yield self.sample(i)

    def sample(self, i: int) -> tuple[ImageSample, SemanticMap]:
        return (ImageSample(self.images[i], self.domain, self.ids[i]),
                SemanticMap(self.labels[i][None]))

    def object_masks(self) -> np.ndarray:
        return (self.labels == OBJECT).astype(np.uint8)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = list(indices)
        return Dataset(self.domain, self.images[idx], self.labels[idx],
                       [self.ids[i] for i in idx], [self.seeds[i] for i in idx] if self.seeds else [])

    def with_images(self, images: np.ndarray) -> "Dataset":
        return Dataset(self.domain, np.asarray(images, np.float32), self.labels, list(self.ids), list(self.seeds))


def sample_seed(spec_seed: int, domain: Domain, index: int) -> int:
    seq = np.random.SeedSequence([spec_seed, _DOMAIN_CODE[Domain(domain)], index])
    return int(seq.generate_state(1, np.uint32)[0])


def render_sample(spec: DatasetSpec, domain: Domain, seed: int, sample_id: str) -> tuple[ImageSample, SemanticMap]:
    scene, labels = generate_background(domain, (spec.height, spec.width), seed, spec)
    scene = dataclasses.replace(scene, id=sample_id)
    if domain is Domain.INTERMEDIATE:
        return scene, labels
    return in_paint_objects(scene, labels, spec, seed)


def build_domain(spec: DatasetSpec, domain: Domain) -> Dataset:
    domain = Domain(domain)
    n = spec.count(domain)
    images = np.empty((n, 3, spec.height, spec.width), np.float32)
    labels = np.empty((n, spec.height, spec.width), np.uint8)
    ids, seeds = [], []
    for i in range(n):
        seed = sample_seed(spec.seed, domain, i)
        sample_id = f"{domain.value}-{i:05d}"
        image, semantic = render_sample(spec, domain, seed, sample_id)
        images[i] = image.pixels
        labels[i] = semantic.labels[0]
        ids.append(sample_id)
        seeds.append(seed)
    return Dataset(domain, images, labels, ids, seeds)


def build_dataset(spec: DatasetSpec) -> dict[Domain, Dataset]:
    return {domain: build_domain(spec, domain) for domain in Domain}


def empty_backgrounds(dataset: Dataset, spec: DatasetSpec) -> np.ndarray:
    """Re-render every sample of ``dataset`` without its objects."""
    out = np.empty_like(dataset.images)
    for i, seed in enumerate(dataset.seeds):
        out[i] = generate_background(dataset.domain, (spec.height, spec.width), seed, spec)[0].pixels
    return out


def class_balance_stats(dataset: Dataset | Sequence[SemanticMap] | np.ndarray) -> dict[str, float]:
    """Percentage of pixels per class over the whole dataset."""
    if isinstance(dataset, Dataset):
        labels = dataset.labels
    elif isinstance(dataset, np.ndarray):
        labels = dataset
    else:
        labels = np.stack([m.labels for m in dataset]) if len(dataset) else np.empty((0,))
    if labels.size == 0:
        raise ValueError("class_balance_stats needs a nonempty dataset")
    counts = np.bincount(labels.ravel().astype(np.int64), minlength=len(CLASS_NAMES))
    total = counts.sum()
    return {name: 100.0 * counts[c] / total for c, name in enumerate(CLASS_NAMES)}


# -- persistence --------------------------------------------------------------

def _to_png(array: np.ndarray, path: Path) -> None:
    Image.fromarray(array).save(path, format="PNG", optimize=False)


def save_dataset(datasets: dict[Domain, Dataset], spec: DatasetSpec, root: str | Path) -> Path:
    """Write PNG images, PNG label maps and a JSON-lines manifest under ``root``."""
    from .config import save_config

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for domain, data in datasets.items():
        img_dir = root / domain.value / "images"
        lbl_dir = root / domain.value / "labels"
        img_dir.mkdir(parents=True, exist_ok=True)
        lbl_dir.mkdir(parents=True, exist_ok=True)
        for i, sample_id in enumerate(data.ids):
            rgb = np.round(data.images[i].transpose(1, 2, 0) * 255.0).astype(np.uint8)
            _to_png(rgb, img_dir / f"{sample_id}.png")
            _to_png(data.labels[i], lbl_dir / f"{sample_id}.png")
            records.append({
                "id": sample_id,
                "domain": domain.value,
                "image": f"{domain.value}/images/{sample_id}.png",
                "labels": f"{domain.value}/labels/{sample_id}.png",
                "seed": data.seeds[i] if data.seeds else None,
            })
    with open(root / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    save_config(root / "dataset.cfg", data=spec)
    return root


def load_dataset(root: str | Path) -> tuple[dict[Domain, Dataset], DatasetSpec]:
    from .config import load_config

    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    spec = load_config(root / "dataset.cfg").data
    grouped: dict[Domain, list[dict]] = {d: [] for d in Domain}
    with open(manifest) as fh:
        for line in fh:
            rec = json.loads(line)
            grouped[Domain(rec["domain"])].append(rec)
    out = {}
    for domain, recs in grouped.items():
        if not recs:
            continue
        images = np.stack([
            np.asarray(Image.open(root / r["image"])).astype(np.float32).transpose(2, 0, 1) / np.float32(255.0)
            for r in recs
        ])
        labels = np.stack([np.asarray(Image.open(root / r["labels"]), np.uint8) for r in recs])
        out[domain] = Dataset(domain, images, labels, [r["id"] for r in recs], [r["seed"] for r in recs])
    return out, spec


def manifest_hash(root: str | Path) -> str:
    return hashlib.sha256((Path(root) / "manifest.jsonl").read_bytes()).hexdigest()
