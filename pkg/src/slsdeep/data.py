"""Image/mask ingestion, resizing, random scale + rotation augmentation, batching."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

MASK_THRESHOLD = 128


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    image: str
    mask: Optional[str]
    split: str = "train"


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    source: Optional[str] = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def split(self, name: str) -> "Manifest":
        return Manifest([r for r in self.records if r.split == name], self.source)


def load_manifest(path, split: str = "train") -> Manifest:
    """Parse a JSON Lines manifest of ``{"image": ..., "mask": ...}`` objects.

    Relative paths resolve against the manifest's directory. A record may carry
    its own ``"split"``; otherwise ``split`` applies. Masks are mandatory in
    every split except ``"infer"``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    records = []
    seen: dict = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or not isinstance(obj.get("image"), str) or not obj["image"]:
                raise ManifestError(f"{path}:{lineno}: record needs a non-empty string 'image'")
            rec_split = obj.get("split", split)
            mask = obj.get("mask")
            if mask is not None and (not isinstance(mask, str) or not mask):
                raise ManifestError(f"{path}:{lineno}: 'mask' must be a non-empty string or null")
            if mask is None and rec_split != "infer":
                raise ManifestError(f"{path}:{lineno}: missing mask path in split {rec_split!r}")
            image = str(base / obj["image"])
            key = (rec_split, image)
            if key in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate image {obj['image']!r} in split {rec_split!r} (first at line {seen[key]})"
                )
            seen[key] = lineno
            records.append(ManifestRecord(image, str(base / mask) if mask else None, rec_split))
    return Manifest(records, str(path))


def write_manifest(path, records: Sequence[ManifestRecord]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            obj = {"image": r.image, "mask": r.mask}
            if r.split != "train":
                obj["split"] = r.split
            fh.write(json.dumps(obj) + "\n")


# --------------------------------------------------------------------------
# Samples


@dataclass
class Sample:
    image: np.ndarray  # (1, 3, H, W) float32 in [0, 1]
    mask: Optional[np.ndarray]  # (1, 1, H, W) float32 in {0, 1}
    provenance: dict = field(default_factory=dict)


def read_image(path) -> Image.Image:
    try:
        with Image.open(path) as im:
            im.load()
            return im.convert("RGB")
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def read_mask(path) -> Image.Image:
    try:
        with Image.open(path) as im:
            im.load()
            return im.convert("L")
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc


def image_to_array(im: Image.Image, size: Optional[tuple] = None) -> np.ndarray:
    """RGB PIL image -> (1, 3, H, W) float32 in [0, 1], bilinear-resized to ``size`` (H, W)."""
    if size is not None and im.size != (size[1], size[0]):
        im = im.resize((size[1], size[0]), Image.BILINEAR)
    arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)[None]


def mask_to_array(im: Image.Image, size: Optional[tuple] = None) -> np.ndarray:
    """Grayscale mask -> (1, 1, H, W) float32 {0, 1}; nearest-neighbour resize, threshold 128."""
    if size is not None and im.size != (size[1], size[0]):
        im = im.resize((size[1], size[0]), Image.NEAREST)
    arr = np.asarray(im)
    return (arr >= MASK_THRESHOLD).astype(np.float32)[None, None]


def load_sample(record: ManifestRecord, target_size: tuple) -> Sample:
    image = read_image(record.image)
    prov = {"image": record.image, "mask": record.mask, "source_size": [image.size[1], image.size[0]]}
    mask = mask_to_array(read_mask(record.mask), target_size) if record.mask else None
    return Sample(image_to_array(image, target_size), mask, prov)


# --------------------------------------------------------------------------
# Augmentation


@dataclass
class AugmentConfig:
    scale_range: tuple = (0.5, 1.5)
    rotation_range_deg: tuple = (-10.0, 10.0)
    enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        self.rotation_range_deg = tuple(self.rotation_range_deg)
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale range must be positive and ordered, got {self.scale_range}")
        if self.rotation_range_deg[0] > self.rotation_range_deg[1]:
            raise ValueError(f"rotation range must be ordered, got {self.rotation_range_deg}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        d["rotation_range_deg"] = list(self.rotation_range_deg)
        return d


def augment_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(index)]))


def draw_augmentation(rng: np.random.Generator, config: AugmentConfig) -> tuple:
    scale = float(rng.uniform(*config.scale_range))
    angle = float(rng.uniform(*config.rotation_range_deg))
    return scale, angle


def _warp(plane: np.ndarray, matrix: np.ndarray, offset: np.ndarray, order: int) -> np.ndarray:
    return ndimage.affine_transform(plane, matrix, offset=offset, output_shape=plane.shape, order=order,
                                    mode="constant", cval=0.0, prefilter=False)


def augment(sample: Sample, config: AugmentConfig, draw: tuple) -> Sample:
    """Scale by ``s`` and rotate by ``theta`` degrees about the image centre.

    The output keeps the input size: a zoomed-in image is centre-cropped, a
    zoomed-out one is zero-padded. Images use bilinear sampling, masks nearest
    neighbour; pixels with no source are 0 in both.
    """
    scale, angle = draw
    prov = dict(sample.provenance, scale=scale, rotation_deg=angle)
    if scale == 1.0 and angle == 0.0:
        return Sample(sample.image, sample.mask, prov)
    h, w = sample.image.shape[-2:]
    t = math.radians(angle)
    cos, sin = math.cos(t), math.sin(t)
    # Output pixel -> source pixel: inverse rotation, then inverse scale, about the centre.
    matrix = np.array([[cos, sin], [-sin, cos]]) / scale
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - matrix @ centre
    image = np.stack([_warp(sample.image[0, c].astype(np.float64), matrix, offset, 1)
                      for c in range(sample.image.shape[1])])
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
    mask = None
    if sample.mask is not None:
        mask = _warp(sample.mask[0, 0].astype(np.float64), matrix, offset, 0)
        mask = (mask >= 0.5).astype(np.float32)[None, None]
    return Sample(image, mask, prov)


# --------------------------------------------------------------------------
# Datasets and batching


class ManifestDataset:
    """Samples read from disk on demand, resized to ``target_size``."""

    def __init__(self, manifest: Manifest, target_size: tuple):
        self.manifest = manifest
        self.target_size = tuple(target_size)

    def __len__(self) -> int:
        return len(self.manifest)

    def name(self, i: int) -> str:
        return self.manifest[i].image

    def load(self, i: int) -> Sample:
        return load_sample(self.manifest[i], self.target_size)


class ArrayDataset:
    """In-memory samples: images (n, 3, H, W) in [0, 1], masks (n, 1, H, W) or (n, H, W)."""

    def __init__(self, images: np.ndarray, masks: Optional[np.ndarray] = None, names: Optional[Sequence[str]] = None):
        self.images = np.asarray(images, dtype=np.float32)
        if masks is not None:
            masks = np.asarray(masks, dtype=np.float32)
            if masks.ndim == 3:
                masks = masks[:, None]
        self.masks = masks
        self.names = list(names) if names is not None else [f"sample{i}" for i in range(len(self.images))]

    def __len__(self) -> int:
        return len(self.images)

    def name(self, i: int) -> str:
        return self.names[i]

    def load(self, i: int) -> Sample:
        mask = self.masks[i:i + 1] if self.masks is not None else None
        return Sample(self.images[i:i + 1], mask, {"image": self.names[i]})


def epoch_order(n: int, shuffle_seed: Optional[int], epoch: int) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng(np.random.SeedSequence([int(shuffle_seed), int(epoch)])).permutation(n)


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def batches(dataset, batch_size: int = 16, shuffle_seed: Optional[int] = None,
            augment_config: Optional[AugmentConfig] = None, epoch: int = 0, start_batch: int = 0,
            workers: int = 1) -> Iterator[tuple]:
    """Yield ``(images, masks, provenance)`` for one epoch.

    Order and augmentation draws depend only on (seeds, epoch, sample index),
    so output is the same for any ``workers`` count and ``start_batch`` resumes
    mid-epoch exactly.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(len(dataset), shuffle_seed, epoch)

    def prepare(i):
        i = int(i)
        try:
            sample = dataset.load(i)
        except OSError as exc:
            raise OSError(f"failed to load sample {dataset.name(i)}: {exc}") from exc
        if augment_config is not None and augment_config.enabled:
            draw = draw_augmentation(augment_rng(augment_config.seed, epoch, i), augment_config)
            sample = augment(sample, augment_config, draw)
        return sample

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for b in range(start_batch, num_batches(len(order), batch_size)):
            idx = order[b * batch_size:(b + 1) * batch_size]
            samples = list(pool.map(prepare, idx)) if pool else [prepare(i) for i in idx]
            images = np.concatenate([s.image for s in samples])
            masks = None if samples[0].mask is None else np.concatenate([s.mask for s in samples])
            yield images, masks, [s.provenance for s in samples]
    finally:
        if pool:
            pool.shutdown()


# --------------------------------------------------------------------------
# Synthetic data


def disk_mask(size: int, radius: float, centre: Optional[tuple] = None) -> np.ndarray:
    """(size, size) float32 disk of ones."""
    cy, cx = centre if centre is not None else ((size - 1) / 2.0, (size - 1) / 2.0)
    yy, xx = np.mgrid[0:size, 0:size]
    return (((yy - cy) ** 2 + (xx - cx) ** 2) <= radius ** 2).astype(np.float32)


def synthetic_lesion(size: int, rng: np.random.Generator, radius: Optional[float] = None,
                     centre: Optional[tuple] = None) -> tuple:
    """A dark disk on a lighter noisy background: (image (3, H, W), mask (1, H, W))."""
    if radius is None:
        radius = rng.uniform(0.15, 0.3) * size
    if centre is None:
        centre = tuple(rng.uniform(0.35, 0.65, size=2) * (size - 1))
    mask = disk_mask(size, radius, centre)
    skin = np.array([0.85, 0.65, 0.55], dtype=np.float32)[:, None, None]
    lesion = np.array([0.35, 0.2, 0.15], dtype=np.float32)[:, None, None]
    image = skin * (1 - mask) + lesion * mask
    image = image + rng.normal(0, 0.03, size=image.shape).astype(np.float32)
    return np.clip(image, 0, 1).astype(np.float32), mask[None]


def write_synthetic_dataset(directory, n: int, size: int = 64, seed: int = 0, split: str = "train",
                            manifest_name: Optional[str] = None) -> Path:
    """Write ``n`` synthetic image/mask PNG pairs plus a manifest; return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        image, mask = synthetic_lesion(size, rng)
        img_name, mask_name = f"{split}_{i:04d}.png", f"{split}_{i:04d}_mask.png"
        Image.fromarray(np.round(image.transpose(1, 2, 0) * 255).astype(np.uint8), "RGB").save(directory / img_name)
        Image.fromarray((mask[0] * 255).astype(np.uint8), "L").save(directory / mask_name)
        records.append(ManifestRecord(img_name, mask_name, "train"))
    path = directory / (manifest_name or f"{split}.jsonl")
    write_manifest(path, records)
    return path
