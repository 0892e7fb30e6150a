"""UTK-Face style ingestion: filename labels, age buckets, deterministic splits, image batches.

UTK-Face names files ``age_gender_race_timestamp.jpg`` with gender 0 = male,
1 = female.  Everything random here (split membership, flip augmentation)
is keyed by filename and seed, never by load order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

GENDERS = ("male", "female")
MIN_AGE, MAX_AGE = 1, 116
NORM_MEAN, NORM_STD = 0.5, 0.5
IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".ppm", ".pgm", ".pnm"}


class DatasetError(RuntimeError):
    pass


class FilenameError(ValueError):
    pass


class ImageDecodeError(ValueError):
    pass


# -- age buckets ---------------------------------------------------------------

@dataclass(frozen=True)
class BucketScheme:
    """Decade buckets: internal index i covers [i*width, (i+1)*width); ages past the end clamp."""

    width_years: int = 10
    num_buckets: int = 11
    display_offset: int = 1

    @property
    def max_age(self) -> int:
        return self.width_years * self.num_buckets - 1

    def label(self, bucket: int) -> str:
        lo = bucket * self.width_years
        return f"{lo}-{lo + self.width_years}"

    def labels(self) -> list[str]:
        return [self.label(b) for b in range(self.num_buckets)]

    def display_index(self, bucket: int) -> int:
        return bucket + self.display_offset


DEFAULT_SCHEME = BucketScheme()


def age_to_bucket(age, scheme: BucketScheme = DEFAULT_SCHEME):
    """Internal (0-based) bucket of ``age``; works elementwise on arrays."""
    a = np.asarray(age)
    if np.any(a < 0):
        raise ValueError(f"age must be non-negative, got {age}")
    b = np.minimum(a, scheme.max_age) // scheme.width_years
    return int(b) if b.ndim == 0 else b.astype(np.int64)


# -- records -----------------------------------------------------------------------

@dataclass(frozen=True)
class SampleRecord:
    path: str
    age_years: int
    gender: int  # 0 male, 1 female
    bucket: int

    @property
    def name(self) -> str:
        return os.path.basename(self.path)

    @property
    def gender_name(self) -> str:
        return GENDERS[self.gender]


def parse_utk_filename(name: str) -> tuple[int, int]:
    """Return (age, gender) from ``age_gender_race_*``; the race field is checked but unused."""
    base = os.path.basename(name)
    parts = base.split("_")
    if len(parts) < 3:
        raise FilenameError(f"{base!r}: expected age_gender_race_... fields")
    try:
        age, gender, _race = (int(p) for p in parts[:3])
    except ValueError:
        raise FilenameError(f"{base!r}: leading fields are not integers") from None
    if gender not in (0, 1):
        raise FilenameError(f"{base!r}: gender field must be 0 or 1, got {gender}")
    if age < 0:
        raise FilenameError(f"{base!r}: negative age")
    return age, gender


@dataclass
class Census:
    total: int
    male: int
    female: int
    by_bucket: list
    skipped: int
    skipped_names: list = field(default_factory=list)

    @property
    def largest_bucket(self) -> int:
        return int(np.argmax(self.by_bucket))

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "male": self.male,
            "female": self.female,
            "by_bucket": list(self.by_bucket),
            "skipped": self.skipped,
            "skipped_names": list(self.skipped_names),
        }


def scan_dataset(directory, scheme: BucketScheme = DEFAULT_SCHEME) -> tuple[list[SampleRecord], Census]:
    """Parse every image file in ``directory`` (non-recursive, sorted by name).

    Malformed names are skipped with a warning and counted in the census.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"dataset directory {directory} does not exist")
    records, skipped = [], []
    for entry in sorted(os.scandir(directory), key=lambda e: e.name):
        if not entry.is_file() or Path(entry.name).suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        try:
            age, gender = parse_utk_filename(entry.name)
            if not MIN_AGE <= age <= MAX_AGE:
                raise FilenameError(f"{entry.name!r}: age {age} outside [{MIN_AGE}, {MAX_AGE}]")
        except FilenameError as exc:
            logger.warning("skipping %s", exc)
            skipped.append(entry.name)
            continue
        records.append(SampleRecord(str(directory / entry.name), age, gender, age_to_bucket(age, scheme)))
    if not records:
        raise DatasetError(f"no usable UTK-style images in {directory}")
    genders = Counter(r.gender for r in records)
    buckets = Counter(r.bucket for r in records)
    census = Census(
        total=len(records),
        male=genders[0],
        female=genders[1],
        by_bucket=[buckets[b] for b in range(scheme.num_buckets)],
        skipped=len(skipped),
        skipped_names=skipped,
    )
    return records, census


# -- splitting -----------------------------------------------------------------------

def _unit_hash(name: str, seed: int, salt: str = "split") -> float:
    digest = hashlib.sha256(f"{salt}:{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2.0**64


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int
    ratios: tuple

    def partition(self, name: str) -> list:
        if name not in ("train", "val", "test"):
            raise KeyError(f"unknown partition {name!r}")
        return getattr(self, name)

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "train": [r.name for r in self.train],
            "val": [r.name for r in self.val],
            "test": [r.name for r in self.test],
        }


def split_dataset(records: Sequence[SampleRecord], seed: int = 0, ratios=(0.8, 0.1, 0.1)) -> DatasetSplit:
    """Assign each record by a hash of (seed, filename); independent of record order.

    Each partition keeps the records in filename order.
    """
    r = np.asarray(ratios, dtype=float)
    if r.shape != (3,) or np.any(r < 0) or r.sum() <= 0:
        raise ValueError(f"ratios must be three non-negative numbers, got {ratios}")
    cut1, cut2 = r[0] / r.sum(), (r[0] + r[1]) / r.sum()
    parts = ([], [], [])
    for rec in sorted(records, key=lambda x: x.name):
        u = _unit_hash(rec.name, seed)
        parts[0 if u < cut1 else 1 if u < cut2 else 2].append(rec)
    return DatasetSplit(*parts, seed=seed, ratios=tuple(float(x) for x in ratios))


def subsample(records: Sequence[SampleRecord], n: int, seed: int = 0) -> list[SampleRecord]:
    """The ``n`` records with the smallest seeded filename hash, in filename order."""
    chosen = sorted(records, key=lambda r: _unit_hash(r.name, seed, "subset"))[:n]
    return sorted(chosen, key=lambda r: r.name)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- image decoding ------------------------------------------------------------------

def _pnm_tokens(buf: bytes, count: int, pos: int) -> tuple[list[int], int]:
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageDecodeError("truncated PNM header")
        out.append(int(buf[start:pos]))
    return out, pos + 1


def read_pnm(path) -> np.ndarray:
    """Decode binary PGM (P5) / PPM (P6) to uint8 or uint16 array, (H, W) or (H, W, 3).

    Raw sample values are returned; divide by :func:`pnm_maxval` to scale.
    """
    arr, _ = _read_pnm(Path(path).read_bytes())
    return arr


def pnm_maxval(path) -> int:
    return _read_pnm(Path(path).read_bytes())[1]


def _read_pnm(buf: bytes) -> tuple[np.ndarray, int]:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageDecodeError(f"not a binary PGM/PPM (magic {magic!r})")
    (w, h, maxval), pos = _pnm_tokens(buf, 3, 2)
    if not 0 < maxval < 65536:
        raise ImageDecodeError(f"bad PNM maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = w * h * channels
    payload = buf[pos:pos + n * dtype.itemsize]
    if len(payload) != n * dtype.itemsize:
        raise ImageDecodeError("truncated PNM payload")
    arr = np.frombuffer(payload, dtype=dtype).astype(np.uint16 if maxval > 255 else np.uint8)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape), maxval


def write_pnm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Write a (H, W) array as P5 or a (H, W, 3) array as P6."""
    image = np.asarray(image)
    if image.ndim == 2:
        magic, (h, w) = b"P5", image.shape
    elif image.ndim == 3 and image.shape[2] == 3:
        magic, (h, w) = b"P6", image.shape[:2]
    else:
        raise ValueError(f"PNM image must be (H, W) or (H, W, 3), got {image.shape}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    header = magic + f"\n{w} {h}\n{maxval}\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(image, dtype=dtype).tobytes())


def decode_image(path) -> np.ndarray:
    """Any supported file -> float64 (H, W, 3) RGB in [0, 1]."""
    path = str(path)
    try:
        if Path(path).suffix.lower() in (".ppm", ".pgm", ".pnm"):
            with open(path, "rb") as fh:
                raw, maxval = _read_pnm(fh.read())
            img = raw.astype(np.float64) / maxval
        else:
            with Image.open(path) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError, ImageDecodeError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return img


def resize_bilinear(img: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """(H, W, 3) float image -> (h, w, 3) via PIL's bilinear filter (antialiased when shrinking)."""
    h, w = hw
    if img.shape[:2] == (h, w):
        return img.copy()
    chans = [
        np.asarray(Image.fromarray(img[:, :, c].astype(np.float32), mode="F").resize((w, h), Image.BILINEAR))
        for c in range(img.shape[2])
    ]
    return np.stack(chans, axis=2).astype(np.float64)


@lru_cache(maxsize=8192)
def _load_normalized(path: str, h: int, w: int) -> np.ndarray:
    img = resize_bilinear(decode_image(path), (h, w))
    chw = np.ascontiguousarray(img.transpose(2, 0, 1))
    out = (chw - NORM_MEAN) / NORM_STD
    out.flags.writeable = False
    return out


def clear_image_cache() -> None:
    _load_normalized.cache_clear()


def load_image(path, target_hw: tuple[int, int]) -> np.ndarray:
    """Decoded, resized, normalised (3, H, W) float64 image (cached)."""
    return _load_normalized(str(path), int(target_hw[0]), int(target_hw[1]))


def flip_decision(name: str, seed: int, epoch: int) -> bool:
    return _unit_hash(name, seed, f"flip{epoch}") < 0.5


@dataclass
class Batch:
    images: np.ndarray
    gender: np.ndarray
    bucket: np.ndarray
    records: list

    def __len__(self):
        return len(self.records)


def load_batch(records: Sequence[SampleRecord], target_hw, augment: bool = False, seed: int = 0,
               epoch: int = 0, dtype=np.float32) -> Batch:
    """Decode ``records`` into a (N, 3, H, W) batch normalised to mean 0.5 / std 0.5.

    Undecodable files are skipped with a warning.  With ``augment`` each image
    is flipped horizontally with probability 1/2, decided by (name, seed, epoch).
    """
    imgs, kept = [], []
    for rec in records:
        try:
            img = load_image(rec.path, target_hw)
        except ImageDecodeError as exc:
            logger.warning("skipping %s", exc)
            continue
        if augment and flip_decision(rec.name, seed, epoch):
            img = img[:, :, ::-1]
        imgs.append(img)
        kept.append(rec)
    h, w = target_hw
    images = np.stack(imgs).astype(dtype) if imgs else np.zeros((0, 3, h, w), dtype=dtype)
    return Batch(
        images=images,
        gender=np.array([r.gender for r in kept], dtype=np.int64),
        bucket=np.array([r.bucket for r in kept], dtype=np.int64),
        records=kept,
    )


def iter_batches(records: Sequence[SampleRecord], batch_size: int, target_hw, augment: bool = False,
                 seed: int = 0, epoch: int = 0, dtype=np.float32) -> Iterator[Batch]:
    """Consecutive batches in the given order; the last may be short."""
    for start in range(0, len(records), batch_size):
        batch = load_batch(records[start:start + batch_size], target_hw, augment, seed, epoch, dtype)
        if len(batch):
            yield batch


def hflip(images: np.ndarray) -> np.ndarray:
    """Horizontal flip of (..., H, W) images."""
    return np.ascontiguousarray(images[..., ::-1])
