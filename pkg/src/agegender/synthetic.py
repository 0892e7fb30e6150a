"""Synthetic UTK-style image folders for demos and tests.

Images carry a learnable signal: the gender tints the colour balance and
the age bucket sets the position of a bright patch, on top of noise.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import DEFAULT_SCHEME, BucketScheme, age_to_bucket, write_pnm


def synthetic_face(age: int, gender: int, size: int = 64, rng=None, scheme: BucketScheme = DEFAULT_SCHEME,
                   signal: float = 1.0) -> np.ndarray:
    """(size, size, 3) uint8 image whose content depends on (age bucket, gender)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    img = rng.uniform(0.2, 0.6, (size, size, 3))
    tint = np.array([0.25, 0.0, -0.15]) if gender == 0 else np.array([-0.15, 0.0, 0.25])
    img += signal * tint
    b = age_to_bucket(age, scheme)
    cols = 4
    cell = size // cols
    r, c = divmod(b, cols)
    img[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell, :] += signal * 0.4
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def make_utk_folder(directory, n: int, size: int = 64, seed: int = 0, fmt: str = "png",
                    signal: float = 1.0, ages=None) -> list[Path]:
    """Write ``n`` images named ``age_gender_race_<id>.<fmt>`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n):
        age = int(ages[i]) if ages is not None else int(rng.integers(1, 111))
        gender = int(rng.integers(0, 2))
        race = int(rng.integers(0, 5))
        img = synthetic_face(age, gender, size, rng, signal=signal)
        path = directory / f"{age}_{gender}_{race}_{seed:04d}{i:06d}.{fmt}"
        if fmt in ("ppm", "pnm"):
            write_pnm(path, img)
        else:
            Image.fromarray(img).save(path)
        paths.append(path)
    return paths
