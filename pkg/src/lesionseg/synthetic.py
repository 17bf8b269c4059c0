"""Synthetic lesion images: a filled ellipse on a textured background."""

from __future__ import annotations

import numpy as np

from .data import Sample


def ellipse_sample(rng: np.random.Generator, size: int = 64, sid: str = "") -> Sample:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # background: smooth stripes plus pixel noise, mid-dark skin tone
    base = rng.uniform(0.25, 0.4, size=3)
    freq = rng.uniform(0.1, 0.3, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.05 * np.sin(freq[0] * xx + freq[1] * yy + phase)
    image = base[:, None, None] + stripes[None] + rng.normal(0, 0.02, (3, size, size))

    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    ay, ax = rng.uniform(0.18, 0.32, size=2) * size
    inside = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
    intensity = rng.uniform(0.65, 0.9)
    tint = np.array([1.0, 0.85, 0.75]) * intensity
    image = np.where(inside[None], tint[:, None, None] + rng.normal(0, 0.02, (3, size, size)), image)
    return Sample(np.clip(image, 0, 1).astype(np.float32), inside.astype(np.float32), sid)


def ellipse_dataset(n: int = 20, size: int = 64, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    return [ellipse_sample(rng, size, f"synth{i:03d}") for i in range(n)]
