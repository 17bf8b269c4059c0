"""Dataset ingestion, mask binarization, paired augmentation and network inputs."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import netpbm
from .tensor import interp_matrix

logger = logging.getLogger(__name__)

CANONICAL_SIZE = 512
MASK_THRESHOLD = 0.5


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) float32 in {0, 1}
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} disagree")


@dataclass(frozen=True)
class AugPolicy:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    brightness_delta: tuple = (-0.2, 0.2)
    contrast_factor: tuple = (0.8, 1.2)
    noise_sigma: tuple = (0.0, 0.05)
    crop_scale: tuple = (0.8, 1.0)

    def __post_init__(self):
        for p in (self.p_hflip, self.p_vflip):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"flip probability {p} outside [0, 1]")
        for name in ("brightness_delta", "contrast_factor", "noise_sigma", "crop_scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range ({lo}, {hi}) is not ordered")
        if self.noise_sigma[0] < 0 or self.contrast_factor[0] < 0:
            raise ValueError("noise sigma and contrast factor must be non-negative")
        if not 0 < self.crop_scale[0] <= self.crop_scale[1] <= 1:
            raise ValueError("crop_scale must lie in (0, 1]")

    @classmethod
    def identity(cls) -> "AugPolicy":
        return cls(0.0, 0.0, (0.0, 0.0), (1.0, 1.0), (0.0, 0.0), (1.0, 1.0))


@dataclass
class PairedInput:
    scanet_in: np.ndarray  # (3, S, S)
    updcnn_in: np.ndarray  # (3, S/8, S/8)
    target: np.ndarray  # (S, S) binary


def binarize_mask(gray: np.ndarray) -> np.ndarray:
    return (np.asarray(gray) >= MASK_THRESHOLD).astype(np.float32)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize of the trailing (H, W) axes."""
    h, w = image.shape[-2:]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ah = interp_matrix(h, out_h)
    aw = interp_matrix(w, out_w)
    return (ah @ image @ aw.T).astype(image.dtype)


def resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return binarize_mask(resize_bilinear(mask, out_h, out_w))


def augment(sample: Sample, policy: AugPolicy, rng_seed: int) -> Sample:
    """Random flips and a scaled crop (image and mask alike), then photometric jitter.

    Every draw happens whether or not the transform fires, so the geometric
    outcome for a seed does not depend on the photometric settings.
    """
    rng = np.random.default_rng(rng_seed)
    hflip = rng.random() < policy.p_hflip
    vflip = rng.random() < policy.p_vflip
    crop_scale = rng.uniform(*policy.crop_scale)
    corner = rng.random(2)
    brightness = rng.uniform(*policy.brightness_delta)
    contrast = rng.uniform(*policy.contrast_factor)
    sigma = rng.uniform(*policy.noise_sigma)
    noise = rng.standard_normal(sample.image.shape)

    image, mask = sample.image, sample.mask
    if hflip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if vflip:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    _, h, w = image.shape
    ch, cw = max(1, int(round(crop_scale * h))), max(1, int(round(crop_scale * w)))
    if (ch, cw) != (h, w):
        y0 = int(corner[0] * (h - ch + 1))
        x0 = int(corner[1] * (w - cw + 1))
        image = resize_bilinear(image[:, y0:y0 + ch, x0:x0 + cw], h, w)
        mask = resize_mask(mask[y0:y0 + ch, x0:x0 + cw], h, w)
    image = np.ascontiguousarray(image)
    mask = np.ascontiguousarray(mask)

    if brightness != 0:
        image = image + np.float32(brightness)
    if contrast != 1:
        mean = image.mean()
        image = mean + np.float32(contrast) * (image - mean)
    if sigma > 0:
        image = image + (sigma * noise).astype(np.float32)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return replace(sample, image=image, mask=mask)


def _canonical_then(n_in: int, n_out: int) -> np.ndarray:
    """Resampling matrix for n_in -> 512 -> n_out, composed in double precision."""
    if n_in == CANONICAL_SIZE:
        return interp_matrix(n_in, n_out)
    return interp_matrix(CANONICAL_SIZE, n_out) @ interp_matrix(n_in, CANONICAL_SIZE)


def _apply(image: np.ndarray, ah: np.ndarray, aw: np.ndarray) -> np.ndarray:
    return (ah @ image @ aw.T).astype(np.float32)


def prepare_pair(sample: Sample, size: int = 320) -> PairedInput:
    """Canonical 512x512 resample, then the scanet (S) and updcnn (S/8) views."""
    if size % 32:
        raise ValueError(f"input size {size} is not divisible by 32")
    _, h, w = sample.image.shape
    small = size // 8
    scanet_in = _apply(sample.image, _canonical_then(h, size), _canonical_then(w, size))
    updcnn_in = _apply(sample.image, _canonical_then(h, small), _canonical_then(w, small))
    mask = sample.mask
    if (h, w) != (CANONICAL_SIZE, CANONICAL_SIZE):
        mask = resize_mask(mask, CANONICAL_SIZE, CANONICAL_SIZE)
    target = resize_mask(mask, size, size)
    return PairedInput(scanet_in, updcnn_in, target)


def dataset_scan(root) -> list:
    """Ids with both ``images/<id>.ppm`` and ``masks/<id>_segmentation.pgm`` of equal size."""
    root = Path(root)
    if not root.is_dir():
        raise OSError(f"dataset directory {root} is not readable")
    img_dir, mask_dir = root / "images", root / "masks"
    images = {p.stem: p for p in img_dir.glob("*.ppm")} if img_dir.is_dir() else {}
    suffix = "_segmentation"
    masks = {p.stem[:-len(suffix)]: p for p in mask_dir.glob(f"*{suffix}.pgm")} if mask_dir.is_dir() else {}
    ids = []
    for sid in sorted(set(images) | set(masks)):
        if sid not in masks:
            logger.warning("image %s has no mask; skipped", sid)
            continue
        if sid not in images:
            logger.warning("mask %s has no image; skipped", sid)
            continue
        try:
            _, iw, ih = netpbm.read_header(images[sid])
            _, mw, mh = netpbm.read_header(masks[sid])
        except netpbm.NetpbmError as err:
            logger.warning("%s: unreadable header: %s", sid, err)
            continue
        if (iw, ih) != (mw, mh):
            logger.warning("%s: image %dx%d and mask %dx%d differ; skipped", sid, iw, ih, mw, mh)
            continue
        ids.append(sid)
    return ids


def load_sample(root, sid: str) -> Sample:
    root = Path(root)
    image = netpbm.load_image(root / "images" / f"{sid}.ppm")
    mask = binarize_mask(netpbm.load_mask(root / "masks" / f"{sid}_segmentation.pgm"))
    return Sample(image, mask, sid)


def load_dataset(root) -> list:
    return [load_sample(root, sid) for sid in dataset_scan(root)]


def write_dataset(root, samples) -> None:
    root = Path(root)
    os.makedirs(root / "images", exist_ok=True)
    os.makedirs(root / "masks", exist_ok=True)
    for s in samples:
        netpbm.save_image(root / "images" / f"{s.id}.ppm", s.image)
        netpbm.save_mask(root / "masks" / f"{s.id}_segmentation.pgm", s.mask)
