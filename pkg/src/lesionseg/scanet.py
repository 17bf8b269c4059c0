"""VGG-16-shaped fully convolutional branch with a coarse heatmap head."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

import numpy as np

from . import graph as G
from . import tensor as T
from .graph import Layer, ModelGraph
from .tensor import ShapeError, Tape, Tensor
from .updcnn import as_fraction, scaled_width

VGG16_STAGES = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))
DOWNSAMPLE = 32


class PretrainedLoadError(ValueError):
    """A pretrained archive does not fit the backbone."""


@dataclass(frozen=True)
class ScanetConfig:
    stages: tuple = VGG16_STAGES
    head_width: int = 256
    width_scale: Union[str, float, Fraction] = 1
    input_size: int = 320
    in_channels: int = 3

    def validate(self) -> None:
        if self.input_size % DOWNSAMPLE:
            raise ValueError(f"input_size {self.input_size} not divisible by {DOWNSAMPLE}")
        if len(self.stages) != 5:
            raise ValueError("scanet has five downsampling stages")
        as_fraction(self.width_scale)


@dataclass
class Heatmap:
    coarse: Tensor  # N,1,H/32,W/32 logits
    restored: Tensor  # N,1,H,W logits
    features: Tensor  # backbone output, consumed by the box regularizer


def backbone_width(cfg: ScanetConfig) -> int:
    return scaled_width(cfg.stages[-1][-1], cfg.width_scale)


def build_scanet(cfg: ScanetConfig = ScanetConfig(), seed: int = 0,
                 pretrained: Optional[dict] = None, dtype=np.float32) -> ModelGraph:
    """Backbone convs + 5 max-downsamples, a two-conv head, then x32 restore.

    ``pretrained`` maps ``scanet.backbone.convK.{weight,bias}`` names to
    arrays; any name outside the backbone or any shape mismatch is rejected.
    """
    cfg.validate()
    g = ModelGraph(prefix="scanet.")
    layers = g.layers
    layers.append(Layer("mean_subtract", "mean_subtract", ("input",)))
    prev, ch, k = "mean_subtract", cfg.in_channels, 0
    for s, widths in enumerate(cfg.stages, start=1):
        for width in widths:
            k += 1
            w = scaled_width(width, cfg.width_scale)
            name = f"backbone.conv{k}"
            layers.append(Layer("conv", name, (prev,), ch, w, 3))
            layers.append(Layer("relu", name + ".relu", (name,)))
            prev, ch = name + ".relu", w
        layers.append(Layer("maxpool", f"backbone.pool{s}", (prev,)))
        prev = f"backbone.pool{s}"
    head = scaled_width(cfg.head_width, cfg.width_scale)
    layers.append(Layer("conv", "head.conv1", (prev,), ch, head, 3))
    layers.append(Layer("relu", "head.conv1.relu", ("head.conv1",)))
    layers.append(Layer("conv", "head.conv2", ("head.conv1.relu",), head, 1, 1))
    layers.append(Layer("upsample", "restore", ("head.conv2",), factor=DOWNSAMPLE))
    G.validate(g)
    G.init_params(g, seed, dtype)
    if pretrained is not None:
        load_backbone(g, pretrained)
    return g


def load_backbone(g: ModelGraph, archive: dict) -> None:
    for name, arr in archive.items():
        if not name.startswith("scanet.backbone.") or name not in g.params:
            raise PretrainedLoadError(f"unexpected pretrained parameter {name!r}")
        arr = np.asarray(arr)
        if arr.shape != g.params[name].shape:
            raise PretrainedLoadError(
                f"pretrained parameter {name!r} has shape {arr.shape}, "
                f"expected {g.params[name].shape}")
    for name, arr in archive.items():
        g.params[name].data = np.asarray(arr).astype(g.params[name].dtype, copy=True)


def mean_subtract(image: Tensor) -> Tensor:
    return T.mean_subtract(image)


def scanet_forward(model: ModelGraph, batch: Tensor, record: bool = False):
    """Run the branch and return a :class:`Heatmap` (plus tape with ``record``)."""
    if batch.data.ndim != 4 or batch.shape[2] % DOWNSAMPLE or batch.shape[3] % DOWNSAMPLE:
        raise ShapeError(f"scanet needs H, W divisible by {DOWNSAMPLE}, got {batch.shape}")

    def go():
        restored, kept = G.run(model, batch, keep=("backbone.pool5", "head.conv2"))
        return Heatmap(kept["head.conv2"], restored, kept["backbone.pool5"])

    if record:
        with Tape() as tape:
            hm = go()
        return hm, tape
    return go()
