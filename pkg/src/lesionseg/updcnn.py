"""The dilated/transposed-convolution branch: 8x output from a small input."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Union

import numpy as np

from . import graph as G
from .graph import Layer, ModelGraph
from .tensor import ShapeError, Tape, Tensor

MIN_WIDTH = 4
NUM_STAGES = 3
LESION_CHANNEL = 1


def as_fraction(value: Union[str, float, int, Fraction]) -> Fraction:
    frac = Fraction(str(value)).limit_denominator(1 << 16)
    if frac <= 0:
        raise ValueError(f"width_scale must be positive, got {value!r}")
    return frac


def scaled_width(width: int, scale) -> int:
    """``width * scale`` rounded down to a multiple of 4, never below 4."""
    raw = Fraction(width) * as_fraction(scale)
    return max(MIN_WIDTH, int(raw // MIN_WIDTH) * MIN_WIDTH)


@dataclass(frozen=True)
class UpdcnnConfig:
    in_channels: int = 3
    base_width: int = 64
    width_step: int = 32
    group_len: int = 3
    num_groups: int = 6
    deconv_width: int = 256
    out_filters: int = 2
    dilation: int = 2
    width_scale: Union[str, float, Fraction] = 1

    def validate(self) -> None:
        if self.num_groups != 2 * NUM_STAGES or self.group_len < 1:
            raise ValueError("updcnn needs six groups (two per stage) of at least one conv")
        if self.out_filters != 2:
            raise ValueError("updcnn emits exactly 2 output filters")
        if self.dilation < 1 or self.in_channels < 1:
            raise ValueError("dilation and in_channels must be positive")
        top = self.base_width + (self.group_len * 2 - 1) * self.width_step
        if self.deconv_width < top:
            raise ValueError(f"deconv_width {self.deconv_width} below widest conv {top}")
        as_fraction(self.width_scale)


def width_schedule(cfg: UpdcnnConfig) -> list:
    """Per stage: ``(conv widths, deconv width)`` after scaling."""
    n = cfg.group_len * 2
    convs = [scaled_width(cfg.base_width + i * cfg.width_step, cfg.width_scale) for i in range(n)]
    deconv = scaled_width(cfg.deconv_width, cfg.width_scale)
    return [(list(convs), deconv) for _ in range(NUM_STAGES)]


def build_updcnn(cfg: UpdcnnConfig = UpdcnnConfig(), seed: int = 0, dtype=np.float32) -> ModelGraph:
    cfg.validate()
    g = ModelGraph(prefix="updcnn.")
    layers = g.layers
    prev, ch = "input", cfg.in_channels
    skip_src = {}
    for s, (widths, dwidth) in enumerate(width_schedule(cfg), start=1):
        for grp in (1, 2):
            for c in range(1, cfg.group_len + 1):
                w = widths[(grp - 1) * cfg.group_len + c - 1]
                name = f"s{s}.g{grp}.conv{c}"
                dil = cfg.dilation if c == cfg.group_len else 1
                layers.append(Layer("conv", name, (prev,), ch, w, 3, dil))
                layers.append(Layer("relu", name + ".relu", (name,)))
                prev, ch = name + ".relu", w
            if grp == 1:
                skip_src[s] = (prev, ch)
        layers.append(Layer("deconv", f"deconv{s}", (prev,), ch, dwidth))
        layers.append(Layer("relu", f"deconv{s}.relu", (f"deconv{s}",)))
        prev, ch = f"deconv{s}.relu", dwidth
        if s < NUM_STAGES:
            link = "skip_" + "ab"[s - 1]
            src, src_ch = skip_src[s]
            layers.append(Layer("deconv", link, (src,), src_ch, dwidth, path="skip"))
            layers.append(Layer("relu", link + ".relu", (link,), path="skip"))
            layers.append(Layer("add", f"join{s}", (prev, link + ".relu")))
            prev = f"join{s}"
    layers.append(Layer("conv", "out", (prev,), ch, cfg.out_filters, 3, 1))
    G.validate(g)
    G.init_params(g, seed, dtype)
    return g


def updcnn_forward(model: ModelGraph, batch: Tensor, record: bool = False):
    """Run the branch; output is N x 2 x 8H x 8W logits (channel 1 = lesion).

    With ``record`` a fresh tape is opened and ``(output, tape)`` returned.
    """
    if batch.data.ndim != 4 or min(batch.shape[2:]) < 5:
        raise ShapeError(f"updcnn needs N,C,H,W input with H,W >= 5, got {batch.shape}")
    if record:
        with Tape() as tape:
            out, _ = G.run(model, batch)
        return out, tape
    out, _ = G.run(model, batch)
    return out
