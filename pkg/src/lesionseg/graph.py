"""Layer-list model description shared by both networks, and its interpreter."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import PadMode, Tensor

CONV_KINDS = ("conv", "deconv")


@dataclass(frozen=True)
class Layer:
    kind: str  # conv | deconv | relu | add | maxpool | upsample | mean_subtract
    name: str
    inputs: tuple
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 3
    dilation: int = 1
    factor: int = 1
    path: str = "main"  # "skip" for the transposed-conv links


@dataclass
class ModelGraph:
    prefix: str
    layers: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def layer(self, name: str) -> Layer:
        for lyr in self.layers:
            if lyr.name == name:
                return lyr
        raise KeyError(name)

    def param_names(self, lyr: Layer) -> tuple:
        return f"{self.prefix}{lyr.name}.weight", f"{self.prefix}{lyr.name}.bias"

    def count(self, kind: str, path: Optional[str] = None) -> int:
        return sum(1 for lyr in self.layers
                   if lyr.kind == kind and (path is None or lyr.path == path))

    def consumers(self, name: str) -> list:
        return [lyr for lyr in self.layers if name in lyr.inputs]

    def astype(self, dtype) -> "ModelGraph":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)
                  for k, v in self.params.items()}
        return ModelGraph(self.prefix, list(self.layers), params)

    def state(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: dict) -> None:
        for k, p in self.params.items():
            if k in state:
                arr = np.asarray(state[k])
                if arr.shape != p.shape:
                    raise T.ShapeError(f"{k}: expected shape {p.shape}, got {arr.shape}")
                p.data = arr.astype(p.dtype, copy=True)


def weight_shape(lyr: Layer) -> tuple:
    if lyr.kind == "conv":
        return (lyr.out_ch, lyr.in_ch, lyr.kernel, lyr.kernel)
    return (lyr.in_ch, lyr.out_ch, lyr.kernel, lyr.kernel)


def fan_in(lyr: Layer) -> float:
    taps = lyr.kernel * lyr.kernel
    if lyr.kind == "deconv":
        # stride 2: each output pixel sees a quarter of the taps on average
        return lyr.in_ch * taps / 4
    return lyr.in_ch * taps


def he_normal(shape: tuple, fan: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan)).astype(dtype)


def init_params(graph: ModelGraph, seed: int, dtype=np.float32) -> None:
    """He-normal weights and zero biases, drawn in layer order from ``seed``."""
    rng = np.random.default_rng(seed)
    for lyr in graph.layers:
        if lyr.kind not in CONV_KINDS:
            continue
        wname, bname = graph.param_names(lyr)
        graph.params[wname] = Tensor(he_normal(weight_shape(lyr), fan_in(lyr), rng, dtype),
                                     requires_grad=True, name=wname)
        graph.params[bname] = Tensor(np.zeros(lyr.out_ch, dtype=dtype), requires_grad=True, name=bname)


def validate(graph: ModelGraph) -> None:
    """Every input precedes its consumer and layer names are unique."""
    seen = {"input"}
    for lyr in graph.layers:
        for src in lyr.inputs:
            if src not in seen:
                raise ValueError(f"layer {lyr.name!r} reads {src!r} before it is produced")
        if lyr.name in seen:
            raise ValueError(f"duplicate layer name {lyr.name!r}")
        seen.add(lyr.name)


def run(graph: ModelGraph, x: Tensor, keep: tuple = ()) -> tuple:
    """Execute the graph on ``x``; returns (final output, {name: tensor} for ``keep``)."""
    env = {"input": x}
    out = x
    for lyr in graph.layers:
        args = [env[s] for s in lyr.inputs]
        if lyr.kind == "conv":
            w, b = (graph.params[n] for n in graph.param_names(lyr))
            out = T.conv2d(args[0], w, b, PadMode.SAME, lyr.dilation)
        elif lyr.kind == "deconv":
            w, b = (graph.params[n] for n in graph.param_names(lyr))
            out = T.transposed_conv2d(args[0], w, b)
        elif lyr.kind == "relu":
            out = T.relu(args[0])
        elif lyr.kind == "add":
            out = T.add(args[0], args[1])
        elif lyr.kind == "maxpool":
            out = T.max_pool2d(args[0])
        elif lyr.kind == "upsample":
            out = T.bilinear_upsample(args[0], lyr.factor)
        elif lyr.kind == "mean_subtract":
            out = T.mean_subtract(args[0])
        else:
            raise ValueError(f"unknown layer kind {lyr.kind!r}")
        env[lyr.name] = out
    return out, {k: env[k] for k in keep}
