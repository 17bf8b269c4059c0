"""Finite-difference gradient suite over every differentiable op and a tiny joint model."""

from __future__ import annotations

import numpy as np

from . import boxreg
from . import tensor as T
from .tensor import Tensor, grad_check
from .trainer import Segmenter, fuse, lesion_probs

TOLERANCE = 1e-4
EPS = 1e-4


def _away_from_zero(rng, shape, margin=1e-2):
    """Uniform in [-1, 1] with |x| >= margin so ReLU kinks stay out of reach."""
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    """Shuffled values spaced 1e-2 apart so max ties stay out of reach."""
    n = int(np.prod(shape))
    return ((rng.permutation(n) - n / 2) * 1e-2 + rng.uniform(0, 1e-3, n)).reshape(shape)


def _target(rng, shape):
    return Tensor(rng.uniform(0.05, 0.95, size=shape))


def op_cases(seed: int = 0) -> dict:
    """name -> (builder, inputs) for each differentiable primitive."""
    rng = np.random.default_rng(seed)

    def t(*shape):
        return Tensor(rng.normal(size=shape))

    cases = {}
    for d in (1, 2):
        tgt = _target(rng, (2, 4, 7, 6))
        cases[f"conv2d_dilation{d}"] = (
            lambda x, k, b, d=d, tgt=tgt: T.bce_loss(T.sigmoid(T.conv2d(x, k, b, dilation=d)), tgt),
            [t(2, 3, 7, 6), t(4, 3, 3, 3), t(4)])

    tgt_up = _target(rng, (2, 4, 10, 8))
    cases["transposed_conv2d"] = (
        lambda x, k, b: T.bce_loss(T.sigmoid(T.transposed_conv2d(x, k, b)), tgt_up),
        [t(2, 3, 5, 4), t(3, 4, 3, 3), t(4)])

    tgt_bi = _target(rng, (1, 2, 12, 9))
    cases["bilinear_upsample"] = (
        lambda x: T.bce_loss(T.sigmoid(T.bilinear_upsample(x, 3)), tgt_bi), [t(1, 2, 4, 3)])

    tgt = _target(rng, (2, 3, 4, 4))
    cases["relu"] = (lambda x: T.bce_loss(T.sigmoid(T.relu(x)), tgt),
                     [Tensor(_away_from_zero(rng, (2, 3, 4, 4)))])
    cases["add"] = (lambda a, b: T.bce_loss(T.sigmoid(T.add(a, b)), tgt),
                    [t(2, 3, 4, 4), t(2, 3, 4, 4)])
    cases["sigmoid"] = (lambda x: T.bce_loss(T.sigmoid(x), tgt), [t(2, 3, 4, 4)])

    tgt_cm = _target(rng, (2, 1, 4, 4))
    cases["channel_max"] = (lambda x: T.bce_loss(T.sigmoid(T.channel_max(x)), tgt_cm),
                            [Tensor(_distinct(rng, (2, 3, 4, 4)))])

    weights = Tensor((rng.uniform(size=(2, 3, 4, 4)) > 0.3).astype(float))
    binary = Tensor((rng.uniform(size=(2, 3, 4, 4)) > 0.5).astype(float))
    cases["bce_loss"] = (lambda p: T.bce_loss(p, binary, weights),
                         [Tensor(rng.uniform(0.1, 0.9, size=(2, 3, 4, 4)))])

    tgt_mp = _target(rng, (2, 3, 3, 2))
    cases["max_downsample"] = (lambda x: T.bce_loss(T.sigmoid(T.max_pool2d(x)), tgt_mp),
                               [Tensor(_distinct(rng, (2, 3, 6, 4)))])

    head = boxreg.init_box_head(4, seed=seed, dtype=np.float64)
    names = sorted(head)
    P, B, I = boxreg.Label.POSITIVE, boxreg.Label.BACKGROUND, boxreg.Label.IGNORE
    boxes = [[boxreg.Box(0, 0, 64, 32), boxreg.Box(32, 32, 32, 64), boxreg.Box(0, 0, 32, 32)],
             [boxreg.Box(32, 0, 32, 32)]]
    labels = [[boxreg.BoxLabel(P, 0.9), boxreg.BoxLabel(B, 0.0), boxreg.BoxLabel(I, 0.5)],
              [boxreg.BoxLabel(P, 0.8)]]

    def box_builder(feat, *params):
        return boxreg.box_loss(feat, dict(zip(names, params)), boxes, labels)

    cases["box_loss"] = (box_builder, [t(2, 4, 3, 3)] + [head[k] for k in names])
    return cases


JOINT_PARAMS = ("scanet.backbone.conv1.weight", "scanet.backbone.conv13.weight",
                "scanet.head.conv1.weight", "scanet.head.conv2.bias",
                "updcnn.s1.g1.conv3.weight", "updcnn.skip_a.weight", "updcnn.deconv2.weight",
                "updcnn.deconv3.bias", "updcnn.out.weight", "boxreg.conv.weight", "boxreg.fc.weight")


def joint_case(seed: int = 0, lam: float = boxreg.DEFAULT_LAMBDA):
    """Full fused loss at width 1/16: scanet on 1x3x64x64, updcnn on 1x3x8x8, plus box term."""
    rng = np.random.default_rng(seed)
    model = Segmenter.build(64, "1/16", seed=seed, dtype=np.float64)
    image = Tensor(rng.uniform(0, 1, size=(1, 3, 64, 64)))
    small = Tensor(rng.uniform(0, 1, size=(1, 3, 8, 8)))
    target = Tensor((rng.uniform(size=(1, 1, 64, 64)) > 0.5).astype(float))
    P, B = boxreg.Label.POSITIVE, boxreg.Label.BACKGROUND
    boxes = [[boxreg.Box(0, 0, 32, 64), boxreg.Box(32, 32, 32, 32)]]
    labels = [[boxreg.BoxLabel(P, 0.8), boxreg.BoxLabel(B, 0.05)]]

    def builder(sc_in, up_in, *_params):
        p_sc, p_up, hm = lesion_probs(model, sc_in, up_in)
        seg = T.bce_loss(fuse(p_sc, p_up), target)
        box = boxreg.box_loss(hm.features, model.box_head, boxes, labels)
        return boxreg.combine_loss(seg, box, lam)

    params = model.params()
    return builder, [image, small] + [params[k] for k in JOINT_PARAMS]


def gradient_suite(seed: int = 0, joint_coords: int = 12) -> dict:
    """Max relative gradient error per case; every entry should be below TOLERANCE."""
    results = {}
    for name, (builder, inputs) in op_cases(seed).items():
        results[name] = grad_check(builder, inputs, EPS)
    builder, inputs = joint_case(seed)
    results["joint_model"] = grad_check(builder, inputs, EPS, max_coords=joint_coords, seed=seed)
    return results
