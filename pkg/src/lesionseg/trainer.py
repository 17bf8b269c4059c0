"""Three-phase training, max fusion, thresholded prediction and threshold tuning."""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from . import boxreg
from . import tensor as T
from .checkpoint import Checkpoint
from .data import AugPolicy, Sample, augment, prepare_pair
from .graph import ModelGraph
from .metrics import jaccard
from .scanet import ScanetConfig, backbone_width, build_scanet, scanet_forward
from .tensor import Tape, Tensor
from .updcnn import LESION_CHANNEL, UpdcnnConfig, as_fraction, build_updcnn, updcnn_forward

logger = logging.getLogger(__name__)

LOG_FIELDS = ("phase", "epoch", "step", "seg_loss", "box_loss", "total")


class Phase(enum.Enum):
    SCANET_ONLY = "scanet"
    UPDCNN_ONLY = "updcnn"
    JOINT = "joint"


class TrainingError(ValueError):
    pass


def default_grid() -> list:
    return [round(0.05 * i, 2) for i in range(1, 20)]


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs_scanet: int = 1
    epochs_updcnn: int = 1
    epochs_joint: int = 1
    batch_size: int = 4
    lambda_box: float = boxreg.DEFAULT_LAMBDA
    boxes_per_image: int = 12
    seed: int = 0
    size: int = 320
    width_scale: str = "1"
    augment: bool = True
    threshold_grid: list = field(default_factory=default_grid)

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lambda_box < 0:
            raise ValueError("lambda_box must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if min(self.epochs_scanet, self.epochs_updcnn, self.epochs_joint) < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.size % 32:
            raise ValueError("size must be divisible by 32")
        if not all(0 < t < 1 for t in self.threshold_grid):
            raise ValueError("threshold grid must lie inside (0, 1)")
        as_fraction(self.width_scale)

    def epochs(self, phase: Phase) -> int:
        return {Phase.SCANET_ONLY: self.epochs_scanet, Phase.UPDCNN_ONLY: self.epochs_updcnn,
                Phase.JOINT: self.epochs_joint}[phase]

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).digest()


# --------------------------------------------------------------------------
# model bundle


@dataclass
class Segmenter:
    scanet: ModelGraph
    updcnn: ModelGraph
    box_head: dict
    size: int
    width_scale: Fraction
    trained: list = field(default_factory=lambda: [False, False])

    @classmethod
    def build(cls, size: int, width_scale, seed: int, dtype=np.float32) -> "Segmenter":
        ws = as_fraction(width_scale)
        scfg = ScanetConfig(width_scale=ws, input_size=size)
        sc = build_scanet(scfg, seed=seed, dtype=dtype)
        up = build_updcnn(UpdcnnConfig(width_scale=ws), seed=seed + 1, dtype=dtype)
        head = boxreg.init_box_head(backbone_width(scfg), seed=seed + 2, dtype=dtype)
        return cls(sc, up, head, size, ws)

    def params(self) -> dict:
        out = dict(self.scanet.params)
        out.update(self.updcnn.params)
        out.update(self.box_head)
        return out

    def branch_params(self, phase: Phase) -> dict:
        if phase is Phase.UPDCNN_ONLY:
            return dict(self.updcnn.params)
        out = dict(self.scanet.params)
        out.update(self.box_head)
        if phase is Phase.JOINT:
            out.update(self.updcnn.params)
        return out

    def to_checkpoint(self, phase: str = "init", epoch: int = 0, seed: int = 0,
                      digest: bytes = bytes(32)) -> Checkpoint:
        return Checkpoint(params={k: v.data.copy() for k, v in self.params().items()},
                          phase=phase, epoch=epoch, seed=seed, trained=tuple(self.trained),
                          size=self.size, width_scale=self.width_scale, config_digest=digest)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Segmenter":
        model = cls.build(ckpt.size, ckpt.width_scale, seed=0)
        params = model.params()
        missing = set(params) - set(ckpt.params)
        extra = set(ckpt.params) - set(params)
        if missing or extra:
            raise TrainingError(f"checkpoint does not match the model: missing {sorted(missing)[:3]}, "
                                f"unexpected {sorted(extra)[:3]}")
        for name, p in params.items():
            arr = ckpt.params[name]
            if arr.shape != p.shape:
                raise TrainingError(f"{name}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data = arr.astype(np.float32, copy=True)
        model.trained = list(ckpt.trained)
        return model


def merge_checkpoints(ckpts: Sequence[Checkpoint]) -> Checkpoint:
    """Combine checkpoints; each contributes the branches it has trained.

    The box classifier travels with the scanet branch.
    """
    if not ckpts:
        raise TrainingError("nothing to merge")
    base = ckpts[0]
    params = {k: v.copy() for k, v in base.params.items()}
    trained = list(base.trained)
    for ck in ckpts[1:]:
        if (ck.size, ck.width_scale) != (base.size, base.width_scale):
            raise TrainingError("checkpoints disagree on input size or width scale")
        for k, v in ck.params.items():
            is_updcnn = k.startswith("updcnn.")
            if ck.trained[1 if is_updcnn else 0]:
                params[k] = v.copy()
        trained = [a or b for a, b in zip(trained, ck.trained)]
    return Checkpoint(params=params, phase=ckpts[-1].phase, epoch=ckpts[-1].epoch,
                      seed=base.seed, trained=tuple(trained), size=base.size,
                      width_scale=base.width_scale, config_digest=ckpts[-1].config_digest)


# --------------------------------------------------------------------------
# pieces of a training step


def fuse(scanet_prob: Tensor, updcnn_prob: Tensor) -> Tensor:
    """Stack the two lesion-probability maps and keep the per-pixel maximum."""
    if scanet_prob.shape != updcnn_prob.shape:
        raise T.ShapeError(f"fuse: shapes {scanet_prob.shape} and {updcnn_prob.shape} differ")
    return T.channel_max(T.concat([scanet_prob, updcnn_prob], axis=1))


def sgd_step(params: dict, grads: dict, state: dict, lr: float, momentum: float):
    """Momentum SGD, in place: ``v = momentum * v + g; p -= lr * v``."""
    if set(params) != set(grads):
        raise TrainingError(f"parameter/gradient names differ: {sorted(set(params) ^ set(grads))[:4]}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise TrainingError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = state.get(name)
        v = g.astype(p.dtype, copy=True) if v is None else momentum * v + g
        state[name] = v.astype(p.dtype, copy=False)
        p -= p.dtype.type(lr) * state[name]
    return params, state


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def lesion_probs(model: Segmenter, scanet_in: Optional[np.ndarray], updcnn_in: Optional[np.ndarray]):
    """Sigmoid lesion maps of whichever branches get an input, plus the scanet heatmap."""
    p_sc = p_up = hm = None
    if scanet_in is not None:
        hm = scanet_forward(model.scanet, _as_tensor(scanet_in))
        p_sc = T.sigmoid(hm.restored)
    if updcnn_in is not None:
        out = updcnn_forward(model.updcnn, _as_tensor(updcnn_in))
        p_up = T.sigmoid(T.select_channel(out, LESION_CHANNEL))
    return p_sc, p_up, hm


def _step_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _phase_loss(model: Segmenter, phase: Phase, batch: list, targets: np.ndarray,
                cfg: TrainConfig, box_seeds: list) -> tuple:
    use_sc = phase is not Phase.UPDCNN_ONLY
    use_up = phase is not Phase.SCANET_ONLY
    sc_in = np.stack([b.scanet_in for b in batch]) if use_sc else None
    up_in = np.stack([b.updcnn_in for b in batch]) if use_up else None
    p_sc, p_up, hm = lesion_probs(model, sc_in, up_in)
    prob = fuse(p_sc, p_up) if use_sc and use_up else (p_sc if use_sc else p_up)
    seg = T.bce_loss(prob, Tensor(targets))
    lam = cfg.lambda_box if use_sc else 0.0
    box = Tensor(np.zeros((), dtype=np.float32))
    if lam > 0:
        boxes, labels = [], []
        for b, s in zip(batch, box_seeds):
            img_boxes = boxreg.sample_boxes(s, cfg.size, cfg.size, cfg.boxes_per_image)
            boxes.append(img_boxes)
            labels.append([boxreg.label_box(boxreg.box_target_share(b.target, bx)) for bx in img_boxes])
        box = boxreg.box_loss(hm.features, model.box_head, boxes, labels)
    return seg, box, boxreg.combine_loss(seg, box, lam)


def train_phase(phase: Phase, dataset: Sequence[Sample], cfg: TrainConfig,
                init: Optional[Checkpoint] = None, policy: Optional[AugPolicy] = None,
                allow_random_init: bool = False,
                on_step: Optional[Callable[[int, Segmenter], None]] = None) -> tuple:
    """Train one phase; returns ``(checkpoint, loss log rows)``.

    ``on_step(step, model)`` is invoked before every parameter update.
    """
    cfg.validate()
    if not dataset:
        raise TrainingError("empty training set")
    policy = policy or AugPolicy()
    if init is None:
        if phase is Phase.JOINT and not allow_random_init:
            raise TrainingError("joint training needs pretrained values for both branches "
                                "(pass an init checkpoint or allow random init)")
        model = Segmenter.build(cfg.size, cfg.width_scale, cfg.seed)
    else:
        if (init.size, Fraction(init.width_scale)) != (cfg.size, as_fraction(cfg.width_scale)):
            raise TrainingError("init checkpoint was built for a different size or width scale")
        if phase is Phase.JOINT and not all(init.trained) and not allow_random_init:
            raise TrainingError("joint training needs both branches pretrained; "
                                f"init has scanet={init.trained[0]}, updcnn={init.trained[1]}")
        model = Segmenter.from_checkpoint(init)

    trainable = model.branch_params(phase)
    for name, p in model.params().items():
        p.requires_grad = name in trainable
    arrays = {k: p.data for k, p in trainable.items()}
    velocity: dict = {}
    code = list(Phase).index(phase)
    order_rng = np.random.default_rng([cfg.seed, code])
    cache = {}
    log = []
    step = 0
    n = len(dataset)
    for epoch in range(cfg.epochs(phase)):
        order = order_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = []
            for i in idx:
                if cfg.augment:
                    sample = augment(dataset[i], policy, _step_seed(cfg.seed, code, step, int(i)))
                    batch.append(prepare_pair(sample, cfg.size))
                else:
                    if i not in cache:
                        cache[i] = prepare_pair(dataset[i], cfg.size)
                    batch.append(cache[i])
            targets = np.stack([b.target for b in batch])[:, None]
            box_seeds = [_step_seed(cfg.seed, code, step, int(i), 1) for i in idx]
            with Tape() as tape:
                seg, box, total = _phase_loss(model, phase, batch, targets, cfg, box_seeds)
            grads = T.backward(total, tape)
            if on_step is not None:
                on_step(step, model)
            full = {k: grads.get(k, np.zeros_like(v)) for k, v in arrays.items()}
            sgd_step(arrays, full, velocity, cfg.lr, cfg.momentum)
            log.append({"phase": phase.value, "epoch": epoch, "step": step,
                        "seg_loss": seg.item(), "box_loss": box.item(), "total": total.item()})
            step += 1
        logger.info("%s epoch %d: total loss %.5f", phase.value, epoch, log[-1]["total"])

    if phase is Phase.SCANET_ONLY:
        model.trained[0] = True
    elif phase is Phase.UPDCNN_ONLY:
        model.trained[1] = True
    else:
        model.trained = [True, True]
    for p in model.params().values():
        p.requires_grad = True
    ckpt = model.to_checkpoint(phase.value, cfg.epochs(phase), cfg.seed, cfg.digest())
    return ckpt, log


def format_log(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_FIELDS)
    for r in rows:
        writer.writerow([r["phase"], r["epoch"], r["step"],
                         repr(float(r["seg_loss"])), repr(float(r["box_loss"])), repr(float(r["total"]))])
    return buf.getvalue()


# --------------------------------------------------------------------------
# inference


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return arr[..., rows[:, None], cols[None, :]]


def _check_threshold(threshold: float) -> None:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")


def fused_probability(model: Segmenter, images: Sequence[np.ndarray]) -> np.ndarray:
    """Fused lesion probability (N, S, S), kept strictly inside (0, 1)."""
    pairs = [prepare_pair(Sample(img, np.zeros(img.shape[1:], np.float32)), model.size) for img in images]
    p_sc, p_up, _ = lesion_probs(model, np.stack([p.scanet_in for p in pairs]),
                                 np.stack([p.updcnn_in for p in pairs]))
    prob = fuse(p_sc, p_up).data[:, 0]
    return np.clip(prob, np.float32(T.BCE_EPS), np.float32(1 - T.BCE_EPS))


def predict(ckpt, image: np.ndarray, threshold: float) -> tuple:
    """Binary mask at the image's own size and the fused probability map at S x S."""
    _check_threshold(threshold)
    model = ckpt if isinstance(ckpt, Segmenter) else Segmenter.from_checkpoint(ckpt)
    prob = fused_probability(model, [image])[0]
    mask = (prob >= threshold).astype(np.float32)
    return resize_nearest(mask, *image.shape[1:]), prob


def tune_from_probs(probs: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                    grid: Optional[Sequence[float]] = None) -> tuple:
    """Grid threshold with the best mean Jaccard (ties go low) and the full table."""
    grid = default_grid() if grid is None else list(grid)
    if not probs:
        raise ValueError("empty validation set")
    table = []
    for t in grid:
        scores = [jaccard(p >= t, g) for p, g in zip(probs, gts)]
        table.append((t, float(np.mean(scores))))
    best_t, best = table[0]
    for t, score in table[1:]:
        if score > best:
            best_t, best = t, score
    return best_t, table


def tune_threshold(ckpt, val_dataset: Sequence[Sample], grid: Optional[Sequence[float]] = None,
                   batch_size: int = 8) -> tuple:
    model = ckpt if isinstance(ckpt, Segmenter) else Segmenter.from_checkpoint(ckpt)
    probs = []
    for start in range(0, len(val_dataset), batch_size):
        chunk = val_dataset[start:start + batch_size]
        fused = fused_probability(model, [s.image for s in chunk])
        probs.extend(resize_nearest(p, *s.mask.shape) for p, s in zip(fused, chunk))
    return tune_from_probs(probs, [s.mask for s in val_dataset], grid)
