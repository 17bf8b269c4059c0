"""Dense tensors, the numeric kernels both networks need, and a reverse-mode tape.

Operations record themselves on the active :class:`Tape` (if any) so that
:func:`backward` can replay them in reverse.  Tapes are thread-local, which
keeps frozen-parameter inference safe to run from several threads.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when tensor dimensions are incompatible with an operation."""


class ContractError(RuntimeError):
    """Raised when an API precondition (other than shapes) is violated."""


class PadMode(enum.Enum):
    VALID = "valid"
    SAME = "same"


class Tensor:
    """N-dimensional real array with an optional gradient slot.

    4-D feature maps use the N, C, H, W layout.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_from_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._from_op = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def tensor_new(shape: Sequence[int], fill=0.0, dtype=np.float32, requires_grad=False) -> Tensor:
    """Build a tensor of ``shape`` from a scalar fill or a flat value list."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"shape entries must be >= 1, got {shape}")
    if np.isscalar(fill):
        return Tensor(np.full(shape, fill, dtype=dtype), requires_grad=requires_grad)
    values = np.asarray(fill, dtype=dtype).reshape(-1)
    if values.size != int(np.prod(shape)):
        raise ShapeError(f"{values.size} values cannot fill shape {shape}")
    return Tensor(values.reshape(shape), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block are
    appended in execution order, which is a valid topological order.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


class KinkProbe:
    """Branch choices of piecewise ops (ReLU masks, argmax picks, clamp masks).

    In record mode every piecewise op appends its choice; two evaluations
    with equal records lie on the same smooth piece.  In replay mode the
    ops reuse a previous record instead of choosing, which evaluates the
    forward pass on that fixed piece.
    """

    def __init__(self, replay: Optional["KinkProbe"] = None):
        self.patterns: list = []
        self._replay = list(replay.patterns) if replay is not None else None
        self._cursor = 0

    def __enter__(self) -> "KinkProbe":
        _local.probe = self
        return self

    def __exit__(self, *exc) -> None:
        _local.probe = None

    def choose(self, pattern: np.ndarray) -> np.ndarray:
        if self._replay is not None:
            pinned = self._replay[self._cursor]
            self._cursor += 1
            if pinned.shape != pattern.shape:
                raise ContractError("replayed branch pattern does not match the computation")
            pattern = pinned
        self.patterns.append(pattern)
        return pattern

    def same_piece(self, other: "KinkProbe") -> bool:
        return len(self.patterns) == len(other.patterns) and all(
            np.array_equal(a, b) for a, b in zip(self.patterns, other.patterns))


def _branch(pattern: np.ndarray) -> np.ndarray:
    probe = getattr(_local, "probe", None)
    return pattern if probe is None else probe.choose(pattern)


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def record_op(op: str, inputs: Sequence[Tensor], out: np.ndarray,
              backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap ``out`` in a Tensor and append the op to the active tape.

    ``backward_fn`` maps the output gradient to one gradient (or None)
    per input.
    """
    requires = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=requires)
    result._from_op = True
    tape = active_tape()
    if tape is not None and requires:
        tape.nodes.append(Node(op, tuple(inputs), result, backward_fn))
    return result


def backward(loss: Tensor, tape: Tape) -> dict:
    """Reverse-mode sweep over ``tape`` starting from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` get their ``grad`` slot populated.
    Returns ``{name: grad}`` for every named leaf that received a gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if not inp._from_op:
                leaves[key] = inp
    out = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        if leaf.name is not None:
            out[leaf.name] = leaf.grad
    if not loss._from_op and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
    return out


# --------------------------------------------------------------------------
# elementwise and structural ops


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return record_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op("scale", (x,), x.data * x.data.dtype.type(c),
                     lambda g: (g * g.dtype.type(c),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record_op("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype),
                     lambda g: (np.broadcast_to(g, shape).copy(),))


def relu(x: Tensor) -> Tensor:
    mask = _branch(x.data > 0)
    return record_op("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype),
                     lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1 / (1 + e), e / (1 + e)).astype(v.dtype)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record_op("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return record_op("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), bw)


def select_channel(x: Tensor, c: int) -> Tensor:
    """Channel ``c`` of an N,C,H,W map, kept as N,1,H,W."""
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, c:c + 1] = g
        return (gx,)

    return record_op("select_channel", (x,), x.data[:, c:c + 1].copy(), bw)


def take_batch(x: Tensor, n: int) -> Tensor:
    """Item ``n`` of the leading axis, kept as a batch of one."""
    if x.shape[0] == 1 and n == 0:
        return x
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[n:n + 1] = g
        return (gx,)

    return record_op("take_batch", (x,), x.data[n:n + 1].copy(), bw)


def crop(x: Tensor, y0: int, y1: int, x0: int, x1: int) -> Tensor:
    """Spatial window ``[y0:y1, x0:x1]`` of an N,C,H,W map."""
    shape = x.shape
    if not (0 <= y0 < y1 <= shape[2] and 0 <= x0 < x1 <= shape[3]):
        raise ShapeError(f"crop window {(y0, y1, x0, x1)} outside {shape[2:]}")

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, :, y0:y1, x0:x1] = g
        return (gx,)

    return record_op("crop", (x,), x.data[:, :, y0:y1, x0:x1].copy(), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape

    def bw(g):
        return (np.broadcast_to(g / (h * w), (n, c, h, w)).astype(g.dtype),)

    return record_op("global_avg_pool", (x,), x.data.mean(axis=(2, 3), keepdims=True), bw)


def mean_subtract(x: Tensor) -> Tensor:
    """Remove the per-image, per-channel spatial mean."""
    out = x.data - x.data.mean(axis=(2, 3), keepdims=True)
    return record_op("mean_subtract", (x,), out,
                     lambda g: (g - g.mean(axis=(2, 3), keepdims=True),))


def channel_max(x: Tensor) -> Tensor:
    """Per-pixel maximum over channels; ties route gradient to the lowest index."""
    idx = _branch(np.argmax(x.data, axis=1)[:, None])
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return record_op("channel_max", (x,), np.take_along_axis(x.data, idx, axis=1), bw)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 stride-2 max downsampling; ties go to the first element in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d needs even spatial size, got {(h, w)}")
    win = (x.data.reshape(n, c, h // 2, 2, w // 2, 2)
           .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4))
    idx = _branch(np.argmax(win, axis=-1)[..., None])
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return record_op("max_pool2d", (x,), out, bw)


# --------------------------------------------------------------------------
# convolutions


def same_padding(extent: int) -> tuple:
    lead = (extent - 1) // 2
    return lead, extent - 1 - lead


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, pad: PadMode = PadMode.SAME,
           dilation: int = 1) -> Tensor:
    """Stride-1 cross-correlation with dilated taps."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")
    if dilation < 1:
        raise ShapeError("dilation must be >= 1")
    eh, ew = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    if pad is PadMode.SAME:
        (ph0, ph1), (pw0, pw1) = same_padding(eh), same_padding(ew)
    else:
        ph0 = ph1 = pw0 = pw1 = 0
    hp, wp = h + ph0 + ph1, w + pw0 + pw1
    if eh > hp or ew > wp:
        raise ShapeError(f"effective kernel extent {(eh, ew)} exceeds padded input {(hp, wp)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1))) if ph0 + ph1 + pw0 + pw1 else x.data
    ho, wo = hp - eh + 1, wp - ew + 1
    d = dilation
    cols = sliding_window_view(xp, (eh, ew), axis=(2, 3))[..., ::d, ::d]  # n,c,ho,wo,kh,kw
    cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(f, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gk = (gflat.T @ cols).reshape(f, c, kh, kw)
        gb = g.sum(axis=(0, 2, 3))
        gcols = (gflat @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i * d:i * d + ho, j * d:j * d + wo] += gcols[..., i, j].transpose(0, 3, 1, 2)
        return gxp[:, :, ph0:ph0 + h, pw0:pw0 + w], gk, gb

    return record_op("conv2d", (x, kernel, bias), out, bw)


def transposed_conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3, stride-2 transposed convolution whose output is exactly (2H, 2W).

    Equivalent to input-side padding 1 and output padding 1; the kernel is
    laid out (C_in, F, 3, 3).
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("transposed_conv2d expects 4-D input and kernel")
    n, c, h, w = x.shape
    kc, f, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"transposed_conv2d: input has {c} channels, kernel expects {kc}")
    if (kh, kw) != (3, 3):
        raise ShapeError("transposed_conv2d supports 3x3 kernels only")
    if bias.shape != (f,):
        raise ShapeError(f"transposed_conv2d: bias shape {bias.shape} != ({f},)")
    xr = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(c, -1)
    taps = np.ascontiguousarray(kernel.data.transpose(2, 3, 0, 1))  # 3,3,C,F
    full = np.zeros((f, n, 2 * h + 1, 2 * w + 1), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            full[:, :, i:i + 2 * h:2, j:j + 2 * w:2] += (taps[i, j].T @ xr).reshape(f, n, h, w)
    out = full[:, :, 1:, 1:].transpose(1, 0, 2, 3) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gfull = np.zeros((f, n, 2 * h + 1, 2 * w + 1), dtype=g.dtype)
        gfull[:, :, 1:, 1:] = g.transpose(1, 0, 2, 3)
        gx = np.zeros((c, n * h * w), dtype=g.dtype)
        gk = np.zeros((3, 3, c, f), dtype=g.dtype)
        for i in range(3):
            for j in range(3):
                gs = gfull[:, :, i:i + 2 * h:2, j:j + 2 * w:2].reshape(f, -1)
                gx += taps[i, j] @ gs
                gk[i, j] = xr @ gs.T
        gk = np.ascontiguousarray(gk.transpose(2, 3, 0, 1))
        return gx.reshape(c, n, h, w).transpose(1, 0, 2, 3), gk, g.sum(axis=(0, 2, 3))

    return record_op("transposed_conv2d", (x, kernel, bias), out, bw)


# --------------------------------------------------------------------------
# interpolation


@lru_cache(maxsize=256)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in).

    A length-1 axis is repeated rather than interpolated.
    """
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
    elif n_out == 1:
        m[0, 0] = 1.0
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
        frac = pos - lo
        rows = np.arange(n_out)
        m[rows, lo] = 1 - frac
        m[rows, lo + 1] += frac
    m.setflags(write=False)
    return m


def resample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resampling of the last two axes to (out_h, out_w)."""
    h, w = x.shape[-2:]
    if (out_h, out_w) == (h, w):
        return record_op("resample", (x,), x.data.copy(), lambda g: (g,))
    ah = interp_matrix(h, out_h).astype(x.dtype)
    aw = interp_matrix(w, out_w).astype(x.dtype)
    out = ah @ (x.data @ aw.T)
    return record_op("resample", (x,), out, lambda g: (ah.T @ (g @ aw),))


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ShapeError("upsample factor must be >= 1")
    h, w = x.shape[-2:]
    return resample(x, h * factor, w * factor)


# --------------------------------------------------------------------------
# loss


def bce_loss(pred: Tensor, target: Tensor, weights: Optional[Tensor] = None) -> Tensor:
    """Weighted-mean binary cross-entropy on probabilities clamped to [eps, 1-eps].

    With 0/1 weights this is the mean over the unmasked elements; an
    all-zero weight tensor yields a loss of exactly 0.
    """
    _check_same(pred, target, "bce_loss")
    if weights is not None:
        _check_same(pred, weights, "bce_loss weights")
    dt = pred.dtype
    p = pred.data
    t = target.data.astype(dt)
    wts = np.ones_like(p) if weights is None else weights.data.astype(dt)
    lo, hi = dt.type(BCE_EPS), dt.type(1 - BCE_EPS)
    inside = _branch((p >= lo) & (p <= hi))
    pc = np.where(inside, p, np.clip(p, lo, hi))
    per = -(t * np.log(pc) + (1 - t) * np.log(1 - pc))
    denom = wts.sum()
    value = (wts * per).sum() / denom if denom > 0 else dt.type(0)

    def bw(g):
        if denom <= 0:
            return (np.zeros_like(p), None, None)
        dp = (-(t / pc) + (1 - t) / (1 - pc)) * wts * inside / denom
        return (g * dp, None, None)

    inputs = (pred, target) if weights is None else (pred, target, weights)
    return record_op("bce_loss", inputs, np.asarray(value, dtype=dt), bw)


# --------------------------------------------------------------------------
# gradient checking


def grad_check(builder: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4,
               max_coords: Optional[int] = None, seed: int = 0,
               report: Optional[dict] = None) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``builder(*inputs)`` must return a scalar tensor.  With ``max_coords``
    only that many randomly chosen coordinates per input are probed.  A
    coordinate whose +/-eps stencil changes a ReLU mask, argmax pick or
    clamp is re-evaluated with the unperturbed branch choices pinned; the
    count of such coordinates goes to ``report["pinned"]``.
    """
    inputs = list(inputs)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    with KinkProbe() as base, Tape() as tape:
        loss = builder(*inputs)
    backward(loss, tape)

    def evaluate(replay=None):
        with KinkProbe(replay) as probe:
            value = builder(*inputs).item()
        return value, probe

    rng = np.random.default_rng(seed)
    worst, pinned, probed = 0.0, 0, 0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + eps
            fp, probe_p = evaluate()
            flat[k] = orig - eps
            fm, probe_m = evaluate()
            if not (base.same_piece(probe_p) and base.same_piece(probe_m)):
                pinned += 1
                fm, _ = evaluate(base)
                flat[k] = orig + eps
                fp, _ = evaluate(base)
            flat[k] = orig
            probed += 1
            num = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[k])
            worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
    if report is not None:
        report.update(pinned=pinned, probed=probed)
    return worst
