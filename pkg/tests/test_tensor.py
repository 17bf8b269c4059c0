import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionseg import tensor as T
from lesionseg.tensor import ContractError, PadMode, ShapeError, Tape, Tensor, backward, grad_check


def naive_conv(x, k, b, dilation=1, same=True):
    """Direct nested-loop cross-correlation (oracle)."""
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    eh, ew = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    if same:
        top, left = (eh - 1) // 2, (ew - 1) // 2
        xp = np.zeros((n, c, h + eh - 1, w + ew - 1))
        xp[:, :, top:top + h, left:left + w] = x
    else:
        xp = x
    ho, wo = xp.shape[2] - eh + 1, xp.shape[3] - ew + 1
    out = np.zeros((n, f, ho, wo))
    for ni in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = b[fi]
                    for ci in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += xp[ni, ci, i + a * dilation, j + bb * dilation] * k[fi, ci, a, bb]
                    out[ni, fi, i, j] = acc
    return out


def scatter_deconv(x, k, b):
    """Scatter-accumulate oracle: input (i, j) with tap (a, b) lands on (2i+a-1, 2j+b-1)."""
    n, c, h, w = x.shape
    f = k.shape[1]
    out = np.zeros((n, f, 2 * h, 2 * w)) + np.asarray(b)[None, :, None, None]
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    for a in range(3):
                        for bb in range(3):
                            y, xx = 2 * i + a - 1, 2 * j + bb - 1
                            if 0 <= y < 2 * h and 0 <= xx < 2 * w:
                                out[ni, :, y, xx] += x[ni, ci, i, j] * k[ci, :, a, bb]
    return out


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# --- construction -----------------------------------------------------------

def test_tensor_new_fill_and_values():
    z = T.tensor_new([2, 2], 0.0)
    assert z.shape == (2, 2) and not z.data.any()
    assert T.tensor_new([1], [3.5]).item() == 3.5
    with pytest.raises(ShapeError):
        T.tensor_new([2, 3], [1, 2, 3, 4, 5])
    with pytest.raises(ShapeError):
        T.tensor_new([0, 2], 1.0)


# --- conv2d -----------------------------------------------------------------

def test_conv2d_ones_kernel_example():
    x = t64(np.arange(1, 10).reshape(1, 1, 3, 3))
    out = T.conv2d(x, t64(np.ones((1, 1, 3, 3))), t64([0.0])).data
    assert out[0, 0, 1, 1] == 45
    assert out[0, 0, 0, 0] == 12


def test_conv2d_zero_kernel_gives_bias():
    rng = np.random.default_rng(0)
    out = T.conv2d(t64(rng.normal(size=(2, 3, 5, 4))), t64(np.zeros((2, 3, 3, 3))), t64([1.5, -2.0]))
    assert np.all(out.data[:, 0] == 1.5) and np.all(out.data[:, 1] == -2.0)


def test_dilated_extent_is_five():
    x = t64(np.random.default_rng(1).normal(size=(1, 1, 5, 5)))
    out = T.conv2d(x, t64(np.ones((1, 1, 3, 3))), t64([0.0]), PadMode.VALID, dilation=2)
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == pytest.approx(x.data[0, 0, ::2, ::2].sum())
    with pytest.raises(ShapeError):
        T.conv2d(t64(np.zeros((1, 1, 4, 4))), t64(np.ones((1, 1, 3, 3))), t64([0.0]), PadMode.VALID, 2)


@pytest.mark.parametrize("dilation", [1, 2, 3])
@pytest.mark.parametrize("same", [True, False])
def test_conv2d_matches_loop_oracle(dilation, same):
    rng = np.random.default_rng(dilation)
    x, k, b = rng.normal(size=(2, 3, 8, 7)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    got = T.conv2d(t64(x), t64(k), t64(b), PadMode.SAME if same else PadMode.VALID, dilation).data
    np.testing.assert_allclose(got, naive_conv(x, k, b, dilation, same), rtol=0, atol=1e-12)


def test_conv2d_same_keeps_size_for_even_kernel():
    out = T.conv2d(t64(np.zeros((1, 2, 6, 5))), t64(np.zeros((3, 2, 2, 2))), t64(np.zeros(3)))
    assert out.shape == (1, 3, 6, 5)


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError):
        T.conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 3, 3, 3))), t64([0.0]))
    with pytest.raises(ShapeError):
        T.conv2d(t64(np.zeros((1, 3, 4, 4))), t64(np.zeros((1, 3, 3, 3))), t64([0.0, 1.0]))


# --- transposed conv --------------------------------------------------------

def test_transposed_conv_doubles():
    out = T.transposed_conv2d(t64(np.ones((1, 8, 5, 5))), t64(np.ones((8, 6, 3, 3))), t64(np.zeros(6)))
    assert out.shape == (1, 6, 10, 10)
    zero = T.transposed_conv2d(t64(np.zeros((1, 8, 5, 5))), t64(np.ones((8, 6, 3, 3))), t64(np.zeros(6)))
    assert not zero.data.any()


def test_transposed_conv_single_pixel():
    k = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
    out = T.transposed_conv2d(t64(np.ones((1, 1, 1, 1))), t64(k), t64([0.0])).data[0, 0]
    # the pixel at (0, 0) spreads to (a-1, b-1); only taps a, b >= 1 land inside
    np.testing.assert_array_equal(out, [[4, 5], [7, 8]])
    np.testing.assert_array_equal(out, scatter_deconv(np.ones((1, 1, 1, 1)), k, [0.0])[0, 0])


def test_transposed_conv_matches_scatter_oracle():
    rng = np.random.default_rng(3)
    x, k, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=2)
    got = T.transposed_conv2d(t64(x), t64(k), t64(b)).data
    np.testing.assert_allclose(got, scatter_deconv(x, k, b), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31))
def test_transposed_conv_is_adjoint_of_strided_conv(c, f, h, w, seed):
    # <deconv(x), y> == <x, conv_stride2(y)> with the matching kernel
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(1, c, h, w)), rng.normal(size=(1, f, 2 * h, 2 * w))
    k = rng.normal(size=(c, f, 3, 3))
    lhs = (T.transposed_conv2d(t64(x), t64(k), t64(np.zeros(f))).data * y).sum()
    yp = np.pad(y, ((0, 0), (0, 0), (1, 1), (1, 1)))
    down = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            patch = yp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            down[0, :, i, j] = np.einsum("fab,cfab->c", patch, k)
    assert lhs == pytest.approx((x * down).sum(), rel=1e-10, abs=1e-10)


# --- elementwise --------------------------------------------------------------

def test_relu_and_add():
    np.testing.assert_array_equal(T.relu(t64([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    pos = t64([0.5, 3.0])
    np.testing.assert_array_equal(T.relu(pos).data, pos.data)
    np.testing.assert_array_equal(T.add(t64([1.0, 2.0]), t64([3.0, 4.0])).data, [4, 6])
    a = t64(np.random.default_rng(0).normal(size=(2, 3)))
    np.testing.assert_array_equal(T.add(a, t64(np.zeros((2, 3)))).data, a.data)
    with pytest.raises(ShapeError):
        T.add(t64(np.zeros((2, 3))), t64(np.zeros((3, 2))))


def test_sigmoid_values_and_slope():
    assert T.sigmoid(t64([0.0])).data[0] == 0.5
    sat = T.sigmoid(t64([-800.0, 800.0])).data
    assert sat[0] < 1e-6 and sat[1] == 1.0 and np.all(np.isfinite(sat))
    x = t64([0.0])
    x.requires_grad = True
    with Tape() as tape:
        y = T.sum_all(T.sigmoid(x))
    backward(y, tape)
    assert x.grad[0] == pytest.approx(0.25)


def test_channel_max():
    x = t64(np.array([0.3, 0.7]).reshape(1, 2, 1, 1))
    assert T.channel_max(x).item() == 0.7
    one = t64(np.random.default_rng(0).normal(size=(2, 1, 3, 3)))
    np.testing.assert_array_equal(T.channel_max(one).data, one.data)


def test_channel_max_tie_routes_to_first():
    x = t64(np.full((1, 2, 1, 1), 0.5))
    x.requires_grad = True
    with Tape() as tape:
        y = T.sum_all(T.channel_max(x))
    backward(y, tape)
    np.testing.assert_array_equal(x.grad.ravel(), [1.0, 0.0])


def test_max_pool_picks_maximum():
    x = t64(np.arange(16.0).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(T.max_pool2d(x).data[0, 0], [[5, 7], [13, 15]])
    with pytest.raises(ShapeError):
        T.max_pool2d(t64(np.zeros((1, 1, 3, 4))))


# --- bilinear ---------------------------------------------------------------

def align_corners_oracle(img, oh, ow):
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            y = i * (h - 1) / (oh - 1) if oh > 1 and h > 1 else 0.0
            x = j * (w - 1) / (ow - 1) if ow > 1 and w > 1 else 0.0
            y0, x0 = min(int(np.floor(y)), max(h - 2, 0)), min(int(np.floor(x)), max(w - 2, 0))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


def test_bilinear_example_row():
    out = T.bilinear_upsample(t64([[[[0.0, 2.0], [2.0, 4.0]]]]), 2).data[0, 0]
    np.testing.assert_allclose(out[0], [0, 2 / 3, 4 / 3, 2], atol=1e-15)


def test_bilinear_constant_and_identity():
    const = T.bilinear_upsample(t64(np.full((1, 2, 3, 5), 7.0)), 4).data
    np.testing.assert_allclose(const, 7.0, atol=1e-12)
    x = t64(np.random.default_rng(0).normal(size=(1, 2, 3, 4)))
    np.testing.assert_array_equal(T.bilinear_upsample(x, 1).data, x.data)


def test_bilinear_size_one_axis_repeats():
    x = t64(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
    out = T.bilinear_upsample(x, 3).data[0, 0]
    assert out.shape == (3, 6)
    np.testing.assert_allclose(out, np.tile(out[0], (3, 1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2 ** 31))
def test_resample_matches_oracle(h, w, oh, ow, seed):
    img = np.random.default_rng(seed).normal(size=(h, w))
    got = T.resample(t64(img[None, None]), oh, ow).data[0, 0]
    np.testing.assert_allclose(got, align_corners_oracle(img, oh, ow), atol=1e-12)


# --- bce ------------------------------------------------------------------

def test_bce_values():
    assert T.bce_loss(t64([0.5]), t64([1.0])).item() == pytest.approx(np.log(2))
    assert T.bce_loss(t64([1.0, 0.0]), t64([1.0, 0.0])).item() < 1e-6
    with pytest.raises(ShapeError):
        T.bce_loss(t64([0.5]), t64([1.0, 0.0]))


def test_bce_weights_mask_and_all_zero():
    p, t = t64([0.2, 0.9]), t64([1.0, 1.0])
    masked = T.bce_loss(p, t, t64([0.0, 1.0])).item()
    assert masked == pytest.approx(-np.log(0.9))
    p.requires_grad = True
    with Tape() as tape:
        loss = T.bce_loss(p, t, t64([0.0, 0.0]))
    assert loss.item() == 0.0
    backward(loss, tape)
    assert not p.grad.any()


# --- tape -----------------------------------------------------------------

def test_backward_basic_rules():
    x = Tensor(np.array([-1.0, -2.0, 3.0]), requires_grad=True, name="x")
    with Tape() as tape:
        loss = T.sum_all(x)
    grads = backward(loss, tape)
    np.testing.assert_array_equal(grads["x"], [1, 1, 1])

    neg = Tensor(-np.ones(4), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_all(T.relu(neg))
    backward(loss, tape)
    assert not neg.grad.any()


def test_backward_accumulates_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True, name="x")
    with Tape() as tape:
        loss = T.sum_all(T.add(T.add(x, x), x))
    np.testing.assert_array_equal(backward(loss, tape)["x"], [3, 3])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.relu(x)
    with pytest.raises(ContractError):
        backward(y, tape)


def test_no_tape_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        pass
    T.relu(x)
    assert len(tape) == 0


def test_grad_check_linear_is_exact():
    x = t64(np.random.default_rng(0).normal(size=(3, 4)))
    for eps in (1e-2, 1e-4, 1e-6):
        assert grad_check(lambda v: T.sum_all(T.scale(v, 3.0)), [x], eps) < 1e-10


def test_grad_check_conv_relu_bce_chain():
    rng = np.random.default_rng(2)
    target = t64((rng.uniform(size=(1, 2, 5, 5)) > 0.5).astype(float))

    def chain(x, k, b):
        return T.bce_loss(T.sigmoid(T.relu(T.conv2d(x, k, b))), target)

    err = grad_check(chain, [t64(rng.normal(size=(1, 3, 5, 5))), t64(rng.normal(size=(2, 3, 3, 3))),
                             t64(rng.normal(size=2))], 1e-4)
    assert err < 1e-4


def test_grad_check_flags_corrupted_rule():
    def bad_square(x):
        return T.record_op("bad_square", (x,), x.data ** 2, lambda g: (g * x.data,))  # missing factor 2

    x = t64(np.random.default_rng(0).uniform(0.5, 1.5, size=5))
    assert grad_check(lambda v: T.sum_all(bad_square(v)), [x], 1e-4) > 1e-2


def test_grad_check_pins_kink_crossings():
    # x sits 1e-5 from the ReLU kink, inside the 1e-4 stencil
    x = t64([1e-5, -0.3, 0.7])
    report = {}
    err = grad_check(lambda v: T.sum_all(T.scale(T.relu(v), 2.0)), [x], 1e-4, report=report)
    assert err < 1e-10
    assert report == {"pinned": 1, "probed": 3}
