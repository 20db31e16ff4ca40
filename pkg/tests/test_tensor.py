import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relight import tensor as T
from relight.tensor import ShapeError

from conftest import naive_conv, rand


# -- construction ----------------------------------------------------------

def test_zero_fill():
    z = T.zeros((1, 1, 2, 2))
    assert z.shape == (1, 1, 2, 2)
    assert not z.data.any()
    assert z.requires_grad is False


def test_seeded_random_is_bitwise_reproducible():
    a = T.randu((1, 3, 4, 4), seed=7)
    b = T.randu((1, 3, 4, 4), seed=7)
    assert a.data.tobytes() == b.data.tobytes()


def test_length_mismatch_rejected():
    with pytest.raises(ShapeError):
        T.tensor([1, 2, 3], shape=(1, 1, 1, 2))


@pytest.mark.parametrize("shape", [(1, 1, 0, 2), (1, 2, 3), (1, 1, 1, 1, 1)])
def test_bad_shapes_rejected(shape):
    with pytest.raises(ShapeError):
        T.zeros(shape)


def test_precision_switch():
    with T.precision("float64"):
        assert T.zeros((1, 1, 1, 1)).data.dtype == np.float64
    assert T.zeros((1, 1, 1, 1)).data.dtype == np.float32


# -- elementwise -----------------------------------------------------------

def test_add():
    a = T.tensor([1, 2], shape=(1, 1, 1, 2))
    b = T.tensor([3, 4], shape=(1, 1, 1, 2))
    np.testing.assert_array_equal(T.add(a, b).data.ravel(), [4, 6])


def test_mul_by_zeros_kills_value_and_grad():
    x = T.tensor([1.5, -2.0], shape=(1, 1, 1, 2), requires_grad=True)
    z = T.zeros((1, 1, 1, 2))
    y = T.mul(x, z)
    assert not y.data.any()
    T.backward(T.total(y))
    assert not x.grad.any()


def test_scale():
    a = T.tensor([2, 4], shape=(1, 1, 1, 2))
    np.testing.assert_array_equal(T.scale(a, 0.5).data.ravel(), [1, 2])


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        T.add(T.zeros((1, 1, 2, 2)), T.zeros((1, 1, 2, 3)))


def test_elementwise_grads():
    a = T.tensor([2.0], shape=(1, 1, 1, 1), requires_grad=True)
    b = T.tensor([5.0], shape=(1, 1, 1, 1), requires_grad=True)
    for op, ga, gb in [(T.add, 1, 1), (T.sub, 1, -1), (T.mul, 5, 2)]:
        T.backward(T.total(op(a, b)))
        assert a.grad.item() == ga and b.grad.item() == gb
    T.backward(T.total(T.scale(a, 3.0)))
    assert a.grad.item() == 3.0


# -- relu ------------------------------------------------------------------

def test_relu_values_and_subgradient():
    x = T.tensor([-1.0, 0.0, 2.0], shape=(1, 1, 1, 3), requires_grad=True)
    y = T.relu(x)
    np.testing.assert_array_equal(y.data.ravel(), [0, 0, 2])
    T.backward(T.total(y))
    np.testing.assert_array_equal(x.grad.ravel(), [0, 0, 1])


# -- conv2d ----------------------------------------------------------------

def test_identity_kernel():
    x = rand((2, 3, 5, 5), 1)
    w = T.Tensor(np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1))
    # 1x1 kernel needs pad 0; odd size 1 is allowed
    y = T.conv2d(x, w, T.zeros((1, 3, 1, 1)), stride=1, pad=0)
    np.testing.assert_array_equal(y.data, x.data)


def test_constant_conv_center_and_corner():
    x = T.full((1, 1, 5, 5), 1.0)
    w = T.full((1, 1, 3, 3), 1.0)
    y = T.conv2d(x, w, T.zeros((1, 1, 1, 1)), stride=1, pad=1).data[0, 0]
    assert y[2, 2] == 9
    assert y[0, 0] == 4
    assert y[0, 2] == 6


def test_strided_shape():
    y = T.conv2d(T.zeros((1, 2, 8, 8)), T.zeros((4, 2, 3, 3)), None, stride=2, pad=1)
    assert y.shape == (1, 4, 4, 4)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(T.zeros((1, 2, 8, 8)), T.zeros((4, 3, 3, 3)), None)


def test_conv_even_kernel_rejected():
    with pytest.raises(ShapeError):
        T.conv2d(T.zeros((1, 1, 8, 8)), T.zeros((1, 1, 2, 2)), None)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_conv_matches_naive_loops(f64, stride, pad):
    x, w, b = rand((2, 3, 7, 6), 1), rand((4, 3, 3, 3), 2), rand((1, 4, 1, 1), 3)
    got = T.conv2d(x, w, b, stride, pad).data
    want = naive_conv(x.data, w.data, b.data, stride, pad)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), k=st.sampled_from([1, 3, 5]),
       stride=st.integers(1, 3), pad=st.integers(0, 2))
def test_conv_shape_formula(h, w, k, stride, pad):
    if h + 2 * pad < k or w + 2 * pad < k:
        with pytest.raises(ShapeError):
            T.conv2d(T.zeros((1, 1, h, w)), T.zeros((2, 1, k, k)), None, stride, pad)
        return
    y = T.conv2d(T.zeros((1, 1, h, w)), T.zeros((2, 1, k, k)), None, stride, pad)
    assert y.shape == (1, 2, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)


# -- resampling ------------------------------------------------------------

def test_downsample_block_mean():
    x = T.tensor([0, 2, 4, 6], shape=(1, 1, 2, 2))
    assert T.downsample_avg2x(x).data.ravel().tolist() == [3]


def test_downsample_constant_and_shape():
    y = T.downsample_avg2x(T.full((1, 2, 8, 8), 0.7))
    assert y.shape == (1, 2, 4, 4)
    np.testing.assert_allclose(y.data, 0.7, rtol=1e-6)


def test_downsample_odd_rejected():
    with pytest.raises(ShapeError):
        T.downsample_avg2x(T.zeros((1, 1, 3, 4)))


def test_downsample_grad_is_quarter():
    x = T.zeros((1, 1, 4, 4), requires_grad=True)
    T.backward(T.total(T.downsample_avg2x(x)))
    np.testing.assert_array_equal(x.grad, 0.25)


def test_upsample_single_pixel():
    y = T.upsample_bilinear2x(T.full((1, 1, 1, 1), 5.0))
    assert y.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(y.data, 5.0)


def test_upsample_constant():
    y = T.upsample_bilinear2x(T.full((2, 3, 3, 5), 0.25))
    np.testing.assert_array_equal(y.data, 0.25)


def _bilinear_reference(a):
    """Per-output-pixel half-pixel-centre interpolation with clamped coordinates."""
    N, C, H, W = a.shape
    out = np.zeros((N, C, 2 * H, 2 * W))

    def taps(i, n):
        s = min(max((i + 0.5) / 2 - 0.5, 0.0), n - 1)
        lo = int(np.floor(s))
        hi = min(lo + 1, n - 1)
        return lo, hi, s - lo

    for i in range(2 * H):
        y0, y1, fy = taps(i, H)
        for j in range(2 * W):
            x0, x1, fx = taps(j, W)
            out[:, :, i, j] = ((1 - fy) * (1 - fx) * a[:, :, y0, x0] + (1 - fy) * fx * a[:, :, y0, x1]
                               + fy * (1 - fx) * a[:, :, y1, x0] + fy * fx * a[:, :, y1, x1])
    return out


def test_upsample_matches_reference(f64):
    x = rand((2, 2, 3, 5), 4)
    np.testing.assert_allclose(T.upsample_bilinear2x(x).data, _bilinear_reference(x.data), atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 6).map(lambda v: 2 * v), w=st.integers(1, 6).map(lambda v: 2 * v))
def test_resample_shapes(h, w):
    x = T.zeros((1, 1, h, w))
    assert T.downsample_avg2x(x).shape == (1, 1, h // 2, w // 2)
    assert T.upsample_bilinear2x(x).shape == (1, 1, 2 * h, 2 * w)


def test_pad_replicate_values():
    x = T.tensor([1, 2, 3, 4], shape=(1, 1, 2, 2))
    y = T.pad_replicate(x, 1).data[0, 0]
    np.testing.assert_array_equal(y, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


# -- reductions and backward -----------------------------------------------

def test_mean_value_and_grad():
    x = T.tensor([1.0, 3.0], shape=(1, 1, 1, 2), requires_grad=True)
    m = T.mean(x)
    assert m.item() == 2.0
    y = T.zeros((1, 1, 2, 2), requires_grad=True)
    T.backward(T.mean(y))
    np.testing.assert_array_equal(y.grad, 0.25)


def test_sum_grads_are_ones():
    x = rand((1, 2, 2, 2), 0)
    x.requires_grad = True
    T.backward(T.total(x))
    np.testing.assert_array_equal(x.grad, 1.0)


def test_mean_of_square_grad():
    x = T.full((1, 1, 2, 2), 3.0, requires_grad=True)
    T.backward(T.mean(T.square(x)))
    np.testing.assert_allclose(x.grad, 1.5)


def test_sum_of_sum_grads():
    x = rand((1, 1, 2, 2), 1)
    y = rand((1, 1, 2, 2), 2)
    x.requires_grad = y.requires_grad = True
    T.backward(T.total(T.add(x, y)))
    np.testing.assert_array_equal(x.grad, 1.0)
    np.testing.assert_array_equal(y.grad, 1.0)


def test_backward_rejects_non_scalar():
    x = T.zeros((1, 1, 2, 2), requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.relu(x))


def test_untouched_leaf_gets_zero_grad():
    x = T.full((1, 1, 2, 2), 1.0, requires_grad=True)
    unused = T.full((1, 1, 2, 2), 1.0, requires_grad=True)
    T.backward(T.total(x), wrt=[x, unused])
    assert not unused.grad.any()


def test_shared_subexpression_accumulates():
    x = T.full((1, 1, 1, 1), 2.0, requires_grad=True)
    h = T.square(x)           # used twice below
    T.backward(T.total(T.add(h, T.mul(h, x))))  # x^2 + x^3
    assert x.grad.item() == pytest.approx(2 * 2 + 3 * 4)


def test_graph_is_insertion_ordered():
    x = T.full((1, 1, 1, 1), 1.0, requires_grad=True)
    y = T.relu(T.add(T.square(x), x))
    g = T.Graph.from_output(T.total(y))
    seqs = [node.seq for node, _ in g.nodes]
    assert seqs == sorted(seqs)
    for node, _ in g.nodes:
        for inp in node.inputs:
            if inp.node is not None:
                assert inp.node.seq < node.seq


def test_no_grad_records_nothing():
    x = T.full((1, 1, 1, 1), 1.0, requires_grad=True)
    with T.no_grad():
        y = T.square(x)
    assert y.node is None and not y.requires_grad


def test_determinism_and_replay():
    def run():
        x = T.randu((1, 2, 6, 6), 3, requires_grad=True)
        w = T.randu((2, 2, 3, 3), 4, requires_grad=True)
        loss = T.mean(T.square(T.relu(T.conv2d(x, w, None, 1, 1))))
        T.backward(loss)
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


# -- gradient checks -------------------------------------------------------

def test_grad_check_closed_form(f64):
    x = T.tensor([3.0], shape=(1, 1, 1, 1))
    leaf = T.Tensor(x.data.copy(), requires_grad=True)
    T.backward(T.total(T.square(leaf)))
    assert leaf.grad.item() == pytest.approx(6.0)
    assert T.grad_check(lambda a: T.total(T.square(a)), x) <= 1e-6


def test_grad_check_requires_f64():
    with pytest.raises(TypeError):
        T.grad_check(T.total, T.zeros((1, 1, 1, 1)))


def _away_from_zero(x, eps=1e-3):
    d = x.data
    d[np.abs(d) < eps] = eps * 2
    return x


def _ops(seed):
    y = rand((2, 3, 8, 8), seed + 100)
    # offset partner keeps a+y and y-a away from zero, where FD roundoff dominates
    far = T.add_scalar(y, 3.0)
    pos = T.Tensor(np.abs(y.data) + 0.5)
    w = rand((4, 3, 3, 3), seed + 200)
    b = rand((1, 4, 1, 1), seed + 300)
    probe = rand((2, 3, 16, 16), seed + 400)
    return {
        "add": lambda a: T.total(T.square(T.add(a, far))),
        "sub": lambda a: T.total(T.square(T.sub(far, a))),
        "mul": lambda a: T.total(T.mul(T.mul(a, y), a)),
        "div": lambda a: T.total(T.div(a, pos)),
        "div_denominator": lambda a: T.total(T.div(y, T.add_scalar(T.square(a), 0.5))),
        "scale": lambda a: T.total(T.square(T.scale(a, -1.7))),
        "add_scalar": lambda a: T.total(T.square(T.add_scalar(a, 0.3))),
        "abs": lambda a: T.total(T.mul(T.absolute(a), y)),
        "relu": lambda a: T.total(T.relu(a)),
        "relu_weighted": lambda a: T.total(T.mul(T.relu(a), y)),
        "conv_s1": lambda a: T.total(T.square(T.conv2d(a, w, b, 1, 1))),
        "conv_s2": lambda a: T.total(T.square(T.conv2d(a, w, b, 2, 1))),
        "conv_valid": lambda a: T.total(T.square(T.conv2d(a, w, None, 1, 0))),
        "downsample": lambda a: T.total(T.square(T.downsample_avg2x(a))),
        "upsample": lambda a: T.total(T.mul(T.upsample_bilinear2x(a), probe)),
        "reshape": lambda a: T.total(T.square(T.reshape(a, (6, 1, 8, 8)))),
        "pad_replicate": lambda a: T.total(T.mul(T.pad_replicate(a, 2), rand((2, 3, 12, 12), seed + 500))),
        "crop": lambda a: T.total(T.square(T.crop(a, 1, 2, 5, 4))),
        "diff_h": lambda a: T.total(T.square(T.diff(a, 2))),
        "diff_w": lambda a: T.total(T.square(T.diff(a, 3))),
        "sum": lambda a: T.total(T.square(a)),
    }


@pytest.mark.parametrize("op", sorted(_ops(0)))
def test_grad_check_every_op(f64, op):
    x = _away_from_zero(rand((2, 3, 8, 8), 11))
    assert T.grad_check(_ops(0)[op], x, h=1e-5) <= 1e-4


def test_grad_check_conv_weights_and_bias(f64):
    x = rand((1, 2, 6, 6), 1)
    w = rand((3, 2, 3, 3), 2)
    b = rand((1, 3, 1, 1), 3)
    assert T.grad_check(lambda a: T.mean(T.square(T.conv2d(x, a, b, 1, 1))), w) <= 1e-4
    assert T.grad_check(lambda a: T.mean(T.square(T.conv2d(x, w, a, 2, 1))), b) <= 1e-4
    composite = lambda a: T.mean(T.relu(T.conv2d(T.relu(T.conv2d(a, w, b, 1, 1)), rand((2, 3, 3, 3), 4), None, 2, 1)))
    assert T.grad_check(composite, x) <= 1e-4
