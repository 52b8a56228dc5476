import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import TOL, away_from_zero, check
from memderain import autodiff as ad
from memderain.autodiff import Tensor, backward
from memderain.errors import ContractError, DimensionError

TRIALS = 20


# ---- conv2d ---------------------------------------------------------------

def test_conv2d_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = ad.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)), stride=1, padding=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_zero_input():
    k = np.random.default_rng(0).normal(size=(4, 2, 3, 3))
    out = ad.conv2d(Tensor(np.zeros((2, 2, 5, 5))), Tensor(k), Tensor(np.zeros(4)), padding=1)
    assert not out.data.any()


def test_conv2d_all_ones_kernel_on_2x2():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1)
    np.testing.assert_array_equal(out.data, [[[[10.0, 10.0], [10.0, 10.0]]]])


@pytest.mark.parametrize("h,stride,pad,expected", [(8, 1, 1, 8), (8, 2, 1, 4), (7, 2, 0, 3), (5, 1, 0, 3)])
def test_conv2d_output_size(h, stride, pad, expected):
    out = ad.conv2d(Tensor(np.ones((1, 2, h, h))), Tensor(np.ones((3, 2, 3, 3))), stride=stride, padding=pad)
    assert out.shape == (1, 3, expected, expected)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 5, 3, 3))))


# ---- transposed conv --------------------------------------------------------

def test_transposed_conv_zero_input():
    w = np.random.default_rng(1).normal(size=(2, 3, 3, 3))
    out = ad.transposed_conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(w), stride=2, padding=1, output_padding=1)
    assert out.shape == (1, 3, 8, 8)
    assert not out.data.any()


def test_transposed_conv_scatter_2x2():
    out = ad.transposed_conv2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))


def test_transposed_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        ad.transposed_conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 2, 3, 3))), stride=2)


@pytest.mark.parametrize("trial", range(TRIALS))
def test_conv_transposed_adjoint(trial):
    rng = np.random.default_rng(trial)
    cin, cout, h = rng.integers(1, 4), rng.integers(1, 4), 2 * rng.integers(2, 6)
    x = rng.normal(size=(2, cin, h, h))
    w = rng.normal(size=(cout, cin, 3, 3))
    y = rng.normal(size=(2, cout, h // 2, h // 2))
    cx = ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    ty = ad.transposed_conv2d(Tensor(y), Tensor(w), stride=2, padding=1, output_padding=1).data
    assert abs(np.sum(cx * y) - np.sum(x * ty)) < 1e-10


def test_strided_conv_input_grad_is_transposed_conv():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(1, 2, 8, 8)), requires_grad=True)
    w = rng.normal(size=(3, 2, 3, 3))
    g = rng.normal(size=(1, 3, 4, 4))
    out = ad.conv2d(x, Tensor(w), stride=2, padding=1)
    backward(ad.tsum(out * Tensor(g)))
    expected = ad.transposed_conv2d(Tensor(g), Tensor(w), stride=2, padding=1, output_padding=1).data
    np.testing.assert_allclose(x.grad, expected, atol=1e-12)


# ---- maxpool / relu / concat --------------------------------------------------

def test_maxpool_basic():
    out = ad.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])


def test_maxpool_ramp():
    out = ad.maxpool2d(Tensor(np.arange(16.0).reshape(1, 1, 4, 4)))
    np.testing.assert_array_equal(out.data[0, 0], [[5.0, 7.0], [13.0, 15.0]])


def test_maxpool_tie_goes_to_first():
    x = Tensor(np.full((1, 1, 4, 4), 3.0), requires_grad=True)
    out = ad.maxpool2d(x)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.0))
    backward(ad.tsum(out))
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    np.testing.assert_array_equal(x.grad[0, 0], expected)


def test_maxpool_odd_size():
    with pytest.raises(DimensionError):
        ad.maxpool2d(Tensor(np.ones((1, 1, 3, 4))))


def test_relu_values_and_grads():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    out = ad.relu(x)
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])
    backward(ad.tsum(out))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_relu_all_negative():
    x = Tensor(-np.arange(1.0, 5.0), requires_grad=True)
    out = ad.relu(x)
    backward(ad.tsum(out))
    assert not out.data.any() and not x.grad.any()


def test_relu_upstream_scaling():
    x = Tensor(np.array([3.0]), requires_grad=True)
    backward(ad.tsum(ad.relu(x) * 5.0))
    assert x.grad[0] == 5.0


def test_concat_empty_and_slice():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 3, 4, 4))
    b = rng.normal(size=(2, 5, 4, 4))
    out = ad.concat_channels(Tensor(a), Tensor(np.zeros((2, 0, 4, 4))))
    np.testing.assert_array_equal(out.data, a)
    ab = ad.concat_channels(Tensor(a), Tensor(b))
    np.testing.assert_array_equal(ab.data[:, :3], a)
    np.testing.assert_array_equal(ab.data[:, 3:], b)


def test_concat_shape():
    out = ad.concat_channels(Tensor(np.zeros((1, 64, 8, 8))), Tensor(np.zeros((1, 64, 8, 8))))
    assert out.shape == (1, 128, 8, 8)


def test_concat_mismatch():
    with pytest.raises(DimensionError):
        ad.concat_channels(Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((1, 2, 4, 8))))


def test_concat_backward_splits():
    a = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    b = Tensor(np.ones((1, 3, 2, 2)), requires_grad=True)
    weights = np.arange(5.0).reshape(1, 5, 1, 1)
    backward(ad.tsum(ad.concat_channels(a, b) * Tensor(weights)))
    np.testing.assert_array_equal(a.grad[0, :, 0, 0], [0.0, 1.0])
    np.testing.assert_array_equal(b.grad[0, :, 0, 0], [2.0, 3.0, 4.0])


# ---- backward -----------------------------------------------------------------

def test_backward_sum():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(ad.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(ad.tsum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_gradient_accumulates_over_uses():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    backward(ad.tsum(x * 3.0) + ad.tsum(x * x))
    np.testing.assert_allclose(x.grad, 3.0 + 2 * x.data)


@settings(max_examples=25, deadline=None)
@given(alpha=st.floats(-8, 8, allow_nan=False).filter(lambda a: a != 0), seed=st.integers(0, 2**16))
def test_backward_is_linear_in_loss_scale(alpha, seed):
    rng = np.random.default_rng(seed)
    xd = rng.uniform(-1, 1, size=(1, 2, 4, 4))
    wd = rng.uniform(-1, 1, size=(3, 2, 3, 3))

    def grads(scale):
        x, w = Tensor(xd, requires_grad=True), Tensor(wd, requires_grad=True)
        loss = ad.tsum(ad.relu(ad.conv2d(x, w, padding=1))) * scale
        backward(loss)
        return x.grad, w.grad

    gx1, gw1 = grads(1.0)
    gxa, gwa = grads(alpha)
    np.testing.assert_allclose(gxa, alpha * gx1, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(gwa, alpha * gw1, rtol=1e-12, atol=1e-14)


def test_backward_visits_reverse_construction_order():
    visited = []
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    a = x * 2.0
    b = a + x
    c = ad.tsum(b * a)
    for t in (a, b, c):
        fn = t._backward

        def spy(g, t=t, fn=fn):
            visited.append(t._id)
            return fn(g)

        t._backward = spy
    backward(c)
    assert visited == sorted(visited, reverse=True)
    assert len(visited) == len(set(visited)) == 3


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_forward_is_finite_on_finite_inputs():
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(-1, 1, (2, 3, 8, 8)))
    y = ad.maxpool2d(ad.relu(ad.conv2d(x, Tensor(rng.normal(size=(4, 3, 3, 3))), padding=1)))
    assert np.isfinite(y.data).all()
    q = Tensor(np.zeros((3, 4)))
    assert np.isfinite(ad.vector_norm(q).data).all()


# ---- finite differences, 20 random trials per op ----------------------------

def _rng(trial, salt):
    return np.random.default_rng([trial, salt])


@pytest.mark.parametrize("trial", range(TRIALS))
def test_grad_conv2d(trial):
    r = _rng(trial, 1)
    x, w, b = r.uniform(-1, 1, (2, 2, 5, 5)), r.uniform(-1, 1, (3, 2, 3, 3)), r.uniform(-1, 1, 3)
    g = r.uniform(-1, 1, (2, 3, 5, 5))
    assert check(lambda x, w, b: ad.tsum(ad.conv2d(x, w, b, padding=1) * Tensor(g)), [x, w, b]) < TOL


@pytest.mark.parametrize("trial", range(TRIALS))
def test_grad_conv2d_strided(trial):
    r = _rng(trial, 2)
    x, w = r.uniform(-1, 1, (1, 2, 6, 6)), r.uniform(-1, 1, (2, 2, 3, 3))
    g = r.uniform(-1, 1, (1, 2, 3, 3))
    assert check(lambda x, w: ad.tsum(ad.conv2d(x, w, stride=2, padding=1) * Tensor(g)), [x, w]) < TOL


@pytest.mark.parametrize("trial", range(TRIALS))
def test_grad_transposed_conv(trial):
    r = _rng(trial, 3)
    y, w, b = r.uniform(-1, 1, (2, 2, 3, 3)), r.uniform(-1, 1, (2, 3, 3, 3)), r.uniform(-1, 1, 3)
    g = r.uniform(-1, 1, (2, 3, 6, 6))

    def fn(y, w, b):
        return ad.tsum(ad.transposed_conv2d(y, w, b, stride=2, padding=1, output_padding=1) * Tensor(g))

    assert check(fn, [y, w, b]) < TOL


@pytest.mark.parametrize("trial", range(TRIALS))
def test_grad_maxpool(trial):
    r = _rng(trial, 4)
    # distinct, well-separated values so no window straddles a tie
    x = (r.permutation(2 * 2 * 4 * 4) / 8.0 - 4.0).reshape(2, 2, 4, 4)
    g = r.uniform(-1, 1, (2, 2, 2, 2))
    assert check(lambda x: ad.tsum(ad.maxpool2d(x) * Tensor(g)), [x]) < TOL


@pytest.mark.parametrize("trial", range(TRIALS))
def test_grad_relu(trial):
    r = _rng(trial, 5)
    x = away_from_zero(r.uniform(-1, 1, (3, 7)))
    g = r.uniform(-1, 1, (3, 7))
    assert check(lambda x: ad.tsum(ad.relu(x) * Tensor(g)), [x]) < TOL


@pytest.mark.parametrize("trial", range(TRIALS))
def test_grad_concat(trial):
    r = _rng(trial, 6)
    a, b = r.uniform(-1, 1, (1, 2, 3, 3)), r.uniform(-1, 1, (1, 3, 3, 3))
    g = r.uniform(-1, 1, (1, 5, 3, 3))
    assert check(lambda a, b: ad.tsum(ad.concat_channels(a, b) * Tensor(g)), [a, b]) < TOL


@pytest.mark.parametrize("trial", range(TRIALS))
def test_grad_elementwise_chain(trial):
    r = _rng(trial, 7)
    a = away_from_zero(r.uniform(-1, 1, (4, 3)))
    b = r.uniform(0.5, 1.5, (1, 3))
    m = r.uniform(-1, 1, (3, 2))

    def fn(a, b, m):
        h = ad.matmul(ad.tabs(a) / b - a * b, m)
        return ad.tsum(ad.softmax(h, axis=1) * Tensor(r_g)) + ad.mean(ad.vector_norm(h, axis=0))

    r_g = r.uniform(-1, 1, (4, 2))
    assert check(fn, [a, b, m]) < TOL


def _chain(x, w1, w2, wt):
    pre = ad.conv2d(x, w1, padding=1)
    p = ad.maxpool2d(ad.relu(pre))
    u = ad.transposed_conv2d(p, wt, stride=2, padding=1, output_padding=1)
    c = ad.concat_channels(u, x)
    return pre, ad.conv2d(c[:, :2] + c[:, 2:], w2, padding=1) + 0.05


def _well_separated(arrays, margin=1e-2):
    """No relu input, live max-pool runner-up or abs input within ``margin`` of its kink."""
    pre, out = (t.data for t in _chain(*(Tensor(a) for a in arrays)))
    h = np.maximum(pre, 0)
    n, c, hh, ww = h.shape
    win = np.sort(h.reshape(n, c, hh // 2, 2, ww // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, -1, 4), axis=-1)
    live = win[..., -1] > 0
    gap = (win[..., -1] - win[..., -2])[live].min(initial=1.0)
    return np.abs(pre).min() > margin and gap > margin and np.abs(out).min() > margin


@pytest.mark.parametrize("trial", range(5))
def test_grad_composite_conv_chain(trial):
    # redraw until the point is away from every kink the finite differences could straddle
    for attempt in range(100):
        r = _rng(trial, 8 + 1000 * attempt)
        arrays = [r.uniform(-1, 1, (1, 2, 4, 4)), r.uniform(-1, 1, (3, 2, 3, 3)),
                  r.uniform(-1, 1, (2, 2, 3, 3)), r.uniform(-1, 1, (3, 2, 3, 3))]
        if _well_separated(arrays):
            break
    assert check(lambda *a: ad.mean(ad.tabs(_chain(*a)[1])), arrays) < TOL
