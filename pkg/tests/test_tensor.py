import numpy as np
import pytest
from hypothesis import given, strategies as st

from motionlab import tensor as T
from motionlab.errors import DomainError, FormatError, ShapeError, StateError, TruncationError
from motionlab.tensor import Tensor

RTOL = 1e-3


def _leaf(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def gradcheck(build, leaves, rng, eps=1e-4):
    """Compare analytic and central-difference gradients of sum(build() * r)."""
    probe = build()
    r = rng.normal(size=probe.shape)

    def scalar():
        return float((build().data * r).sum())

    for leaf in leaves:
        leaf.zero_grad()
    out = build()
    T.backward(T.sum(T.mul_const(out, r)))
    for leaf in leaves:
        numeric = T.numerical_grad(scalar, leaf.data, eps)
        assert T.relative_error(leaf.grad, numeric) < RTOL, leaf.shape


# ---------------------------------------------------------------------------
# gradient suite


def test_grad_elementwise(rng):
    a, b = _leaf(rng, (1, 2, 2, 3, 3)), _leaf(rng, (1, 2, 2, 3, 3))
    gradcheck(lambda: T.add(a, b), [a, b], rng)
    gradcheck(lambda: T.sub(a, b), [a, b], rng)
    gradcheck(lambda: T.mul(a, b), [a, b], rng)
    gradcheck(lambda: T.scale(a, -2.5), [a], rng)
    gradcheck(lambda: T.tanh(a), [a], rng)
    gradcheck(lambda: T.sigmoid(T.scale(a, 3.0)), [a], rng)


def test_grad_leaky_relu_away_from_kink(rng):
    a = Tensor(rng.uniform(0.1, 1.0, size=(1, 2, 2, 2, 3)) * rng.choice([-1, 1], size=(1, 2, 2, 2, 3)), requires_grad=True)
    gradcheck(lambda: T.leaky_relu(a), [a], rng)


def test_grad_reductions_and_losses(rng):
    a, b = _leaf(rng, (1, 1, 2, 3, 4)), _leaf(rng, (1, 1, 2, 3, 4))
    gradcheck(lambda: T.mean(a), [a], rng)
    gradcheck(lambda: T.sum(T.mul(a, a)), [a], rng)
    gradcheck(lambda: T.mse(a, b), [a, b], rng)


def test_grad_structural(rng):
    a, b = _leaf(rng, (1, 2, 1, 3, 3)), _leaf(rng, (1, 3, 1, 3, 3))
    gradcheck(lambda: T.concat([a, b], axis=1), [a, b], rng)
    gradcheck(lambda: T.slice_axis(b, 1, 1, 3), [b], rng)
    gradcheck(lambda: T.tile_time(a, 4), [a], rng)
    rows = rng.integers(0, 3, size=(3, 3))
    cols = rng.integers(0, 3, size=(3, 3))
    gradcheck(lambda: T.gather_pixels(b, rows, cols), [b], rng)


@pytest.mark.parametrize(
    "xshape,wshape,stride,dilation,padding",
    [
        ((1, 2, 3, 4, 4), (3, 2, 3, 3, 3), 1, 1, 1),
        ((2, 2, 4, 4, 4), (2, 2, 2, 2, 2), 2, 1, 0),
        ((1, 2, 2, 5, 5), (2, 2, 1, 3, 3), 1, (1, 2, 2), (0, 2, 2)),
        ((1, 3, 2, 3, 3), (2, 3, 1, 1, 1), 1, 1, 0),
    ],
)
def test_grad_conv3d(rng, xshape, wshape, stride, dilation, padding):
    x, w = _leaf(rng, xshape), _leaf(rng, wshape)
    b = _leaf(rng, (wshape[0],))
    gradcheck(lambda: T.conv3d(x, w, b, stride, dilation, padding), [x, w, b], rng)


def test_grad_pixel_shuffle(rng):
    a = _leaf(rng, (1, 16, 1, 2, 2))
    gradcheck(lambda: T.pixel_shuffle3d(a, 2), [a], rng)
    c = _leaf(rng, (1, 2, 2, 2, 2))
    gradcheck(lambda: T.pixel_unshuffle3d(c, 2), [c], rng)


def test_grad_composite_network(rng):
    x = _leaf(rng, (1, 2, 2, 4, 4))
    w1, w2 = _leaf(rng, (8, 2, 3, 3, 3), -0.5, 0.5), _leaf(rng, (1, 1, 1, 1, 1))
    b1 = _leaf(rng, (8,))

    def build():
        h = T.tanh(T.conv3d(x, w1, b1, padding=1))
        h = T.pixel_shuffle3d(h, 2)
        return T.sigmoid(T.conv3d(h, w2))

    gradcheck(build, [x, w1, b1, w2], rng)


# ---------------------------------------------------------------------------
# conv3d


def test_conv_scaling_kernel():
    x = Tensor(np.ones((1, 1, 1, 3, 3)))
    w = Tensor(np.full((1, 1, 1, 1, 1), 2.0))
    assert np.all(T.conv3d(x, w).data == 2.0)


def test_conv_stride_shape():
    x = Tensor(np.zeros((1, 4, 8, 16, 16)))
    w = Tensor(np.zeros((8, 4, 2, 2, 2)))
    assert T.conv3d(x, w, stride=(2, 2, 2)).shape == (1, 8, 4, 8, 8)


def test_conv_dilated_same_size():
    x = Tensor(np.zeros((1, 1, 1, 8, 8)))
    w = Tensor(np.zeros((1, 1, 1, 3, 3)))
    assert T.conv3d(x, w, dilation=(1, 2, 2), padding=(0, 2, 2)).shape[2:] == (1, 8, 8)


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(1, 2, 3, 5, 4))
    w = rng.normal(size=(3, 2, 2, 3, 2))
    out = T.conv3d(Tensor(x), Tensor(w), stride=(1, 2, 1), dilation=(1, 1, 2), padding=(1, 1, 1)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for co in range(3):
        for t in range(out.shape[2]):
            for i in range(out.shape[3]):
                for j in range(out.shape[4]):
                    patch = xp[0, :, t : t + 2, 2 * i : 2 * i + 3, j : j + 3 : 2]
                    ref[0, co, t, i, j] = (patch * w[co]).sum()
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-12)


def test_conv_shape_errors_name_both_shapes():
    x = Tensor(np.zeros((1, 3, 2, 4, 4)))
    w = Tensor(np.zeros((2, 4, 1, 1, 1)))
    with pytest.raises(ShapeError, match=r"\(1, 3, 2, 4, 4\).*\(2, 4, 1, 1, 1\)"):
        T.conv3d(x, w)
    with pytest.raises(ShapeError):
        T.conv3d(Tensor(np.zeros((1, 1, 1, 2, 2))), Tensor(np.zeros((1, 1, 1, 3, 3))))


# ---------------------------------------------------------------------------
# pixel shuffle


def test_pixel_shuffle_shape_and_constant():
    x = Tensor(np.full((1, 8, 1, 2, 2), 7.0))
    y = T.pixel_shuffle3d(x, 2)
    assert y.shape == (1, 1, 2, 4, 4)
    assert np.all(y.data == 7.0)


def test_pixel_shuffle_rejects_bad_channels():
    with pytest.raises(ShapeError):
        T.pixel_shuffle3d(Tensor(np.zeros((1, 6, 1, 2, 2))), 2)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 2), st.integers(0, 2**31))
def test_pixel_shuffle_is_a_permutation(c, t, h, seed):
    x = np.random.default_rng(seed).normal(size=(1, 8 * c, t, h, h + 1))
    y = T.pixel_shuffle3d(Tensor(x), 2).data
    assert y.size == x.size
    np.testing.assert_array_equal(np.sort(y, axis=None), np.sort(x, axis=None))
    np.testing.assert_array_equal(T.pixel_unshuffle3d(Tensor(y), 2).data, x)


# ---------------------------------------------------------------------------
# binarizer


def test_binarize_train_expectation():
    x = Tensor(np.zeros((1, 1, 1, 1, 100_000)))
    out = T.stochastic_binarize(x, "train", 3).data
    assert set(np.unique(out)) == {-1.0, 1.0}
    assert abs(out.mean()) < 0.01


@pytest.mark.parametrize("value", [-0.6, 0.3, 0.9])
def test_binarize_mean_converges(value):
    n = 100_000
    out = T.stochastic_binarize(Tensor(np.full((1, 1, 1, 1, n), value)), "train", 11).data
    stderr = np.sqrt((1 - value**2) / n)
    assert abs(out.mean() - value) < 3 * stderr


def test_binarize_eval_sign():
    out = T.stochastic_binarize(Tensor(np.array([0.3, 0.0, -0.2]).reshape(1, 1, 1, 1, 3)), "eval").data
    np.testing.assert_array_equal(out.ravel(), [1.0, 1.0, -1.0])


def test_binarize_straight_through():
    x = Tensor(np.array([0.5, -0.7]).reshape(1, 1, 1, 1, 2), requires_grad=True)
    g = np.array([3.0, -4.0]).reshape(1, 1, 1, 1, 2)
    T.backward(T.sum(T.mul_const(T.stochastic_binarize(x, "train", 0), g)))
    np.testing.assert_array_equal(x.grad, g)


def test_binarize_domain():
    with pytest.raises(DomainError):
        T.stochastic_binarize(Tensor(np.array([1.5]).reshape(1, 1, 1, 1, 1)))


# ---------------------------------------------------------------------------
# backward


def test_backward_sum_gives_ones():
    x = Tensor(np.zeros((1, 1, 1, 2, 2)), requires_grad=True)
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((1, 1, 1, 2, 2)))


def test_backward_mse_closed_form(rng):
    x = Tensor(rng.normal(size=(1, 1, 2, 3, 3)), requires_grad=True)
    y = rng.normal(size=(1, 1, 2, 3, 3))
    T.backward(T.mse(x, Tensor(y)))
    np.testing.assert_allclose(x.grad, 2 * (x.data - y) / x.size, rtol=1e-12)


def test_backward_twice_is_a_state_error():
    x = Tensor(np.ones((1, 1, 1, 1, 2)), requires_grad=True)
    loss = T.sum(T.tanh(x))
    T.backward(loss)
    with pytest.raises(StateError):
        T.backward(loss)


def test_backward_needs_scalar():
    x = Tensor(np.ones((1, 1, 1, 1, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.tanh(x))


def test_backward_shared_subgraph_accumulates():
    x = Tensor(np.array([2.0]).reshape(1, 1, 1, 1, 1), requires_grad=True)
    y = T.mul(x, x)
    T.backward(T.sum(T.add(y, y)))
    assert x.grad.item() == pytest.approx(8.0)


def test_backward_deterministic(rng):
    xs = rng.normal(size=(1, 2, 2, 4, 4))
    ws = rng.normal(size=(3, 2, 3, 3, 3))

    def grads():
        x, w = Tensor(xs.copy(), True), Tensor(ws.copy(), True)
        T.backward(T.mean(T.tanh(T.conv3d(x, w, padding=1))))
        return x.grad, w.grad

    a, b = grads(), grads()
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


# ---------------------------------------------------------------------------
# Adam and schedule


def test_adam_zero_gradient_is_fixed_point():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    T.adam_step({"p": p}, T.AdamState(lr=0.1))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_lr():
    p = Tensor(np.array([0.5]), requires_grad=True)
    p.grad = np.array([1.0])
    state = T.AdamState(lr=1e-4)
    T.adam_step({"p": p}, state)
    assert p.data[0] == pytest.approx(0.5 - 1e-4, abs=1e-9)
    assert state.step == 1


def test_adam_missing_gradient_names_parameter():
    p = Tensor(np.array([0.5]), requires_grad=True)
    with pytest.raises(StateError, match="enc.w"):
        T.adam_step({"enc.w": p}, T.AdamState())


def test_lr_schedule_boundaries():
    lrs = [T.step_lr(e) for e in (0, 29, 30, 99, 100, 139, 140, 149)]
    assert lrs == [1e-4, 1e-4, 5e-5, 5e-5, 2.5e-5, 2.5e-5, 1.25e-5, 1.25e-5]


def test_scaled_milestones_keep_proportions():
    assert T.scale_milestones(150) == (30, 100, 140)
    assert T.scale_milestones(60) == (12, 40, 56)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    params = {"a.w": rng.normal(size=(2, 3, 1, 1, 1)).astype(np.float32), "a.b": np.zeros(2, np.float32)}
    path = tmp_path / "m.mlab"
    T.save_params(path, params)
    back = T.load_params(path)
    assert list(back) == list(params)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
    assert path.read_bytes()[:4] == b"MLAB"


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.mlab"
    bad.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(FormatError):
        T.load_params(bad)
    good = tmp_path / "good.mlab"
    T.save_params(good, {"w": np.ones((4, 4), np.float32)})
    short = tmp_path / "short.mlab"
    short.write_bytes(good.read_bytes()[:-5])
    with pytest.raises(TruncationError):
        T.load_params(short)
