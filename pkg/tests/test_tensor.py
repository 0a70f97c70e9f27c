import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddistill import tensor as T
from ddistill.optim import AdamState, adam_step, cosine_lr
from ddistill.tensor import Tensor

from _oracles import bilinear_reference, conv2d_reference, grad_error, scalar_adam


@pytest.fixture(autouse=True)
def f64():
    with T.precision("f64"):
        yield


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _instance(kind: str, rng):
    """Random small instance: returns (op callable over Tensors, list of input arrays)."""
    if kind == "add":
        shape = tuple(rng.integers(1, 5, size=3))
        if rng.random() < 0.5:
            other = rng.standard_normal(shape)
        else:
            other = rng.standard_normal((1, shape[1], 1))
        return (lambda a, b: T.add(a, b)), [rng.standard_normal(shape), other]
    if kind == "mul":
        shape = tuple(rng.integers(1, 5, size=2))
        return (lambda a, b: T.mul(a, b)), [rng.standard_normal(shape), rng.standard_normal(shape)]
    if kind == "matmul":
        n, k, m = rng.integers(1, 5, size=3)
        return (lambda a, b: T.matmul(a, b)), [rng.standard_normal((n, k)), rng.standard_normal((k, m))]
    if kind == "conv2d":
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        k = int(rng.choice([1, 3]))
        cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        x = rng.standard_normal((2, cin, 5, 5))
        w = rng.standard_normal((cout, cin, k, k))
        b = rng.standard_normal(cout)
        return (lambda x, w, b: T.conv2d(x, w, b, stride=stride, padding=pad)), [x, w, b]
    if kind == "relu":
        return T.relu, [_away_from_zero(rng, (3, 4))]
    if kind == "avgpool2d":
        k = int(rng.integers(1, 3))
        return (lambda x: T.avgpool2d(x, k)), [rng.standard_normal((2, 2, 5, 5))]
    if kind == "linear":
        n, i, o = rng.integers(1, 5, size=3)
        return (lambda x, w, b: T.linear(x, w, b)), [rng.standard_normal((n, i)), rng.standard_normal((o, i)), rng.standard_normal(o)]
    if kind == "batchnorm2d":
        c = int(rng.integers(1, 4))
        x = rng.standard_normal((3, c, 3, 3))
        if rng.random() < 0.5:
            op = lambda x, w, b: T.batchnorm2d(x, T.channel_mean(x), T.channel_var(x), w, b)  # noqa: E731
            return op, [x, rng.standard_normal(c), rng.standard_normal(c)]
        op = lambda x, m, v, w, b: T.batchnorm2d(x, m, v, w, b)  # noqa: E731
        return op, [x, rng.standard_normal(c), rng.uniform(0.5, 2.0, c), rng.standard_normal(c), rng.standard_normal(c)]
    if kind == "log_softmax":
        return (lambda x: T.log_softmax(x, axis=1)), [rng.standard_normal((3, int(rng.integers(2, 6))))]
    if kind == "bilinear_resize":
        h, w = rng.integers(2, 7, size=2)
        oh, ow = rng.integers(1, 9, size=2)
        return (lambda x: T.bilinear_resize(x, (int(oh), int(ow)))), [rng.standard_normal((2, 1, h, w))]
    if kind == "crop":
        top, left = rng.integers(0, 3, size=2)
        h, w = rng.integers(1, 4, size=2)
        return (lambda x: T.crop(x, int(top), int(left), int(h), int(w))), [rng.standard_normal((2, 1, 6, 6))]
    if kind == "pad":
        p = tuple(int(v) for v in rng.integers(0, 3, size=4))
        return (lambda x: T.pad(x, p)), [rng.standard_normal((1, 2, 3, 3))]
    if kind == "sum":
        axis = [None, 0, 1, (0, 2)][int(rng.integers(0, 4))]
        return (lambda x: T.sum(x, axis)), [rng.standard_normal((2, 3, 4))]
    if kind == "mean":
        axis = [None, 1, (2, 3)][int(rng.integers(0, 3))]
        return (lambda x: T.mean(x, axis)), [rng.standard_normal((2, 3, 2, 2))]
    if kind == "resized_crop":
        boxes = []
        for _ in range(2):
            h, w = (int(v) for v in rng.integers(2, 7, size=2))
            boxes.append((int(rng.integers(0, 7 - h + 1)), int(rng.integers(0, 7 - w + 1)), h, w, bool(rng.random() < 0.5)))
        return (lambda x: T.resized_crop(x, boxes, (5, 4))), [rng.standard_normal((2, 2, 7, 7))]
    if kind == "channel_stats":
        return (lambda x: T.add(T.mul(T.channel_mean(x), 0.7), T.channel_var(x))), [rng.standard_normal((3, 2, 2, 3))]
    if kind == "l2_norm":
        return T.l2_norm, [rng.standard_normal((3, 2))]
    if kind == "sqrt":
        return T.sqrt, [rng.uniform(0.5, 2.0, (4,))]
    if kind == "concat":
        return (lambda a, b: T.concat([a, b], axis=1)), [rng.standard_normal((2, 2)), rng.standard_normal((2, 3))]
    raise KeyError(kind)


GRAD_KINDS = sorted(T.OPS) + ["resized_crop", "channel_stats", "l2_norm", "sqrt", "concat"]


@pytest.mark.parametrize("kind", GRAD_KINDS)
def test_gradcheck_every_op(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    worst = 0.0
    for _ in range(20):
        op, arrays = _instance(kind, rng)
        worst = max(worst, grad_error(op, arrays, rng))
    assert worst < 1e-5, f"{kind}: max relative error {worst:.3e}"


@pytest.mark.parametrize("scale, offset", [(1.0, 10.0), (1e-7, 0.0)])
def test_gradcheck_separates_right_from_slightly_wrong_backward(scale, offset):
    # smooth op with unit or tiny gradients, backward off by 0 or 1e-4
    def sin_op(x, skew):
        return T._make(np.sin(x.data) * scale, (x,), lambda g: (g * np.cos(x.data) * scale * (1 + skew),), "sin")

    errs = []
    for skew in (0.0, 1e-4):
        rng = np.random.default_rng(0)
        with T.precision("f64"):
            errs.append(grad_error(lambda x: T.add(sin_op(x, skew), offset), [rng.standard_normal((3, 4))], rng))
    assert errs[0] < 1e-5 < errs[1]


def test_forward_op_dispatch_and_examples():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    out = T.forward_op("conv2d", [Tensor(x), Tensor(np.ones((1, 1, 1, 1)))], stride=1, padding=0)
    np.testing.assert_array_equal(out.data, x)
    const = Tensor(np.full((2, 3, 5, 7), 0.37))
    np.testing.assert_allclose(T.bilinear_resize(const, (11, 4)).data, 0.37, rtol=0, atol=1e-15)
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.forward_op("matmul", [Tensor(a), Tensor(np.eye(2))]).data, a)
    with pytest.raises(ValueError, match="unknown op"):
        T.forward_op("softmax_v2", [])


def test_shape_errors_name_dims():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ValueError, match="channels"):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="positive"):
        T.bilinear_resize(Tensor(np.ones((1, 1, 4, 4))), (0, 3))
    with pytest.raises(ValueError, match="incompatible"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(3)
    for stride, pad in [(1, 0), (1, 1), (2, 1), (2, 0)]:
        x, w, b = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
        np.testing.assert_allclose(got, conv2d_reference(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("size", [(3, 3), (9, 5), (1, 1), (4, 12)])
def test_bilinear_matches_pixel_reference(size):
    img = np.random.default_rng(1).standard_normal((2, 6, 8))
    got = T.bilinear_resize(Tensor(img[None]), size).data[0]
    np.testing.assert_allclose(got, bilinear_reference(img, *size), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9),
    st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1),
)
def test_bilinear_is_linear_and_preserves_constants(h, w, oh, ow, a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((1, 1, h, w)), rng.standard_normal((1, 1, h, w))
    lhs = T.bilinear_resize(Tensor(a * x + b * y), (oh, ow)).data
    rhs = a * T.bilinear_resize(Tensor(x), (oh, ow)).data + b * T.bilinear_resize(Tensor(y), (oh, ow)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)
    const = T.bilinear_resize(Tensor(np.full((1, 1, h, w), a)), (oh, ow)).data
    assert np.allclose(const.mean(), a, atol=1e-12)


def test_resized_crop_equals_crop_then_resize():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 3, 9, 9))
    fused = T.resized_crop(Tensor(x), [(2, 1, 5, 6, False)], (7, 7)).data
    composed = T.bilinear_resize(T.crop(Tensor(x), 2, 1, 5, 6), (7, 7)).data
    np.testing.assert_allclose(fused, composed, atol=1e-14)
    flipped = T.resized_crop(Tensor(x), [(2, 1, 5, 6, True)], (7, 7)).data
    np.testing.assert_allclose(flipped, composed[..., ::-1], atol=1e-14)


def test_backward_examples():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.sum(T.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    x = Tensor(np.array([-1.0, 3.0]), requires_grad=True)
    T.mean(T.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.5])


def test_backward_rejects_non_scalar_and_consumed_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.mul(x, 2.0).backward()
    loss = T.sum(T.mul(x, x))
    loss.backward()
    with pytest.raises(RuntimeError, match="consumed"):
        loss.backward()


def test_tape_visits_each_node_once_in_topological_order():
    x = Tensor(np.ones(2), requires_grad=True)
    y = T.mul(x, x)
    z = T.add(y, y)
    loss = T.sum(T.add(z, y))
    tape = T.Tape.from_output(loss)
    position = {id(t): i for i, t in enumerate(tape.nodes)}
    assert len(position) == len(tape.nodes) == 5
    for t in tape.nodes:
        if t._node is not None:
            assert all(position[id(p)] < position[id(t)] for p in t._node.parents)
    loss.backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_is_linear():
    rng = np.random.default_rng(11)
    data = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((2, 3, 3, 3))

    def grad_of(fn):
        x = Tensor(data.copy(), requires_grad=True)
        fn(x).backward()
        return x.grad

    f = lambda x: T.sum(T.relu(T.conv2d(x, Tensor(w), padding=1)))  # noqa: E731
    g = lambda x: T.mean(T.mul(x, x))  # noqa: E731
    both = grad_of(lambda x: T.add(f(x), g(x)))
    np.testing.assert_allclose(both, grad_of(f) + grad_of(g), rtol=1e-12, atol=1e-12)


def test_grads_are_finite_after_backward():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((4, 2, 6, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    y = T.conv2d(x, w, padding=1)
    y = T.batchnorm2d(y, T.channel_mean(y), T.channel_var(y), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    T.sum(T.log_softmax(T.flatten(T.avgpool2d(T.relu(y), 2)), axis=1)).backward()
    assert np.isfinite(x.grad).all() and np.isfinite(w.grad).all()


def test_precision_switch():
    with T.precision("f32"):
        assert Tensor([1, 2]).dtype == np.float32
    assert Tensor([1, 2]).dtype == np.float64
    with pytest.raises(ValueError):
        T.set_precision("f16")


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 3.0)
    assert y.is_leaf and not y.requires_grad


# -- optimiser -------------------------------------------------------------


def test_adam_zero_grad_is_noop():
    p = Tensor(np.array([0.3, -1.2]))
    p.grad = np.zeros(2)
    state = AdamState.zeros_like(p, betas=(0.5, 0.9))
    adam_step(p, state, lr=0.1)
    np.testing.assert_array_equal(p.data, [0.3, -1.2])
    assert state.t == 1


def test_adam_first_step_hand_value():
    p = Tensor(np.array([1.0]))
    p.grad = np.array([1.0])
    adam_step(p, AdamState.zeros_like(p, betas=(0.5, 0.9), eps=1e-8), lr=0.1)
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 1.0 / (1.0 + 1e-8), abs=1e-15)


def test_adam_matches_scalar_oracle():
    p = Tensor(np.array([1.0]))
    state = AdamState.zeros_like(p, betas=(0.5, 0.9), eps=1e-8)
    for _ in range(2):
        p.grad = np.array([1.0])
        adam_step(p, state, lr=0.1)
    assert state.t == 2
    assert abs(p.data[0] - scalar_adam(1.0, [1.0, 1.0], 0.1, 0.5, 0.9, 1e-8)) < 1e-12


def test_adam_requires_grad_and_matching_state():
    p = Tensor(np.ones(2))
    with pytest.raises(ValueError, match="no gradient"):
        adam_step(p, AdamState.zeros_like(p), 0.1)
    p.grad = np.ones(2)
    with pytest.raises(ValueError, match="shape"):
        adam_step(p, AdamState.zeros_like(Tensor(np.ones(3))), 0.1)


def test_adam_schedule_handle_overrides_lr():
    p = Tensor(np.array([1.0]))
    p.grad = np.array([1.0])
    state = AdamState.zeros_like(p, betas=(0.5, 0.9), schedule=lambda t: 0.0)
    adam_step(p, state, lr=10.0)
    assert p.data[0] == 1.0


@pytest.mark.parametrize("step, expected", [(0, 0.25), (1000, 0.0), (500, 0.125)])
def test_cosine_lr_examples(step, expected):
    assert cosine_lr(0.25, step, 1000) == pytest.approx(expected, abs=1e-15)


def test_cosine_lr_rejects_zero_total():
    with pytest.raises(ValueError):
        cosine_lr(0.1, 0, 0)


def test_cosine_lr_closed_form_against_math():
    for step in range(0, 101, 7):
        assert cosine_lr(2.0, step, 100) == pytest.approx(2.0 * (1 + math.cos(math.pi * step / 100)) / 2, rel=1e-15)
