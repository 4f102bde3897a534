import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from efdr import autodiff as ad
from efdr.autodiff import Tensor
from efdr.gradcheck import check_op

OP_TOL = 1e-4


def test_matmul_identity_and_shape_error(rng):
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(ad.matmul(np.eye(4), x).data, x)
    with pytest.raises(ValueError):
        ad.matmul(np.zeros((2, 3)), np.zeros((4, 5)))


def test_matmul_gradcheck(rng):
    assert check_op(ad.matmul, rng.normal(size=(4, 5)), rng.normal(size=(5, 3))) < 1e-5


def test_batched_matmul_gradcheck(rng):
    # broadcast weight over a token batch, as in the transformer
    assert check_op(ad.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))) < 1e-5


def test_layer_norm_examples(rng):
    g, b = rng.normal(size=6), rng.normal(size=6)
    out = ad.layer_norm(np.full((2, 6), 3.0), g, b).data
    np.testing.assert_allclose(out, np.broadcast_to(b, (2, 6)), atol=1e-12)
    x = rng.normal(3, 5, size=(4, 6))
    y = ad.layer_norm(x, np.ones(6), np.zeros(6)).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1, atol=1e-5)


def test_layer_norm_gradcheck(rng):
    err = check_op(ad.layer_norm, rng.normal(size=(3, 7)), rng.normal(size=7), rng.normal(size=7))
    assert err < OP_TOL


def test_softmax_examples(rng):
    np.testing.assert_allclose(ad.softmax(np.zeros((2, 5))).data, 0.2)
    x = rng.normal(size=(3, 4))
    np.testing.assert_allclose(ad.softmax(x + 17.0).data, ad.softmax(x).data, atol=1e-15)
    np.testing.assert_allclose(ad.softmax(x, axis=0).data.sum(0), 1.0)


def test_softmax_gradcheck(rng):
    assert check_op(lambda x: ad.softmax(x, axis=-1), rng.normal(size=(3, 5))) < OP_TOL
    assert check_op(lambda x: ad.softmax(x, axis=0), rng.normal(size=(3, 5))) < OP_TOL


def test_elementwise_examples(rng):
    assert ad.exp(np.zeros(3)).data.tolist() == [1.0, 1.0, 1.0]
    x = rng.normal(size=10)
    np.testing.assert_allclose(ad.tanh(-x).data, -ad.tanh(x).data)
    assert ad.gelu(np.array([0.0])).data[0] == 0.0


@pytest.mark.parametrize("name,op,n", [
    ("add", ad.add, 2), ("sub", ad.sub, 2), ("mul", ad.mul, 2),
    ("exp", ad.exp, 1), ("tanh", ad.tanh, 1), ("gelu", ad.gelu, 1),
    ("scale", lambda x: ad.scale(x, -2.5), 1),
    ("soft_clamp", lambda x: ad.soft_clamp(x, 2.0), 1),
    ("mean", lambda x: ad.mean(x, axis=1), 1),
    ("mse", ad.mse, 2),
])
def test_elementwise_gradcheck(name, op, n, rng):
    args = [rng.normal(size=(3, 4)) for _ in range(n)]
    assert check_op(op, *args) < OP_TOL, name


def test_broadcast_add_gradcheck(rng):
    assert check_op(ad.add, rng.normal(size=(2, 3, 4)), rng.normal(size=4)) < OP_TOL
    assert check_op(ad.mul, rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 1))) < OP_TOL


def test_shape_ops_gradcheck(rng):
    x = rng.normal(size=(2, 3, 4))
    assert check_op(lambda t: ad.reshape(t, (6, 4)), x) < OP_TOL
    assert check_op(lambda t: ad.transpose(t, (2, 0, 1)), x) < OP_TOL
    assert check_op(lambda t: ad.slice_axis(t, 1, 3, 1), x) < OP_TOL
    assert check_op(lambda a, b: ad.concat([a, b], 1), x, rng.normal(size=(2, 2, 4))) < OP_TOL


def test_inverse_gradcheck(rng):
    w = np.eye(4) + 0.3 * rng.normal(size=(4, 4))
    assert check_op(ad.inverse, w) < OP_TOL


def conv_oracle(x, w):
    out = np.zeros((w.shape[0],) + x.shape[1:])
    for i in range(x.shape[1]):
        for j in range(x.shape[2]):
            out[:, i, j] = w @ x[:, i, j]
    return out


def test_conv1x1_examples(rng):
    x = rng.normal(size=(6, 2, 3))
    np.testing.assert_array_equal(ad.conv1x1(x, np.eye(6)).data, x)
    w = rng.normal(size=(6, 6))
    np.testing.assert_allclose(ad.conv1x1(x, w).data, conv_oracle(x, w), atol=1e-12)
    with pytest.raises(ValueError):
        ad.conv1x1(x, np.eye(5))


def test_conv1x1_gradcheck(rng):
    assert check_op(ad.conv1x1, rng.normal(size=(6, 2, 2)), rng.normal(size=(6, 6))) < OP_TOL
    assert check_op(ad.conv1x1, rng.normal(size=(2, 6, 2, 2)), rng.normal(size=(6, 6))) < OP_TOL


def test_linear_map_uses_adjoint(rng):
    a = rng.normal(size=(3, 5))
    assert check_op(lambda t: ad.linear_map(t, lambda v: a @ v, lambda g: a.T @ g),
                    rng.normal(size=(5, 2))) < OP_TOL


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    ad.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_product_rule(rng):
    # d/dx sum(x * tanh(x)) = tanh(x) + x (1 - tanh(x)^2)
    xv = rng.normal(size=5)
    x = Tensor(xv, requires_grad=True)
    ad.sum(x * ad.tanh(x)).backward()
    t = np.tanh(xv)
    np.testing.assert_allclose(x.grad, t + xv * (1 - t * t), rtol=1e-12)


def test_shared_subexpression_accumulates(rng):
    xv = rng.normal(size=4)
    x = Tensor(xv, requires_grad=True)
    y = x * x
    ad.sum(y + y + x).backward()
    np.testing.assert_allclose(x.grad, 4 * xv + 1)


def test_backward_twice_raises_and_leaf_grads_accumulate(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    loss = ad.sum(ad.scale(x, 2.0))
    loss.backward()
    with pytest.raises(ad.GraphReleasedError):
        loss.backward()
    ad.sum(ad.scale(x, 3.0)).backward()
    np.testing.assert_array_equal(x.grad, np.full(3, 5.0))
    x.zero_grad()
    assert x.grad is None


def test_no_grad_records_nothing(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with ad.no_grad():
        y = ad.exp(x)
    assert not y.requires_grad and y._parents == ()


def test_check_finite():
    with pytest.raises(FloatingPointError):
        Tensor(np.array([1.0, np.inf])).check_finite()


def test_adam_zero_gradient_is_noop():
    p = [np.array([1.0, -2.0])]
    before = p[0].copy()
    ad.adam_step(p, [np.zeros(2)], {}, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p[0], before)


def test_adam_single_step_hand_computed():
    # g' = g + wd*p = 1.0005, m = 0.5 g', v = 0.001 g'^2,
    # m_hat = g', v_hat = g'^2, p <- p - lr * g' / (g' + eps)
    p = [np.array([1.0])]
    ad.adam_step(p, [np.array([1.0])], {}, lr=0.1)
    g = 1.0005
    assert p[0][0] == pytest.approx(1.0 - 0.1 * g / (g + 1e-6), rel=1e-12)
    q = [np.array([1.0])]
    ad.adam_step(q, [np.array([1.0])], {}, lr=0.1, weight_decay=0.0)
    assert q[0][0] == pytest.approx(1.0 - 0.1 / (1 + 1e-6), rel=1e-12)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        ad.adam_step([np.zeros(2)], [np.zeros(3)], {}, lr=0.1)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_adam_second_moment_nonnegative(grads):
    p = [np.zeros(1)]
    state = {}
    for g in grads:
        ad.adam_step(p, [np.array([g])], state, lr=1e-2)
        assert state["v"][0][0] >= 0


def test_adam_class_bumps_version():
    t = Tensor(np.ones(2), requires_grad=True)
    opt = ad.Adam([t], lr=0.1)
    ad.sum(t * t).backward()
    opt.step()
    assert t.version == 1 and np.all(t.data < 1)


def test_plateau_scheduler():
    class Opt:
        lr = 1.0
    opt = Opt()
    sched = ad.ReduceLROnPlateau(opt, factor=0.5, patience=2)
    for v in [5.0, 4.0, 4.0, 4.0]:
        sched.step(v)
    assert opt.lr == 1.0
    sched.step(4.0)
    assert opt.lr == 0.5
    sched.step(1.0)
    assert opt.lr == 0.5


def test_forward_deterministic(rng):
    x = rng.normal(size=(3, 8))
    a = ad.softmax(ad.gelu(ad.matmul(x, x.T))).data
    b = ad.softmax(ad.gelu(ad.matmul(x, x.T))).data
    np.testing.assert_array_equal(a, b)
