import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import max_rel_error
from hipama.optim import Adam, AdamState, adam_step
from hipama.tensor import ShapeError, Tensor, concat, no_grad, softmax, stack


def rand(rng, *shape, grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=grad)


def test_softmax_uniform_logits():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_known_values():
    # exp(k) / (e + e^2 + e^3), evaluated independently of the implementation
    e = np.exp([1.0, 2.0, 3.0])
    expected = e / e.sum()
    np.testing.assert_allclose(expected, [0.09003057, 0.24472847, 0.66524096], atol=5e-9)
    np.testing.assert_allclose(softmax(Tensor([1.0, 2.0, 3.0])).data, expected, rtol=0, atol=1e-15)


def test_matmul_identity():
    a = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal((Tensor(np.eye(3)) @ Tensor(a)).data, a)


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    msg = str(exc.value)
    assert "matmul" in msg and "(2, 3) and (2, 3)" in msg
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_backward_sum_gives_ones():
    x = Tensor([1.0, -2.0, 5.0], requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_backward_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_backward_accumulates_without_zero_grad():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = (x * x).tanh().sum()
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_backward_deterministic_after_zero_grad():
    rng = np.random.default_rng(3)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    loss = ((a @ b).sigmoid() * (a @ b).relu()).softmax(axis=0).log().sum()
    loss.backward()
    g1 = a.grad.copy(), b.grad.copy()
    a.zero_grad()
    b.zero_grad()
    loss.backward()
    assert a.grad.tobytes() == g1[0].tobytes()
    assert b.grad.tobytes() == g1[1].tobytes()


def test_intermediates_receive_grad():
    x = Tensor([0.5, -0.3], requires_grad=True)
    y = x.tanh()
    (y * y).sum().backward()
    assert y.grad is not None and y.grad.shape == y.shape


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_softmax_mask_gives_exact_zero():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 5)), requires_grad=True)
    mask = np.zeros((2, 5))
    mask[:, 3:] = -np.inf
    y = softmax(x, axis=-1, mask=mask)
    assert np.all(y.data[:, 3:] < 1e-12)
    np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)
    (y * Tensor(np.arange(10.0).reshape(2, 5))).sum().backward()
    assert np.all(x.grad[:, 3:] == 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_softmax_rows_nonnegative_and_normalised(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=10, size=(rows, cols))
    y = softmax(Tensor(x), axis=-1).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


@pytest.mark.parametrize(
    "name, build",
    [
        ("matmul-broadcast", lambda t: (t[0] @ t[1]).tanh().sum()),
        ("add-broadcast", lambda t: ((t[0] @ t[1]) + t[2]).sigmoid().sum()),
        ("mul-exp-log", lambda t: ((t[0] * t[0]).exp() + 1.0).log().sum()),
        ("softmax-axis0", lambda t: (t[0].softmax(axis=-2) * t[3]).sum()),
        ("mean-concat", lambda t: concat([t[0], t[0].relu() * 2.0], axis=-1).mean(axis=1).tanh().sum()),
        ("slice-transpose", lambda t: (t[0][:, 1:, :].transpose() @ t[0][:, :2, :]).sum()),
        ("stack-reshape-div", lambda t: (stack([t[2], t[2] * t[2]], axis=0).reshape(-1) / 3.0).sum()),
        ("reciprocal", lambda t: (t[3] / (t[3] * t[3] + 1.0)).sum()),
    ],
)
def test_composite_gradients_match_finite_differences(name, build):
    rng = np.random.default_rng(len(name))
    ts = [rand(rng, 2, 3, 4), rand(rng, 4, 2), rand(rng, 2), rand(rng, 2, 3, 4)]
    assert max_rel_error(lambda: build(ts), ts) < 1e-4


# ------------------------------------------------------------------- Adam
def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=1e-3)
    p.zero_grad()
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    # t=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    state = AdamState(learning_rate=1e-3, m=[np.zeros(1)], v=[np.zeros(1)])
    adam_step([p], state)
    assert state.step == 1
    assert p.data[0] == pytest.approx(-1e-3 * 1.0 / (1.0 + 1e-8), rel=1e-12)
    np.testing.assert_array_equal(p.grad, [1.0])


def test_adam_minimises_quadratic():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        ((p - 2.0) * (p - 2.0)).sum().backward()
        opt.step()
    assert abs(p.data[0] - 2.0) < 0.05


def test_adam_requires_gradients():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ValueError, match="no gradient"):
        Adam([p]).step()


def test_adam_moments_match_parameter_shapes():
    ps = [Tensor(np.zeros((2, 3)), requires_grad=True), Tensor(np.zeros(4), requires_grad=True)]
    opt = Adam(ps)
    assert [m.shape for m in opt.state.m] == [(2, 3), (4,)]
    assert [v.shape for v in opt.state.v] == [(2, 3), (4,)]
