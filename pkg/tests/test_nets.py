import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pno.checks import richardson_gradient
from pno.nets import (MLP, Activation, AdamState, DimensionMismatchError, InvalidShapeError, NetworkShape,
                      NonFiniteGradientError, forward, init_network, input_gradient, optimizer_step,
                      parameter_gradient)


def loop_forward(net: MLP, params, x):
    """Layer recursion written out with plain loops, independent of MLP.run."""
    h = list(map(float, x))
    blocks = net.unflatten(params)
    for l, (W, b, s) in enumerate(blocks):
        z = [sum(W[i, j] * h[j] for j in range(len(h))) + b[i] for i in range(len(b))]
        if l == len(blocks) - 1:
            return np.array(z)
        slope = 1.0 if s is None else float(s)
        if net.act.kind == "tanh":
            h = [np.tanh(slope * zi) for zi in z]
        elif net.act.kind == "sine":
            h = [np.sin(net.act.omega0 * slope * zi) for zi in z]
        else:
            h = [max(slope * zi, 0.0) for zi in z]


def test_init_is_deterministic():
    shape = NetworkShape(2, 1, (2,))
    a = init_network(shape, Activation("tanh"), 7)
    b = init_network(shape, Activation("tanh"), 7)
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("adaptive,extra", [(False, 0), (True, 3)])
def test_parameter_count(adaptive, extra):
    net = MLP(NetworkShape(5, 1, (64, 64, 64)), Activation("tanh", adaptive))
    assert net.n_params == 5 * 64 + 64 + 2 * (64 * 64 + 64) + 64 * 1 + 1 + extra


def test_zero_dimension_rejected():
    with pytest.raises(InvalidShapeError):
        NetworkShape(0, 1, (4,))
    with pytest.raises(InvalidShapeError):
        NetworkShape(2, 1, (4, 0))


def test_empty_hidden_is_affine():
    net = MLP(NetworkShape(3, 2, ()), Activation("tanh"))
    W = np.array([[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]])
    b = np.array([0.1, -0.2])
    p = net.flatten([(W, b, None)])
    x = np.array([0.3, -0.7, 2.0])
    assert np.allclose(forward(p, net, x), W @ x + b, atol=1e-15)
    assert np.array_equal(input_gradient(p, net, x), W)
    g = parameter_gradient(p, net, x, np.array([1.0, 0.0]))
    (gW, gb, _), = net.unflatten(g)
    assert np.array_equal(gW, np.outer([1.0, 0.0], x))
    assert np.array_equal(gb, [1.0, 0.0])


def test_identity_layer_passes_input_through():
    net = MLP(NetworkShape(4, 4, ()), Activation())
    p = net.flatten([(np.eye(4), np.zeros(4), None)])
    x = np.array([1.0, -2.0, 3.5, 0.0])
    assert np.array_equal(forward(p, net, x), x)


@pytest.mark.parametrize("kind", ["tanh", "sine", "relu"])
def test_zero_weights_give_zero_output_and_jacobian(kind):
    net = MLP(NetworkShape(3, 2, (5, 5)), Activation(kind))
    p = np.zeros(net.n_params)
    x = np.array([0.2, 0.1, -0.4])
    assert np.array_equal(forward(p, net, x), np.zeros(2))
    assert np.array_equal(input_gradient(p, net, x), np.zeros((2, 3)))


def test_zero_adjoint_gives_zero_gradient():
    net = MLP(NetworkShape(3, 2, (5,)), Activation("tanh", True))
    p = net.init(1)
    assert np.array_equal(parameter_gradient(p, net, np.ones(3), np.zeros(2)), np.zeros(net.n_params))


def test_dimension_mismatch():
    net = MLP(NetworkShape(3, 2, (5,)), Activation())
    p = net.init(0)
    with pytest.raises(DimensionMismatchError):
        forward(p, net, np.ones(4))
    with pytest.raises(DimensionMismatchError):
        parameter_gradient(p, net, np.ones(3), np.ones(3))
    with pytest.raises(DimensionMismatchError):
        forward(p[:-1], net, np.ones(3))


def test_flatten_round_trip():
    net = MLP(NetworkShape(3, 2, (4, 6)), Activation("sine", True))
    p = np.random.default_rng(0).standard_normal(net.n_params)
    assert np.array_equal(net.flatten(net.unflatten(p)), p)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["tanh", "sine", "relu"]), st.booleans(),
       st.lists(st.integers(1, 8), min_size=0, max_size=3))
def test_forward_matches_loop_reimplementation(seed, kind, adaptive, widths):
    rng = np.random.default_rng(seed)
    net = MLP(NetworkShape(3, 2, tuple(widths)), Activation(kind, adaptive, 2.0))
    p = net.init(seed) + 0.1 * rng.standard_normal(net.n_params)
    x = rng.uniform(-1, 1, 3)
    assert np.allclose(forward(p, net, x), loop_forward(net, p, x), rtol=1e-13, atol=1e-13)


def test_fixed_slope_is_bit_identical_to_plain_network():
    plain = MLP(NetworkShape(3, 2, (6, 6)), Activation("tanh", False))
    p = plain.init(3)
    X = np.random.default_rng(3).uniform(-1, 1, (10, 3))
    W0, b0, _ = plain.unflatten(p)[0]
    W1, b1, _ = plain.unflatten(p)[1]
    W2, b2, _ = plain.unflatten(p)[2]
    ref = np.tanh(np.tanh(X @ W0.T + b0) @ W1.T + b1) @ W2.T + b2
    assert plain.run(p, X)[0].tobytes() == ref.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["tanh", "sine"]), st.booleans())
def test_input_gradient_matches_finite_differences(seed, kind, adaptive):
    rng = np.random.default_rng(seed)
    net = MLP(NetworkShape(4, 3, (8, 8)), Activation(kind, adaptive, 2.0))
    p = net.init(seed) + 0.05 * rng.standard_normal(net.n_params)
    x = rng.uniform(-1, 1, 4)
    J = input_gradient(p, net, x)
    Jfd = richardson_gradient(lambda z: forward(p, net, z), x, 1e-3).T
    assert np.max(np.abs(J - Jfd)) <= 1e-6 * max(1.0, np.max(np.abs(Jfd)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["tanh", "sine"]))
def test_parameter_gradient_matches_finite_differences(seed, kind):
    rng = np.random.default_rng(seed)
    net = MLP(NetworkShape(3, 2, (6, 6)), Activation(kind, True, 2.0))
    p = net.init(seed) + 0.05 * rng.standard_normal(net.n_params)
    x = rng.uniform(-1, 1, 3)
    a = rng.standard_normal(2)
    g = parameter_gradient(p, net, x, a)
    idx = rng.choice(net.n_params, min(50, net.n_params), replace=False)
    for j in idx:
        f = lambda h: float(a @ forward(p + h[0] * np.eye(net.n_params)[j], net, x))  # noqa: E731
        fd = richardson_gradient(f, np.zeros(1), 1e-3)[0]
        assert abs(fd - g[j]) <= 1e-6 * max(1.0, abs(fd))


def test_tangent_path_gradient():
    """Gradient of a loss on input derivatives (the physics-informed case)."""
    rng = np.random.default_rng(5)
    net = MLP(NetworkShape(3, 1, (7, 7)), Activation("tanh", True))
    p = net.init(5)
    X = rng.uniform(-1, 1, (4, 3))
    T = np.eye(3)

    def loss(q):
        Y, dY, _ = net.run(q, X, T)
        return float(np.sum(Y ** 2) + np.sum(np.sin(dY)))

    Y, dY, cache = net.run(p, X, T, keep=True)
    g = net.backward(p, cache, 2 * Y, np.cos(dY))
    gfd = richardson_gradient(loss, p, 1e-3)
    assert np.max(np.abs(g - gfd)) <= 1e-7 * max(1.0, np.max(np.abs(gfd)))


# -- Adam ---------------------------------------------------------------------

def adam_reference(p, grads_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads_seq, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_matches_straight_line_reimplementation():
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal(10)
    grads = [rng.standard_normal(10) for _ in range(5)]
    p, st_ = p0.copy(), AdamState.zeros(10, 1e-2)
    for g in grads:
        p, st_ = optimizer_step(p, g, st_)
    assert np.allclose(p, adam_reference(p0, grads, 1e-2), rtol=0, atol=1e-15)
    assert st_.step_count == 5


def test_adam_zero_gradient_leaves_parameters():
    p = np.arange(4.0)
    new, st_ = optimizer_step(p, np.zeros(4), AdamState.zeros(4, 0.1))
    assert np.array_equal(new, p) and st_.step_count == 1


def test_adam_zero_learning_rate_updates_moments_only():
    p = np.arange(4.0)
    g = np.ones(4)
    new, st_ = optimizer_step(p, g, AdamState.zeros(4, 0.0))
    assert np.array_equal(new, p)
    assert np.allclose(st_.first_moment, 0.1) and np.allclose(st_.second_moment, 1e-3)


def test_adam_constant_gradient_step_approaches_lr_sign():
    p = np.zeros(3)
    g = np.array([2.0, -0.5, 1e-3])
    st_ = AdamState.zeros(3, 1e-3)
    for _ in range(2000):
        prev = p
        p, st_ = optimizer_step(p, g, st_)
    step = p - prev
    # scalar recurrence: mhat = g, vhat = g^2 exactly for a constant gradient
    expect = -1e-3 * g / (np.abs(g) + 1e-8)
    assert np.allclose(step, expect, rtol=1e-9, atol=0)


def test_adam_rejects_non_finite():
    with pytest.raises(NonFiniteGradientError):
        optimizer_step(np.zeros(2), np.array([1.0, np.nan]), AdamState.zeros(2, 0.1))
