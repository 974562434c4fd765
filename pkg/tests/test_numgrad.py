import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdac import numgrad
from sdac.numgrad import DimensionError, NetSpec


def scalar_forward(spec, params, x):
    """Straight-line evaluation with Python floats, independent of numgrad internals."""
    dims = [spec.input_dim, *spec.hidden_dims, spec.output_dim]
    h = [float(v) for v in x]
    k = 0
    for layer in range(len(dims) - 1):
        n_in, n_out = dims[layer], dims[layer + 1]
        w = [[float(params[k + o * n_in + i]) for i in range(n_in)] for o in range(n_out)]
        k += n_in * n_out
        b = [float(params[k + o]) for o in range(n_out)]
        k += n_out
        z = [sum(w[o][i] * h[i] for i in range(n_in)) + b[o] for o in range(n_out)]
        if layer < len(dims) - 2:
            h = [max(v, 0.0) if spec.activation == "relu" else math.tanh(v) for v in z]
        else:
            h = z
    return h


def random_net(seed, activation="tanh"):
    rng = np.random.default_rng(seed)
    spec = NetSpec(3, (5, 4), 2, activation)
    params = numgrad.init_params(spec, rng)
    params += 0.1 * rng.normal(size=params.size)  # nonzero biases
    return spec, params, rng


# golden value frozen from scalar_forward on the seed-47 net below
GOLDEN_47 = [0.43922019464847595, 0.13445470062743914]


def test_seed47_golden_matches_scalar_evaluation():
    spec, params, _ = random_net(47)
    x = np.array([0.3, -1.2, 0.7])
    out = numgrad.forward(spec, params, x)
    np.testing.assert_allclose(out, scalar_forward(spec, params, x), rtol=1e-13)
    np.testing.assert_allclose(out, GOLDEN_47, rtol=1e-12)


def test_zero_params_give_zero_output():
    spec = NetSpec(4, (8,), 3)
    out = numgrad.forward(spec, np.zeros(spec.n_params), np.arange(4.0))
    assert np.array_equal(out, np.zeros(3))


def _identity_net(n):
    spec = NetSpec(n, (n,), n, "relu")
    params = np.zeros(spec.n_params)
    (w1, _), (w2, _) = numgrad._unpack(spec, params)
    w1[...] = np.eye(n)
    w2[...] = np.eye(n)
    return spec, params


def test_identity_layers_pass_input_through():
    spec, params = _identity_net(3)
    x = np.array([0.5, 2.0, 1.5])  # positive so relu is the identity
    np.testing.assert_array_equal(numgrad.forward(spec, params, x), x)


def test_output_weight_gradient_row_equals_hidden_activation():
    spec, params = _identity_net(3)
    x = np.array([0.5, 2.0, 1.5])
    cot = np.array([0.0, 1.0, 0.0])
    grad = numgrad.gradient(spec, params, x, cot)
    (_, _), (gw2, gb2) = numgrad._unpack(spec, grad)
    np.testing.assert_array_equal(gw2[1], x)
    np.testing.assert_array_equal(np.delete(gw2, 1, axis=0), 0.0)
    assert gb2[1] == 1.0


def test_zero_cotangent_gives_zero_gradient():
    spec, params, _ = random_net(1)
    grad = numgrad.gradient(spec, params, np.ones(3), np.zeros(2))
    assert np.array_equal(grad, np.zeros_like(params))


def test_jvp_of_single_weight_perturbation():
    spec, params = _identity_net(3)
    x = np.array([0.5, 2.0, 1.5])
    tangent = np.zeros_like(params)
    (_, _), (dw2, _) = numgrad._unpack(spec, tangent)
    dw2[2, 0] = 1.0  # output 2 picks up hidden unit 0
    out = numgrad.jvp(spec, params, x, tangent)
    np.testing.assert_array_equal(out, [0.0, 0.0, x[0]])


def test_zero_tangent_gives_zero_jvp():
    spec, params, _ = random_net(2)
    assert np.array_equal(numgrad.jvp(spec, params, np.ones(3), np.zeros_like(params)), np.zeros(2))


def central_diff(f, params, direction, h=1e-5):
    return (f(params + h * direction) - f(params - h * direction)) / (2 * h)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_gradient_matches_finite_differences(seed, activation):
    spec, params, rng = random_net(seed, activation)
    x = rng.normal(size=3)
    cot = rng.normal(size=2)
    grad = numgrad.gradient(spec, params, x, cot)
    fd = np.empty_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = 1.0
        fd[i] = central_diff(lambda p: cot @ numgrad.forward(spec, p, x), params, e)
    # relu kinks are measure-zero; elementwise relative check with an absolute floor
    np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-8)


@pytest.mark.parametrize("seed", range(20))
def test_jvp_matches_finite_differences(seed):
    spec, params, rng = random_net(seed)
    x = rng.normal(size=(4, 3))
    v = rng.normal(size=params.size)
    out = numgrad.jvp(spec, params, x, v)
    fd = central_diff(lambda p: numgrad.forward(spec, p, x), params, v)
    np.testing.assert_allclose(out, fd, rtol=1e-4, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_jvp_vjp_duality(seed):
    spec, params, rng = random_net(seed, "relu" if seed % 2 else "tanh")
    x = rng.normal(size=(5, 3))
    c = rng.normal(size=(5, 2))
    v = rng.normal(size=params.size)
    lhs = numgrad.gradient(spec, params, x, c) @ v
    rhs = np.sum(c * numgrad.jvp(spec, params, x, v))
    assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs))


def test_input_gradient_matches_finite_differences():
    spec, params, rng = random_net(3)
    x = rng.normal(size=3)
    cot = rng.normal(size=2)
    _, gx = numgrad.vjp(spec, params, x, cot)
    h = 1e-6
    fd = [(cot @ numgrad.forward(spec, params, x + h * e) - cot @ numgrad.forward(spec, params, x - h * e)) / (2 * h)
          for e in np.eye(3)]
    np.testing.assert_allclose(gx, fd, rtol=1e-6)


def test_batch_gradient_is_sum_of_rows():
    spec, params, rng = random_net(4)
    x = rng.normal(size=(3, 3))
    c = rng.normal(size=(3, 2))
    total = numgrad.gradient(spec, params, x, c)
    rows = sum(numgrad.gradient(spec, params, x[i], c[i]) for i in range(3))
    np.testing.assert_allclose(total, rows, rtol=1e-12, atol=1e-14)


def test_forward_is_bit_reproducible():
    spec, params, rng = random_net(5)
    x = rng.normal(size=(7, 3))
    a = numgrad.forward(spec, params, x)
    b = numgrad.forward(spec, params.copy(), x.copy())
    assert a.tobytes() == b.tobytes()


def test_dimension_errors_are_structured():
    spec, params, _ = random_net(6)
    with pytest.raises(DimensionError) as err:
        numgrad.forward(spec, params, np.ones(4))
    assert err.value.expected == 3 and err.value.got == 4
    with pytest.raises(DimensionError):
        numgrad.gradient(spec, params, np.ones(3), np.ones(3))
    with pytest.raises(DimensionError):
        numgrad.jvp(spec, params, np.ones(3), np.ones(3))
    with pytest.raises(DimensionError):
        numgrad.forward(spec, params[:-1], np.ones(3))


@pytest.mark.parametrize("bad", [
    dict(input_dim=0, hidden_dims=(3,), output_dim=1),
    dict(input_dim=2, hidden_dims=(), output_dim=1),
    dict(input_dim=2, hidden_dims=(3,), output_dim=1, activation="sigmoid"),
])
def test_netspec_validation(bad):
    with pytest.raises(ValueError):
        NetSpec(**bad)


def test_init_is_glorot_uniform_with_zero_bias():
    spec = NetSpec(10, (30,), 5)
    params = numgrad.init_params(spec, np.random.default_rng(0))
    (w1, b1), (w2, b2) = numgrad._unpack(spec, params)
    assert np.all(np.abs(w1) <= np.sqrt(6 / 40)) and np.all(np.abs(w2) <= np.sqrt(6 / 35))
    assert not b1.any() and not b2.any()


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    spec, params, rng = random_net(7)
    other = NetSpec(2, (3, 3, 3), 1, "relu")
    p2 = rng.normal(size=other.n_params) * 1e-300  # subnormal-adjacent values survive too
    path = tmp_path / "net.ckpt"
    numgrad.save_checkpoint(path, [(spec, params), (other, p2)])
    first_line = path.read_text().splitlines()[0]
    assert first_line == "netspec 3 5 4 2 tanh"
    blocks = numgrad.load_checkpoint(path)
    assert blocks[0][0] == spec and blocks[1][0] == other
    assert blocks[0][1].tobytes() == params.tobytes()
    assert blocks[1][1].tobytes() == p2.tobytes()
