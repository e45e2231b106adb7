import numpy as np
import pytest

from src import numerics as nx
from src.errors import NonFinite, NotScalarLoss, ShapeMismatch

from .conftest import gradient_error


def test_relu_and_softmax_values():
    out = nx.relu(nx.Tensor([-1.0, 0.0, 2.5])).data
    np.testing.assert_allclose(out, [0.0, 0.0, 2.5])

    probs = nx.softmax(nx.Tensor([[0.0, 0.0, 0.0, 0.0], [1000.0, 0.0, 0.0, 0.0]])).data
    np.testing.assert_allclose(probs[0], [0.25] * 4, rtol=1e-6)
    np.testing.assert_allclose(probs[1], [1.0, 0.0, 0.0, 0.0], atol=1e-6)
    assert np.all(np.isfinite(probs))


def test_matmul_matches_numpy_and_checks_shapes():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    np.testing.assert_allclose(nx.matmul(a, b).data, (a @ b).astype(np.float32), rtol=1e-5)
    with pytest.raises(ShapeMismatch):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_backward_of_sum_gives_ones():
    p = nx.parameter(np.arange(6.0).reshape(2, 3))
    nx.backward(nx.sum(p))
    np.testing.assert_allclose(p.grad, np.ones((2, 3)))


def test_backward_rejects_non_scalar():
    p = nx.parameter(np.ones((2, 2)))
    with pytest.raises(NotScalarLoss):
        nx.backward(p * 2.0)


def test_gradients_accumulate_over_shared_use():
    p = nx.parameter([3.0])
    loss = nx.sum(p * p + p)
    nx.backward(loss)
    np.testing.assert_allclose(p.grad, [7.0])


def test_graph_is_freed_unless_retained():
    p = nx.parameter([2.0])
    loss = nx.sum(p * p)
    nx.backward(loss, retain_graph=True)
    nx.backward(loss)
    np.testing.assert_allclose(p.grad, [8.0])
    assert loss._backward is None


def test_no_grad_records_nothing():
    p = nx.parameter([1.0, 2.0])
    with nx.no_grad():
        out = nx.sum(p * 3.0)
    assert not out.requires_grad
    nx.backward(out)
    assert p.grad is None


@pytest.mark.parametrize('seed', range(20))
def test_primitive_gradients(float64, seed):
    rng = np.random.default_rng(seed)
    a = nx.parameter(rng.normal(size=(3, 4)))
    b = nx.parameter(rng.normal(size=(4, 2)))
    c = nx.parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    gamma = nx.parameter(rng.normal(size=4))
    beta = nx.parameter(rng.normal(size=4))
    seg = np.array([0, 1, 1])
    w = rng.normal(size=(2, 2))

    cases = {
        'matmul_tanh': (lambda: nx.sum(nx.tanh(a @ b) * w[0]), [a, b]),
        'sigmoid_div': (lambda: nx.sum(nx.sigmoid(a) / c), [a, c]),
        'log_sqrt': (lambda: nx.sum(nx.log(c) + nx.sqrt(c) * a), [a, c]),
        'softmax': (lambda: nx.sum(nx.softmax(a) * c), [a, c]),
        'log_softmax': (lambda: nx.sum(nx.log_softmax(a) * c), [a, c]),
        'layer_norm': (lambda: nx.sum(nx.layer_norm(a, gamma, beta) * c), [a, gamma, beta]),
        'l2_normalize': (lambda: nx.sum(nx.l2_normalize(a) * c), [a, c]),
        'segment_gather': (lambda: nx.sum(nx.segment_sum(a @ b, seg, 2) * w), [a, b]),
        'concat_slice': (lambda: nx.sum(nx.concat([a, c], axis=1)[1:, 2:6] * 1.5), [a, c]),
        'softplus_exp': (lambda: nx.mean(nx.softplus(a) + nx.exp(a * 0.1)), [a]),
    }
    for name, (fn, params) in cases.items():
        assert gradient_error(fn, params) < 1e-5, name


def test_l2_normalize_norms_and_zero_rows():
    rows = np.array([[3.0, 4.0], [0.0, 0.0], [1e-3, 0.0]])
    out = nx.l2_normalize(rows).data
    np.testing.assert_allclose(np.linalg.norm(out[[0, 2]], axis=1), [1.0, 1.0], rtol=1e-6)
    np.testing.assert_allclose(out[1], [0.0, 0.0])


def test_dropout_modes():
    x = nx.Tensor(np.ones((200, 50)))
    rng = np.random.default_rng(3)
    assert nx.dropout(x, 0.0, rng) is x
    assert nx.dropout(x, 0.5, rng, training=False) is x
    out = nx.dropout(x, 0.5, rng).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.05
    with pytest.raises(ValueError):
        nx.dropout(x, 0.5, None)


def test_debug_mode_raises_on_non_finite():
    nx.set_debug(True)
    try:
        with pytest.raises(NonFinite):
            nx.div(nx.Tensor([1.0]), nx.Tensor([0.0]))
    finally:
        nx.set_debug(False)


def test_one_hot_and_item():
    np.testing.assert_allclose(nx.one_hot([2, 0], 3).data, [[0, 0, 1], [1, 0, 0]])
    with pytest.raises(ShapeMismatch):
        nx.one_hot([3], 3)
    assert nx.Tensor([[4.5]]).item() == 4.5
    with pytest.raises(NotScalarLoss):
        nx.Tensor([1.0, 2.0]).item()


def test_precision_context_restores_dtype():
    assert nx.get_default_dtype() is np.float32
    with nx.precision(np.float64):
        assert nx.Tensor([1.0]).data.dtype == np.float64
    assert nx.Tensor([1.0]).data.dtype == np.float32
