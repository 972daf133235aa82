import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ppgnet import autograd as ag
from ppgnet.verify import corrupted_conv_check, grad_check, primitive_checks


def T(x, grad=False):
    return ag.Tensor(np.asarray(x, dtype=float), requires_grad=grad)


def brute_conv(x, w, b):
    n, c, length = x.shape
    o, _, k = w.shape
    left = (k - 1) // 2
    out = np.zeros((n, o, length)) + b[None, :, None]
    for pos in range(length):
        for j in range(k):
            src = pos + j - left
            if 0 <= src < length:
                out[:, :, pos] += x[:, :, src] @ w[:, :, j].T
    return out


# conv ---------------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.arange(10.0).reshape(1, 1, 10)
    y = ag.conv1d(T(x), T(np.ones((1, 1, 1))), T([0.0]))
    np.testing.assert_array_equal(np.round(y.data, 12), x)


def test_conv_ones_boundary_zeros():
    y = ag.conv1d(T(np.ones((1, 1, 5))), T(np.ones((1, 1, 3))), T([0.0]))
    np.testing.assert_allclose(y.data[0, 0], [2, 3, 3, 3, 2], atol=1e-12)


@pytest.mark.parametrize("length,k", [(7, 3), (9, 4), (125, 80), (31, 60), (4, 5), (1, 1)])
def test_conv_matches_direct_loop(rng, length, k):
    x, w, b = rng.standard_normal((2, 3, length)), rng.standard_normal((4, 3, k)), rng.standard_normal(4)
    np.testing.assert_allclose(ag.conv1d(T(x), T(w), T(b)).data, brute_conv(x, w, b), atol=1e-11)


def test_conv_even_kernel_pads_more_on_right():
    assert ag.same_padding(4) == (1, 2)
    assert ag.same_padding(5) == (2, 2)
    x = np.zeros((1, 1, 6))
    x[0, 0, 0] = 1.0
    w = np.array([[[1.0, 2.0, 3.0, 4.0]]])
    # out[l] = sum_k w[k] x[l + k - 1] -> impulse at 0 is seen by l=1 (k=0) and l=0 (k=1)
    out = ag.conv1d(T(x), T(w)).data[0, 0]
    np.testing.assert_allclose(out, [2, 1, 0, 0, 0, 0], atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        ag.conv1d(T(np.zeros((1, 2, 5))), T(np.zeros((1, 3, 3))))
    with pytest.raises(ValueError):
        ag.conv1d(T(np.zeros((1, 1, 4))), T(np.zeros((2, 1, 3))), T(np.zeros(3)))
    with pytest.raises(ValueError):
        ag.conv1d(T(np.zeros((1, 4))), T(np.zeros((2, 1, 3))))


# batchnorm ------------------------------------------------------------------------

def test_batchnorm_standardized_input_passes_through(rng):
    x = rng.standard_normal((8, 2, 50))
    x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
    y = ag.batchnorm(T(x), ag.BatchNormState.create(2), training=True)
    np.testing.assert_allclose(y.data, x / np.sqrt(1 + 1e-5), atol=1e-12)


def test_batchnorm_eval_is_affine_map(rng):
    state = ag.BatchNormState.create(3)
    state.running_mean = np.array([0.5, -1.0, 2.0])
    state.running_var = np.array([1.5, 0.25, 4.0])
    state.gamma.data[:] = [2.0, 0.5, -1.0]
    state.beta.data[:] = [0.1, 0.2, 0.3]
    x = rng.standard_normal((2, 3, 4))
    y = ag.batchnorm(T(x), state, training=False).data
    m, v = state.running_mean[None, :, None], state.running_var[None, :, None]
    expect = (x - m) / np.sqrt(v + 1e-5) * state.gamma.data[None, :, None] + state.beta.data[None, :, None]
    np.testing.assert_allclose(y, expect, rtol=0, atol=1e-14)


def test_batchnorm_running_stats_update(rng):
    state = ag.BatchNormState.create(2, momentum=0.1)
    x = rng.standard_normal((3, 2, 5)) * 2 + 1
    ag.batchnorm(T(x), state, training=True)
    m = x.mean(axis=(0, 2))
    v = x.var(axis=(0, 2), ddof=1)
    np.testing.assert_allclose(state.running_mean, 0.1 * m, atol=1e-14)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * v, atol=1e-14)
    assert np.all(state.running_var >= 0)


def test_batchnorm_degenerate_batch():
    with pytest.raises(ValueError):
        ag.batchnorm(T(np.zeros((1, 2, 1))), ag.BatchNormState.create(2), training=True)
    with pytest.raises(ValueError):
        ag.BatchNormState.create(2, eps=0.0)


# pointwise, pooling, dropout ---------------------------------------------------------

def test_relu_example():
    x = T([-1.0, 2.0], grad=True)
    y = ag.relu(x)
    np.testing.assert_array_equal(y.data, [0.0, 2.0])
    ag.tsum(y).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_maxpool_floor_length_and_first_index_ties():
    x = T(np.zeros((1, 1, 31)), grad=True)
    y = ag.maxpool1d(x, 4)
    assert y.shape == (1, 1, 7)
    ag.tsum(y).backward()
    expect = np.zeros(31)
    expect[0:28:4] = 1.0
    np.testing.assert_array_equal(x.grad[0, 0], expect)


def test_dropout_identities(rng):
    x = T(rng.standard_normal((3, 4)))
    assert ag.dropout(x, 0.5, training=False) is x
    assert ag.dropout(x, 0.0, training=True, rng=rng) is x


def test_dropout_inverted_scaling(rng):
    x = T(np.ones((200, 200)))
    y = ag.dropout(x, 0.25, training=True, rng=rng).data
    kept = y[y != 0]
    np.testing.assert_allclose(kept, 1 / 0.75)
    assert abs(kept.size / y.size - 0.75) < 0.01


@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(4, 23)),
              elements=st.floats(-5, 5)))
def test_maxpool_relu_commute(x):
    a = ag.maxpool1d(ag.relu(T(x)), 4).data
    b = ag.relu(ag.maxpool1d(T(x), 4)).data
    np.testing.assert_array_equal(a, b)


# lstm --------------------------------------------------------------------------

def test_lstm_zero_weights_give_zero_hidden():
    layers = [(T(np.zeros((8, 3))), T(np.zeros((8, 2))), T(np.zeros(8))),
              (T(np.zeros((8, 2))), T(np.zeros((8, 2))), T(np.zeros(8)))]
    hiddens, finals = ag.lstm_forward(T(np.ones((2, 4, 3))), layers)
    assert hiddens.shape == (2, 4, 2, 2)
    assert np.all(hiddens.data == 0)
    assert all(np.all(h.data == 0) and np.all(c.data == 0) for h, c in finals)


def test_lstm_single_cell_by_hand():
    x = 0.7
    w_ih = np.array([[0.5], [-0.3], [0.8], [0.2]])
    bias = np.array([0.1, 0.2, -0.1, 0.05])
    hiddens, finals = ag.lstm_forward(T([[[x]]]), [(T(w_ih), T(np.zeros((4, 1))), T(bias))])

    def sig(v):
        return 1 / (1 + np.exp(-v))

    i, f, g, o = sig(0.5 * x + 0.1), sig(-0.3 * x + 0.2), np.tanh(0.8 * x - 0.1), sig(0.2 * x + 0.05)
    c = f * 0.0 + i * g
    h = o * np.tanh(c)
    assert abs(hiddens.data[0, 0, 0, 0] - h) < 1e-12
    assert abs(finals[0][1].data[0, 0] - c) < 1e-12


def test_lstm_shape_error():
    with pytest.raises(ValueError):
        ag.lstm_forward(T(np.zeros((1, 2, 3))), [(T(np.zeros((8, 3))), T(np.zeros((8, 3))), T(np.zeros(8)))])


# loss and optimizer ------------------------------------------------------------

def test_mae_loss_example_and_subgradient():
    pred = T([72.0, 77.0, 90.0], grad=True)
    loss = ag.mae_loss(pred, [70.0, 80.0, 90.0])
    assert abs(loss.item() - 5 / 3) < 1e-15
    loss.backward()
    np.testing.assert_array_equal(pred.grad, [1 / 3, -1 / 3, 0.0])
    assert ag.mae_loss(T([1.0, 2.0]), [1.0, 2.0]).item() == 0.0
    with pytest.raises(ValueError):
        ag.mae_loss(T([1.0]), [1.0, 2.0])


def test_sgd_step_examples():
    p = T([1.0], grad=True)
    p.grad = np.array([0.5])
    ag.sgd_step([p], 0.02)
    assert p.data[0] == 0.99
    q = T([3.25, -1.5], grad=True)
    q.grad = np.zeros(2)
    before = q.data.copy()
    ag.sgd_step([q], 0.02)
    assert np.array_equal(q.data, before)
    frozen = T([1.0])
    ag.sgd_step([frozen], 0.02)
    assert frozen.data[0] == 1.0


# graph mechanics ---------------------------------------------------------------

def test_shared_parameter_gradients_accumulate(rng):
    w = T(rng.standard_normal((2, 1, 3)), grad=True)
    xs = [rng.standard_normal((1, 1, 6)) for _ in range(3)]
    total = ag.tsum(ag.stack([ag.tsum(ag.conv1d(T(x), w)) for x in xs]))
    total.backward()
    composed = w.grad.copy()
    per_step = np.zeros_like(composed)
    for x in xs:
        w.grad = None
        ag.tsum(ag.conv1d(T(x), w)).backward()
        per_step += w.grad
    np.testing.assert_allclose(composed, per_step, atol=1e-10)


def test_diamond_graph_visits_each_node_once():
    x = T([2.0], grad=True)
    y = ag.mul(x, x)
    z = ag.add(y, y)
    ag.tsum(z).backward()
    assert x.grad[0] == 8.0


def test_no_grad_builds_no_graph():
    x = T([1.0], grad=True)
    with ag.no_grad():
        y = ag.mul(x, x)
    assert not y.requires_grad


# finite-difference harness -----------------------------------------------------

def test_every_primitive_passes_finite_differences():
    failures = [r.line() for r in primitive_checks(seed=3) if not r.passed]
    assert not failures, failures


def test_linear_grad_check_tight(rng):
    r = grad_check(lambda t: ag.linear(t[0], t[1], t[2]),
                   [rng.standard_normal((4, 3)), rng.standard_normal((2, 3)), rng.standard_normal(2)],
                   tolerance=1e-8)
    assert r.passed, r.line()


def test_corrupted_conv_backward_is_caught():
    assert not corrupted_conv_check().passed
