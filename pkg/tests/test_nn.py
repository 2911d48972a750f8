import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gciforge.nn import (AdamState, BatchNorm1d, Conv1d, Dense, Flatten, Relu, Sequential, Sigmoid,
                         SplitMix64, adam_step, bce_loss, grad_check, he_normal_init, numeric_derivative, sigmoid)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def conv_loop(x, w, b):
    """Textbook same-padded cross-correlation, one output at a time."""
    bsz, cin, n = x.shape
    cout, _, k = w.shape
    pad = (k - 1) // 2
    y = np.zeros((bsz, cout, n))
    for i in range(bsz):
        for o in range(cout):
            for t in range(n):
                acc = b[o]
                for c in range(cin):
                    for j in range(k):
                        s = t + j - pad
                        if 0 <= s < n:
                            acc += w[o, c, j] * x[i, c, s]
                y[i, o, t] = acc
    return y


def _conv(weight, bias=None):
    w = np.asarray(weight, dtype=float)
    layer = Conv1d(w.shape[1], w.shape[0], w.shape[2])
    layer.params["weight"] = w
    if bias is not None:
        layer.params["bias"] = np.asarray(bias, dtype=float)
    return layer


# -- SplitMix64 -------------------------------------------------------------- #

def test_splitmix_reference_outputs():
    # First outputs for seed 0, from the published reference implementation.
    got = SplitMix64(0).next_u64(3)
    assert [int(v) for v in got] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_splitmix_stream_is_chunking_invariant():
    a = SplitMix64(99).next_u64(10)
    r = SplitMix64(99)
    b = np.concatenate([r.next_u64(3), r.next_u64(7)])
    assert np.array_equal(a, b)


@given(st.integers(0, 2**64 - 1), st.integers(1, 60))
def test_permutation_is_a_permutation(seed, n):
    p = SplitMix64(seed).permutation(n)
    assert sorted(p.tolist()) == list(range(n))


# -- Conv1d ------------------------------------------------------------------ #

def test_conv_worked_example():
    y = _conv([[[1, 0, -1]]]).forward(np.array([[[1.0, 2, 3, 4]]]))
    assert y.tolist() == [[[-2.0, -2.0, -2.0, 3.0]]]


def test_conv_identity_kernel_and_zero_input():
    x = np.random.default_rng(0).normal(size=(2, 1, 9))
    assert np.array_equal(_conv([[[0, 1, 0]]]).forward(x), x)
    z = _conv(np.ones((3, 1, 3)), bias=[0.5, -1, 2]).forward(np.zeros((1, 1, 5)))
    assert np.array_equal(z, np.broadcast_to(np.array([0.5, -1, 2])[None, :, None], (1, 3, 5)))


def test_conv_rejects_bad_shapes():
    with pytest.raises(ValueError):
        Conv1d(1, 2, 4)
    with pytest.raises(ValueError):
        _conv(np.ones((2, 3, 3))).forward(np.zeros((1, 2, 8)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3, 5]),
       st.integers(1, 12), st.integers(0, 2**32))
def test_conv_matches_loop(bsz, cin, cout, k, n, seed):
    g = np.random.default_rng(seed)
    x, w, b = g.normal(size=(bsz, cin, n)), g.normal(size=(cout, cin, k)), g.normal(size=cout)
    y = _conv(w, b).forward(x)
    assert y.shape == (bsz, cout, n)
    np.testing.assert_allclose(y, conv_loop(x, w, b), rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(-10, 10, allow_nan=False), st.integers(0, 2**32))
def test_conv_is_linear_without_bias(a, seed):
    g = np.random.default_rng(seed)
    layer = _conv(g.normal(size=(4, 2, 3)))
    x = g.normal(size=(3, 2, 10))
    np.testing.assert_allclose(layer.forward(a * x), a * layer.forward(x), rtol=1e-10, atol=1e-10)


# -- BatchNorm --------------------------------------------------------------- #

def test_batchnorm_worked_example():
    bn = BatchNorm1d(1, eps=1e-12)
    y = bn.forward(np.array([[[1.0]], [[2.0]], [[3.0]]]))
    np.testing.assert_allclose(y.ravel(), [-1.2247, 0.0, 1.2247], atol=1e-3)


def test_batchnorm_gamma_zero_and_eval_identity():
    bn = BatchNorm1d(2)
    bn.params["gamma"][:] = 0
    bn.params["beta"][:] = [0.25, -3]
    y = bn.forward(np.random.default_rng(1).normal(size=(4, 2, 5)))
    assert np.array_equal(y, np.broadcast_to(np.array([0.25, -3.0])[None, :, None], y.shape))
    bn = BatchNorm1d(2)
    bn.training = False
    x = np.random.default_rng(2).normal(size=(3, 2, 4))
    np.testing.assert_allclose(bn.forward(x), x / np.sqrt(1 + 1e-5), rtol=1e-15)


def test_batchnorm_batch_of_one_in_training_is_an_error():
    with pytest.raises(ValueError):
        BatchNorm1d(1).forward(np.zeros((1, 1, 16)))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(1, 8), st.integers(0, 2**32))
def test_batchnorm_standardizes_each_channel(bsz, ch, n, seed):
    x = np.random.default_rng(seed).normal(3.0, 2.0, size=(bsz, ch, n))
    bn = BatchNorm1d(ch)
    y = bn.forward(x)
    np.testing.assert_allclose(y.mean(axis=(0, 2)), 0, atol=1e-9)
    var = y.var(axis=(0, 2))
    true_var = x.var(axis=(0, 2))
    np.testing.assert_allclose(var, true_var / (true_var + bn.eps), atol=1e-6)
    assert np.all(bn.buffers["running_var"] >= 0)


def test_running_stats_update_with_momentum():
    x = np.arange(8.0).reshape(2, 1, 4)
    bn = BatchNorm1d(1)
    bn.forward(x)
    # mean 3.5, unbiased var 6.0
    np.testing.assert_allclose(bn.buffers["running_mean"], [0.35])
    np.testing.assert_allclose(bn.buffers["running_var"], [0.9 + 0.1 * 6.0])


# -- Dense / sigmoid / loss -------------------------------------------------- #

def test_zero_dense_head_gives_one_half():
    head = Sequential([Dense(5, 1), Sigmoid()])
    assert np.all(head.forward(np.random.default_rng(0).normal(size=(7, 5))) == 0.5)
    d = Dense(1, 1)
    d.params["weight"][:] = 1
    assert sigmoid(d.forward(np.array([[0.0]])))[0, 0] == 0.5


def test_sigmoid_is_stable_at_extremes():
    with np.errstate(all="raise"):
        out = sigmoid(np.array([800.0, -800.0, 700.0, -700.0, 0.0]))
    assert out[0] == 1.0 and out[1] == 0.0 and out[4] == 0.5
    assert np.all(np.isfinite(out))


def test_bce_closed_forms():
    assert bce_loss(np.array([0.5]), np.array([1]))[0] == pytest.approx(np.log(2), abs=1e-12)
    assert bce_loss(np.array([0.9]), np.array([0]))[0] == pytest.approx(-np.log(0.1), abs=1e-12)
    assert bce_loss(np.array([1.0, 0.0]), np.array([1, 0]))[0] <= 1.7e-7


def test_bce_gradient_matches_difference():
    p = np.array([0.2, 0.7, 0.4])
    y = np.array([1.0, 0.0, 1.0])
    _, g = bce_loss(p, y, positive_weight=2.5)
    h = 1e-7
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        num = (bce_loss(p + e, y, 2.5)[0] - bce_loss(p - e, y, 2.5)[0]) / (2 * h)
        assert g[i] == pytest.approx(num, rel=1e-6)


# -- Adam / init ------------------------------------------------------------- #

def test_adam_first_step_closed_form():
    theta = {"w": np.zeros(1)}
    st_ = AdamState()
    adam_step(st_, theta, {"w": np.ones(1)})
    assert theta["w"][0] == pytest.approx(-1e-4 / (1 + 1e-8), abs=1e-18)
    assert abs(theta["w"][0] - -9.99999e-5) <= 1e-10
    assert st_.t == 1


def test_adam_zero_gradient_is_a_no_op():
    theta = {"w": np.array([1.0, -2.0])}
    st_ = AdamState()
    for _ in range(3):
        adam_step(st_, theta, {"w": np.zeros(2)})
    assert theta["w"].tolist() == [1.0, -2.0]
    assert st_.t == 3


@given(arrays(np.float64, 6, elements=finite.filter(lambda v: abs(v) > 1e-6)))
def test_adam_first_step_moves_against_gradient(g):
    theta = {"w": np.zeros(6)}
    st_ = AdamState()
    adam_step(st_, theta, {"w": g})
    assert np.array_equal(np.sign(theta["w"]), -np.sign(g))
    assert np.all(st_.v["w"] >= 0)


def test_he_normal_statistics_and_determinism():
    w = he_normal_init((10000,), 50, seed=3)
    assert abs(w.std() - 0.2) <= 0.05 * 0.2
    assert abs(w.mean()) <= 3 * 0.2 / np.sqrt(w.size)
    assert np.array_equal(w, he_normal_init((10000,), 50, seed=3))
    with pytest.raises(ValueError):
        he_normal_init((3,), 0)


# -- gradient checks --------------------------------------------------------- #

def _isolated(layer, in_shape, seed):
    """Wrap one layer with the smallest head that yields a BCE loss."""
    g = np.random.default_rng(seed)
    x = g.normal(size=in_shape)
    probe = layer.forward(x)
    flat = int(np.prod(probe.shape[1:]))
    layers = [layer] + ([Flatten()] if probe.ndim == 3 else [])
    layers += [Dense(flat, 1, rng=SplitMix64(seed)), Sigmoid()]
    y = (g.random((in_shape[0], 1)) < 0.5).astype(float)
    return Sequential(layers), x, y


@pytest.mark.parametrize("make,shape", [
    (lambda: Conv1d(2, 3, 3, rng=SplitMix64(1)), (4, 2, 6)),
    (lambda: BatchNorm1d(3), (4, 3, 5)),
    (lambda: Relu(), (4, 2, 5)),
    (lambda: Dense(6, 4, rng=SplitMix64(2)), (4, 6)),
])
def test_grad_check_isolated_layers(make, shape):
    model, x, y = _isolated(make(), shape, seed=5)
    if isinstance(model.layers[0], BatchNorm1d):
        model.layers[0].params["gamma"] = np.array([0.5, 1.5, -1.0])
        model.layers[0].params["beta"] = np.array([0.1, -0.2, 0.3])
    rep = grad_check(model, x, y, rel_tol=1e-5)
    assert rep.passed, "\n".join(rep.lines())


def test_grad_check_dense_sigmoid_bce():
    g = np.random.default_rng(4)
    model = Sequential([Dense(5, 1, rng=SplitMix64(9)), Sigmoid()])
    rep = grad_check(model, g.normal(size=(4, 5)), np.array([[1.0], [0.0], [1.0], [0.0]]), rel_tol=1e-5)
    assert rep.passed, "\n".join(rep.lines())


def test_grad_check_detects_corrupted_gradient():
    g = np.random.default_rng(4)
    model = Sequential([Dense(5, 1, rng=SplitMix64(9)), Sigmoid()])
    rep = grad_check(model, g.normal(size=(4, 5)), np.array([[1.0], [0.0], [1.0], [0.0]]),
                     rel_tol=1e-5, corrupt=1.01)
    assert not rep.passed
    assert rep.worst().worst_rel_err == pytest.approx(0.01 / 1.01, rel=1e-3)
    assert [b.failed_indices for b in rep.blocks] == [list(range(5)), [0]]


def test_numeric_derivative_matches_backward():
    g = np.random.default_rng(4)
    model = Sequential([Dense(5, 1, rng=SplitMix64(9)), Sigmoid()])
    x, y = g.normal(size=(4, 5)), np.array([[1.0], [0.0], [1.0], [0.0]])
    model.backward(bce_loss(model.forward(x), y)[1])
    ga = model.named_grads()["0.weight"].reshape(-1)
    before = model.named_params()["0.weight"].copy()
    for i in range(5):
        for h in (1e-6, 1e-5):
            assert numeric_derivative(model, x, y, "0.weight", i, h) == pytest.approx(ga[i], rel=1e-6)
    assert np.array_equal(model.named_params()["0.weight"], before)


def test_grad_check_leaves_running_stats_alone():
    model, x, y = _isolated(BatchNorm1d(3), (4, 3, 5), seed=1)
    before = {k: v.copy() for k, v in model.named_buffers().items()}
    grad_check(model, x, y)
    for k, v in model.named_buffers().items():
        assert np.array_equal(v, before[k])


# -- whole-model properties -------------------------------------------------- #

def _small_cnn(seed=0):
    r = SplitMix64(seed)
    return Sequential([Conv1d(1, 4, 3, rng=r), BatchNorm1d(4), Relu(), Flatten(), Dense(64, 1, rng=r), Sigmoid()])


def test_eval_forward_is_batch_order_equivariant():
    net = _small_cnn()
    net.forward(np.random.default_rng(0).normal(size=(8, 1, 16)))  # populate running stats
    net.eval()
    x = np.random.default_rng(1).normal(size=(10, 1, 16))
    perm = np.random.default_rng(2).permutation(10)
    # BLAS may block a permuted batch differently, so allow last-bit rounding
    np.testing.assert_allclose(net.forward(x)[perm], net.forward(x[perm]), rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("seed", range(4))
def test_one_epoch_on_separable_toy_halves_the_loss(seed):
    g = np.random.default_rng(0)
    n = 1024
    x = np.zeros((n, 1, 16))
    y = np.zeros((n, 1))
    y[: n // 2] = 1
    x[: n // 2, 0, 8] = -1.0
    perm = g.permutation(n)
    x, y = x[perm], y[perm]
    net = _small_cnn(seed)
    st_ = AdamState(lr=1e-2)
    net.eval()
    start, _ = bce_loss(net.forward(x), y)
    net.train()
    for i in range(0, n, 16):
        p = net.forward(x[i:i + 16])
        _, d = bce_loss(p, y[i:i + 16])
        net.backward(d)
        adam_step(st_, net.named_params(), net.named_grads())
    net.eval()
    end, _ = bce_loss(net.forward(x), y)
    assert end <= 0.5 * start
