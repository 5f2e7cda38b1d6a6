import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcert import network as N
from gradcert.errors import ContractError, DimensionError
from gradcert.intervals import (
    InputRegion,
    IntervalMatrix,
    ModelRegion,
    activation_bounds,
    activation_derivative_bounds,
    certify_prediction,
    explanation_bounds,
    forward_bounds,
    interval_hadamard,
    interval_matmul,
    interval_matmul_exact_corners,
    logit_bounds_margin,
    loss_gradient_seed_bounds,
    softmax_bounds,
)
from gradcert.network import ClassLogit, CrossEntropy, SquaredError
from gradcert.tensor import Tensor

from conftest import fixed_net, random_mlp, small_cnn


def random_interval(rng, shape, scale=2.0, rad=1.0):
    c = rng.uniform(-scale, scale, shape)
    r = rng.uniform(0, rad, shape)
    return IntervalMatrix(c - r, c + r)


def sample(iv, rng, k):
    lo, hi = iv.lower.data, iv.upper.data
    return lo + (hi - lo) * rng.uniform(0, 1, (k,) + lo.shape)


def test_closed_form_bound_frozen_example():
    a = IntervalMatrix(np.array([[0.5, -2.0]]), np.array([[1.5, -2.0]]))
    b = IntervalMatrix(np.array([[2.0], [0.5]]), np.array([[4.0], [1.5]]))
    box = interval_matmul(a, b)
    assert box.lower.data.item() == pytest.approx(-3.0, abs=1e-15)
    assert box.upper.data.item() == pytest.approx(5.0, abs=1e-15)
    exact = interval_matmul_exact_corners(a, b)
    assert exact.lower.data.item() == pytest.approx(-2.0, abs=1e-15)
    assert exact.upper.data.item() == pytest.approx(5.0, abs=1e-15)


def scalar_closed_form_oracle(al, au, bl, bu):
    """Entry-by-entry loop form of the closed-form bound."""
    m, k = al.shape
    n = bl.shape[1]
    lo, hi = np.zeros((m, n)), np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            c = r = 0.0
            for t in range(k):
                ac, ar = (al[i, t] + au[i, t]) / 2, (au[i, t] - al[i, t]) / 2
                bc, br = (bl[t, j] + bu[t, j]) / 2, (bu[t, j] - bl[t, j]) / 2
                c += ac * bc
                r += abs(ac) * br + ar * abs(bc) + ar * br
            lo[i, j], hi[i, j] = c - r, c + r
    return lo, hi


@given(seed=st.integers(0, 2**31), m=st.integers(1, 4), k=st.integers(1, 4), n=st.integers(1, 4))
def test_closed_form_bound_matches_loop_oracle_and_contains_samples(seed, m, k, n):
    rng = np.random.default_rng(seed)
    a, b = random_interval(rng, (m, k)), random_interval(rng, (k, n))
    box = interval_matmul(a, b)
    lo, hi = scalar_closed_form_oracle(a.lower.data, a.upper.data, b.lower.data, b.upper.data)
    np.testing.assert_allclose(box.lower.data, lo, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(box.upper.data, hi, rtol=1e-12, atol=1e-12)
    prods = sample(a, rng, 500) @ sample(b, rng, 500)
    assert np.all(box.contains(prods, 1e-9))
    corners = interval_matmul_exact_corners(a, b)
    assert np.all(corners.lower.data >= box.lower.data - 1e-9) and np.all(corners.upper.data <= box.upper.data + 1e-9)
    assert np.all(corners.contains(prods, 1e-9))


def test_corner_bound_is_attained(rng):
    a, b = random_interval(rng, (2, 3)), random_interval(rng, (3, 2))
    exact = interval_matmul_exact_corners(a, b)
    # each entry is a sum of independent bilinear terms, so per-term endpoint choices reach the bound
    for i in range(2):
        for j in range(2):
            terms = [
                [x * y for x in (a.lower.data[i, t], a.upper.data[i, t]) for y in (b.lower.data[t, j], b.upper.data[t, j])]
                for t in range(3)
            ]
            assert np.isclose(sum(min(t) for t in terms), exact.lower.data[i, j])
            assert np.isclose(sum(max(t) for t in terms), exact.upper.data[i, j])


def test_point_operands_give_exact_products(rng):
    a = rng.standard_normal((3, 2))
    b = rng.standard_normal((2, 4))
    box = interval_matmul(IntervalMatrix.point(a), IntervalMatrix.point(b))
    assert np.array_equal(box.lower.data, a @ b) and np.array_equal(box.upper.data, a @ b)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        interval_matmul(IntervalMatrix.point(np.ones((2, 3))), IntervalMatrix.point(np.ones((2, 3))))


def test_inverted_interval_is_rejected():
    with pytest.raises(ContractError):
        IntervalMatrix(np.ones(2), np.zeros(2))


@given(seed=st.integers(0, 2**31))
def test_hadamard_is_exact_and_sound(seed):
    rng = np.random.default_rng(seed)
    d, g = random_interval(rng, (3, 3)), random_interval(rng, (3, 3))
    box = interval_hadamard(d, g)
    prods = sample(d, rng, 300) * sample(g, rng, 300)
    assert np.all(box.contains(prods, 1e-12))
    ends = np.stack([x * y for x in (d.lower.data, d.upper.data) for y in (g.lower.data, g.upper.data)])
    np.testing.assert_array_equal(box.lower.data, ends.min(axis=0))
    np.testing.assert_array_equal(box.upper.data, ends.max(axis=0))


@pytest.mark.parametrize("act", ["relu", "softplus", "sigmoid", "tanh", "identity"])
def test_activation_derivative_bounds_contain_samples(rng, act):
    pre = random_interval(rng, (4, 6), scale=3.0, rad=2.0)
    box = activation_derivative_bounds(act, pre)
    xs = sample(pre, rng, 2000)
    ds = N.act_derivative_np(act, xs.reshape(-1, 6)).reshape(xs.shape)
    assert np.all(box.contains(ds, 1e-12))


def test_softmax_and_seed_bounds_contain_samples(rng):
    z = random_interval(rng, (3, 4), scale=2.0, rad=1.0)
    zs = sample(z, rng, 2000)
    sm = softmax_bounds(z)
    labels = np.array([0, 3, 1])
    for s in zs:
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        assert np.all(sm.contains(p, 1e-12))
    for loss in (CrossEntropy(labels), ClassLogit(2), SquaredError(np.array([1.0, 0.0, -1.0, 0.5]))):
        seed = loss_gradient_seed_bounds(loss, z)
        for s in zs[:300]:
            assert np.all(seed.contains(N.loss_seed(loss, s), 1e-12))


def test_empty_input_region_is_rejected():
    with pytest.raises(ContractError):
        InputRegion(np.array([2.0, 0.5]), 0.1, 0.0, 1.0).bounds()
    with pytest.raises(ContractError):
        InputRegion(np.zeros(2), -0.1)
    with pytest.raises(ContractError):
        ModelRegion(-1.0)


def test_per_layer_model_gamma():
    m = ModelRegion([0.0, 0.1])
    assert m.layer_gamma(1) == 0.1
    with pytest.raises(DimensionError):
        m.layer_gamma(2)


def sampled_gradients(net, x, eps, gamma, loss, rng, k, lo=None, hi=None):
    region = InputRegion(x, eps, lo, hi)
    xl, xh = region.bounds()
    params = [p.data for p in net.parameters()]
    out = []
    for _ in range(k):
        xp = rng.uniform(xl, xh)
        pp = [p + gamma * np.abs(p) * rng.uniform(-1, 1, p.shape) for p in params]
        out.append(N.input_gradient(net.with_parameters(pp), xp, loss).ravel())
    return np.array(out)


@pytest.mark.parametrize("act", ["relu", "softplus", "tanh"])
@pytest.mark.parametrize("matmul", ["center-radius", "corners"])
def test_gradient_box_contains_sampled_gradients(rng, act, matmul):
    for _ in range(3):
        net = random_mlp(rng, activation=act)
        x = rng.uniform(0, 1, net.input_size)
        loss = CrossEntropy(int(rng.integers(net.class_count)))
        box = explanation_bounds(net, x, 0.05, 0.05, loss, (0.0, 1.0), matmul)
        vs = sampled_gradients(net, x, 0.05, 0.05, loss, rng, 300, 0.0, 1.0)
        assert np.all(box.contains(vs, 1e-9))


def test_corner_mode_is_no_looser(rng):
    net = random_mlp(rng, activation="softplus", depth=3)
    x = rng.uniform(0, 1, net.input_size)
    a = explanation_bounds(net, x, 0.05, 0.05, ClassLogit(0), matmul="center-radius")
    b = explanation_bounds(net, x, 0.05, 0.05, ClassLogit(0), matmul="corners")
    assert np.all(b.v_lower >= a.v_lower - 1e-12) and np.all(b.v_upper <= a.v_upper + 1e-12)


def test_cnn_gradient_box_contains_sampled_gradients(rng):
    net = small_cnn(seed=4, activation="relu")
    x = rng.uniform(0, 1, net.input_size)
    box = explanation_bounds(net, x, 0.02, 0.02, CrossEntropy(1), (0.0, 1.0))
    vs = sampled_gradients(net, x, 0.02, 0.02, CrossEntropy(1), rng, 200, 0.0, 1.0)
    assert np.all(box.contains(vs, 1e-9))


def test_singleton_box_is_the_gradient(rng):
    net = random_mlp(rng, activation="relu")
    x = rng.uniform(0, 1, (4, net.input_size))
    loss = CrossEntropy(np.array([0, 1, 0, 1]))
    box = explanation_bounds(net, x, 0.0, 0.0, loss)
    assert np.max(box.delta) <= 1e-9
    np.testing.assert_allclose(box.center, N.input_gradient(net, x, loss), atol=1e-9)


def test_nested_regions_give_nested_boxes(rng):
    net = random_mlp(rng, activation="softplus")
    x = rng.uniform(0, 1, net.input_size)
    small = explanation_bounds(net, x, 0.01, 0.01, ClassLogit(0))
    big = explanation_bounds(net, x, 0.05, 0.02, ClassLogit(0))
    assert np.all(big.v_lower <= small.v_lower + 1e-12) and np.all(big.v_upper >= small.v_upper - 1e-12)


def test_certified_prediction_is_sound(rng):
    hits = 0
    for _ in range(20):
        net = random_mlp(rng, activation="relu")
        x = rng.uniform(0, 1, net.input_size)
        c = N.predict(net, x)
        if certify_prediction(net, InputRegion(x, 0.01), ModelRegion(0.01), c):
            hits += 1
            for _ in range(200):
                xp = x + rng.uniform(-0.01, 0.01, x.shape)
                pp = [p.data * (1 + 0.01 * rng.uniform(-1, 1, p.shape)) for p in net.parameters()]
                assert N.predict(net.with_parameters(pp), xp) == c
    assert hits > 0


def test_batch_and_single_boxes_agree(rng):
    net = random_mlp(rng, activation="softplus")
    x = rng.uniform(0, 1, (3, net.input_size))
    loss = CrossEntropy(np.array([0, 1, 1]))
    batch = explanation_bounds(net, x, 0.03, 0.01, loss)
    for i in range(3):
        one = explanation_bounds(net, x[i], 0.03, 0.01, CrossEntropy(int(loss.label[i])))
        np.testing.assert_allclose(one.v_lower, batch.v_lower[i], rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(one.v_upper, batch.v_upper[i], rtol=1e-12, atol=1e-12)


def iv(lo, hi):
    return IntervalMatrix(np.array(lo, dtype=np.float64), np.array(hi, dtype=np.float64))


def bounds_of(m):
    return m.lower.data.tolist(), m.upper.data.tolist()


def test_matmul_worked_cases():
    assert bounds_of(interval_matmul(iv([[2.0, 2.0]], [[2.0, 2.0]]), iv([[1.0], [0.0]], [[3.0], [0.0]]))) == ([[2.0]], [[6.0]])
    assert bounds_of(interval_matmul(iv([[-1.0]], [[1.0]]), iv([[-1.0]], [[1.0]]))) == ([[-1.0]], [[1.0]])
    a, b = iv([[0.0]], [[2.0]]), iv([[-2.0]], [[0.0]])
    assert bounds_of(interval_matmul(a, b)) == ([[-4.0]], [[2.0]])
    assert bounds_of(interval_matmul_exact_corners(a, b)) == ([[-4.0]], [[0.0]])


def test_corner_product_matches_grid_search(rng):
    grid = np.linspace(0.0, 1.0, 101)
    for _ in range(50):
        a = random_interval(rng, (1, 1))
        b = random_interval(rng, (1, 1))
        ga = a.lower.data[0, 0] + grid * (a.upper.data[0, 0] - a.lower.data[0, 0])
        gb = b.lower.data[0, 0] + grid * (b.upper.data[0, 0] - b.lower.data[0, 0])
        prods = np.outer(ga, gb)
        out = interval_matmul_exact_corners(a, b)
        assert out.lower.data[0, 0] == pytest.approx(prods.min(), abs=1e-12)
        assert out.upper.data[0, 0] == pytest.approx(prods.max(), abs=1e-12)


def test_hadamard_worked_cases(rng):
    assert bounds_of(interval_hadamard(iv([1.0], [2.0]), iv([-3.0], [-1.0]))) == ([-6.0], [-1.0])
    g = random_interval(rng, (4,))
    zero = interval_hadamard(iv(np.zeros(4), np.zeros(4)), g)
    assert np.all(zero.lower.data == 0) and np.all(zero.upper.data == 0)
    assert bounds_of(interval_hadamard(iv([-1.0], [1.0]), iv([-1.0], [1.0]))) == ([-1.0], [1.0])


def test_activation_worked_cases():
    assert bounds_of(activation_bounds("relu", iv([-1.0], [2.0]))) == ([0.0], [2.0])
    assert bounds_of(activation_bounds("sigmoid", iv([0.0], [0.0]))) == ([0.5], [0.5])
    lo, hi = bounds_of(activation_bounds("softplus", iv([-1.0], [1.0])))
    assert lo[0] == pytest.approx(0.31326, abs=1e-5) and hi[0] == pytest.approx(1.31326, abs=1e-5)
    assert bounds_of(activation_derivative_bounds("relu", iv([1.0], [2.0]))) == ([1.0], [1.0])
    assert bounds_of(activation_derivative_bounds("relu", iv([-1.0], [2.0]))) == ([0.0], [1.0])
    lo, hi = bounds_of(activation_derivative_bounds("sigmoid", iv([-1.0], [1.0])))
    assert lo[0] == pytest.approx(0.19661, abs=1e-5) and hi[0] == 0.25


def test_softmax_and_seed_worked_cases():
    assert bounds_of(softmax_bounds(iv([[0.0, 0.0]], [[0.0, 0.0]]))) == ([[0.5, 0.5]], [[0.5, 0.5]])
    lo, hi = bounds_of(softmax_bounds(iv([[0.0, 0.0]], [[1.0, 1.0]])))
    e = np.e
    assert lo[0][0] == pytest.approx(1 / (1 + e), abs=1e-12) and hi[0][0] == pytest.approx(e / (1 + e), abs=1e-12)
    box = iv([[-1.0, 0.0, 2.0]], [[1.0, 3.0, 4.0]])
    assert bounds_of(loss_gradient_seed_bounds(ClassLogit(0), box)) == ([[1.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]])
    assert bounds_of(loss_gradient_seed_bounds(SquaredError(np.zeros(1)), iv([[1.0]], [[2.0]]))) == ([[2.0]], [[4.0]])
    z = np.array([[0.3, -1.2, 2.0]])
    seed = loss_gradient_seed_bounds(CrossEntropy(1), iv(z, z))
    want = np.exp(z) / np.exp(z).sum() - np.array([[0.0, 1.0, 0.0]])
    np.testing.assert_allclose(seed.lower.data, want, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(seed.lower.data, seed.upper.data)


def test_forward_bounds_worked_cases(rng):
    net = random_mlp(rng, n_in=4, depth=3, classes=3, activation="softplus")
    x = rng.standard_normal((3, 4))
    fwd = forward_bounds(net, InputRegion(x, 0.0), ModelRegion(0.0))
    _, caches = N.forward(net, x)
    logits = N.forward(net, x)[0]
    for pre, post in fwd.layers:
        np.testing.assert_array_equal(pre.lower.data, pre.upper.data)
        np.testing.assert_array_equal(post.lower.data, post.upper.data)
    np.testing.assert_allclose(fwd.logits.lower.data, logits, rtol=0, atol=1e-12)
    ident = fixed_net(3, [(np.eye(3), np.zeros(3), "identity")])
    out = forward_bounds(ident, InputRegion(x[:, :3], 0.1)).logits
    np.testing.assert_allclose(out.lower.data, x[:, :3] - 0.1, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out.upper.data, x[:, :3] + 0.1, rtol=0, atol=1e-15)


def test_forward_caches_contain_sampled_activations(rng):
    net = random_mlp(rng, n_in=3, depth=3, width=8, classes=2, activation="softplus")
    x = rng.standard_normal(3)
    eps = gamma = 0.05
    fwd = forward_bounds(net, InputRegion(x, eps), ModelRegion(gamma))
    for _ in range(1000):
        xs = x + rng.uniform(-eps, eps, 3)
        params = [p.data * (1 + gamma * rng.uniform(-1, 1, p.shape)) for p in net.parameters()]
        z = xs[None]
        for layer, (pre, post), (w, b) in zip(net.with_parameters(params).layers, fwd.layers, zip(params[::2], params[1::2])):
            zeta = z @ w.T + b
            z = N.act_np(layer.activation, zeta)
            assert np.all(pre.contains(zeta, 1e-9)) and np.all(post.contains(z, 1e-9))


def test_linear_net_has_zero_width(rng):
    net = fixed_net(4, [(rng.standard_normal((5, 4)), rng.standard_normal(5), "identity"), (rng.standard_normal((3, 5)), np.zeros(3), "identity")])
    box = explanation_bounds(net, rng.standard_normal((6, 4)), eps=0.3, gamma=0.0, loss=ClassLogit(1))
    assert np.all(box.delta == 0.0)


def test_wider_region_gives_wider_box(rng):
    for _ in range(10):
        net = random_mlp(rng, n_in=4, activation=rng.choice(["relu", "softplus", "tanh"]))
        x = rng.standard_normal((3, 4))
        small = explanation_bounds(net, x, eps=0.01, loss=ClassLogit(0))
        large = explanation_bounds(net, x, eps=0.02, loss=ClassLogit(0))
        assert np.all(large.v_lower <= small.v_lower) and np.all(large.v_upper >= small.v_upper)


def test_logit_margin_worked_cases(rng):
    assert logit_bounds_margin(iv([2.0, 0.0], [3.0, 1.0]), 0) is True
    assert logit_bounds_margin(iv([0.0, 1.0], [3.0, 2.0]), 0) is False
    net = random_mlp(rng, n_in=4, classes=3)
    x = rng.standard_normal((30, 4))
    pred = N.predict(net, x)
    for c in range(3):
        np.testing.assert_array_equal(certify_prediction(net, InputRegion(x, 0.0), None, c), pred == c)


def test_box_cost_is_a_small_multiple_of_one_gradient_pass():
    net = N.preset("fcn-2x256", (784,), 10, seed=0)
    x = np.random.default_rng(0).uniform(0, 1, (256, 784))

    def clock(fn):
        start = time.perf_counter()
        fn()
        return time.perf_counter() - start

    # interleaved so load changes hit both timings alike; best of each
    base, boxed = np.inf, np.inf
    for _ in range(9):
        base = min(base, clock(lambda: N.input_gradient(net, x, ClassLogit(0))))
        boxed = min(boxed, clock(lambda: explanation_bounds(net, x, 0.01, 0.01, ClassLogit(0), (0.0, 1.0))))
    assert boxed <= 6.0 * base, f"box pass took {boxed / base:.2f}x a gradient pass"


def test_relative_box_builds_radius_and_endpoints_on_demand(rng):
    w = rng.standard_normal((3, 4))
    box = ModelRegion(0.1).interval(Tensor(w), 0)
    assert box._radius is None and box._lower is None
    np.testing.assert_allclose(box.radius.data, 0.1 * np.abs(w))
    np.testing.assert_allclose(box.lower.data, w - 0.1 * np.abs(w))
    np.testing.assert_allclose(box.upper.data, w + 0.1 * np.abs(w))
    assert not box.is_point and ModelRegion(0.1).interval(Tensor(np.zeros((2, 2))), 0).is_point
