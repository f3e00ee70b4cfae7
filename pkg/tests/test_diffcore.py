import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from noda import nets
from noda.diffcore import (
    ContractError,
    DimensionError,
    DomainError,
    Tape,
    Tensor,
    adam_init,
    adam_step,
    apply_op,
    backward,
    grad_check,
)


def grads_of(fn, **params):
    with Tape() as tape:
        P = {k: tape.param(k, np.asarray(v, dtype=np.float64)) for k, v in params.items()}
        out = fn(**P)
    return backward(out)


def test_add_elementwise():
    np.testing.assert_array_equal(apply_op("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_matmul_identity():
    out = apply_op("matmul", Tensor(np.eye(2)), Tensor([[5.0], [7.0]]))
    np.testing.assert_array_equal(out.data, [[5.0], [7.0]])


def test_tanh_of_zero():
    np.testing.assert_array_equal(apply_op("tanh", Tensor(np.zeros((2, 3)))).data, np.zeros((2, 3)))


def test_square_derivative():
    g = grads_of(lambda x: x.square().sum(), x=[3.0])
    assert g["x"][0] == 6.0


def test_product_rule():
    g = grads_of(lambda x, y: (x * y).sum(), x=[2.0], y=[5.0])
    assert (g["x"][0], g["y"][0]) == (5.0, 2.0)


def test_unused_param_gets_zero_grad():
    g = grads_of(lambda x, y: x.sum(), x=[1.0, 2.0], y=[[1.0, 2.0]])
    np.testing.assert_array_equal(g["y"], np.zeros((1, 2)))


def test_two_layer_network_matches_finite_differences():
    rng = np.random.default_rng(0)
    params = nets.init_mlp(rng, "net", [3, 3, 2])
    assert nets.count_params(params) == 20
    x = rng.normal(size=(4, 3))

    def f(P):
        return nets.mlp(P, "net", Tensor(x)).square().mean()

    rep = grad_check(f, params, fd_step=1e-4, tol=1e-5)
    assert rep.passed, rep


def test_grad_check_linear_is_exact():
    # dyadic inputs and step keep every operation exact
    x = np.array([1.5, -2.0, 0.25])
    rep = grad_check(lambda P: (P["w"] * x).sum(), {"w": np.array([0.5, 1.0, 2.0])}, fd_step=2.0 ** -10)
    assert rep.max_rel_error == 0.0


def test_grad_check_quadratic():
    rep = grad_check(lambda P: P["w"].square().sum() * 0.5, {"w": np.array([0.3, -1.2, 2.5])})
    assert rep.max_rel_error <= 1e-10


def test_grad_check_reports_failure():
    # a wrong hand-written vjp must be caught
    def bad_op(a):
        return np.sin(a.data), lambda g: (g * 2.0,)

    from noda.diffcore import OPS
    OPS["bad"] = bad_op
    try:
        rep = grad_check(lambda P: apply_op("bad", P["w"]).sum(), {"w": np.array([0.1, 0.2])})
    finally:
        del OPS["bad"]
    assert not rep.passed
    assert rep.worst[0] == "w"


def test_relu_and_clip_gradients_away_from_kinks():
    w = np.array([-1.0, -0.3, 0.4, 1.7])
    rep = grad_check(lambda P: (apply_op("relu", P["w"]) * P["w"]).sum(), {"w": w})
    assert rep.passed
    rep = grad_check(lambda P: apply_op("clip", P["w"], lo=-0.5, hi=1.0).square().sum(), {"w": w})
    assert rep.passed
    g = grads_of(lambda w: apply_op("clip", w, lo=-0.5, hi=1.0).sum(), w=w)
    np.testing.assert_array_equal(g["w"], [0.0, 1.0, 1.0, 0.0])


def test_slice_concat_and_broadcast_grads():
    rng = np.random.default_rng(1)
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,)), "c": rng.normal(size=(3, 2))}

    def f(P):
        y = apply_op("concat", P["a"] + P["b"], P["c"], axis=1)
        return (y[:, 1:5].tanh() * y[:, :4]).mean() + y[0].exp().sum()

    assert grad_check(f, params).passed


def test_sum_of_grads_is_grad_of_sum():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5,))
    # no fan-out inside either term, so each gradient is a single product
    f1 = lambda w: (w.square() * 3.0).sum()
    f2 = lambda w: (w.tanh() * x).sum()
    g1 = grads_of(f1, w=x)["w"]
    g2 = grads_of(f2, w=x)["w"]
    g12 = grads_of(lambda w: f1(w) + f2(w), w=x)["w"]
    np.testing.assert_array_equal(g12, g1 + g2)


def _random_graph(seed):
    """A random composite scalar function of three parameters, smooth everywhere."""
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 4), rng.integers(1, 4)
    params = {"x": rng.normal(size=(n, m)), "w": rng.normal(size=(m, m)), "v": rng.normal(size=(m,))}
    steps = rng.integers(0, 9, size=rng.integers(2, 7))

    def f(P):
        y = P["x"]
        for s in steps:
            if s == 0:
                y = y @ P["w"]
            elif s == 1:
                y = y.tanh()
            elif s == 2:
                y = y * P["v"]
            elif s == 3:
                y = apply_op("softplus", y) - P["v"]
            elif s == 4:
                y = (y.tanh()).exp()
            elif s == 5:
                y = (y.square() + 1.0).log()
            elif s == 6:
                y = apply_op("concat", y, P["x"], axis=0)[: len(P["x"])]
            elif s == 7:
                y = y + y.mean(axis=0, keepdims=True) * 0.5
            else:
                y = y - P["x"].sum(axis=1, keepdims=True)
        return y.square().mean() + (y * P["v"]).sum()

    return f, params


def _resolvable(f, params, h=1e-3, floor=1e-6):
    """True unless some nonzero gradient entry is too small for central differences to resolve.

    Nested ``log(1 + y^2)`` and saturated ``tanh`` can flatten an entry to
    1e-11 of the function's scale, below what any difference step can resolve
    to 1e-4. Magnitudes come from a coarse difference, not from the tape.
    """
    value = lambda P: float(np.asarray(f({k: Tensor(v) for k, v in P.items()}).data).reshape(-1)[0])
    fd = []
    for name, base in params.items():
        for i in range(base.size):
            up, down = {k: v.copy() for k, v in params.items()}, {k: v.copy() for k, v in params.items()}
            up[name].reshape(-1)[i] += h
            down[name].reshape(-1)[i] -= h
            fd.append((value(up) - value(down)) / (2 * h))
    fd = np.abs(fd)
    small = (fd > 0) & (fd < floor * max(1.0, abs(value(params)), fd.max()))
    return not small.any()      # unused parameters give exact zeros, which are fine


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_random_graphs_match_finite_differences(seed):
    f, params = _random_graph(seed)
    assume(_resolvable(f, params))
    rep = grad_check(f, params, fd_step=1e-5, tol=1e-4)
    assert rep.passed, rep


def test_backward_contracts():
    with Tape() as tape:
        x = tape.param("x", np.ones(3))
        y = x * 2.0
    with pytest.raises(ContractError):
        backward(y)
    with pytest.raises(ContractError):
        backward(Tensor([1.0]) + 1.0)
    with pytest.raises(ContractError):
        apply_op("nope", Tensor([1.0]))


def test_shape_and_domain_errors():
    with pytest.raises(DimensionError):
        apply_op("matmul", Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        apply_op("add", Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(DomainError):
        apply_op("log", Tensor([-1.0]))
    with pytest.raises(DomainError):
        apply_op("exp", Tensor([1000.0]))


def test_adam_zero_gradient_is_a_no_op():
    p = {"w": np.array([1.0, -2.0])}
    st0 = adam_init(p, lr=0.1)
    p1, st1 = adam_step(p, {"w": np.zeros(2)}, st0)
    np.testing.assert_array_equal(p1["w"], p["w"])
    np.testing.assert_array_equal(st1.m["w"], 0.0)
    np.testing.assert_array_equal(st1.v["w"], 0.0)


@pytest.mark.parametrize("g", [3.7, -0.02, 250.0])
def test_adam_first_step_moves_by_lr(g):
    p1, _ = adam_step({"w": np.array([0.0])}, {"w": np.array([g])}, adam_init({"w": np.zeros(1)}, lr=0.01))
    assert p1["w"][0] == pytest.approx(-0.01 * np.sign(g), rel=1e-5)


def test_adam_minimizes_quadratic_like_reference():
    p, state = {"x": np.array([0.0])}, adam_init({"x": np.zeros(1)}, lr=0.1)
    # independent scalar reference loop
    x, m, v = 0.0, 0.0, 0.0
    for t in range(1, 101):
        g = grads_of(lambda x: (x - 3.0).square().sum(), x=p["x"])
        p, state = adam_step(p, g, state)
        gr = 2.0 * (x - 3.0)
        m = 0.9 * m + 0.1 * gr
        v = 0.999 * v + 0.001 * gr * gr
        x -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert abs(p["x"][0] - 3.0) < 0.05
    assert p["x"][0] == pytest.approx(x, abs=1e-12)


def test_adam_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        p = {"w": rng.normal(size=(3, 2))}
        state = adam_init(p)
        for _ in range(20):
            g = grads_of(lambda w: (w.tanh() * 2.0).square().sum(), w=p["w"])
            p, state = adam_step(p, g, state)
        return p["w"]

    assert run().tobytes() == run().tobytes()


def test_adam_missing_gradient():
    with pytest.raises(ContractError):
        adam_step({"w": np.ones(1)}, {}, adam_init({"w": np.ones(1)}))
