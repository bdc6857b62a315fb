import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sealpose import autodiff as ad
from sealpose.errors import ContractError, NumericError, StructuralError
from sealpose.gradcheck import finite_diff_check

from conftest import store_of

N_INSTANCES = 100
TOL = 1e-4


def away_from_zero(rng, shape, margin=0.1):
    v = rng.normal(size=shape)
    return np.where(np.abs(v) < margin, np.sign(v + 1e-12) * margin, v)


# each entry: (builder of random inputs, objective over the node dict)
UNARY = {
    "neg": (lambda r: {"a": r.normal(size=(3, 2))}, lambda p: (-p["a"] * p["a"]).sum()),
    "power": (lambda r: {"a": r.uniform(0.5, 2.0, size=(4,))}, lambda p: ad.power(p["a"], 2.5).sum()),
    "exp": (lambda r: {"a": r.normal(size=(2, 3))}, lambda p: ad.exp(p["a"]).sum()),
    "log": (lambda r: {"a": r.uniform(0.5, 3.0, size=(5,))}, lambda p: ad.log(p["a"]).sum()),
    "sqrt": (lambda r: {"a": r.uniform(0.5, 3.0, size=(5,))}, lambda p: ad.sqrt(p["a"]).sum()),
    "tanh": (lambda r: {"a": r.normal(size=(5,))}, lambda p: ad.tanh(p["a"]).sum()),
    "relu": (lambda r: {"a": away_from_zero(r, (6,))}, lambda p: (ad.relu(p["a"]) * ad.relu(p["a"])).sum()),
    "abs": (lambda r: {"a": away_from_zero(r, (6,))}, lambda p: (ad.abs_(p["a"]) * p["a"]).sum()),
    "softplus": (lambda r: {"a": 3 * r.normal(size=(6,))}, lambda p: ad.softplus(p["a"]).sum()),
    "sum_axis": (lambda r: {"a": r.normal(size=(3, 4))}, lambda p: ad.exp(p["a"].sum(axis=0)).sum()),
    "mean_keepdims": (
        lambda r: {"a": r.normal(size=(3, 4))},
        lambda p: (p["a"] * p["a"].mean(axis=1, keepdims=True)).sum(),
    ),
    "reshape": (lambda r: {"a": r.normal(size=(2, 6))}, lambda p: ad.tanh(p["a"].reshape(3, 4))[1].sum()),
    "transpose": (
        lambda r: {"a": r.normal(size=(2, 3, 4))},
        lambda p: (ad.transpose(p["a"], (2, 0, 1)) * np.arange(24.0).reshape(4, 2, 3)).sum(),
    ),
    "getitem": (lambda r: {"a": r.normal(size=(4, 3))}, lambda p: (p["a"][np.array([0, 2, 2])] ** 2).sum()),
    "softmax": (
        lambda r: {"a": r.normal(size=(3, 5))},
        lambda p: (ad.softmax(p["a"], axis=-1) * np.arange(15.0).reshape(3, 5)).sum(),
    ),
    "norm": (lambda r: {"a": r.normal(size=(4, 3))}, lambda p: ad.norm(p["a"], axis=-1).sum()),
}

BINARY = {
    "add_broadcast": (
        lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(4,))},
        lambda p: ad.tanh(p["a"] + p["b"]).sum(),
    ),
    "sub": (lambda r: {"a": r.normal(size=(3,)), "b": r.normal(size=(3,))}, lambda p: ((p["a"] - p["b"]) ** 2).sum()),
    "mul": (lambda r: {"a": r.normal(size=(2, 3)), "b": r.normal(size=(2, 1))}, lambda p: (p["a"] * p["b"]).sum()),
    "div": (
        lambda r: {"a": r.normal(size=(3,)), "b": r.uniform(0.5, 2.0, size=(3,))},
        lambda p: (p["a"] / p["b"]).sum(),
    ),
    "matmul": (
        lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(4, 2))},
        lambda p: ad.tanh(p["a"] @ p["b"]).sum(),
    ),
    "matmul_batched": (
        lambda r: {"a": r.normal(size=(2, 3, 4)), "b": r.normal(size=(4, 2))},
        lambda p: ad.tanh(p["a"] @ p["b"]).sum(),
    ),
    "matmul_bmm": (
        lambda r: {"a": r.normal(size=(2, 3, 4)), "b": r.normal(size=(2, 4, 3))},
        lambda p: ad.tanh(p["a"] @ p["b"]).sum(),
    ),
    "concat": (
        lambda r: {"a": r.normal(size=(2, 3)), "b": r.normal(size=(2, 2))},
        lambda p: ad.tanh(ad.concat([p["a"], p["b"]], axis=-1)).sum(),
    ),
    "stack": (
        lambda r: {"a": r.normal(size=(3,)), "b": r.normal(size=(3,))},
        lambda p: (ad.stack([p["a"], p["b"]]) ** 2 * np.arange(6.0).reshape(2, 3)).sum(),
    ),
    "linear": (
        lambda r: {"x": r.normal(size=(2, 3)), "w": r.normal(size=(3, 4)), "b": r.normal(size=(4,))},
        lambda p: ad.tanh(ad.linear(p["x"], p["w"], p["b"])).sum(),
    ),
    "layer_norm": (
        lambda r: {"x": r.normal(size=(3, 5)), "g": r.normal(size=(5,)), "b": r.normal(size=(5,))},
        lambda p: (ad.layer_norm(p["x"], p["g"], p["b"]) * np.arange(15.0).reshape(3, 5)).sum(),
    ),
}


@pytest.mark.parametrize("name", sorted({**UNARY, **BINARY}))
def test_every_operation_matches_central_differences(name):
    build, f = {**UNARY, **BINARY}[name]
    rng = np.random.default_rng(sum(map(ord, name)))
    worst = max(finite_diff_check(f, store_of(**build(rng))) for _ in range(N_INSTANCES))
    assert worst < TOL


def test_identity_and_product_gradients():
    x = ad.Node(3.0, name="x", requires_grad=True, is_param=True)
    assert ad.backward(x)["x"] == 1.0
    x = ad.Node(2.0, name="x", requires_grad=True, is_param=True)
    y = ad.Node(5.0, name="y", requires_grad=True, is_param=True)
    grads = ad.backward(x * y)
    assert grads["x"] == 5.0 and grads["y"] == 2.0


def test_polynomial_check_is_tight():
    assert finite_diff_check(lambda p: p["p"] * p["p"], store_of(p=3.0)) < 1e-8


def test_root_gradient_is_one_and_reused_nodes_accumulate():
    x = ad.Node(np.array([1.0, -2.0]), name="x", requires_grad=True, is_param=True)
    y = x * x
    root = (y + y).sum()
    ad.backward(root)
    assert root.grad == 1.0
    np.testing.assert_array_equal(x.grad, [4.0, -8.0])


def test_kinks_take_zero_gradient():
    x = ad.Node(np.zeros(3), name="x", requires_grad=True, is_param=True)
    assert np.all(ad.backward((ad.relu(x) + ad.abs_(x) + ad.norm(x)).sum())["x"] == 0.0)


def test_unregistered_leaves_get_gradients_but_are_not_returned():
    p = ad.Node(2.0, name="p", requires_grad=True, is_param=True)
    v = ad.variable(3.0, name="v")
    grads = ad.backward(p * v)
    assert set(grads) == {"p"} and v.grad == 2.0


def test_constants_are_pruned_from_the_tape():
    out = ad.exp(ad.const(1.0)) + 1.0
    assert out.parents == () and not out.requires_grad


def test_backward_is_deterministic(rng):
    build, f = BINARY["layer_norm"]
    arrays = build(rng)
    a = ad.backward(f(store_of(**arrays).nodes()))
    b = ad.backward(f(store_of(**arrays).nodes()))
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_non_scalar_root_is_rejected():
    with pytest.raises(ContractError):
        ad.backward(ad.variable(np.ones(3)))


def test_non_finite_value_names_the_node():
    x = ad.Node(np.array([-1.0]), name="x", requires_grad=True, is_param=True)
    with np.errstate(invalid="ignore"):
        root = ad.log(x).sum()
    with pytest.raises(NumericError, match="log"):
        ad.backward(root)


def test_cycle_is_a_structural_error():
    a = ad.variable(1.0)
    b = a * 2.0
    a.parents = (b,)
    with pytest.raises(StructuralError):
        ad.backward(b)


def test_precision_context_switches_node_dtype():
    with ad.precision(np.float32):
        assert ad.const(1.0).value.dtype == np.float32
    assert ad.const(1.0).value.dtype == np.float64


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(values):
    s = ad.softmax(ad.const(np.array(values))).value
    assert abs(s.sum() - 1.0) < 1e-12 and np.all(s >= 0)
