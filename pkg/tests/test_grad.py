"""Reverse-mode engine: op semantics, backward contracts, Adam, checkpoints."""

import json

import numpy as np
import pytest

from statechrono import grad
from statechrono.grad import (ParamStore, adam_step, backward,
                              central_difference, gradient_check, leaf,
                              load_params_json, min_kink_margin,
                              params_from_json_dict, params_to_json_dict,
                              save_params_json, sgd_step)


def test_relu_negative_input():
    x = leaf(np.array(-1.0))
    y = grad.rectified_linear(x)
    assert float(y.value) == 0.0
    backward(y)
    assert float(x.grad) == 0.0


def test_sqrt_value_and_gradient():
    x = leaf(np.array(4.0))
    y = grad.sqrt(x)
    assert float(y.value) == 2.0
    backward(y)
    assert float(x.grad) == 0.25


def test_sqrt_rejects_negative():
    with pytest.raises(ValueError, match="non-negative"):
        grad.sqrt(grad.constant(np.array(-1.0)))


def test_sqrt_gradient_finite_at_zero():
    x = leaf(np.array(0.0))
    y = grad.sqrt(x)
    backward(y)
    assert np.isfinite(x.grad)


def test_stop_gradient_blocks_one_branch():
    x = leaf(np.array(3.0))
    y = grad.multiply(x, grad.stop_gradient(x))
    assert float(y.value) == 9.0
    backward(y)
    assert float(x.grad) == 3.0


def test_stop_gradient_branch_gets_no_gradient():
    x = leaf(np.array([1.0, 2.0]))
    blocked = grad.stop_gradient(grad.squared_norm(x))
    y = grad.add(grad.squared_norm(x), blocked)
    backward(y)
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_squared_norm_gradient():
    p = leaf(np.array([1.0, 2.0]))
    y = grad.squared_norm(p)
    backward(y)
    assert np.array_equal(p.grad, [2.0, 4.0])


def test_absolute_gradient_zero_at_zero():
    x = leaf(np.array([-2.0, 0.0, 3.0]))
    y = grad.mean(grad.absolute(x))
    backward(y)
    assert np.array_equal(x.grad, [-1.0 / 3, 0.0, 1.0 / 3])


def test_max_over_axis_routes_to_lowest_tie():
    x = leaf(np.array([[2.0, 5.0, 5.0]]))
    y = grad.mean(grad.max_over_axis(x))
    backward(y)
    assert np.array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_maximum_tie_goes_to_first_argument():
    a = leaf(np.array([1.0]))
    b = leaf(np.array([1.0]))
    y = grad.mean(grad.maximum(a, b))
    backward(y)
    assert a.grad[0] == 1.0 and b.grad[0] == 0.0


def test_clamp_min_gradient_mask():
    x = leaf(np.array([-1.0, 2.0]))
    y = grad.mean(grad.clamp_min(x, 0.0))
    backward(y)
    assert np.array_equal(x.grad, [0.0, 0.5])


def test_affine_and_concatenate_shapes():
    w = leaf(np.ones((4, 3)))
    b = leaf(np.zeros(3))
    u = leaf(np.ones((2, 2)))
    v = leaf(2 * np.ones((2, 2)))
    out = grad.affine(w, b, grad.concatenate(u, v))
    assert out.value.shape == (2, 3)
    assert np.allclose(out.value, 6.0)
    backward(grad.mean(out))
    assert w.grad.shape == (4, 3)
    assert b.grad.shape == (3,)
    assert u.grad.shape == (2, 2)


def test_dot_and_broadcast_multiply():
    a = leaf(np.array([[1.0, 2.0], [3.0, 4.0]]))
    alpha = leaf(np.array(2.0))
    y = grad.mean(grad.multiply(alpha, grad.dot(a, a)))
    backward(y)
    # dot(a, a) row-wise = |a|^2; d/da = 2a * alpha / 2 rows
    assert np.array_equal(a.grad, 2.0 * a.value * 2.0 / 2.0)
    assert float(alpha.grad) == pytest.approx((5.0 + 25.0) / 2.0)


def test_gather_rows_accumulates_duplicates():
    x = leaf(np.array([[1.0], [2.0], [3.0]]))
    picked = grad.gather_rows(x, np.array([0, 0, 2]))
    backward(grad.mean(picked))
    assert np.allclose(x.grad, [[2.0 / 3], [0.0], [1.0 / 3]])


def test_cummax_and_take_along_match_numpy():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(3, 5))
    node = grad.cummax_last(grad.constant(v))
    assert np.array_equal(node.value, np.maximum.accumulate(v, axis=-1))
    order = np.argsort(v, axis=-1)
    taken = grad.take_along_last(grad.constant(v), order)
    assert np.array_equal(taken.value, np.take_along_axis(v, order, axis=-1))


def test_backward_rejects_non_scalar_root():
    x = leaf(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        backward(grad.scalar_multiply(x, 2.0))


def test_backward_rejects_reuse():
    x = leaf(np.array(2.0))
    y = grad.multiply(x, x)
    backward(y)
    assert float(x.grad) == 4.0
    with pytest.raises(RuntimeError, match="consumed"):
        backward(y)


def test_backward_visits_shared_subgraph_once():
    x = leaf(np.array(3.0))
    shared = grad.multiply(x, x)          # x^2
    y = grad.add(shared, shared)          # 2 x^2
    backward(y)
    assert float(x.grad) == 12.0


def test_composite_d_hat_matches_finite_differences():
    from statechrono.trainer import d_hat_node
    rng = np.random.default_rng(1)
    values = {"a": rng.normal(size=(4, 6)), "b": rng.normal(size=(4, 6))}

    def build(lv):
        return grad.mean(d_hat_node(lv["a"], lv["b"]))

    res = gradient_check(build, values, rng, n_coords=12, h=1e-5)
    assert res is not None
    assert res[0] <= 1e-4


def test_min_kink_margin_reports_relu_distance():
    x = grad.constant(np.array([0.5, -2.0]))
    root = grad.mean(grad.rectified_linear(x))
    assert min_kink_margin(root) == 0.5


def test_adam_zero_gradient_is_identity():
    store = ParamStore({"w": np.array([1.0, -2.0])})
    adam_step(store, {"w": np.zeros(2)}, lr=0.1)
    assert np.array_equal(store.values["w"], [1.0, -2.0])


def test_adam_first_step_hand_formula():
    store = ParamStore({"w": np.array(1.0)})
    g = 0.5
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    adam_step(store, {"w": np.array(g)}, lr=lr, beta1=b1, beta2=b2, eps=eps)
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    expected = 1.0 - lr * m_hat / (np.sqrt(v_hat) + eps)
    assert float(store.values["w"]) == expected


def test_adam_deterministic():
    g = np.array([0.3, -0.7])
    s1 = ParamStore({"w": np.array([1.0, 2.0])})
    s2 = ParamStore({"w": np.array([1.0, 2.0])})
    for _ in range(3):
        adam_step(s1, {"w": g})
        adam_step(s2, {"w": g})
    assert np.array_equal(s1.values["w"], s2.values["w"])


def test_sgd_step():
    store = ParamStore({"w": np.array([1.0])})
    sgd_step(store, {"w": np.array([0.5])}, lr=0.2)
    assert np.array_equal(store.values["w"], [0.9])


def test_param_store_updates_alias_arrays():
    base = np.array([1.0, 1.0])
    store = ParamStore({"w": base})
    adam_step(store, {"w": np.ones(2)}, lr=0.1)
    assert store.values["w"] is base  # in-place update keeps identity


def test_checkpoint_round_trip(tmp_path):
    store = ParamStore({"w": np.array([[1.5, -2.0]]), "b": np.array(0.25)})
    doc = params_to_json_dict(store)
    assert json.loads(json.dumps(doc)) == doc
    back = params_from_json_dict(doc)
    assert np.array_equal(back.values["w"], store.values["w"])
    path = tmp_path / "ckpt.json"
    save_params_json(store, path)
    loaded = load_params_json(path)
    assert np.array_equal(loaded.values["b"], store.values["b"])


def test_central_difference_quadratic():
    f = lambda vals: float(np.sum(vals["w"] ** 2))
    values = {"w": np.array([3.0, -1.0])}
    assert central_difference(f, values, "w", 0) == pytest.approx(6.0, abs=1e-6)
