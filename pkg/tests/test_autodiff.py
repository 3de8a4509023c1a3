import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bmcl import autodiff as ad
from oracles import central_difference, hp_entropy, hp_neg_log_softmax, np_cross_entropy, rel_error

# each composition maps (tape, dict of parameter Vars, fixed data) -> scalar Var


def _mlp_ce(t, p, d):
    h = ad.relu(t.constant(d["x"]) @ p["w1"] + p["b1"])
    return ad.softmax_cross_entropy(h @ p["w2"] + p["b2"], d["y"])


def _sigmoid_mul(t, p, d):
    return ad.sum(ad.sigmoid(p["a"]) * p["b"])


def _exp_log_div(t, p, d):
    return ad.mean(ad.log(ad.exp(p["a"]) + 1.0) / (ad.square(p["b"]) + 1.0))


def _softmax_weighted(t, p, d):
    return ad.sum(ad.square(ad.softmax(p["a"], axis=1)) * t.constant(d["c"]))


def _logsumexp_mean(t, p, d):
    return ad.mean(ad.logsumexp(p["a"], axis=1)) - ad.scale(ad.sum(p["b"]), 0.3)


def _soft_target_broadcast(t, p, d):
    logits = p["a"] + p["row"]
    return ad.softmax_cross_entropy(logits, d["soft"])


def _transpose_reshape(t, p, d):
    m = ad.transpose(p["a"]) @ p["b"]
    return ad.sum(ad.reshape(m, (-1,)) * t.constant(d["w"]))


def _neg_sub_scale(t, p, d):
    return ad.mean(ad.neg(p["a"] - ad.scale(p["b"], 2.5)) * (p["a"] - 1.0))


def _gate_decouple(t, p, d):
    x = t.constant(d["x"])
    fx = x @ p["w"]
    gate = ad.sigmoid(fx @ p["g"])
    causal, confound = gate * fx, (1.0 - gate) * fx
    return ad.softmax_cross_entropy(causal @ p["h"], d["y"]) + ad.mean(ad.square(confound))


def _make(name, rng):
    n, c = 5, 3
    if name == "mlp_ce":
        p = {"w1": rng.normal(size=(4, 6)), "b1": rng.normal(size=6), "w2": rng.normal(size=(6, c)),
             "b2": rng.normal(size=c)}
        return p, {"x": rng.normal(size=(n, 4)), "y": rng.integers(0, c, n)}
    if name in ("sigmoid_mul", "exp_log_div", "neg_sub_scale"):
        return {"a": rng.normal(size=(n, c)), "b": rng.normal(size=(n, c))}, {}
    if name == "softmax_weighted":
        return {"a": rng.normal(size=(n, c))}, {"c": rng.normal(size=(n, c))}
    if name == "logsumexp_mean":
        return {"a": 3 * rng.normal(size=(n, c)), "b": rng.normal(size=c)}, {}
    if name == "soft_target_broadcast":
        soft = rng.dirichlet(np.ones(c), size=n)
        return {"a": rng.normal(size=(n, c)), "row": rng.normal(size=c)}, {"soft": soft}
    if name == "transpose_reshape":
        return {"a": rng.normal(size=(n, 3)), "b": rng.normal(size=(n, 2))}, {"w": rng.normal(size=6)}
    if name == "gate_decouple":
        p = {"w": rng.normal(size=(4, 4)), "g": rng.normal(size=(4, 4)), "h": rng.normal(size=(4, c))}
        return p, {"x": rng.normal(size=(n, 4)), "y": rng.integers(0, c, n)}
    raise KeyError(name)


COMPOSITIONS = {
    "mlp_ce": _mlp_ce, "sigmoid_mul": _sigmoid_mul, "exp_log_div": _exp_log_div,
    "softmax_weighted": _softmax_weighted, "logsumexp_mean": _logsumexp_mean,
    "soft_target_broadcast": _soft_target_broadcast, "transpose_reshape": _transpose_reshape,
    "neg_sub_scale": _neg_sub_scale, "gate_decouple": _gate_decouple,
}


def _value(fn, params, data):
    t = ad.Tape()
    return float(fn(t, {k: t.constant(v) for k, v in params.items()}, data).value)


def _max_gradient_error(name, seed):
    fn = COMPOSITIONS[name]
    params, data = _make(name, np.random.default_rng(seed))
    tape = ad.Tape()
    grads = tape.backward(fn(tape, tape.parameters_from(params), data))
    worst = 0.0
    for key in params:
        def f(v, key=key):
            return _value(fn, {**params, key: v}, data)
        worst = max(worst, rel_error(grads[key], central_difference(f, params[key], 1e-4)))
    return worst


@pytest.mark.parametrize("name", sorted(COMPOSITIONS))
def test_gradients_match_finite_differences_over_100_instances(name):
    errors = [_max_gradient_error(name, seed) for seed in range(100)]
    assert max(errors) < 1e-4, f"{name}: worst relative error {max(errors):.2e}"


def test_trivial_gradients():
    t = ad.Tape()
    x = t.parameter("x", 3.0)
    assert t.backward(ad.square(x))["x"] == pytest.approx(6.0)
    t = ad.Tape()
    x, y = t.parameter("x", 2.0), t.parameter("y", 5.0)
    g = t.backward(x * y)
    assert (g["x"], g["y"]) == (5.0, 2.0)


def test_forward_examples():
    t = ad.Tape()
    assert (t.constant([[1.0, 2.0]]) @ t.constant([[3.0], [4.0]])).value.tolist() == [[11.0]]
    assert ad.sigmoid(t.constant(0.0)).value == 0.5
    assert ad.relu(t.constant(-3.0)).value == 0.0


def test_matmul_shape_error_names_both_shapes():
    t = ad.Tape()
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        t.constant(np.ones((2, 3))) @ t.constant(np.ones((2, 3)))


def test_add_shape_error():
    t = ad.Tape()
    with pytest.raises(ad.ShapeError):
        t.constant(np.ones((2, 3))) + t.constant(np.ones((4,)))


def test_non_scalar_loss_rejected():
    t = ad.Tape()
    x = t.parameter("x", np.ones(3))
    with pytest.raises(ad.ShapeError):
        t.backward(x * 2.0)


def test_parameter_off_path_gets_exact_zero():
    t = ad.Tape()
    x = t.parameter("x", np.ones(3))
    t.parameter("unused", np.ones((2, 2)))
    g = t.backward(ad.sum(x * x))
    assert g["unused"].shape == (2, 2)
    assert np.all(g["unused"] == 0.0)


def test_cross_entropy_uniform_logits_is_log_c():
    for c in (2, 3, 10):
        t = ad.Tape()
        loss = ad.softmax_cross_entropy(t.constant(np.zeros(c)), 0)
        assert float(loss.value) == pytest.approx(np.log(c), abs=1e-12)


def test_cross_entropy_matches_high_precision_reference():
    t = ad.Tape()
    loss = ad.softmax_cross_entropy(t.constant([1.0, 2.0, 3.0]), 2)
    ref = hp_neg_log_softmax([1.0, 2.0, 3.0], 2)
    assert ref == pytest.approx(0.40761, abs=1e-5)
    assert float(loss.value) == pytest.approx(ref, abs=1e-12)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8))
@settings(max_examples=50, deadline=None)
def test_soft_target_equal_to_prediction_gives_entropy(logits):
    z = np.array(logits)
    p = np.exp(z - z.max())
    p /= p.sum()
    t = ad.Tape()
    loss = ad.softmax_cross_entropy(t.constant(z), p)
    assert float(loss.value) == pytest.approx(hp_entropy(p), abs=1e-9)


def test_cross_entropy_is_stable_for_large_logits():
    t = ad.Tape()
    loss = ad.softmax_cross_entropy(t.constant([1000.0, 0.0, -1000.0]), 1)
    assert np.isfinite(loss.value)
    assert float(loss.value) == pytest.approx(1000.0)


def test_cross_entropy_rejects_bad_targets():
    t = ad.Tape()
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(t.constant([0.0, 1.0]), [0.5, 0.6])
    with pytest.raises(ad.ShapeError):
        ad.softmax_cross_entropy(t.constant([[0.0]]), [0])


def test_cross_entropy_matches_numpy_reference(rng):
    logits, y = rng.normal(size=(7, 4)), rng.integers(0, 4, 7)
    t = ad.Tape()
    assert float(ad.softmax_cross_entropy(t.constant(logits), y).value) == pytest.approx(
        np_cross_entropy(logits, y), abs=1e-12)


@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=40, deadline=None)
def test_linearity_of_gradients(seed, a, b):
    params, data = _make("mlp_ce", np.random.default_rng(seed))

    def grads(weights):
        t = ad.Tape()
        p = t.parameters_from(params)
        l1 = _mlp_ce(t, p, data)
        l2 = _exp_log_div(t, {"a": p["w1"], "b": p["w1"] * 0.5}, {})
        return t.backward(ad.scale(l1, weights[0]) + ad.scale(l2, weights[1]))

    combined, g1, g2 = grads((a, b)), grads((1.0, 0.0)), grads((0.0, 1.0))
    for k in params:
        np.testing.assert_allclose(combined[k], a * g1[k] + b * g2[k], rtol=0, atol=1e-10)


def test_determinism_bit_identical():
    def run():
        params, data = _make("mlp_ce", np.random.default_rng(7))
        t = ad.Tape()
        loss = _mlp_ce(t, t.parameters_from(params), data)
        return loss.value.tobytes(), {k: v.tobytes() for k, v in t.backward(loss).items()}

    assert run() == run()


def test_repeated_backward_on_same_tape_is_identical():
    params, data = _make("mlp_ce", np.random.default_rng(3))
    t = ad.Tape()
    loss = _mlp_ce(t, t.parameters_from(params), data)
    first, second = t.backward(loss), t.backward(loss)
    for k in params:
        assert first[k].tobytes() == second[k].tobytes()


def test_tape_nodes_are_topologically_ordered():
    params, data = _make("gate_decouple", np.random.default_rng(0))
    t = ad.Tape()
    _gate_decouple(t, t.parameters_from(params), data)
    for idx, node in enumerate(t.nodes):
        assert all(src < idx for src in node.inputs)


def test_second_order_gradient():
    t = ad.Tape()
    x = t.parameter("x", 2.0)
    (g,) = t.grad(x * x * x, [x], create_graph=True)
    (gg,) = t.grad(g, [x])
    assert float(g.value) == 12.0
    assert float(gg.value) == 12.0


def test_gradient_map_shapes_match_parameters(rng):
    params, data = _make("mlp_ce", rng)
    t = ad.Tape()
    g = t.backward(_mlp_ce(t, t.parameters_from(params), data))
    assert {k: v.shape for k, v in g.items()} == {k: v.shape for k, v in params.items()}
    assert g.norm() > 0
