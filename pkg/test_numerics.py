"""
Tests for the autodiff engine, parameter store, checkpoints and grad_check
"""

import threading

import numpy as np
import pytest

import numerics as nx
from error_handler import ErrorCategory, SGRError


def _params(seed=0):
    rng = np.random.default_rng(seed)
    params = nx.Parameters()
    params.uniform("w", (3, 4), rng)
    params.uniform("b", (4,), rng, fan_in=4)
    params.uniform("v", (4,), rng)
    params.ones("g", (4,))
    params.zeros("beta", (4,))
    return params


def test_add_broadcast_gradient():
    params = nx.Parameters()
    a = params.add("a", np.arange(6.0).reshape(2, 3))
    b = params.add("b", np.ones(3))
    with nx.Tape() as tape:
        loss = nx.sum_all(nx.add(a, b))
    grads = nx.backward(tape, loss)
    assert np.array_equal(grads["a"], np.ones((2, 3)))
    assert np.array_equal(grads["b"], np.full(3, 2.0))


def test_repeated_rows_accumulate_gradient():
    params = nx.Parameters()
    table = params.add("table", np.eye(3))
    with nx.Tape() as tape:
        loss = nx.sum_all(nx.embedding(table, [2, 0, 2]))
    grads = nx.backward(tape, loss)
    assert np.array_equal(grads["table"], np.array([[1.0] * 3, [0.0] * 3, [2.0] * 3]))


def test_grad_check_passes_on_composite_function():
    x = nx.Tensor(np.random.default_rng(1).normal(size=(5, 3)))

    def model_fn(params):
        h = nx.add(nx.matmul(x, params["w"]), params["b"])
        h = nx.layer_norm(nx.gelu(h), params["g"], params["beta"])
        scores = nx.matmul(nx.tanh(h), params["v"])
        mask = np.array([0.0, 0.0, -np.inf, 0.0, 0.0])
        probs = nx.masked_softmax(nx.reshape(scores, (1, 5)), mask.reshape(1, 5))
        presence = nx.sigmoid(nx.elu(scores))
        loss = nx.cross_entropy(probs, [0], [3])
        return nx.add(loss, nx.binary_cross_entropy(presence, [1, 0, 1, 1, 0]))

    report = nx.grad_check(model_fn, _params())
    assert report.passed, report.errors
    assert set(report.errors) == {"w", "b", "v", "g", "beta"}


def test_grad_check_samples_entries():
    x = nx.Tensor(np.ones((2, 3)))
    report = nx.grad_check(lambda p: nx.sum_all(nx.tanh(nx.matmul(x, p["w"]))), _params(),
                           max_entries=2)
    assert report.checked_entries["w"] == 2
    assert report.checked_entries["b"] == 2


def test_grad_check_rejects_nondeterministic_model():
    rng = np.random.default_rng(0)

    def noisy(params):
        return nx.sum_all(nx.mul(params["v"], rng.normal(size=4)))

    with pytest.raises(SGRError) as info:
        nx.grad_check(noisy, _params())
    assert info.value.category == ErrorCategory.GRADIENT


def test_non_finite_output_raises():
    with pytest.raises(SGRError) as info:
        nx.add(nx.Tensor([1e308]), nx.Tensor([1e308]))
    assert info.value.category == ErrorCategory.NON_FINITE
    assert info.value.context["op"] == "add"


def test_matmul_shape_mismatch():
    with pytest.raises(SGRError) as info:
        nx.matmul(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.ones((2, 3))))
    assert info.value.category == ErrorCategory.SHAPE_MISMATCH


def test_masked_softmax_zeroes_excluded_slots():
    out = nx.masked_softmax(nx.Tensor([[1.0, 5.0, 2.0]]), np.array([[0.0, -np.inf, 0.0]])).numpy()
    assert out[0, 1] == 0.0
    assert out.sum() == pytest.approx(1.0, abs=1e-12)


def test_masked_softmax_fully_masked_row_is_an_error():
    with pytest.raises(SGRError) as info:
        nx.masked_softmax(nx.Tensor([[1.0, 2.0]]), np.array([[-np.inf, -np.inf]]))
    assert info.value.category == ErrorCategory.CONTRACT


def test_binary_cross_entropy_of_certain_prediction_is_zero():
    loss = nx.binary_cross_entropy(nx.Tensor([1.0, 0.0]), [1, 0])
    assert loss.item() == 0.0


def test_backward_requires_scalar_loss_on_tape():
    params = _params()
    with nx.Tape() as tape:
        out = nx.tanh(params["v"])
    with pytest.raises(SGRError) as info:
        nx.backward(tape, out)
    assert info.value.category == ErrorCategory.GRADIENT
    with pytest.raises(SGRError):
        nx.backward(nx.Tape(), nx.sum_all(out))


def test_tapes_are_per_thread():
    seen = []
    with nx.Tape() as tape:
        worker = threading.Thread(target=lambda: seen.append(nx.active_tape()))
        worker.start()
        worker.join()
        assert nx.active_tape() is tape
    assert seen == [None]
    assert nx.active_tape() is None


def test_operations_without_tape_are_not_recorded():
    params = _params()
    with nx.Tape() as tape:
        pass
    nx.sum_all(params["v"])
    assert len(tape) == 0


def test_checkpoint_roundtrip_is_exact(tmp_path):
    params = _params(seed=5)
    path = str(tmp_path / "model.ckpt")
    nx.save_checkpoint(path, params, {"note": "x"})
    loaded, meta = nx.load_checkpoint(path)
    assert meta == {"note": "x"}
    assert loaded.names() == params.names()
    for name, tensor in params.items():
        assert np.array_equal(loaded[name].data, tensor.data)


def test_checkpoint_with_wrong_magic_is_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_text("something else\n")
    with pytest.raises(SGRError) as info:
        nx.load_checkpoint(str(path))
    assert info.value.category == ErrorCategory.MALFORMED_INPUT


def test_parameters_snapshot_and_restore():
    params = _params()
    snapshot = params.snapshot()
    params["w"].data = params["w"].data + 1.0
    params.restore(snapshot)
    assert np.array_equal(params["w"].data, snapshot["w"])
    with pytest.raises(SGRError):
        params.add("w", np.zeros(2))
    with pytest.raises(SGRError) as info:
        params["missing"]
    assert info.value.category == ErrorCategory.MISSING_FIELD


def test_primitive_reference_values():
    assert np.allclose(nx.softmax(nx.Tensor([[0.0, 0.0, 0.0]])).numpy(), [[1 / 3] * 3], atol=1e-15)
    assert nx.leaky_relu(nx.Tensor([-1.0])).item() == pytest.approx(-0.2, abs=1e-15)
    params = nx.Parameters()
    x = params.add("x", np.array([0.0]))
    with nx.Tape() as tape:
        loss = nx.sum_all(nx.sigmoid(x))
    assert nx.backward(tape, loss)["x"][0] == pytest.approx(0.25, abs=1e-15)


def test_weight_gradient_of_summed_product_is_outer_input():
    params = nx.Parameters()
    w = params.add("W", np.arange(6.0).reshape(2, 3))
    x = np.array([[1.0, -2.0]])
    with nx.Tape() as tape:
        loss = nx.sum_all(nx.matmul(nx.Tensor(x), w))
    assert np.array_equal(nx.backward(tape, loss)["W"], np.repeat(x.T, 3, axis=1))


def test_gradient_of_a_sum_is_the_sum_of_gradients():
    x = nx.Tensor(np.random.default_rng(2).normal(size=(2, 3)))
    params = _params(seed=4)

    def first(p):
        return nx.sum_all(nx.tanh(nx.matmul(x, p["w"])))

    def second(p):
        return nx.sum_all(nx.gelu(nx.add(nx.matmul(x, p["w"]), p["b"])))

    def grads_of(fn):
        with nx.Tape() as tape:
            loss = fn(params)
        return nx.backward(tape, loss)

    combined = grads_of(lambda p: nx.add(first(p), second(p)))
    a, b = grads_of(first), grads_of(second)
    assert np.allclose(combined["w"], a["w"] + b["w"], atol=1e-12)
    assert np.allclose(combined["b"], b["b"], atol=1e-12)
    assert "b" not in a


def test_logit_losses_match_probability_losses():
    logits = np.array([[0.3, -1.2, 2.0], [1.0, 0.0, -0.5]])
    probs = nx.softmax(nx.Tensor(logits))
    expected = nx.cross_entropy(probs, [0, 1], [2, 0]).item()
    assert nx.cross_entropy_with_logits(nx.Tensor(logits), [0, 1], [2, 0]).item() == pytest.approx(expected)

    scores = np.array([-2.0, 0.5, 3.0])
    expected = nx.binary_cross_entropy(nx.sigmoid(nx.Tensor(scores)), [0, 1, 1]).item()
    assert nx.binary_cross_entropy_with_logits(nx.Tensor(scores), [0, 1, 1]).item() == pytest.approx(expected)
    assert np.isfinite(nx.binary_cross_entropy_with_logits(nx.Tensor([500.0]), [0]).item())


def test_grad_check_of_logit_losses():
    x = nx.Tensor(np.random.default_rng(6).normal(size=(3, 3)))

    def model_fn(params):
        loss = nx.cross_entropy_with_logits(nx.matmul(x, params["w"]), [0, 2], [3, 1])
        presence = nx.matmul(x, nx.narrow(params["v"], 0, 3))
        return nx.add(loss, nx.binary_cross_entropy_with_logits(presence, [1, 0, 1]))

    report = nx.grad_check(model_fn, _params())
    assert report.passed, report.errors
