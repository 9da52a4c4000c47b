import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from defdistill import autodiff as ad
from defdistill.model import (LayerSpec, ModelSpec, Model, architecture, classify,
                              init_model, input_jacobian, logits, mean_abs_input_gradient,
                              model_from_bytes, model_to_bytes, parameter_shapes, predict)


def linear_model(weights, bias, temperature=1.0, input_shape=None):
    weights = np.asarray(weights, np.float32)
    m, n = weights.shape
    spec = ModelSpec((LayerSpec("dense-linear", units=n), LayerSpec("softmax")),
                     input_shape or (1, 1, m))
    params = {"layer0.weight": weights, "layer0.bias": np.asarray(bias, np.float32)}
    return Model(spec, params, temperature)


def identity_model(n, temperature=1.0):
    return linear_model(np.eye(n), np.zeros(n), temperature)


def softmax64(z, t):
    z = np.asarray(z, np.float64) / t
    e = np.exp(z - z.max())
    return e / e.sum()


finite_logits = arrays(np.float32, st.integers(2, 12),
                       elements=st.floats(-50, 50, width=32))


# --- logits ---------------------------------------------------------------

def test_zero_weight_model_gives_zero_logits(rng):
    spec = architecture("mnist-small")
    model = init_model(spec, 0)
    zero = Model(spec, {k: np.zeros_like(v) for k, v in model.params.items()})
    np.testing.assert_array_equal(logits(zero, rng.random((1, 28, 28))), np.zeros(10))


def test_logits_independent_of_temperature(rng):
    model = init_model(architecture("mlp-tiny"), 3)
    x = rng.random((1, 28, 28)).astype(np.float32)
    hot = Model(model.spec, model.params, 100.0)
    np.testing.assert_array_equal(logits(model, x), logits(hot, x))


def test_single_dense_layer_logits_match_matmul(rng):
    w = rng.normal(size=(6, 4)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    x = rng.normal(size=(1, 1, 6)).astype(np.float32)
    expected = x.reshape(-1).astype(np.float64) @ w + b
    np.testing.assert_allclose(logits(linear_model(w, b), x), expected, rtol=1e-5, atol=1e-6)


def test_logits_reject_wrong_shape():
    model = init_model(architecture("mlp-tiny"), 0)
    with pytest.raises(ad.DimensionError):
        logits(model, np.zeros((28, 28)))


# --- predict --------------------------------------------------------------

@pytest.mark.parametrize("t", [0.5, 1.0, 7.0, 1000.0])
def test_equal_logits_give_uniform(t):
    model = linear_model(np.zeros((3, 5)), np.full(5, 4.2))
    np.testing.assert_allclose(predict(model, np.ones((1, 1, 3)), t), np.full(5, 0.2), atol=1e-7)


def test_predict_closed_form_ln2():
    model = identity_model(2)
    np.testing.assert_allclose(predict(model, np.array([[[math.log(2), 0.0]]])),
                               [2 / 3, 1 / 3], rtol=1e-6)


def test_predict_high_temperature_oracle():
    model = identity_model(2)
    expected = softmax64([5.0, 0.0], 100.0)  # [0.51250, 0.48750]
    np.testing.assert_allclose(expected, [0.51250, 0.48750], atol=1e-5)
    np.testing.assert_allclose(predict(model, np.array([[[5.0, 0.0]]]), 100.0), expected,
                               atol=1e-5)


def test_temperature_override_and_default():
    model = identity_model(2, temperature=100.0)
    x = np.array([[[5.0, 0.0]]])
    np.testing.assert_allclose(predict(model, x), softmax64([5, 0], 100), atol=1e-6)
    np.testing.assert_allclose(predict(model, x, 1.0), softmax64([5, 0], 1), atol=1e-6)


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_non_positive_temperature_rejected(t):
    with pytest.raises(ValueError, match="temperature"):
        predict(identity_model(2), np.zeros((1, 1, 2)), t)
    with pytest.raises(ValueError):
        Model(identity_model(2).spec, identity_model(2).params, t)


@settings(max_examples=200, deadline=None)
@given(z=finite_logits, t=st.floats(0.1, 1000))
def test_predict_is_probability_vector(z, t):
    p = ad.stable_softmax(z, t)
    assert np.all(p >= 0) and np.all(p <= 1)
    assert abs(float(p.sum(dtype=np.float64)) - 1) <= 1e-5


@settings(max_examples=200, deadline=None)
@given(z=finite_logits)
def test_argmax_invariant_under_temperature(z):
    model = identity_model(len(z))
    x = z.reshape(1, 1, -1)
    first = int(np.argmax(predict(model, x, 1.0)))
    assert int(classify(model, x)) == int(np.argmax(z))
    for t in (0.5, 5.0, 20.0, 100.0):
        p = predict(model, x, t)
        top = np.flatnonzero(p == p.max())
        assert first in top or int(np.argmax(p)) == first


@settings(max_examples=200, deadline=None)
@given(z=finite_logits, c=st.floats(-100, 100), t=st.floats(0.1, 1000))
def test_predict_shift_invariant(z, c, t):
    z64 = z.astype(np.float64)
    a = softmax64(z64, t)
    b = ad.stable_softmax((z64 + c).astype(np.float32), t)
    np.testing.assert_allclose(ad.stable_softmax(z, t), a, atol=1e-6)
    np.testing.assert_allclose(b, softmax64((z64 + c).astype(np.float32), t), atol=1e-6)


# --- Jacobian -------------------------------------------------------------

def analytic_softmax_jacobian(z, t):
    f = softmax64(z, t)
    return (np.diag(f) - np.outer(f, f)) / t


def test_identity_model_jacobian_entry():
    jac = input_jacobian(identity_model(2), np.zeros((1, 1, 2)), 1.0)
    assert jac[0, 0] == pytest.approx(0.25, abs=1e-7)
    np.testing.assert_allclose(jac, analytic_softmax_jacobian([0, 0], 1), atol=1e-7)


def test_jacobian_columns_sum_to_zero(rng):
    # the outputs always sum to one, so each input's derivatives cancel
    model = init_model(architecture("mnist-small"), 1)
    jac = input_jacobian(model, rng.random((1, 28, 28)), 1.0)
    assert jac.shape == (10, 784)
    np.testing.assert_allclose(jac.sum(axis=0), 0, atol=1e-6)


@pytest.mark.parametrize("t", [0.5, 1.0, 3.0, 10.0])
def test_jacobian_matches_analytic_probe(rng, t):
    z = rng.normal(scale=3, size=6).astype(np.float32)
    jac = input_jacobian(identity_model(6), z.reshape(1, 1, 6), t)
    np.testing.assert_allclose(jac, analytic_softmax_jacobian(z, t), atol=1e-5)


def test_higher_temperature_shrinks_fixed_logit_jacobian(rng):
    model = init_model(architecture("mlp-tiny"), 5)
    x = rng.random((1, 28, 28)).astype(np.float32)
    cold = np.abs(input_jacobian(model, x, 1.0)).max()
    hot = np.abs(input_jacobian(model, x, 10.0)).max()
    assert hot < cold


def test_jacobian_matches_finite_differences(rng):
    # ReLU and max-pool kinks make some central differences straddle a
    # breakpoint, so each column may match any one-sided or central estimate.
    model = init_model(architecture("mnist-small"), 11)
    x = rng.random((1, 28, 28))
    jac = input_jacobian(model, x, 2.0).astype(np.float64)
    at = lambda v: predict(model, v, 2.0).astype(np.float64)
    base = at(x)
    for j in rng.choice(784, 12, replace=False):
        scale = max(np.abs(jac[:, j]).max(), 1e-6)
        errors = []
        for h in (1e-2, 3e-3):
            up, down = x.copy(), x.copy()
            up.reshape(-1)[j] += h
            down.reshape(-1)[j] -= h
            for est in ((at(up) - at(down)) / (2 * h), (at(up) - base) / h, (base - at(down)) / h):
                errors.append(np.abs(est - jac[:, j]).max() / scale)
        assert min(errors) < 2e-2, j


def test_mean_abs_gradient_definitional_and_constant(rng):
    model = init_model(architecture("mlp-tiny"), 2)
    x = rng.random((1, 28, 28))
    assert mean_abs_input_gradient(model, x) == float(np.mean(np.abs(input_jacobian(model, x))))
    zero = Model(model.spec, {k: np.zeros_like(v) for k, v in model.params.items()})
    assert mean_abs_input_gradient(zero, x) == 0.0


# --- specs, init, serialization ------------------------------------------

def test_model_spec_needs_single_final_softmax():
    with pytest.raises(ValueError, match="softmax"):
        ModelSpec((LayerSpec("dense-linear", units=3),), (1, 1, 4))
    with pytest.raises(ValueError, match="softmax"):
        ModelSpec((LayerSpec("softmax"), LayerSpec("dense-linear", units=3), LayerSpec("softmax")))


def test_dropout_only_on_dense_layers():
    with pytest.raises(ValueError, match="dense"):
        LayerSpec("conv-relu", filters=2, kernel=3, dropout=0.5)
    assert architecture("mnist-small", dropout=0.5).layers[4].dropout == 0.5


def test_mnist_small_shapes():
    shapes = dict(parameter_shapes(architecture("mnist-small")))
    assert shapes["layer0.weight"] == (8, 1, 3, 3)
    assert shapes["layer2.weight"] == (16, 8, 3, 3)
    assert shapes["layer4.weight"] == (16 * 7 * 7, 64)
    assert shapes["layer6.weight"] == (64, 10)


def test_init_is_seeded_and_bounded():
    spec = architecture("mnist-small")
    a, b = init_model(spec, 9), init_model(spec, 9)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    w = a.params["layer4.weight"]
    assert np.abs(w).max() <= math.sqrt(6 / (784 + 64))
    assert not np.any(a.params["layer4.bias"])


def test_serialization_round_trip_and_layout():
    model = init_model(architecture("mnist-small", dropout=0.5), 42, temperature=20.0)
    blob = model_to_bytes(model)
    assert blob[:8] == b"DDNNMDL\x00"
    version, hlen = struct.unpack_from("<II", blob, 8)
    assert version == 1
    body = blob[16 + hlen:]
    first = np.frombuffer(body[:4 * 72], "<f4")
    np.testing.assert_array_equal(first, model.params["layer0.weight"].ravel())
    back = model_from_bytes(blob)
    assert back.temperature == 20.0 and back.seed == 42 and back.spec == model.spec
    assert model_to_bytes(back) == blob


def test_serialization_rejects_truncation():
    blob = model_to_bytes(init_model(architecture("mlp-tiny"), 0))
    with pytest.raises(ValueError, match="truncated"):
        model_from_bytes(blob[:-4])
    with pytest.raises(ValueError, match="magic"):
        model_from_bytes(b"nope" + blob[4:])
