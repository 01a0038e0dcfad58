import numpy as np
import pytest

from oracles import numeric_grad, rel_error
from pcgesture.models import (
    ModelSpec,
    SpecError,
    backward,
    default_cnn3d_lstm_spec,
    default_cnn3d_spec,
    forward,
    infer_shapes,
    init_params,
    predict,
    spec_digest,
    spec_from_config,
    spec_to_config,
)
from pcgesture.nn import ConvSpec, softmax_crossentropy
from pcgesture.voxelizer import GridDims, OccupancyGrid, WindowTensor

REFERENCE_DIMS = GridDims(20, 14, 18)


def test_cnn3d_shape_chain():
    spec = default_cnn3d_spec(4, REFERENCE_DIMS, 10)
    shapes = dict(infer_shapes(spec))
    assert shapes["conv1"] == (32, 10, 7, 9)
    assert shapes["conv2"] == (64, 5, 4, 5)
    assert shapes["conv2.pool"] == (64, 3, 2, 3)
    assert shapes["conv3"] == (128, 2, 1, 2)
    assert shapes["conv4"] == (128, 1, 1, 1)
    assert shapes["conv4.pool"] == (128, 1, 1, 1)
    assert shapes["flatten"] == (128,)
    assert shapes["fc1"] == (256,) and shapes["fc2"] == (128,) and shapes["out"] == (10,)
    assert spec.layer_names() == ["conv1", "conv2", "conv3", "conv4", "fc1", "fc2", "out"]
    assert [c.kernel for c in spec.convs] == [(5, 5, 5), (5, 5, 5), (3, 3, 3), (2, 2, 2)]
    assert all(c.stride == (2, 2, 2) for c in spec.convs)
    assert spec.pool_after == (False, True, False, True)


def test_cnn3d_two_class_head():
    spec = default_cnn3d_spec(4, REFERENCE_DIMS, 2)
    assert infer_shapes(spec)[-1] == ("out", (2,))


def test_lstm_variant_shape_chain():
    spec = default_cnn3d_lstm_spec(4, REFERENCE_DIMS, 10)
    shapes = dict(infer_shapes(spec))
    assert shapes["step_conv1"] == (16, 10, 7, 9)
    assert shapes["step_conv2"] == (32, 5, 4, 5)
    assert shapes["step_conv2.pool"] == (32, 3, 2, 3)
    assert shapes["flatten"] == (576,)
    assert shapes["lstm"] == (128,)
    assert spec.layer_names() == ["step_conv1", "step_conv2", "lstm", "fc1", "out"]
    params = init_params(spec, 0)
    assert params["lstm"].weights.shape == (512, 576 + 128)


def test_collapsing_schedule_rejected():
    with pytest.raises(SpecError):
        default_cnn3d_spec(4, (1, 1, 1), 10)
    with pytest.raises(SpecError):
        ModelSpec("cnn3d", (4, 8, 8, 8), (ConvSpec(3, 8, 3, 2),), (False,), (), 10)
    with pytest.raises(SpecError):
        ModelSpec("rnn", (4, 8, 8, 8), (ConvSpec(4, 8, 3, 2),), (False,), (), 10)


def test_config_round_trip_and_digest():
    for spec in (default_cnn3d_spec(4, REFERENCE_DIMS, 10), default_cnn3d_lstm_spec(3, REFERENCE_DIMS, 5)):
        text = spec_to_config(spec)
        assert spec_from_config(text) == spec
        assert spec_digest(spec_from_config(text)) == spec_digest(spec)
    assert spec_digest(default_cnn3d_spec(4, REFERENCE_DIMS, 10)) != spec_digest(default_cnn3d_spec(4, REFERENCE_DIMS, 9))
    with pytest.raises(SpecError):
        spec_from_config("[conv1]\nin_channels=1\n")
    with pytest.raises(SpecError):
        spec_from_config("[model]\nkind=cnn3d\n")


def test_init_params_deterministic_and_validates():
    spec = default_cnn3d_spec(4, REFERENCE_DIMS, 10)
    a, b, c = init_params(spec, 0), init_params(spec, 0), init_params(spec, 1)
    assert a == b and a != c
    assert a.digest == spec_digest(spec)
    a.validate(spec)
    with pytest.raises(SpecError):
        a.validate(default_cnn3d_spec(4, REFERENCE_DIMS, 9))


def test_zero_window_zero_biases_ties_to_class_zero():
    spec = default_cnn3d_spec(4, REFERENCE_DIMS, 10)
    params = init_params(spec, 3)
    for lp in params.layers.values():
        lp.biases[...] = 0
    logits, _ = forward(spec, params, np.zeros((4, 20, 14, 18)))
    assert np.all(logits == logits[0])
    cls, probs = predict(spec, params, np.zeros((4, 20, 14, 18)))
    assert cls == 0 and probs.sum() == pytest.approx(1, abs=1e-6)


def test_forward_inference_deterministic_and_finite():
    spec = default_cnn3d_lstm_spec(4, REFERENCE_DIMS, 10)
    params = init_params(spec, 0)
    x = (np.random.default_rng(0).random((2, 4, 20, 14, 18)) < 0.05).astype(np.float32)
    a, _ = forward(spec, params, x)
    b, _ = forward(spec, params, x)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (2, 10) and np.all(np.isfinite(a))
    cls, probs = predict(spec, params, x)
    np.testing.assert_allclose(probs, softmax_crossentropy(a, [0, 0])[1], rtol=1e-6)
    assert list(cls) == list(np.argmax(a, axis=1))


def test_window_tensor_input_and_m1_lstm():
    spec = default_cnn3d_lstm_spec(1, (6, 6, 6), 3, widths=(2, 3), hidden=4, fc_widths=(5,))
    params = init_params(spec, 0)
    grid = OccupancyGrid(GridDims(6, 6, 6), 0.05, np.ones((6, 6, 6), np.float32))
    logits, _ = forward(spec, params, WindowTensor((grid,)))
    assert logits.shape == (3,)


def test_predict_examples():
    spec = ModelSpec("cnn3d", (1, 2, 2, 2), (ConvSpec(1, 1, 1, 1),), (False,), (), 4, dropout=0.0)
    params = init_params(spec, 0, np.float64)
    params["conv1"].weights[...] = 0
    params["out"].weights[...] = 0
    params["out"].biases[...] = [0.1, 2.0, 0.1, 0.1]
    assert predict(spec, params, np.zeros((1, 2, 2, 2)))[0] == 1
    params["out"].biases[...] = [0.5, 2.0, 2.0, 2.0]
    assert predict(spec, params, np.zeros((1, 2, 2, 2)))[0] == 1


def toy_specs():
    return [
        ModelSpec("cnn3d", (2, 5, 4, 6), (ConvSpec(2, 3, 3, 2), ConvSpec(3, 2, 2, 1)), (False, True), (5,), 3,
                  dropout=0.0),
        ModelSpec("cnn3d_lstm", (3, 4, 5, 4), (ConvSpec(1, 2, 3, 2), ConvSpec(2, 2, 2, 1)), (False, True), (4,), 3,
                  dropout=0.0, lstm_hidden=3),
    ]


@pytest.mark.parametrize("spec", toy_specs(), ids=["cnn3d", "cnn3d_lstm"])
def test_end_to_end_gradients_finite_difference(spec):
    rng = np.random.default_rng(0)
    params = init_params(spec, 1, np.float64)
    for lp in params.layers.values():
        lp.biases[...] = rng.normal(0, 0.1, lp.biases.shape)
    x = rng.normal(size=(2, *spec.input_shape))
    labels = np.array([0, 2])
    _, cache = forward(spec, params, x)
    _, grads = backward(spec, params, cache, labels)
    f = lambda: backward(spec, params, forward(spec, params, x)[1], labels)[0]
    for name in spec.layer_names():
        gw, gb = grads[name]
        assert rel_error(gw, numeric_grad(f, params[name].weights)) < 1e-4, name
        assert rel_error(gb, numeric_grad(f, params[name].biases)) < 1e-4, name


def test_confident_correct_prediction_has_tiny_gradient():
    spec = toy_specs()[0]
    params = init_params(spec, 0, np.float64)
    params["out"].biases[...] = [50.0, 0.0, 0.0]
    x = np.random.default_rng(0).normal(size=(1, *spec.input_shape))
    _, cache = forward(spec, params, x)
    loss, grads = backward(spec, params, cache, [0])
    assert loss < 1e-12
    assert max(np.abs(g).max() for pair in grads.values() for g in pair) < 1e-12


def test_dropped_units_get_zero_weight_rows():
    spec = ModelSpec("cnn3d", (2, 5, 4, 6), (ConvSpec(2, 3, 3, 2),), (False,), (40,), 3, dropout=0.5)
    params = init_params(spec, 0, np.float64)
    x = np.random.default_rng(1).normal(size=(1, *spec.input_shape))
    _, cache = forward(spec, params, x, training=True, rng=np.random.default_rng(2))
    mask = cache["fcs"][0]["mask"][0]
    assert 0 < mask.sum() < mask.size
    _, grads = backward(spec, params, cache, [1])
    gw, gb = grads["fc1"]
    assert not gw[mask == 0].any() and not gb[mask == 0].any()


def test_lstm_variant_shares_step_weights_across_time():
    """Permuting the time steps changes the output only through the LSTM, so the
    per-step conv features of a permuted window are the permuted features."""
    spec = toy_specs()[1]
    params = init_params(spec, 0, np.float64)
    x = np.random.default_rng(3).normal(size=(1, *spec.input_shape))
    _, c1 = forward(spec, params, x)
    _, c2 = forward(spec, params, x[:, ::-1])
    z1 = c1["convs"][-1]["z"]
    z2 = c2["convs"][-1]["z"]
    np.testing.assert_array_equal(z1, z2[::-1])


def test_cnn3d_early_fusion_is_order_sensitive():
    spec = toy_specs()[0]
    params = init_params(spec, 0, np.float64)
    x = np.random.default_rng(4).normal(size=(1, *spec.input_shape))
    a, _ = forward(spec, params, x)
    b, _ = forward(spec, params, x[:, ::-1])
    assert not np.allclose(a, b)
    # swapping the first-layer kernels along the channel axis compensates exactly
    params["conv1"].weights[...] = params["conv1"].weights[:, ::-1].copy()
    c, _ = forward(spec, params, x[:, ::-1])
    np.testing.assert_allclose(a, c, rtol=1e-12)


def test_rejects_wrong_input_shape():
    spec = toy_specs()[0]
    with pytest.raises(SpecError):
        forward(spec, init_params(spec, 0), np.zeros((1, 2, 5, 4, 5)))
