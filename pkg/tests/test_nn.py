"""Forward pass, losses, optimizer steps, and the checkpoint format."""
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hasnets import nn
from hasnets.errors import ConfigurationError, NumericError, ParseError
from hasnets.harness import architecture_spec
from hasnets.rng import substream


def build(spec, shape=(3, 3, 1), seed=0):
    return nn.Model(spec, shape, rng=substream(seed, "init"))


def test_zero_weight_dense_outputs_uniform_rows():
    model = build("dense:10;softmax")
    model.layers[0].w.value[...] = 0.0
    model.layers[0].b.value[...] = 0.0
    x = np.random.default_rng(4).uniform(0, 1, size=(6, 3, 3, 1))
    probs = model.forward(x)
    assert probs.shape == (6, 10)
    assert np.abs(probs - 0.1).max() < 1e-12


def test_eval_forward_is_bitwise_repeatable():
    model = build(architecture_spec("desk_cnn", 10), (12, 12, 1), seed=3)
    x = np.random.default_rng(0).uniform(0, 1, size=(5, 12, 12, 1))
    first = model.forward(x, training=False)
    second = model.forward(x, training=False)
    assert np.array_equal(first, second)


def test_two_class_dense_matches_hand_softmax():
    model = build("dense:2;softmax", shape=(2,))
    model.layers[0].w.value[...] = [[1.0, -0.5], [0.25, 2.0]]
    model.layers[0].b.value[...] = [0.1, -0.2]
    probs = model.forward(np.array([[0.5, -1.0]]))

    # logits: [0.5*1 - 1*0.25 + 0.1, 0.5*(-0.5) - 1*2 - 0.2] = [0.35, -2.45]
    e0, e1 = math.exp(0.35), math.exp(-2.45)
    assert probs[0, 0] == pytest.approx(e0 / (e0 + e1), abs=1e-12)
    assert probs[0, 1] == pytest.approx(e1 / (e0 + e1), abs=1e-12)


def test_cross_entropy_of_exact_prediction_is_negligible():
    rows = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    losses = nn.loss_per_sample(rows, rows, "cross-entropy")
    assert losses.max() <= 1e-9


def test_cross_entropy_of_uniform_ten_way_guess_is_ln_ten():
    probs = np.full((1, 10), 0.1)
    target = np.zeros((1, 10))
    target[0, 3] = 1.0
    loss = nn.loss_per_sample(probs, target, "cross-entropy")[0]
    assert loss == pytest.approx(math.log(10), abs=1e-12)


def test_squared_error_sums_over_classes():
    loss = nn.loss_per_sample(np.array([[0.7, 0.3]]), np.array([[1.0, 0.0]]),
                              "squared-error")[0]
    # 0.3^2 + 0.3^2
    assert loss == pytest.approx(0.18, abs=1e-12)


def test_loss_validation():
    good = np.full((2, 4), 0.25)
    with pytest.raises(ConfigurationError):
        nn.loss_per_sample(good, np.full((3, 4), 0.25))
    with pytest.raises(ConfigurationError):
        nn.loss_per_sample(good, good, kind="hinge")
    with pytest.raises(ConfigurationError):
        nn.loss_per_sample(good, np.full((2, 4), 0.5))
    with pytest.raises(ConfigurationError):
        nn.loss_grad(good, good, kind="hinge")


def test_cross_entropy_grid_minimum_sits_at_the_target_row():
    target = np.array([0.5, 0.3, 0.2])
    best, best_loss = None, np.inf
    steps = np.arange(0.0, 1.0001, 0.05)
    for a in steps:
        for b in steps:
            c = 1.0 - a - b
            if c < -1e-12:
                continue
            row = np.array([[a, b, max(c, 0.0)]])
            row /= row.sum()
            loss = nn.loss_per_sample(row, target[None], "cross-entropy")[0]
            if loss < best_loss:
                best, best_loss = row[0], loss
    assert np.abs(best - target).max() < 1e-9


def test_zero_learning_rate_keeps_parameters_and_reports_mean_loss():
    model = build("dense:4;softmax", shape=(2, 2, 1), seed=9)
    x = np.random.default_rng(1).uniform(0, 1, size=(3, 2, 2, 1))
    t = np.zeros((3, 4))
    t[np.arange(3), [0, 2, 1]] = 1.0
    expected = nn.loss_per_sample(model.forward(x), t).mean()
    before = [p.value.copy() for p in model.parameters]
    loss = nn.backward_and_step(model, x, t, nn.make_optimizer("sgd", 0.0))
    assert loss == pytest.approx(expected, abs=1e-12)
    assert all(np.array_equal(b, p.value)
               for b, p in zip(before, model.parameters))


def test_sgd_step_on_a_quadratic_matches_hand_gradient():
    w = nn.Tensor(3.0)
    w.grad = np.array(6.0)  # d/dw of w^2 at w=3
    nn.SGD(learning_rate=0.1, momentum=0.0).step([w])
    assert float(w.value) == pytest.approx(2.4, abs=1e-12)


def test_momentum_accumulates_velocity_across_steps():
    w = nn.Tensor(1.0)
    opt = nn.SGD(learning_rate=0.1, momentum=0.5)
    w.grad = np.array(2.0)
    opt.step([w])  # v=2, w = 1 - 0.2
    w.grad = np.array(2.0)
    opt.step([w])  # v=3, w = 0.8 - 0.3
    assert float(w.value) == pytest.approx(0.5, abs=1e-12)


def test_optimizer_validation():
    with pytest.raises(ConfigurationError):
        nn.make_optimizer("adam")
    with pytest.raises(ConfigurationError):
        nn.SGD(learning_rate=-0.1)
    with pytest.raises(ConfigurationError):
        nn.SGD(momentum=1.0)
    w = nn.Tensor(1.0)
    with pytest.raises(ConfigurationError):
        nn.SGD().step([w])  # no backward pass has filled w.grad


@pytest.mark.parametrize("spec", [
    "",
    "dense:10",                       # missing the softmax head
    "dense:10;softmax;softmax",
    "sigmoid;dense:10;softmax",
    "maxpool:2x3;dense:10;softmax",
])
def test_model_spec_rejected(spec):
    with pytest.raises(ConfigurationError):
        build(spec, shape=(8, 8, 1))


def test_layer_build_validation():
    with pytest.raises(ConfigurationError):
        build("conv:8x9x9;softmax", shape=(4, 4, 1))  # kernel exceeds input
    with pytest.raises(ConfigurationError):
        build("maxpool:5;dense:2;softmax", shape=(4, 4, 1))
    with pytest.raises(ConfigurationError):
        build("dense:0;softmax")
    with pytest.raises(ConfigurationError):
        build("dropout:1.0;dense:2;softmax")
    with pytest.raises(ConfigurationError):
        build("conv:2x2x2;elu;dense:2;softmax", shape=(4, 4))  # conv needs HxWxC
    # softmax directly on an image-shaped tensor has no flat input
    with pytest.raises(ConfigurationError):
        build("softmax", shape=(4, 4, 1))


def test_named_architecture_shape_algebra():
    fm = build(architecture_spec("fmnist_cnn", 10), (28, 28, 1))
    assert fm.output_shape == (10,)
    # conv1 32*(3*3*1)+32, conv2 32*(3*3*32)+32, dense (12*12*32)*10+10
    assert fm.n_params == 320 + 9248 + 46090

    desk = build(architecture_spec("desk_cnn", 10), (16, 16, 1))
    assert desk.output_shape == (10,)
    assert desk.n_params == 320 + (7 * 7 * 32) * 10 + 10

    assert architecture_spec("linear", 4) == "dense:4;softmax"
    assert architecture_spec("dense:3;softmax", 10) == "dense:3;softmax"
    with pytest.raises(ConfigurationError):
        architecture_spec("resnet", 10)


@given(st.integers(2, 12), st.integers(1, 8), st.integers(0, 2 ** 31))
@settings(max_examples=60, deadline=None)
def test_softmax_rows_always_sum_to_one(classes, rows, seed):
    layer = nn.Softmax()
    layer.build((classes,), None)
    z = np.random.default_rng(seed).normal(0, 10, size=(rows, classes))
    out = layer.forward(z, False, None)
    assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-9
    assert out.min() >= 0.0


def test_dropout_semantics():
    layer = nn.Dropout(0.25)
    x = np.ones((400, 10))
    assert layer.forward(x, training=False, rng=None) is x

    out1 = layer.forward(x, training=True, rng=substream(5, "drop"))
    out2 = layer.forward(x, training=True, rng=substream(5, "drop"))
    assert np.array_equal(out1, out2)

    kept = out1[out1 != 0.0]
    assert np.allclose(kept, 1.0 / 0.75)
    zero_frac = (out1 == 0.0).mean()
    assert 0.2 < zero_frac < 0.3

    with pytest.raises(ConfigurationError):
        layer.forward(x, training=True, rng=None)
    with pytest.raises(ConfigurationError):
        nn.Dropout(-0.1)


def test_nonfinite_forward_names_the_offending_layer():
    model = build(architecture_spec("desk_cnn", 10), (12, 12, 1))
    model.layers[0].w.value[0, 0] = np.inf
    x = np.random.default_rng(2).uniform(0, 1, size=(2, 12, 12, 1))
    with pytest.raises(NumericError, match="forward of layer conv2d1"):
        model.forward(x)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = build(architecture_spec("desk_cnn", 10), (12, 12, 1), seed=8)
    path = tmp_path / "model.hnm"
    nn.save_model(model, path)
    clone = nn.load_model(path)
    assert clone.spec == model.spec
    assert clone.input_shape == model.input_shape
    for ours, theirs in zip(model.parameters, clone.parameters):
        assert np.array_equal(ours.value, theirs.value)
    x = np.random.default_rng(3).uniform(0, 1, size=(4, 12, 12, 1))
    assert np.array_equal(model.forward(x), clone.forward(x))


def test_checkpoint_bad_magic_reports_offset_zero(tmp_path):
    path = tmp_path / "bogus.hnm"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(ParseError) as exc:
        nn.load_model(path)
    assert exc.value.offset == 0


def test_checkpoint_truncation_detected(tmp_path):
    model = build("dense:3;softmax", shape=(2, 2, 1))
    path = tmp_path / "model.hnm"
    nn.save_model(model, path)
    clipped = path.read_bytes()[:-7]
    path.write_bytes(clipped)
    with pytest.raises(ParseError, match="truncated"):
        nn.load_model(path)


def test_checkpoint_shape_mismatch_detected(tmp_path):
    # Hand-build a file whose stored tensor shape contradicts the descriptor.
    desc = b"dense:3;softmax|input=2,2,1"
    blob = nn.MODEL_MAGIC + struct.pack("<Q", len(desc)) + desc
    blob += struct.pack("<Q", 2) + struct.pack("<2Q", 5, 5)
    blob += np.zeros(25).astype("<f8").tobytes()
    path = tmp_path / "model.hnm"
    path.write_bytes(blob)
    with pytest.raises(ParseError, match="shape"):
        nn.load_model(path)


def test_model_spec_is_normalized():
    model = build("  DENSE:5 ; Softmax ", shape=(2, 2, 1))
    assert model.spec == "dense:5;softmax"
