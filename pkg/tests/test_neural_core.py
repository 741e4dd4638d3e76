import math

import numpy as np
import pytest

from roaduserclassification.errors import NetworkError
from roaduserclassification.feature_pipeline import FeatureSequence
from roaduserclassification.neural_core import (
    Activation,
    GradientSet,
    HyperParams,
    LstmLayer,
    RecurrentState,
    backward,
    backward_batch,
    build_network,
    forward,
    forward_batch,
    glorot_uniform,
    lstm_cell,
    lstm_step,
    sigmoid,
    softmax,
    stack_sequences,
)
from roaduserclassification.trajectory_model import RoadUserClass
from roaduserclassification.tuning import GridSpec, enumerate_grid


def cross_entropy(net, x: np.ndarray, target: int) -> float:
    return float(-np.mean(np.log(forward(net, x)[:, target])))


@pytest.mark.parametrize(
    "hyper",
    [
        HyperParams(1, 1, 1, 32),
        HyperParams(2, 2, 2, 8, Activation.RELU),
        HyperParams(4, 1, 2, 64),
        HyperParams(1, 4, 4, 3),
    ],
)
def test_parameter_count(hyper: HyperParams):
    net = build_network(hyper, seed=0)
    assert net.parameter_count() == hyper.parameter_count()
    assert len(net.parameters()) == len(net.parameter_names())


def test_parameter_count_over_default_grid():
    grid = enumerate_grid(GridSpec())
    assert len(grid) == 216
    for hyper in grid:
        n = hyper.width
        expected = (
            (5 * n + n)
            + (hyper.n_in2rec - 1) * (n * n + n)
            + hyper.n_lstm * (8 * n * n + 4 * n)
            + hyper.n_rec2out * (n * n + n)
            + (4 * n + 4)
        )
        assert hyper.parameter_count() == expected, hyper.label
        assert build_network(hyper, seed=0).parameter_count() == expected, hyper.label


def test_hyperparams_validation_and_dict():
    with pytest.raises(NetworkError):
        HyperParams(0, 1, 1, 32)
    with pytest.raises(NetworkError):
        HyperParams(1, 1, 1, 0)

    hyper = HyperParams(2, 1, 4, 128, Activation.RELU)
    assert hyper.to_dict() == {
        "l_in2rec": 2,
        "l_lstm": 1,
        "l_rec2out": 4,
        "n": 128,
        "activation": "relu",
    }
    assert HyperParams.from_dict(hyper.to_dict()) == hyper
    assert hyper.label == "2-1-4-128-relu"
    with pytest.raises(NetworkError):
        HyperParams.from_dict({"l_in2rec": 1, "activation": "sigmoid"})


def test_glorot_bounds_and_zero_biases():
    weights = glorot_uniform(5, 32, seed=1)
    limit = math.sqrt(6 / 37)
    assert weights.shape == (5, 32)
    assert np.all(np.abs(weights) <= limit)

    net = build_network(HyperParams(1, 2, 1, 16), seed=2)
    assert all(np.all(layer.bias == 0) for layer in net.in2rec + net.rec2out)
    assert all(np.all(cell.b == 0) for cell in net.lstm)
    assert np.all(net.output.bias == 0)
    with pytest.raises(NetworkError):
        glorot_uniform(0, 3, seed=0)


def test_glorot_distribution():
    rng = np.random.default_rng(11)
    samples = np.concatenate([glorot_uniform(3, 3, rng).ravel() for _ in range(1112)])[:10000]
    # fan 3 and 3 gives the limit sqrt(6 / 6) = 1
    assert np.all(np.abs(samples) <= 1.0)
    assert np.max(np.abs(samples)) > 0.99
    assert abs(np.mean(samples)) < 0.03
    assert np.var(samples) == pytest.approx(1 / 3, abs=0.02)


def test_same_seed_same_network():
    a = build_network(HyperParams(2, 1, 1, 8), seed=123)
    b = build_network(HyperParams(2, 1, 1, 8), seed=123)
    c = build_network(HyperParams(2, 1, 1, 8), seed=124)
    assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert not all(np.array_equal(x, y) for x, y in zip(a.parameters(), c.parameters()))


def test_forward_shapes_and_probabilities():
    net = build_network(HyperParams(1, 1, 1, 8), seed=0)
    x = np.random.default_rng(0).normal(size=(3, 7, 5))
    probs = forward_batch(net, x)
    assert probs.shape == (3, 7, 4)
    assert np.all(probs > 0)
    assert probs.sum(axis=-1) == pytest.approx(np.ones((3, 7)), abs=1e-12)

    with pytest.raises(NetworkError):
        forward_batch(net, np.zeros((3, 7, 4)))
    with pytest.raises(NetworkError):
        forward_batch(net, np.zeros((0, 7, 5)))


def test_batch_forward_matches_single_sequences():
    net = build_network(HyperParams(2, 2, 1, 6, Activation.RELU), seed=9)
    x = np.random.default_rng(1).normal(size=(4, 5, 5))
    batched = forward_batch(net, x)
    for b in range(4):
        assert forward(net, x[b]) == pytest.approx(batched[b], abs=1e-14)


def test_forward_matches_step_by_step_reference():
    """Dense layers applied per timestep and lstm_step threading the state"""
    hyper = HyperParams(2, 2, 2, 5)
    net = build_network(hyper, seed=4)
    # Non-zero biases so their use is checked too
    rng = np.random.default_rng(5)
    net.set_parameters([x + rng.normal(scale=0.1, size=x.shape) for x in net.parameters()])
    x = rng.normal(size=(6, 5))

    state = RecurrentState.zeros(hyper)
    expected = []
    for t in range(6):
        a = x[t][np.newaxis]
        for layer in net.in2rec:
            a = np.tanh(a @ layer.weights + layer.bias)
        for idx, cell in enumerate(net.lstm):
            state.h[idx], state.c[idx] = lstm_step(cell, state.h[idx], state.c[idx], a)
            a = state.h[idx]
        for layer in net.rec2out:
            a = np.tanh(a @ layer.weights + layer.bias)
        expected.append(softmax(a @ net.output.weights + net.output.bias)[0])

    assert forward(net, x) == pytest.approx(np.array(expected), abs=1e-13)


def _zero_cell(n: int) -> LstmLayer:
    return LstmLayer(W=np.zeros((n, 4 * n)), U=np.zeros((n, 4 * n)), b=np.zeros(4 * n))


def test_lstm_cell_with_zero_weights():
    step = lstm_cell(_zero_cell(3), np.zeros(3), np.zeros(3), np.array([0.4, -1.2, 2.0]))
    for gate in [step.i, step.f, step.o]:
        assert np.array_equal(gate, np.full(3, 0.5))
    assert np.array_equal(step.g, np.zeros(3))
    assert np.array_equal(step.c, np.zeros(3))
    assert np.array_equal(step.h, np.zeros(3))


def test_lstm_step_scalar_cell():
    w = [0.5, -0.3, 0.8, 0.1]
    u = [0.2, 0.4, -0.6, 0.9]
    b = [0.1, 0.2, -0.1, 0.05]
    cell = LstmLayer(W=np.array([w]), U=np.array([u]), b=np.array(b))
    x, h, c = 0.7, 0.3, -0.2

    z = [x * w[k] + h * u[k] + b[k] for k in range(4)]

    def logistic(v: float) -> float:
        return 1 / (1 + math.exp(-v))

    c_expected = logistic(z[1]) * c + logistic(z[0]) * math.tanh(z[2])
    h_expected = logistic(z[3]) * math.tanh(c_expected)

    h_new, c_new = lstm_step(cell, np.array([h]), np.array([c]), np.array([x]))
    assert abs(c_new[0] - c_expected) < 1e-12
    assert abs(h_new[0] - h_expected) < 1e-12


def test_large_forget_bias_keeps_cell_state():
    cell = _zero_cell(2)
    cell.b[2:4] = 10.0
    _, c_new = lstm_step(cell, np.zeros(2), np.ones(2), np.array([1.5, -0.5]))
    assert c_new == pytest.approx(np.ones(2), abs=1e-4)


def test_lstm_step_on_batches():
    net = build_network(HyperParams(1, 1, 1, 4), seed=8)
    cell = net.lstm[0]
    rng = np.random.default_rng(9)
    x, h, c = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    h_batch, c_batch = lstm_step(cell, h, c, x)
    for b in range(3):
        h_one, c_one = lstm_step(cell, h[b], c[b], x[b])
        assert h_one == pytest.approx(h_batch[b], abs=1e-14)
        assert c_one == pytest.approx(c_batch[b], abs=1e-14)


def test_zero_network_is_uniform():
    net = build_network(HyperParams(2, 1, 1, 8), seed=0)
    net.set_parameters([np.zeros_like(x) for x in net.parameters()])
    probs = forward(net, np.random.default_rng(3).normal(size=(6, 5)))
    assert np.array_equal(probs, np.full((6, 4), 0.25))


def test_forward_is_causal():
    net = build_network(HyperParams(1, 2, 1, 6), seed=12)
    x = np.random.default_rng(13).normal(size=(9, 5))
    full = forward(net, x)
    for k in [1, 4, 8]:
        assert forward(net, x[:k]) == pytest.approx(full[:k], abs=1e-12)

    # Changing later inputs leaves earlier outputs alone
    changed = x.copy()
    changed[5:] += 3.0
    assert forward(net, changed)[:5] == pytest.approx(full[:5], abs=1e-12)


def test_shifting_output_bias_keeps_argmax():
    net = build_network(HyperParams(1, 1, 2, 8, Activation.RELU), seed=14)
    x = np.random.default_rng(15).normal(size=(7, 5))
    before = forward(net, x)
    net.output.bias += 3.7
    after = forward(net, x)
    assert after == pytest.approx(before, abs=1e-12)
    assert np.array_equal(np.argmax(after, axis=1), np.argmax(before, axis=1))


def test_forward_accepts_feature_sequences():
    net = build_network(HyperParams(1, 1, 1, 4), seed=0)
    values = np.random.default_rng(2).normal(size=(5, 5))
    seq = FeatureSequence(sequence_id="s", label=RoadUserClass.CYCLIST, values=values)
    assert np.array_equal(forward(net, seq), forward(net, values))


def test_sigmoid_and_softmax_are_stable():
    assert sigmoid(np.array([-1000.0, 0.0, 1000.0])) == pytest.approx([0.0, 0.5, 1.0])
    probs = softmax(np.array([[1000.0, 0.0, -1000.0, 1000.0]]))
    assert probs[0] == pytest.approx([0.5, 0.0, 0.0, 0.5])


def test_gradients_match_finite_differences():
    net = build_network(HyperParams(2, 2, 2, 8, Activation.TANH), seed=31)
    rng = np.random.default_rng(32)
    x = rng.normal(size=(5, 5))
    target = RoadUserClass.MOTORCYCLIST

    grads, loss = backward(net, x, target)
    assert loss == pytest.approx(cross_entropy(net, x, target), abs=1e-12)

    h = 1e-5
    for name, param, grad in zip(net.parameter_names(), net.parameters(), grads.tensors):
        assert grad.shape == param.shape
        for idx in np.ndindex(param.shape):
            original = param[idx]
            param[idx] = original + h
            up = cross_entropy(net, x, target)
            param[idx] = original - h
            down = cross_entropy(net, x, target)
            param[idx] = original

            numeric = (up - down) / (2 * h)
            analytic = grad[idx]
            abs_err = abs(numeric - analytic)
            scale = max(abs(numeric), abs(analytic))
            assert abs_err < 1e-7 or abs_err / scale < 1e-4, f"{name}{idx}"


def test_relu_gradients_match_finite_differences():
    net = build_network(HyperParams(1, 1, 1, 6, Activation.RELU), seed=40)
    x = np.random.default_rng(41).normal(size=(4, 5))
    target = RoadUserClass.PEDESTRIAN
    grads, _ = backward(net, x, target)

    h = 1e-6
    for param, grad in zip(net.parameters(), grads.tensors):
        for idx in np.ndindex(param.shape):
            original = param[idx]
            param[idx] = original + h
            up = cross_entropy(net, x, target)
            param[idx] = original - h
            down = cross_entropy(net, x, target)
            param[idx] = original
            numeric = (up - down) / (2 * h)
            abs_err = abs(numeric - grad[idx])
            assert abs_err < 1e-6 or abs_err / max(abs(numeric), abs(grad[idx])) < 1e-3


def test_batch_gradient_is_mean_of_sequence_gradients():
    net = build_network(HyperParams(1, 2, 1, 5), seed=3)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 6, 5))
    targets = np.array([0, 3, 1])

    batch_grads, batch_loss = backward_batch(net, x, targets)

    total = GradientSet.zeros_like(net)
    losses = []
    for b in range(3):
        grads, loss = backward(net, x[b], RoadUserClass(int(targets[b])), loss_weight=1 / 3)
        total.add_(grads)
        losses.append(loss)

    assert batch_loss == pytest.approx(sum(losses), abs=1e-12)
    for mine, theirs in zip(batch_grads.tensors, total.tensors):
        assert mine == pytest.approx(theirs, abs=1e-12)


def test_backward_validates_targets():
    net = build_network(HyperParams(1, 1, 1, 4), seed=0)
    x = np.zeros((2, 3, 5))
    with pytest.raises(NetworkError):
        backward_batch(net, x, np.array([0]))
    with pytest.raises(NetworkError):
        backward_batch(net, x, np.array([0, 4]))


def test_gradient_set_helpers():
    grads = GradientSet([np.array([3.0]), np.array([[4.0]])])
    assert grads.global_norm() == 5.0
    assert grads.scaled(0.5).global_norm() == 2.5
    assert grads.is_finite()
    assert not GradientSet([np.array([np.nan])]).is_finite()


def test_set_parameters_and_copy():
    net = build_network(HyperParams(1, 1, 1, 4), seed=0)
    clone = net.copy()
    clone.parameters()[0][0, 0] += 1.0
    assert net.parameters()[0][0, 0] != clone.parameters()[0][0, 0]

    net.set_parameters(clone.parameters())
    assert all(np.array_equal(x, y) for x, y in zip(net.parameters(), clone.parameters()))

    with pytest.raises(NetworkError):
        net.set_parameters(clone.parameters()[:-1])
    with pytest.raises(NetworkError):
        net.set_parameters([np.zeros((1, 1))] * len(net.parameters()))


def test_stack_sequences():
    seqs = [
        FeatureSequence("a", RoadUserClass.CYCLIST, np.zeros((4, 5))),
        FeatureSequence("b", RoadUserClass.PASSENGER_CAR, np.ones((4, 5))),
    ]
    x, y = stack_sequences(seqs)
    assert x.shape == (2, 4, 5)
    assert list(y) == [1, 3]

    with pytest.raises(NetworkError):
        stack_sequences([seqs[0], FeatureSequence("c", RoadUserClass.CYCLIST, np.zeros((3, 5)))])
    with pytest.raises(NetworkError):
        stack_sequences([])
