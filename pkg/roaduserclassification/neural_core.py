"""
A small numpy neural network engine for sequence-to-sequence classification.

The network is a chain of

    input-to-recurrent dense layers   5 -> n, then n -> n
    stacked LSTM layers               n -> n
    recurrent-to-output dense layers  n -> n
    output dense layer with softmax   n -> 4

Dense layers are applied to every timestep independently, the LSTM layers
carry their hidden and cell state from one timestep to the next, so the
network emits one probability vector per input timestep.

Everything works on batches shaped (B, T, features). All sequences of a
dataset have the same length, so a minibatch is a single array and BPTT for
the whole batch is one vectorised pass. LSTM gates are packed in the order
input, forget, candidate, output along the last axis of W (in, 4n),
U (n, 4n) and b (4n,).
"""

import enum

from ._compat import StrEnum
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Tuple, Union

import numpy as np

from roaduserclassification.errors import NetworkError
from roaduserclassification.feature_pipeline import NUM_FEATURES, FeatureSequence
from roaduserclassification.trajectory_model import RoadUserClass

logger = logging.getLogger(__name__)

NUM_CLASSES = len(RoadUserClass)

SeedLike = Union[int, np.random.Generator]


class Activation(StrEnum):
    """Activation of the hidden dense layers"""

    TANH = "tanh"
    RELU = "relu"

    def apply(self, z: np.ndarray) -> np.ndarray:
        match self:
            case Activation.TANH:
                return np.tanh(z)
            case Activation.RELU:
                return np.maximum(z, 0.0)

    def derivative(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        """d act / dz given pre-activation z and activation a"""
        match self:
            case Activation.TANH:
                return 1.0 - a * a
            case Activation.RELU:
                return (z > 0).astype(np.float64)


@dataclass(frozen=True)
class HyperParams:
    n_in2rec: int
    n_lstm: int
    n_rec2out: int
    width: int
    activation: Activation = Activation.TANH

    def __post_init__(self) -> None:
        counts = [self.n_in2rec, self.n_lstm, self.n_rec2out]
        if min(counts) < 1:
            raise NetworkError(f"every layer group needs at least 1 layer, got {counts}")
        if self.width < 1:
            raise NetworkError(f"width must be at least 1, got {self.width}")

    def parameter_count(self) -> int:
        """
        n = width
          in2rec:   (5n + n) + (n_in2rec - 1)(n^2 + n)
          lstm:     n_lstm * 4(n^2 + n^2 + n)
          rec2out:  n_rec2out (n^2 + n)
          output:   4n + 4
        """
        n = self.width
        in2rec = (NUM_FEATURES * n + n) + (self.n_in2rec - 1) * (n * n + n)
        lstm = self.n_lstm * 4 * (n * n + n * n + n)
        rec2out = self.n_rec2out * (n * n + n)
        output = n * NUM_CLASSES + NUM_CLASSES
        return in2rec + lstm + rec2out + output

    @property
    def label(self) -> str:
        return (
            f"{self.n_in2rec}-{self.n_lstm}-{self.n_rec2out}-{self.width}-{self.activation}"
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "l_in2rec": self.n_in2rec,
            "l_lstm": self.n_lstm,
            "l_rec2out": self.n_rec2out,
            "n": self.width,
            "activation": str(self.activation),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "HyperParams":
        try:
            return cls(
                n_in2rec=int(data["l_in2rec"]),
                n_lstm=int(data["l_lstm"]),
                n_rec2out=int(data["l_rec2out"]),
                width=int(data["n"]),
                activation=Activation(str(data["activation"])),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise NetworkError(f"malformed hyperparameters {dict(data)} ({e})") from e


@dataclass
class DenseLayer:
    weights: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    # None means a linear layer, used for the softmax output
    activation: Optional[Activation] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.weights.shape

    def tensors(self) -> List[np.ndarray]:
        return [self.weights, self.bias]


@dataclass
class LstmLayer:
    W: np.ndarray  # (in, 4n)
    U: np.ndarray  # (n, 4n)
    b: np.ndarray  # (4n,)

    @property
    def width(self) -> int:
        return self.U.shape[0]

    def tensors(self) -> List[np.ndarray]:
        return [self.W, self.U, self.b]


Layer = Union[DenseLayer, LstmLayer]


@dataclass
class RecurrentState:
    """Hidden and cell state per LSTM layer, (B, n) each"""

    h: List[np.ndarray]
    c: List[np.ndarray]

    @classmethod
    def zeros(cls, hyper: HyperParams, batch_size: int = 1) -> "RecurrentState":
        shape = (batch_size, hyper.width)
        return cls(
            h=[np.zeros(shape) for _ in range(hyper.n_lstm)],
            c=[np.zeros(shape) for _ in range(hyper.n_lstm)],
        )


@dataclass
class GradientSet:
    """One gradient per parameter tensor, in Network.parameters() order"""

    tensors: List[np.ndarray]

    @classmethod
    def zeros_like(cls, net: "Network") -> "GradientSet":
        return cls([np.zeros_like(x) for x in net.parameters()])

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet([x * factor for x in self.tensors])

    def add_(self, other: "GradientSet") -> None:
        for mine, theirs in zip(self.tensors, other.tensors):
            mine += theirs

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(x * x)) for x in self.tensors)))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(x)) for x in self.tensors)


@dataclass
class Network:
    hyper: HyperParams
    in2rec: List[DenseLayer]
    lstm: List[LstmLayer]
    rec2out: List[DenseLayer]
    output: DenseLayer

    def __post_init__(self) -> None:
        self._check_shapes()

    def _check_shapes(self) -> None:
        n = self.hyper.width
        expected: List[Tuple[str, Tuple[int, ...], np.ndarray]] = []
        for idx, layer in enumerate(self.in2rec):
            fan_in = NUM_FEATURES if idx == 0 else n
            expected.append((f"in2rec[{idx}].weights", (fan_in, n), layer.weights))
            expected.append((f"in2rec[{idx}].bias", (n,), layer.bias))
        for idx, cell in enumerate(self.lstm):
            expected.append((f"lstm[{idx}].W", (n, 4 * n), cell.W))
            expected.append((f"lstm[{idx}].U", (n, 4 * n), cell.U))
            expected.append((f"lstm[{idx}].b", (4 * n,), cell.b))
        for idx, layer in enumerate(self.rec2out):
            expected.append((f"rec2out[{idx}].weights", (n, n), layer.weights))
            expected.append((f"rec2out[{idx}].bias", (n,), layer.bias))
        expected.append(("output.weights", (n, NUM_CLASSES), self.output.weights))
        expected.append(("output.bias", (NUM_CLASSES,), self.output.bias))

        counts = (len(self.in2rec), len(self.lstm), len(self.rec2out))
        wanted = (self.hyper.n_in2rec, self.hyper.n_lstm, self.hyper.n_rec2out)
        if counts != wanted:
            raise NetworkError(f"layer counts {counts} do not match {wanted}")
        for name, shape, tensor in expected:
            if tensor.shape != shape:
                raise NetworkError(f"{name} has shape {tensor.shape}, expected {shape}")

    def layers(self) -> List[Layer]:
        return [*self.in2rec, *self.lstm, *self.rec2out, self.output]

    def parameters(self) -> List[np.ndarray]:
        return list(itertools.chain.from_iterable(x.tensors() for x in self.layers()))

    def parameter_names(self) -> List[str]:
        names = []
        for idx in range(len(self.in2rec)):
            names += [f"in2rec[{idx}].weights", f"in2rec[{idx}].bias"]
        for idx in range(len(self.lstm)):
            names += [f"lstm[{idx}].W", f"lstm[{idx}].U", f"lstm[{idx}].b"]
        for idx in range(len(self.rec2out)):
            names += [f"rec2out[{idx}].weights", f"rec2out[{idx}].bias"]
        return names + ["output.weights", "output.bias"]

    def parameter_count(self) -> int:
        return sum(x.size for x in self.parameters())

    def set_parameters(self, values: List[np.ndarray]) -> None:
        """Copies values into the existing tensors"""
        current = self.parameters()
        if len(values) != len(current):
            raise NetworkError(
                f"expected {len(current)} parameter tensors, got {len(values)}"
            )
        for name, mine, new in zip(self.parameter_names(), current, values):
            if mine.shape != new.shape:
                raise NetworkError(f"{name}: shape {new.shape} != {mine.shape}")
            mine[...] = new

    def copy(self) -> "Network":
        return Network(
            hyper=self.hyper,
            in2rec=[
                DenseLayer(x.weights.copy(), x.bias.copy(), x.activation)
                for x in self.in2rec
            ],
            lstm=[LstmLayer(x.W.copy(), x.U.copy(), x.b.copy()) for x in self.lstm],
            rec2out=[
                DenseLayer(x.weights.copy(), x.bias.copy(), x.activation)
                for x in self.rec2out
            ],
            output=DenseLayer(self.output.weights.copy(), self.output.bias.copy()),
        )


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=-1, keepdims=True)


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def glorot_uniform(fan_in: int, fan_out: int, seed: SeedLike) -> np.ndarray:
    """(fan_in, fan_out) matrix, uniform on +-sqrt(6 / (fan_in + fan_out))"""
    if fan_in < 1 or fan_out < 1:
        raise NetworkError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return _rng(seed).uniform(-limit, limit, size=(fan_in, fan_out))


def build_network(hyper: HyperParams, seed: SeedLike) -> Network:
    """Glorot-initialised weights, zero biases"""
    rng = _rng(seed)
    n = hyper.width

    def dense(fan_in: int, fan_out: int, act: Optional[Activation]) -> DenseLayer:
        return DenseLayer(
            weights=glorot_uniform(fan_in, fan_out, rng),
            bias=np.zeros(fan_out),
            activation=act,
        )

    in2rec = [dense(NUM_FEATURES, n, hyper.activation)]
    in2rec += [dense(n, n, hyper.activation) for _ in range(hyper.n_in2rec - 1)]
    lstm = [
        LstmLayer(
            W=glorot_uniform(n, 4 * n, rng),
            U=glorot_uniform(n, 4 * n, rng),
            b=np.zeros(4 * n),
        )
        for _ in range(hyper.n_lstm)
    ]
    rec2out = [dense(n, n, hyper.activation) for _ in range(hyper.n_rec2out)]
    output = dense(n, NUM_CLASSES, None)

    net = Network(hyper=hyper, in2rec=in2rec, lstm=lstm, rec2out=rec2out, output=output)
    logger.debug(f"Built network {hyper.label} with {net.parameter_count()} parameters")
    return net


class CellStep(NamedTuple):
    """Gate activations and new state of one LSTM timestep"""

    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    h: np.ndarray


def _activate_gates(layer: LstmLayer, gates: np.ndarray, c: np.ndarray) -> CellStep:
    n = layer.width
    i = sigmoid(gates[..., :n])
    f = sigmoid(gates[..., n : 2 * n])
    g = np.tanh(gates[..., 2 * n : 3 * n])
    o = sigmoid(gates[..., 3 * n :])
    c_new = f * c + i * g
    tanh_c = np.tanh(c_new)
    return CellStep(i=i, f=f, g=g, o=o, c=c_new, tanh_c=tanh_c, h=o * tanh_c)


def lstm_cell(layer: LstmLayer, h: np.ndarray, c: np.ndarray, x: np.ndarray) -> CellStep:
    """One timestep of a cell without peepholes, on vectors or (B, features) batches"""
    return _activate_gates(layer, x @ layer.W + h @ layer.U + layer.b, c)


def lstm_step(
    layer: LstmLayer, h: np.ndarray, c: np.ndarray, x: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (h', c') of lstm_cell"""
    step = lstm_cell(layer, h, c, x)
    return step.h, step.c


@dataclass
class _DenseCache:
    inputs: np.ndarray  # (B*T, in)
    z: np.ndarray
    a: np.ndarray


@dataclass
class _LstmCache:
    inputs: np.ndarray  # (B, T, in)
    h_prev: np.ndarray  # (B, T, n)
    c_prev: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray


@dataclass
class ForwardCache:
    batch: int
    steps: int
    in2rec: List[_DenseCache] = field(default_factory=list)
    lstm: List[_LstmCache] = field(default_factory=list)
    rec2out: List[_DenseCache] = field(default_factory=list)
    output_inputs: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None


def _check_input(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != NUM_FEATURES:
        raise NetworkError(f"input must be (B, T, {NUM_FEATURES}), got {x.shape}")
    if x.shape[0] == 0 or x.shape[1] == 0:
        raise NetworkError(f"input batch is empty, shape {x.shape}")
    return x


def _dense_forward(layer: DenseLayer, x: np.ndarray) -> _DenseCache:
    z = x @ layer.weights + layer.bias
    a = z if layer.activation is None else layer.activation.apply(z)
    return _DenseCache(inputs=x, z=z, a=a)


def _lstm_forward(layer: LstmLayer, x: np.ndarray) -> _LstmCache:
    batch, steps, _ = x.shape
    n = layer.width
    x_proj = x @ layer.W + layer.b  # (B, T, 4n)

    cache = _LstmCache(
        inputs=x,
        h_prev=np.zeros((batch, steps, n)),
        c_prev=np.zeros((batch, steps, n)),
        c=np.zeros((batch, steps, n)),
        tanh_c=np.zeros((batch, steps, n)),
        i=np.zeros((batch, steps, n)),
        f=np.zeros((batch, steps, n)),
        g=np.zeros((batch, steps, n)),
        o=np.zeros((batch, steps, n)),
    )

    h = np.zeros((batch, n))
    c = np.zeros((batch, n))
    for t in range(steps):
        step = _activate_gates(layer, x_proj[:, t] + h @ layer.U, c)

        cache.h_prev[:, t] = h
        cache.c_prev[:, t] = c
        cache.c[:, t] = step.c
        cache.tanh_c[:, t] = step.tanh_c
        cache.i[:, t] = step.i
        cache.f[:, t] = step.f
        cache.g[:, t] = step.g
        cache.o[:, t] = step.o
        h, c = step.h, step.c

    return cache


def _forward_with_cache(net: Network, x: np.ndarray) -> ForwardCache:
    x = _check_input(x)
    batch, steps, _ = x.shape
    cache = ForwardCache(batch=batch, steps=steps)

    flat = x.reshape(batch * steps, NUM_FEATURES)
    for layer in net.in2rec:
        layer_cache = _dense_forward(layer, flat)
        cache.in2rec.append(layer_cache)
        flat = layer_cache.a

    seq = flat.reshape(batch, steps, -1)
    for cell in net.lstm:
        cell_cache = _lstm_forward(cell, seq)
        cache.lstm.append(cell_cache)
        # Outputs of this layer are the h of every timestep
        seq = cell_cache.o * cell_cache.tanh_c

    flat = seq.reshape(batch * steps, -1)
    for layer in net.rec2out:
        layer_cache = _dense_forward(layer, flat)
        cache.rec2out.append(layer_cache)
        flat = layer_cache.a

    cache.output_inputs = flat
    logits = flat @ net.output.weights + net.output.bias
    cache.probs = softmax(logits).reshape(batch, steps, NUM_CLASSES)
    return cache


def forward_batch(net: Network, x: np.ndarray) -> np.ndarray:
    """(B, T, 5) features -> (B, T, 4) class probabilities"""
    probs = _forward_with_cache(net, x).probs
    assert probs is not None
    return probs


def _as_matrix(seq: Union[FeatureSequence, np.ndarray]) -> np.ndarray:
    if isinstance(seq, FeatureSequence):
        return seq.values
    return np.asarray(seq, dtype=np.float64)


def forward(net: Network, seq: Union[FeatureSequence, np.ndarray]) -> np.ndarray:
    """(T, 5) features -> (T, 4) class probabilities, state starts at zero"""
    return forward_batch(net, _as_matrix(seq)[np.newaxis])[0]


def _dense_backward(
    layer: DenseLayer, cache: _DenseCache, d_a: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d_inputs, d_weights, d_bias)"""
    if layer.activation is None:
        d_z = d_a
    else:
        d_z = d_a * layer.activation.derivative(cache.z, cache.a)
    return d_z @ layer.weights.T, cache.inputs.T @ d_z, d_z.sum(axis=0)


def _lstm_backward(
    layer: LstmLayer, cache: _LstmCache, d_h_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """BPTT through one LSTM layer, returns (d_inputs, dW, dU, db)"""
    batch, steps, n = d_h_out.shape
    d_gates = np.zeros((batch, steps, 4 * n))

    d_h_next = np.zeros((batch, n))
    d_c_next = np.zeros((batch, n))
    for t in reversed(range(steps)):
        i = cache.i[:, t]
        f = cache.f[:, t]
        g = cache.g[:, t]
        o = cache.o[:, t]
        tanh_c = cache.tanh_c[:, t]

        d_h = d_h_out[:, t] + d_h_next
        d_o = d_h * tanh_c
        d_c = d_h * o * (1.0 - tanh_c * tanh_c) + d_c_next

        d_gates[:, t, :n] = d_c * g * i * (1.0 - i)
        d_gates[:, t, n : 2 * n] = d_c * cache.c_prev[:, t] * f * (1.0 - f)
        d_gates[:, t, 2 * n : 3 * n] = d_c * i * (1.0 - g * g)
        d_gates[:, t, 3 * n :] = d_o * o * (1.0 - o)

        d_c_next = d_c * f
        d_h_next = d_gates[:, t] @ layer.U.T

    flat_gates = d_gates.reshape(batch * steps, 4 * n)
    d_W = cache.inputs.reshape(batch * steps, -1).T @ flat_gates
    d_U = cache.h_prev.reshape(batch * steps, n).T @ flat_gates
    d_b = flat_gates.sum(axis=0)
    d_inputs = d_gates @ layer.W.T
    return d_inputs, d_W, d_U, d_b


def backward_batch(
    net: Network, x: np.ndarray, targets: np.ndarray, loss_weight: float = 1.0
) -> Tuple[GradientSet, float]:
    """
    Gradients of loss_weight * L where L is the cross-entropy averaged over
    all timesteps and all sequences of the batch. Returns (gradients,
    loss_weight * L).
    """
    cache = _forward_with_cache(net, x)
    probs = cache.probs
    assert probs is not None and cache.output_inputs is not None
    batch, steps = cache.batch, cache.steps

    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (batch,):
        raise NetworkError(f"expected {batch} targets, got shape {targets.shape}")
    if np.any((targets < 0) | (targets >= NUM_CLASSES)):
        raise NetworkError(f"target classes must lie in [0, {NUM_CLASSES})")

    picked = probs[np.arange(batch)[:, None], np.arange(steps)[None, :], targets[:, None]]
    loss = loss_weight * float(-np.mean(np.log(np.maximum(picked, 1e-12))))

    # Softmax and cross-entropy fused: dL/dlogits = (p - y) / (B T)
    one_hot = np.zeros_like(probs)
    one_hot[np.arange(batch), :, targets] = 1.0
    d_logits = ((probs - one_hot) * (loss_weight / (batch * steps))).reshape(
        batch * steps, NUM_CLASSES
    )

    grads_rev: List[np.ndarray] = []

    d_flat = d_logits @ net.output.weights.T
    grads_rev += [d_logits.sum(axis=0), cache.output_inputs.T @ d_logits]

    for layer, layer_cache in zip(reversed(net.rec2out), reversed(cache.rec2out)):
        d_flat, d_w, d_b = _dense_backward(layer, layer_cache, d_flat)
        grads_rev += [d_b, d_w]

    d_seq = d_flat.reshape(batch, steps, -1)
    for cell, cell_cache in zip(reversed(net.lstm), reversed(cache.lstm)):
        d_seq, d_W, d_U, d_b = _lstm_backward(cell, cell_cache, d_seq)
        grads_rev += [d_b, d_U, d_W]

    d_flat = d_seq.reshape(batch * steps, -1)
    for layer, layer_cache in zip(reversed(net.in2rec), reversed(cache.in2rec)):
        d_flat, d_w, d_b = _dense_backward(layer, layer_cache, d_flat)
        grads_rev += [d_b, d_w]

    return GradientSet(list(reversed(grads_rev))), loss


def backward(
    net: Network,
    seq: Union[FeatureSequence, np.ndarray],
    target: RoadUserClass,
    loss_weight: float = 1.0,
) -> Tuple[GradientSet, float]:
    """Single sequence BPTT, see backward_batch"""
    return backward_batch(
        net, _as_matrix(seq)[np.newaxis], np.array([int(target)]), loss_weight
    )


def stack_sequences(sequences: List[FeatureSequence]) -> Tuple[np.ndarray, np.ndarray]:
    """(B, T, 5) inputs and (B,) class indices of equal-length sequences"""
    if len(sequences) == 0:
        raise NetworkError("cannot stack zero sequences")
    lengths = {len(x) for x in sequences}
    if len(lengths) != 1:
        raise NetworkError(f"sequences differ in length: {sorted(lengths)}")
    x = np.stack([s.values for s in sequences])
    y = np.array([int(s.label) for s in sequences], dtype=np.int64)
    return x, y
