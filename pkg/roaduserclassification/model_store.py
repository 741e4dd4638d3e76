"""
Saving and loading trained networks as `.rnnmodel.json` files.

The file is a JSON object:

  format_version   1
  hyperparams      l_in2rec, l_lstm, l_rec2out, n, activation
  classes          class labels in output order
  standardizer     features, means, stds of the training data
  layers           list of {name, kind, activation, tensors}, every tensor
                   being {name, shape, payload} where payload is the base64
                   of the little-endian float64 values in row-major order
  meta             free-form provenance (seeds, dataset variant, history)

Keys are sorted on output, so saving the same network twice gives the same
bytes and loading gives back bit-identical weights.
"""

import base64
import binascii
import json
import logging
import pathlib
from dataclasses import dataclass, field
from typing import IO, Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from roaduserclassification.errors import ModelStoreError, RoadUserError
from roaduserclassification.feature_pipeline import (
    Standardizer,
    apply_standardizer,
    compute_features,
)
from roaduserclassification.neural_core import (
    DenseLayer,
    HyperParams,
    LstmLayer,
    Network,
    forward,
)
from roaduserclassification.trajectory_model import (
    CLASS_LABELS,
    RoadUserClass,
    Trajectory,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MODEL_SUFFIX = ".rnnmodel.json"

_DTYPE = np.dtype("<f8")


@dataclass
class ModelArtifact:
    network: Network
    standardizer: Standardizer
    meta: Dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _encode(tensor: np.ndarray, name: str) -> Dict[str, Any]:
    payload = np.ascontiguousarray(tensor, dtype=_DTYPE).tobytes(order="C")
    return {
        "name": name,
        "shape": list(tensor.shape),
        "payload": base64.b64encode(payload).decode("ascii"),
    }


def _decode(entry: Any, layer_name: str) -> np.ndarray:
    if not isinstance(entry, dict):
        raise ModelStoreError(f"layer '{layer_name}': tensor entry is not an object")
    name = entry.get("name", "?")
    try:
        shape = tuple(int(x) for x in entry["shape"])
        raw = base64.b64decode(entry["payload"], validate=True)
    except (KeyError, TypeError, ValueError, binascii.Error) as e:
        raise ModelStoreError(
            f"layer '{layer_name}' tensor '{name}': unreadable payload ({e})"
        ) from e

    expected = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
    if len(raw) != expected:
        raise ModelStoreError(
            f"layer '{layer_name}' tensor '{name}': payload has {len(raw)} bytes, "
            f"shape {list(shape)} needs {expected}"
        )
    return np.frombuffer(raw, dtype=_DTYPE).reshape(shape).astype(np.float64)


def _layer_entries(net: Network) -> List[Dict[str, Any]]:
    entries = []
    groups = [("in2rec", net.in2rec), ("lstm", net.lstm), ("rec2out", net.rec2out)]
    for group, layers in groups:
        for idx, layer in enumerate(layers):
            layer_name = f"{group}[{idx}]"
            if isinstance(layer, LstmLayer):
                entries.append(
                    {
                        "name": layer_name,
                        "kind": "lstm",
                        "activation": None,
                        "tensors": [
                            _encode(layer.W, "W"),
                            _encode(layer.U, "U"),
                            _encode(layer.b, "b"),
                        ],
                    }
                )
            else:
                entries.append(
                    {
                        "name": layer_name,
                        "kind": "dense",
                        "activation": str(layer.activation),
                        "tensors": [
                            _encode(layer.weights, "weights"),
                            _encode(layer.bias, "bias"),
                        ],
                    }
                )
    entries.append(
        {
            "name": "output",
            "kind": "softmax",
            "activation": None,
            "tensors": [
                _encode(net.output.weights, "weights"),
                _encode(net.output.bias, "bias"),
            ],
        }
    )
    return entries


def save_model(
    net: Network,
    standardizer: Standardizer,
    meta: Optional[Dict[str, Any]] = None,
    sink: Union[pathlib.Path, IO[bytes], None] = None,
) -> bytes:
    """Serialises the artifact, writes it to sink if given and returns the bytes"""
    document = {
        "format_version": FORMAT_VERSION,
        "hyperparams": net.hyper.to_dict(),
        "classes": list(CLASS_LABELS),
        "standardizer": standardizer.to_dict(),
        "layers": _layer_entries(net),
        "meta": meta or {},
    }
    encoded = (json.dumps(document, indent=1, sort_keys=True) + "\n").encode("utf-8")

    if sink is not None:
        try:
            if isinstance(sink, pathlib.Path):
                sink.write_bytes(encoded)
            else:
                sink.write(encoded)
        except OSError as e:
            raise ModelStoreError(f"failed to write model ({e})") from e

    return encoded


def _tensors_of(entry: Any, count: int) -> List[np.ndarray]:
    if not isinstance(entry, dict):
        raise ModelStoreError(f"layer entry {entry!r} is not an object")
    layer_name = str(entry.get("name", "?"))
    tensors = entry.get("tensors")
    if not isinstance(tensors, list) or len(tensors) != count:
        raise ModelStoreError(f"layer '{layer_name}' must have {count} tensors")
    return [_decode(x, layer_name) for x in tensors]


def read_artifact(source: Union[bytes, pathlib.Path]) -> ModelArtifact:
    if isinstance(source, pathlib.Path):
        try:
            source = source.read_bytes()
        except OSError as e:
            raise ModelStoreError(f"failed to read model ({e})") from e

    try:
        document = json.loads(source.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise ModelStoreError(f"model file is not JSON ({e})") from e
    if not isinstance(document, dict):
        raise ModelStoreError("model file must hold a JSON object")

    version = document.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelStoreError(
            f"unsupported format_version {version}, expected {FORMAT_VERSION}"
        )

    if "standardizer" not in document:
        raise ModelStoreError("standardizer required")
    for key in ["standardizer", "hyperparams"]:
        if not isinstance(document.get(key), dict):
            raise ModelStoreError(f"{key} must be an object")
    try:
        standardizer = Standardizer.from_dict(document["standardizer"])
        hyper = HyperParams.from_dict(document["hyperparams"])
    except (RoadUserError, KeyError, TypeError, ValueError) as e:
        raise ModelStoreError(f"malformed model header ({e})") from e

    classes = document.get("classes")
    if not isinstance(classes, list) or classes != list(CLASS_LABELS):
        raise ModelStoreError(f"class order {document.get('classes')} is not supported")

    entries = document.get("layers")
    if not isinstance(entries, list):
        raise ModelStoreError("layers must be a list")
    expected_count = hyper.n_in2rec + hyper.n_lstm + hyper.n_rec2out + 1
    if len(entries) != expected_count:
        raise ModelStoreError(
            f"expected {expected_count} layers for {hyper.label}, found {len(entries)}"
        )

    for entry in entries:
        if not isinstance(entry, dict):
            raise ModelStoreError(f"layer entry {entry!r} is not an object")

    in2rec: List[DenseLayer] = []
    lstm: List[LstmLayer] = []
    rec2out: List[DenseLayer] = []
    for entry in entries[:-1]:
        name = str(entry.get("name", ""))
        if entry.get("kind") == "lstm":
            W, U, b = _tensors_of(entry, 3)
            lstm.append(LstmLayer(W=W, U=U, b=b))
            continue
        weights, bias = _tensors_of(entry, 2)
        layer = DenseLayer(weights, bias, hyper.activation)
        if name.startswith("in2rec"):
            in2rec.append(layer)
        else:
            rec2out.append(layer)

    weights, bias = _tensors_of(entries[-1], 2)
    meta = document.get("meta", {})
    if not isinstance(meta, dict):
        raise ModelStoreError("meta must be an object")
    try:
        network = Network(
            hyper=hyper,
            in2rec=in2rec,
            lstm=lstm,
            rec2out=rec2out,
            output=DenseLayer(weights, bias),
        )
    except RoadUserError as e:
        raise ModelStoreError(f"shape mismatch: {e.message}") from e

    return ModelArtifact(
        network=network,
        standardizer=standardizer,
        meta=meta,
        format_version=version,
    )


def load_model(
    source: Union[bytes, pathlib.Path]
) -> Tuple[Network, Standardizer, Dict[str, Any]]:
    artifact = read_artifact(source)
    logger.debug(f"Loaded model {artifact.network.hyper.label}")
    return artifact.network, artifact.standardizer, artifact.meta


@dataclass(frozen=True)
class Prediction:
    trajectory_id: str
    predicted: RoadUserClass
    probabilities: np.ndarray  # (T, 4)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.probabilities, columns=list(CLASS_LABELS))
        frame.insert(0, "timestep", np.arange(1, len(frame) + 1))
        frame["predicted"] = [CLASS_LABELS[x] for x in np.argmax(self.probabilities, 1)]
        return frame


def classify_trajectory(
    net: Network, standardizer: Standardizer, traj: Trajectory
) -> Prediction:
    """Features, standardization and a forward pass over a raw trajectory"""
    features = apply_standardizer(standardizer, compute_features(traj))
    probs = forward(net, features)
    return Prediction(
        trajectory_id=traj.id,
        predicted=RoadUserClass(int(np.argmax(probs[-1]))),
        probabilities=probs,
    )
