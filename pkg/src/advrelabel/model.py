"""The small convolutional classifier: architecture specs, training,
probability/gradient/feature queries, and a checksummed binary checkpoint.

The reference architecture is conv(8,3x3)-relu-maxpool-conv(16,3x3)-relu-
maxpool-flatten-dense(64)-relu-dense(K)-softmax on 28x28 single-channel
inputs.  The loss everywhere is softmax cross-entropy on the target index,
and gradients are available with respect to both parameters (training) and
the input image (attacks).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset

CHECKPOINT_MAGIC = b"ADVRLB"
CHECKPOINT_VERSION = b"01"


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# architecture


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel_size: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_dim: int


@dataclass(frozen=True)
class Softmax:
    pass


LayerSpec = Conv | Relu | MaxPool | Flatten | Dense | Softmax


@dataclass(frozen=True)
class Architecture:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]  # (channels, height, width)
    num_classes: int

    def __post_init__(self):
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise ValueError("architecture must end with a softmax layer")
        shapes = self.layer_shapes()
        if shapes[-1] != (self.num_classes,):
            raise ValueError(
                f"final layer produces {shapes[-1]}, expected ({self.num_classes},) logits"
            )

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Output shape after each layer, starting from input_shape; validates consistency."""
        shape: tuple[int, ...] = tuple(self.input_shape)
        out = [shape]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: conv needs a (c,h,w) input, got {shape}")
                if layer.kernel_size % 2 != 1:
                    raise ValueError(f"layer {i}: conv kernel size must be odd")
                shape = (layer.out_channels, shape[1], shape[2])
            elif isinstance(layer, MaxPool):
                if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                    raise ValueError(f"layer {i}: maxpool needs a (c,h,w) input >= 2x2, got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise ValueError(f"layer {i}: dense needs a flat input, got {shape}")
                shape = (layer.out_dim,)
            elif isinstance(layer, (Relu, Softmax)):
                pass
            else:  # pragma: no cover
                raise ValueError(f"layer {i}: unknown spec {layer!r}")
            out.append(shape)
        return out

    def last_dense_index(self) -> int | None:
        idx = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                idx = i
        return idx

    def feature_dim(self) -> int:
        """Input width of the final dense layer (the penultimate feature size)."""
        idx = self.last_dense_index()
        if idx is None:
            raise ValueError("architecture has no dense layer")
        return self.layer_shapes()[idx][0]


def reference_architecture(
    num_classes: int = 10,
    input_shape: tuple[int, int, int] = (1, 28, 28),
    conv_channels: tuple[int, int] = (8, 16),
    dense_width: int = 64,
) -> Architecture:
    """The stock desk-scale classifier; widths are adjustable for variant models."""
    layers = (
        Conv(conv_channels[0], 3),
        Relu(),
        MaxPool(),
        Conv(conv_channels[1], 3),
        Relu(),
        MaxPool(),
        Flatten(),
        Dense(dense_width),
        Relu(),
        Dense(num_classes),
        Softmax(),
    )
    return Architecture(layers=layers, input_shape=input_shape, num_classes=num_classes)


# ---------------------------------------------------------------------------
# model


@dataclass
class TrainingMetadata:
    seed: int
    epochs: int
    learning_rate: float
    batch_size: int
    test_accuracy: float | None = None


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0


@dataclass
class Model:
    architecture: Architecture
    params: dict[str, np.ndarray]
    metadata: TrainingMetadata

    @property
    def num_classes(self) -> int:
        return self.architecture.num_classes


def init_params(architecture: Architecture, seed: int) -> dict[str, np.ndarray]:
    """Uniform [-s, s] weights with s = sqrt(6/(fan_in+fan_out)); zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    params: dict[str, np.ndarray] = {}
    shapes = architecture.layer_shapes()
    for i, layer in enumerate(architecture.layers):
        if isinstance(layer, Conv):
            c_in = shapes[i][0]
            k = layer.kernel_size
            fan_in, fan_out = c_in * k * k, layer.out_channels * k * k
            s = np.sqrt(6.0 / (fan_in + fan_out))
            params[f"layer{i}.weight"] = rng.uniform(-s, s, size=(layer.out_channels, c_in, k, k))
            params[f"layer{i}.bias"] = np.zeros(layer.out_channels)
        elif isinstance(layer, Dense):
            d_in = shapes[i][0]
            s = np.sqrt(6.0 / (d_in + layer.out_dim))
            params[f"layer{i}.weight"] = rng.uniform(-s, s, size=(d_in, layer.out_dim))
            params[f"layer{i}.bias"] = np.zeros(layer.out_dim)
    return params


def _forward(architecture: Architecture, params, x: Tensor) -> tuple[Tensor, Tensor | None]:
    """Run the layer stack; returns (probabilities, penultimate activations).

    x may be a single image (matching input_shape) or a batch with a leading
    axis; params values may be Tensors (tracked) or arrays.
    """
    batched = x.ndim == len(architecture.input_shape) + 1
    pen_idx = architecture.last_dense_index()
    cur = x
    pen = None
    for i, layer in enumerate(architecture.layers):
        if isinstance(layer, Conv):
            cur = ad.conv2d(cur, params[f"layer{i}.weight"], params[f"layer{i}.bias"])
        elif isinstance(layer, Relu):
            cur = ad.relu(cur)
        elif isinstance(layer, MaxPool):
            cur = ad.maxpool2d(cur)
        elif isinstance(layer, Flatten):
            cur = ad.reshape(cur, (cur.shape[0], -1) if batched else (-1,))
        elif isinstance(layer, Dense):
            if i == pen_idx:
                pen = cur
            cur = ad.bias_add(ad.matmul(cur, params[f"layer{i}.weight"]), params[f"layer{i}.bias"])
        elif isinstance(layer, Softmax):
            cur = ad.softmax(cur)
    return cur, pen


def _check_image_shape(model: Model, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != tuple(model.architecture.input_shape):
        raise ad.ShapeError(
            f"image shape {image.shape} does not match architecture input "
            f"{tuple(model.architecture.input_shape)}"
        )
    return image


def predict_probabilities(model: Model, image) -> np.ndarray:
    """Softmax class probabilities for one image; argmax is the predicted label."""
    image = _check_image_shape(model, image)
    probs, _ = _forward(model.architecture, model.params, Tensor(image))
    return probs.data


def predict_batch(model: Model, images) -> np.ndarray:
    """(n, K) probabilities for a stack of images."""
    images = np.asarray(images, dtype=np.float64)
    probs, _ = _forward(model.architecture, model.params, Tensor(images))
    return probs.data


def evaluate_accuracy(model: Model, dataset: Dataset, batch_size: int = 256) -> float:
    if len(dataset) == 0:
        raise ValueError("evaluate_accuracy: dataset is empty")
    labels = dataset.labels()
    correct = 0
    pixels = dataset.stacked_pixels()
    for lo in range(0, len(dataset), batch_size):
        chunk = pixels[lo : lo + batch_size]
        probs = predict_batch(model, chunk)
        correct += int(np.sum(np.argmax(probs, axis=1) == labels[lo : lo + chunk.shape[0]]))
    return correct / len(dataset)


def _loss_grad_probs(model: Model, image: np.ndarray, label: int) -> tuple[float, np.ndarray, np.ndarray]:
    """One taped pass: loss toward `label`, d(loss)/d(image), and probabilities."""
    tape = Tape()
    x = tape.leaf(image)
    probs, _ = _forward(model.architecture, model.params, x)
    loss = ad.cross_entropy(probs, label)
    grads = ad.backward(tape, loss)
    return float(loss.data), grads[x.node_id], probs.data


def loss_and_input_gradient(model: Model, image, label: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy against `label` and its exact input-image gradient."""
    image = _check_image_shape(model, image)
    label = int(label)
    if not 0 <= label < model.num_classes:
        raise ValueError(f"label {label} out of range for {model.num_classes} classes")
    loss, grad, _ = _loss_grad_probs(model, image, label)
    return loss, grad


def penultimate_features(model: Model, image) -> np.ndarray:
    """Activations feeding the final dense layer."""
    if model.architecture.last_dense_index() is None:
        raise ValueError("architecture has no dense layer; penultimate features undefined")
    image = _check_image_shape(model, image)
    _, pen = _forward(model.architecture, model.params, Tensor(image))
    return pen.data


def train(
    architecture: Architecture,
    train_data: Dataset,
    test_data: Dataset | None = None,
    config: TrainConfig | None = None,
) -> Model:
    """Plain mini-batch gradient descent; bit-deterministic for a given seed."""
    config = config or TrainConfig()
    if len(train_data) == 0:
        raise ValueError("train: dataset is empty")
    labels = train_data.labels()
    if labels.max() >= architecture.num_classes:
        raise ValueError(
            f"train: dataset label {labels.max()} out of range for "
            f"{architecture.num_classes} classes"
        )
    params = init_params(architecture, config.seed)
    pixels = train_data.stacked_pixels()
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 1]))
    n = len(train_data)
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            batch = pixels[idx]
            batch_labels = labels[idx]
            tape = Tape()
            tracked = {name: tape.leaf(value) for name, value in params.items()}
            probs, _ = _forward(architecture, tracked, Tensor._wrap(batch))
            per_sample = ad.cross_entropy(probs, batch_labels)
            loss = ad.multiply(ad.tensor_sum(per_sample), 1.0 / idx.size)
            grads = ad.backward(tape, loss)
            for name, leaf in tracked.items():
                params[name] = params[name] - config.learning_rate * grads[leaf.node_id]
    for value in params.values():
        value.setflags(write=False)
    metadata = TrainingMetadata(
        seed=config.seed,
        epochs=config.epochs,
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
    )
    model = Model(architecture=architecture, params=params, metadata=metadata)
    if test_data is not None and len(test_data):
        metadata.test_accuracy = evaluate_accuracy(model, test_data)
    return model


# ---------------------------------------------------------------------------
# checkpoint format: magic "ADVRLB" + 2-byte version, little-endian uint32
# header length, UTF-8 JSON header, raw little-endian float64 tensor data
# (offsets relative to the data section), trailing CRC32 of all prior bytes.


def _layer_to_dict(layer: LayerSpec) -> dict:
    if isinstance(layer, Conv):
        return {"kind": "conv", "out_channels": layer.out_channels, "kernel_size": layer.kernel_size}
    if isinstance(layer, Dense):
        return {"kind": "dense", "out_dim": layer.out_dim}
    return {"kind": type(layer).__name__.lower()}


def _layer_from_dict(d: dict) -> LayerSpec:
    kind = d.get("kind")
    if kind == "conv":
        return Conv(int(d["out_channels"]), int(d["kernel_size"]))
    if kind == "dense":
        return Dense(int(d["out_dim"]))
    simple = {"relu": Relu, "maxpool": MaxPool, "flatten": Flatten, "softmax": Softmax}
    if kind in simple:
        return simple[kind]()
    raise CheckpointFormatError(f"unknown layer kind {kind!r} in checkpoint header")


def architecture_to_dict(arch: Architecture) -> dict:
    return {
        "layers": [_layer_to_dict(l) for l in arch.layers],
        "input_shape": list(arch.input_shape),
        "num_classes": arch.num_classes,
    }


def architecture_from_dict(d: dict) -> Architecture:
    return Architecture(
        layers=tuple(_layer_from_dict(l) for l in d["layers"]),
        input_shape=tuple(int(v) for v in d["input_shape"]),
        num_classes=int(d["num_classes"]),
    )


def save_checkpoint(model: Model, path) -> None:
    names = sorted(model.params)
    tensors = []
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        blob = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    meta = model.metadata
    header = {
        "architecture": architecture_to_dict(model.architecture),
        "metadata": {
            "seed": meta.seed,
            "epochs": meta.epochs,
            "learning_rate": meta.learning_rate,
            "batch_size": meta.batch_size,
            "test_accuracy": meta.test_accuracy,
        },
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = (
        CHECKPOINT_MAGIC
        + CHECKPOINT_VERSION
        + struct.pack("<I", len(header_bytes))
        + header_bytes
        + b"".join(blobs)
    )
    with open(path, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise CheckpointTruncatedError(f"{path}: file shorter than the fixed header")
    if raw[:6] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
    if raw[6:8] != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: unsupported checkpoint version {raw[6:8]!r}, expected "
            f"{CHECKPOINT_VERSION!r}"
        )
    (header_len,) = struct.unpack("<I", raw[8:12])
    if 12 + header_len + 4 > len(raw):
        raise CheckpointTruncatedError(f"{path}: header extends past end of file")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        if zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
            raise CheckpointChecksumError(f"{path}: checksum mismatch") from None
        raise CheckpointFormatError(f"{path}: header is not valid JSON") from None
    data_len = sum(
        int(np.prod(t["shape"], dtype=np.int64)) * 8 for t in header.get("tensors", [])
    )
    expected = 12 + header_len + data_len + 4
    if len(raw) < expected:
        raise CheckpointTruncatedError(
            f"{path}: expected {expected} bytes, found {len(raw)}"
        )
    if len(raw) > expected:
        raise CheckpointFormatError(f"{path}: {len(raw) - expected} trailing bytes")
    if zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
        raise CheckpointChecksumError(f"{path}: checksum mismatch")
    data = raw[12 + header_len : -4]
    params: dict[str, np.ndarray] = {}
    for t in header["tensors"]:
        size = int(np.prod(t["shape"], dtype=np.int64)) * 8
        arr = np.frombuffer(data[t["offset"] : t["offset"] + size], dtype="<f8")
        arr = arr.reshape([int(v) for v in t["shape"]]).astype(np.float64)
        arr.setflags(write=False)
        params[t["name"]] = arr
    arch = architecture_from_dict(header["architecture"])
    m = header.get("metadata", {})
    metadata = TrainingMetadata(
        seed=int(m.get("seed", 0)),
        epochs=int(m.get("epochs", 0)),
        learning_rate=float(m.get("learning_rate", 0.0)),
        batch_size=int(m.get("batch_size", 0)),
        test_accuracy=None if m.get("test_accuracy") is None else float(m["test_accuracy"]),
    )
    return Model(architecture=arch, params=params, metadata=metadata)
