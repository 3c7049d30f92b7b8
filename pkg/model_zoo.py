"""
The classifiers being multiplexed: declarative layer stacks, projection heads,
FLOPs accounting and MUXC checkpoint files.

An architecture is a list of layer dicts, for example::

    [{"type": "crop", "rows": [0, 5], "cols": [0, 16]},
     {"type": "conv", "filters": 4, "kernel": 3, "stride": 1},
     {"type": "relu"},
     {"type": "dense", "units": 24},
     {"type": "relu"}]

A ClassifierModel appends its own dense classification layer; the input of
that layer is the model's embedding.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

import tensor_core as tc
from errors import ConfigError, ShapeError, StorageError
from storage import BinaryReader, BinaryWriter, read_blob, write_blob

logger = logging.getLogger(__name__)

# Constants
CHECKPOINT_MAGIC = b"MUXC"
CHECKPOINT_VERSION = 1
LAYER_KINDS = ("conv", "relu", "flatten", "crop", "dense")


# ============================================================================
# Layer stacks
# ============================================================================

def _kernel_size(layer):
    kernel = layer.get("kernel", 3)
    if isinstance(kernel, int):
        return kernel, kernel
    return int(kernel[0]), int(kernel[1])


class LayerStack:
    """
    Sequential layers built from a descriptor list.

    Args:
        layers: list of layer dicts (see module docstring)
        input_shape: per-sample input shape, e.g. (1, 16, 16)
        rng: Rng for He-normal initialisation, or None for all-zero weights
        prefix: name prefix for the parameter tensors
    """

    def __init__(self, layers, input_shape, rng=None, prefix="layer"):
        self.layers = [dict(layer) for layer in layers]
        self.input_shape = tuple(int(d) for d in input_shape)
        self.params = []
        self._layer_params = []
        self._shapes = [self.input_shape]

        shape = self.input_shape
        for idx, layer in enumerate(self.layers):
            kind = layer.get("type")
            if kind not in LAYER_KINDS:
                raise ConfigError(f"unknown layer type {kind!r} (expected one of {LAYER_KINDS})")
            name = f"{prefix}{idx}.{kind}"
            params = ()

            if kind == "conv":
                if len(shape) != 3:
                    raise ShapeError(f"{name}: conv needs a [C, H, W] input, got {shape}")
                filters = int(layer["filters"])
                kh, kw = _kernel_size(layer)
                stride = int(layer.get("stride", 1))
                c, h, w = shape
                if kh > h or kw > w:
                    raise ShapeError(f"{name}: kernel {kh}x{kw} larger than input {h}x{w}")
                fan_in = c * kh * kw
                kernels = init_weights((filters, c, kh, kw), fan_in, rng)
                params = (tc.Tensor(kernels, requires_grad=True, name=f"{name}.kernels"),)
                shape = (filters, (h - kh) // stride + 1, (w - kw) // stride + 1)

            elif kind == "dense":
                fan_in = int(np.prod(shape))
                units = int(layer["units"])
                weights = init_weights((fan_in, units), fan_in, rng)
                params = (
                    tc.Tensor(weights, requires_grad=True, name=f"{name}.weights"),
                    tc.Tensor(np.zeros(units), requires_grad=True, name=f"{name}.bias"),
                )
                shape = (units,)

            elif kind == "crop":
                r0, r1 = (int(v) for v in layer["rows"])
                c0, c1 = (int(v) for v in layer["cols"])
                if len(shape) != 3 or not (0 <= r0 < r1 <= shape[1] and 0 <= c0 < c1 <= shape[2]):
                    raise ShapeError(f"{name}: crop rows={layer['rows']} cols={layer['cols']} outside {shape}")
                shape = (shape[0], r1 - r0, c1 - c0)

            elif kind == "flatten":
                shape = (int(np.prod(shape)),)

            self._layer_params.append(params)
            self.params.extend(params)
            self._shapes.append(shape)

        self.output_shape = shape

    def forward(self, x):
        """Run a [B, ...] batch through every layer"""
        h = x
        for layer, params in zip(self.layers, self._layer_params):
            kind = layer["type"]
            if kind == "conv":
                h = tc.conv2d(h, params[0], stride=int(layer.get("stride", 1)))
            elif kind == "relu":
                h = tc.relu(h)
            elif kind == "crop":
                h = tc.crop2d(h, layer["rows"], layer["cols"])
            elif kind == "flatten":
                h = tc.flatten(h)
            elif kind == "dense":
                if h.ndim > 2:
                    h = tc.flatten(h)
                h = tc.add(tc.matmul(h, params[0]), params[1])
        return h

    def flops_breakdown(self):
        """
        FLOPs of each layer for one input. A multiply-accumulate counts as
        2 FLOPs; relu costs one op per element; crop and flatten are free.

        Returns:
            list of (layer index, layer type, flops)
        """
        rows = []
        for idx, layer in enumerate(self.layers):
            kind = layer["type"]
            in_shape = self._shapes[idx]
            out_shape = self._shapes[idx + 1]
            if kind == "conv":
                filters, ho, wo = out_shape
                kh, kw = _kernel_size(layer)
                flops = 2 * filters * in_shape[0] * kh * kw * ho * wo
            elif kind == "dense":
                flops = 2 * int(np.prod(in_shape)) * out_shape[0]
            elif kind == "relu":
                flops = int(np.prod(in_shape))
            else:
                flops = 0
            rows.append((idx, kind, int(flops)))
        return rows


def init_weights(shape, fan_in, rng):
    if rng is None:
        return np.zeros(shape)
    return rng.normal(shape, scale=np.sqrt(2.0 / max(fan_in, 1)))


def as_batch(x, input_shape):
    """Accept a single sample or a batch; return (batch tensor, was_single)"""
    if tuple(x.shape) == tuple(input_shape):
        return tc.reshape(x, (1,) + tuple(input_shape)), True
    if tuple(x.shape[1:]) == tuple(input_shape):
        return x, False
    raise ShapeError(f"input shape {x.shape} does not match model input {tuple(input_shape)}")


# ============================================================================
# Classifiers and projection heads
# ============================================================================

class ClassifierModel:
    """
    One of the N classifiers: a layer stack followed by a dense
    classification layer.

    Args:
        model_id: identifier used in reports and file names
        input_shape: per-sample input shape
        layers: hidden-layer descriptor list (may be empty)
        num_classes: width of the classification layer
        rng: Rng for initialisation, None for zeros
    """

    def __init__(self, model_id, input_shape, layers, num_classes, rng=None):
        self.id = model_id
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.body = LayerStack(layers, self.input_shape, rng, prefix=f"{model_id}.")
        self.embedding_dim = int(np.prod(self.body.output_shape))
        self.classifier = (
            tc.Tensor(init_weights((self.embedding_dim, self.num_classes), self.embedding_dim, rng),
                      requires_grad=True, name=f"{model_id}.classifier.weights"),
            tc.Tensor(np.zeros(self.num_classes), requires_grad=True, name=f"{model_id}.classifier.bias"),
        )

    @property
    def layers(self):
        return self.body.layers

    @property
    def params(self):
        return self.body.params + list(self.classifier)

    def descriptor(self):
        return {
            "id": self.id,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": self.body.layers,
        }


class ProjectionHead:
    """Linear map h [embedding_dim x shared_dim] into the shared embedding space"""

    def __init__(self, embedding_dim, shared_dim, rng=None, name="head"):
        if rng is None:
            matrix = np.eye(embedding_dim, shared_dim)
        else:
            matrix = rng.normal((embedding_dim, shared_dim), scale=1.0 / np.sqrt(embedding_dim))
        self.matrix = tc.Tensor(matrix, requires_grad=True, name=f"{name}.matrix")

    @property
    def shared_dim(self):
        return self.matrix.shape[1]

    @property
    def params(self):
        return [self.matrix]


@dataclass
class CostedModel:
    """A classifier with its projection head and per-inference FLOPs"""
    model: ClassifierModel
    head: ProjectionHead
    flops: int

    @property
    def id(self):
        return self.model.id

    @property
    def params(self):
        return self.model.params + self.head.params


def forward(model, x):
    """
    Forward pass of one classifier.

    Args:
        model: ClassifierModel
        x: Tensor, a single input or a [B, ...] batch

    Returns:
        tuple: (logits, embedding) with the batch axis dropped for a single input
    """
    batch, single = as_batch(x, model.input_shape)
    h = model.body.forward(batch)
    if h.ndim > 2:
        h = tc.flatten(h)
    logits = tc.add(tc.matmul(h, model.classifier[0]), model.classifier[1])
    if single:
        return tc.reshape(logits, (model.num_classes,)), tc.reshape(h, (model.embedding_dim,))
    return logits, h


def project(head, g, allow_zero=False):
    """
    e = normalize(h^T g): the projected, unit-norm embedding.

    With allow_zero a zero projection comes back as a zero row, which
    callers read as "no embedding" for that sample.

    Raises:
        ShapeError: g's width differs from the head's input width
        NumericError: the projection is the zero vector and allow_zero is off
    """
    single = g.ndim == 1
    batch = tc.reshape(g, (1, g.shape[0])) if single else g
    if batch.shape[1] != head.matrix.shape[0]:
        raise ShapeError(f"embedding width {batch.shape[1]} does not match head input {head.matrix.shape[0]}")
    e = tc.l2_normalize(tc.matmul(batch, head.matrix), allow_zero)
    if single:
        return tc.reshape(e, (head.shared_dim,))
    return e


def predict(model, inputs, batch_size=256):
    """Predicted classes for a [n, C, H, W] array, computed in chunks"""
    preds = []
    for start in range(0, len(inputs), batch_size):
        logits, _ = forward(model, tc.Tensor(inputs[start:start + batch_size]))
        preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model, dataset, batch_size=256):
    if len(dataset) == 0:
        return float("nan")
    return float(np.mean(predict(model, dataset.inputs, batch_size) == dataset.labels))


def count_flops(model):
    """
    FLOPs of one forward pass, summed over layers (projection head excluded).

    Args:
        model: ClassifierModel or LayerStack

    Returns:
        int
    """
    if isinstance(model, LayerStack):
        return sum(row[2] for row in model.flops_breakdown())
    total = sum(row[2] for row in model.body.flops_breakdown())
    return total + 2 * model.embedding_dim * model.num_classes


def build_zoo(descriptors, input_shape, num_classes, shared_dim, rng):
    """
    Build the CostedModels described in `zoo.models`.

    Args:
        descriptors: list of {"id": ..., "layers": [...]} dicts
        input_shape: per-sample input shape
        num_classes: class count shared by every model
        shared_dim: projected embedding width
        rng: root Rng; each model draws from rng.derive('zoo.init.<id>')

    Returns:
        list of CostedModel
    """
    ids = [d["id"] for d in descriptors]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"model ids must be unique, got {ids}")
    zoo = []
    for desc in descriptors:
        model_rng = rng.derive(f"zoo.init.{desc['id']}")
        model = ClassifierModel(desc["id"], input_shape, desc.get("layers", []), num_classes, model_rng)
        head = ProjectionHead(model.embedding_dim, shared_dim, model_rng.derive("head"), name=f"{desc['id']}.head")
        flops = count_flops(model)
        zoo.append(CostedModel(model, head, flops))
        logger.info("built model %s: embedding_dim=%d flops=%d", model.id, model.embedding_dim, flops)
    return zoo


# ============================================================================
# Checkpoints
# ============================================================================

@dataclass
class Checkpoint:
    """Contents of a MUXC file"""
    descriptor: dict
    tensors: list
    seed: int = 0
    metadata: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path, checkpoint):
    """
    Write a MUXC file: magic, u32 version, length-prefixed UTF-8 descriptor,
    u32 tensor count, tensor records, CRC32.
    """
    header = dict(checkpoint.descriptor)
    header["seed"] = int(checkpoint.seed)
    header["metadata"] = checkpoint.metadata
    writer = BinaryWriter(CHECKPOINT_MAGIC, checkpoint.version)
    writer.text(json.dumps(header, sort_keys=True))
    writer.u32(len(checkpoint.tensors))
    for array in checkpoint.tensors:
        writer.tensor(np.asarray(array, dtype=np.float32))
    write_blob(path, writer.finish())
    logger.info("saved checkpoint %s (%d tensors)", path, len(checkpoint.tensors))


def load_checkpoint(path):
    """
    Read a MUXC file.

    Raises:
        StorageError: bad magic, newer version, checksum failure, truncation
    """
    reader = BinaryReader(read_blob(path), CHECKPOINT_MAGIC, CHECKPOINT_VERSION, path)
    try:
        header = json.loads(reader.text())
    except json.JSONDecodeError as e:
        raise StorageError(f"{path}: invalid architecture descriptor ({e})")
    count = reader.u32()
    tensors = [reader.tensor() for _ in range(count)]
    reader.ensure_consumed()
    seed = int(header.pop("seed", 0))
    metadata = header.pop("metadata", {})
    return Checkpoint(descriptor=header, tensors=tensors, seed=seed, metadata=metadata, version=reader.version)


def assign_params(params, tensors, what):
    """Copy checkpoint arrays into parameter tensors (shapes must agree)"""
    if len(params) != len(tensors):
        raise ConfigError(f"{what}: checkpoint has {len(tensors)} tensors, architecture needs {len(params)}")
    for p, array in zip(params, tensors):
        if tuple(array.shape) != tuple(p.shape):
            raise ConfigError(f"{what}: tensor {p.name} has shape {array.shape}, expected {p.shape}")
        p.data = np.array(array, dtype=p.dtype)


def save_model(path, costed, seed=0, metadata=None):
    descriptor = costed.model.descriptor()
    descriptor.update({
        "kind": "classifier",
        "shared_dim": costed.head.shared_dim,
        "flops": int(costed.flops),
        "param_names": [p.name for p in costed.params],
    })
    checkpoint = Checkpoint(descriptor, [p.data for p in costed.params], seed, metadata or {})
    save_checkpoint(path, checkpoint)


def load_model(path):
    """Rebuild a CostedModel from its checkpoint"""
    checkpoint = load_checkpoint(path)
    desc = checkpoint.descriptor
    if desc.get("kind") != "classifier":
        raise ConfigError(f"{path}: not a classifier checkpoint (kind={desc.get('kind')!r})")
    model = ClassifierModel(desc["id"], desc["input_shape"], desc["layers"], desc["num_classes"])
    head = ProjectionHead(model.embedding_dim, desc["shared_dim"], name=f"{desc['id']}.head")
    costed = CostedModel(model, head, count_flops(model))
    assign_params(costed.params, checkpoint.tensors, path)
    return costed


def load_zoo(paths):
    """Load every checkpoint and check they agree on classes and input shape"""
    zoo = [load_model(path) for path in paths]
    if zoo:
        first = zoo[0].model
        for costed in zoo[1:]:
            if costed.model.num_classes != first.num_classes:
                raise ConfigError(
                    f"model {costed.id} has {costed.model.num_classes} classes, {first.id} has {first.num_classes}")
            if costed.model.input_shape != first.input_shape:
                raise ConfigError(
                    f"model {costed.id} input {costed.model.input_shape} differs from {first.id} {first.input_shape}")
    return zoo
