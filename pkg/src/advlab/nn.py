"""Small classifiers: layer descriptors, seeded init, loss/gradients, checkpoints.

Layer descriptors are plain tuples:
    ("dense", n_in, n_out)            n_in may be None to infer from the
                                      incoming shape at build time
    ("conv", c_in, c_out, k, stride)  valid padding, square kernel
    ("relu",)
    ("flatten",)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import autodiff as ad

CHECKPOINT_MAGIC = b"COLAB1"


@dataclass
class PassCounter:
    """Forward/backward traversal counts, in whole network passes."""
    forward: int = 0
    backward: int = 0

    def snapshot(self):
        return (self.forward, self.backward)


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) < 1 or len(self.inputs) != len(self.labels):
            raise ValueError("batch needs n >= 1 inputs with matching labels")


def resolve_arch(arch, input_shape):
    """Walk the layer list, checking shape composition and inferring dense
    input sizes. Returns (resolved arch, param shapes by name, num_classes)."""
    shape = tuple(input_shape)
    resolved = []
    shapes = {}
    for i, layer in enumerate(arch):
        kind = layer[0]
        if kind == "dense":
            _, n_in, n_out = layer
            if len(shape) != 1:
                raise ValueError(f"layer {i}: dense needs a flat input, got {shape}")
            if n_in is None:
                n_in = shape[0]
            if n_in != shape[0]:
                raise ValueError(f"layer {i}: dense expects {n_in} features, got {shape[0]}")
            shapes[f"l{i}.w"] = (n_in, n_out)
            shapes[f"l{i}.b"] = (n_out,)
            resolved.append(("dense", n_in, n_out))
            shape = (n_out,)
        elif kind == "conv":
            _, c_in, c_out, k, stride = layer
            if len(shape) != 3:
                raise ValueError(f"layer {i}: conv needs [c,h,w] input, got {shape}")
            c, h, w = shape
            if c != c_in:
                raise ValueError(f"layer {i}: conv expects {c_in} channels, got {c}")
            ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
            if h < k or w < k or ho < 1 or wo < 1:
                raise ValueError(f"layer {i}: kernel {k} does not fit input {shape}")
            shapes[f"l{i}.w"] = (c_out, c_in, k, k)
            shapes[f"l{i}.b"] = (c_out,)
            resolved.append(("conv", c_in, c_out, k, stride))
            shape = (c_out, ho, wo)
        elif kind == "relu":
            resolved.append(("relu",))
        elif kind == "flatten":
            resolved.append(("flatten",))
            shape = (int(np.prod(shape)),)
        else:
            raise ValueError(f"layer {i}: unknown layer kind {kind!r}")
    if len(shape) != 1:
        raise ValueError(f"network output must be flat class scores, got {shape}")
    return resolved, shapes, shape[0]


@dataclass
class Model:
    layers: list
    params: dict
    input_shape: tuple
    num_classes: int
    counter: PassCounter = field(default_factory=PassCounter)

    @property
    def num_params(self):
        return sum(p.size for p in self.params.values())

    def logits(self, x):
        """Raw class scores, fast numpy path. Counts one forward pass."""
        h = np.asarray(x, dtype=np.float64)
        n = h.shape[0]
        for i, layer in enumerate(self.layers):
            kind = layer[0]
            if kind == "dense":
                h = h @ self.params[f"l{i}.w"] + self.params[f"l{i}.b"]
            elif kind == "conv":
                h = _kernels.conv_fwd(h, self.params[f"l{i}.w"], layer[4])
                h = h + self.params[f"l{i}.b"][None, :, None, None]
            elif kind == "relu":
                h = np.maximum(h, 0.0)
            elif kind == "flatten":
                h = np.ascontiguousarray(h).reshape(n, -1)
        self.counter.forward += 1
        return h

    def stage(self, tape):
        """Register the parameters as leaves on a tape."""
        return {name: tape.tensor(p) for name, p in self.params.items()}

    def logits_on_tape(self, tape, x_t, staged):
        """Raw class scores on a tape (differentiable). Counts one forward pass."""
        h = x_t
        n = x_t.shape[0]
        for i, layer in enumerate(self.layers):
            kind = layer[0]
            if kind == "dense":
                h = ad.add(ad.matmul(h, staged[f"l{i}.w"]), staged[f"l{i}.b"])
            elif kind == "conv":
                b = ad.reshape(staged[f"l{i}.b"], (layer[2], 1, 1))
                h = ad.add(ad.conv2d(h, staged[f"l{i}.w"], layer[4]), b)
            elif kind == "relu":
                h = ad.relu(h)
            elif kind == "flatten":
                h = ad.reshape(h, (n, int(np.prod(h.shape[1:]))))
        self.counter.forward += 1
        return h

    def param_names(self):
        return list(self.params.keys())

    def get_flat(self):
        return np.concatenate([self.params[k].reshape(-1) for k in self.param_names()])

    def set_flat(self, vec):
        at = 0
        for k in self.param_names():
            p = self.params[k]
            self.params[k] = vec[at:at + p.size].reshape(p.shape).astype(np.float64)
            at += p.size

    def clone_params(self):
        return {k: v.copy() for k, v in self.params.items()}


def build_model(arch, input_shape, seed):
    """Construct a model with seeded uniform fan-in initialization.

    Identical (arch, input_shape, seed) gives bitwise-identical parameters.
    """
    resolved, shapes, num_classes = resolve_arch(arch, input_shape)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params = {}
    for i, layer in enumerate(resolved):
        if layer[0] == "dense":
            bound = 1.0 / np.sqrt(layer[1])
        elif layer[0] == "conv":
            bound = 1.0 / np.sqrt(layer[1] * layer[3] * layer[3])
        else:
            continue
        params[f"l{i}.w"] = rng.uniform(-bound, bound, shapes[f"l{i}.w"])
        params[f"l{i}.b"] = rng.uniform(-bound, bound, shapes[f"l{i}.b"])
    return Model(resolved, params, tuple(input_shape), num_classes)


def desk_cnn(input_shape=(1, 28, 28), num_classes=10, seed=0):
    """Default small image net: conv-relu-strided conv-relu-flatten-dense."""
    arch = [("conv", input_shape[0], 8, 3, 1), ("relu",),
            ("conv", 8, 16, 3, 2), ("relu",),
            ("flatten",), ("dense", None, num_classes)]
    return build_model(arch, input_shape, seed)


def desk_mlp(n_features=2, num_classes=2, seed=0):
    """Default net for synthetic 2-D data: 2-64-64-2 with relu."""
    arch = [("dense", n_features, 64), ("relu",),
            ("dense", 64, 64), ("relu",),
            ("dense", 64, num_classes)]
    return build_model(arch, (n_features,), seed)


# ---------------------------------------------------------------------------
# cross-entropy loss and gradients

def _check_labels(model, labels):
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError(f"label out of range [0, {model.num_classes})")


def _ce_vector(tape, z, labels, num_classes):
    """Per-sample softmax cross-entropy, shape [n], on the tape."""
    n = z.shape[0]
    m = ad.max_detached(z, axis=1, keepdims=True)
    s = ad.tsum(ad.exp(ad.sub(z, m)), axis=1, keepdims=True)
    lse = ad.add(ad.log(s), m)
    onehot = tape.const(np.eye(num_classes)[labels])
    zy = ad.tsum(ad.mul(z, onehot), axis=1, keepdims=True)
    return ad.reshape(ad.sub(lse, zy), (n,))


def loss_graph(model, inputs, labels, tape=None, staged=None):
    """Per-sample cross-entropy on a tape; returns (tape, ce_vec, x_t, staged)."""
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(model, labels)
    if tape is None:
        tape = ad.Tape()
    if staged is None:
        staged = model.stage(tape)
    x_t = tape.tensor(np.asarray(inputs, dtype=np.float64))
    z = model.logits_on_tape(tape, x_t, staged)
    return tape, _ce_vector(tape, z, labels, model.num_classes), x_t, staged


def loss(model, batch):
    """Mean softmax cross-entropy over the batch, graph-attached scalar."""
    _, ce, _, _ = loss_graph(model, batch.inputs, batch.labels)
    return ad.tsum(ce) * (1.0 / len(batch.labels))


def per_sample_loss(model, inputs, labels):
    """Per-sample cross-entropy values, fast path (one forward pass)."""
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(model, labels)
    z = model.logits(inputs)
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1, keepdims=True)) + m
    return lse[:, 0] - z[np.arange(len(labels)), labels]


def input_gradient(model, batch):
    """Per-sample gradient of the per-sample loss w.r.t. the inputs.

    Shape equals batch.inputs; samples do not interact (the root is the sum
    of per-sample losses). Counts one forward and one backward pass.
    """
    g, _ = loss_and_input_gradient(model, batch.inputs, batch.labels)
    return g


def loss_and_input_gradient(model, inputs, labels):
    """(per-sample input gradients, per-sample losses) in a single F/B pass."""
    _, ce, x_t, _ = loss_graph(model, inputs, labels)
    root = ad.tsum(ce)
    res = ad.backward(root, [x_t])
    model.counter.backward += 1
    return res.grads[0].value, ce.value


def accuracy(model, inputs, labels):
    """Fraction of argmax predictions matching labels."""
    z = model.logits(inputs)
    return float(np.mean(z.argmax(axis=1) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# checkpoint container: magic, length-prefixed arch text, little-endian f64

def arch_to_str(layers):
    parts = []
    for layer in layers:
        parts.append(":".join(str(v) for v in layer))
    return "|".join(parts)


def arch_from_str(text):
    layers = []
    for part in text.split("|"):
        bits = part.split(":")
        if bits[0] in ("relu", "flatten"):
            layers.append((bits[0],))
        elif bits[0] == "dense":
            layers.append(("dense", int(bits[1]), int(bits[2])))
        elif bits[0] == "conv":
            layers.append(("conv", int(bits[1]), int(bits[2]), int(bits[3]), int(bits[4])))
        else:
            raise ValueError(f"bad layer descriptor {part!r}")
    return layers


def save_checkpoint(model, path):
    desc = ("in=" + "x".join(str(v) for v in model.input_shape) + ";"
            + arch_to_str(model.layers)).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        for name in model.param_names():
            fh.write(np.ascontiguousarray(model.params[name]).astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:6] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic bytes)")
    (dlen,) = struct.unpack("<I", blob[6:10])
    desc = blob[10:10 + dlen].decode()
    shape_txt, arch_txt = desc.split(";", 1)
    input_shape = tuple(int(v) for v in shape_txt.removeprefix("in=").split("x"))
    layers = arch_from_str(arch_txt)
    resolved, shapes, num_classes = resolve_arch(layers, input_shape)
    at = 10 + dlen
    params = {}
    for i, layer in enumerate(resolved):
        if layer[0] not in ("dense", "conv"):
            continue
        for suffix in ("w", "b"):
            shp = shapes[f"l{i}.{suffix}"]
            nbytes = int(np.prod(shp)) * 8
            if at + nbytes > len(blob):
                raise ValueError("checkpoint truncated")
            params[f"l{i}.{suffix}"] = np.frombuffer(
                blob[at:at + nbytes], dtype="<f8").reshape(shp).copy()
            at += nbytes
    if at != len(blob):
        raise ValueError("checkpoint has trailing bytes")
    return Model(resolved, params, input_shape, num_classes)
