"""Prunable model representation: tensors, layers, blocks, forward, backprop.

All tensors are C-contiguous float64 ndarrays in memory (files store
float32, see :mod:`coarsefine.io`).  A model is an ordered sequence of
blocks, each holding named weight layers; the layers compose as a single
sequential path.  Forward passes are deterministic: identical inputs and
weights produce bit-identical losses.  Exact backpropagation is provided
as the gradient oracle for first-order scores and for tests.
"""

from __future__ import annotations

import copy as _copy
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import (
    DimensionError,
    FrozenLayerError,
    InputError,
    NumericalError,
    UnknownLayerError,
)

LAYER_KINDS = ("linear", "embedding")
ACTIVATIONS = ("identity", "relu", "gelu")
LOSS_KINDS = ("mse", "cross_entropy", "next_token_cross_entropy")

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_tensor(data) -> np.ndarray:
    """Coerce to a C-contiguous float64 array (0-d stays 0-d)."""
    return np.asarray(data, dtype=np.float64, order="C")


def check_finite(x: np.ndarray, context: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {context}")
    return x


@dataclass
class LayerSpec:
    """One prunable (or frozen) weight layer.

    weight has shape [d_out, d_in].  For kind == "embedding" the input is
    a sequence of integer ids in [0, d_in) and the output per token is the
    id-th column of weight; the activation applies after the lookup.
    """

    name: str
    kind: str
    weight: np.ndarray
    bias: np.ndarray | None = None
    activation: str = "identity"
    frozen: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InputError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")
        self.weight = as_tensor(self.weight)
        if self.weight.ndim != 2:
            raise DimensionError(f"layer {self.name!r}: weight must be 2-D")
        if self.bias is not None:
            self.bias = as_tensor(self.bias)
            if self.kind == "embedding":
                raise InputError(f"embedding layer {self.name!r} cannot have a bias")
            if self.bias.shape != (self.d_out,):
                raise DimensionError(
                    f"layer {self.name!r}: bias shape {self.bias.shape} != ({self.d_out},)"
                )

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def size(self) -> int:
        return self.weight.size


@dataclass
class Block:
    name: str
    layers: list[LayerSpec]


@dataclass
class ModelGraph:
    """Ordered blocks forming one sequential path, plus the loss head."""

    blocks: list[Block]
    head: str = "mse"
    forward_count: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.head not in LOSS_KINDS:
            raise InputError(f"unknown loss head {self.head!r}")
        names = [l.name for l in self.layers()]
        if len(names) != len(set(names)):
            raise InputError("layer names must be unique")
        bnames = [b.name for b in self.blocks]
        if len(bnames) != len(set(bnames)):
            raise InputError("block names must be unique")
        layers = self.layers()
        for i, layer in enumerate(layers):
            if layer.kind == "embedding" and i != 0:
                raise DimensionError(
                    f"embedding layer {layer.name!r} must be the first layer"
                )
            if i > 0 and layer.d_in != layers[i - 1].d_out:
                raise DimensionError(
                    f"layer {layer.name!r}: d_in {layer.d_in} != previous "
                    f"d_out {layers[i - 1].d_out}"
                )

    # -- structure helpers -------------------------------------------------

    def layers(self) -> list[LayerSpec]:
        return [l for b in self.blocks for l in b.layers]

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers():
            if l.name == name:
                return l
        raise UnknownLayerError(f"no layer named {name!r}")

    def layer_index(self, name: str) -> int:
        for i, l in enumerate(self.layers()):
            if l.name == name:
                return i
        raise UnknownLayerError(f"no layer named {name!r}")

    def block_of(self, layer_name: str) -> Block:
        for b in self.blocks:
            if any(l.name == layer_name for l in b.layers):
                return b
        raise UnknownLayerError(f"no block contains layer {layer_name!r}")

    def prunable_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers() if not l.frozen]

    def num_prunable_weights(self) -> int:
        return sum(l.size for l in self.prunable_layers())

    def copy(self) -> "ModelGraph":
        m = _copy.deepcopy(self)
        m.forward_count = 0
        return m


@dataclass
class CalibrationSet:
    """Small sample set (input, target) used for activations and losses.

    All inputs share one shape and all targets share one shape so batches
    can be stacked.  Never used for training.
    """

    samples: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        if len(self.samples) < 1:
            raise InputError("calibration set must contain at least one sample")
        self.samples = [(as_tensor(x), as_tensor(y)) for x, y in self.samples]
        x0, y0 = self.samples[0]
        for x, y in self.samples[1:]:
            if x.shape != x0.shape or y.shape != y0.shape:
                raise DimensionError("calibration samples have inconsistent shapes")

    @property
    def count(self) -> int:
        return len(self.samples)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        xs = np.stack([x for x, _ in self.samples])
        ys = np.stack([y for _, y in self.samples])
        return xs, ys


# -- activations ----------------------------------------------------------


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "identity":
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    # exact gelu: x * Phi(x)
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _act_grad(name: str, x: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(x)
    if name == "relu":
        # subgradient at 0 is 0
        return (x > 0.0).astype(np.float64)
    phi = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * phi


# -- forward / backward machinery ------------------------------------------


def _token_ids(x2d: np.ndarray, vocab: int) -> np.ndarray:
    ids = x2d.astype(np.int64)
    if not np.array_equal(ids, x2d):
        raise InputError("embedding inputs must hold integer token ids")
    if ids.min() < 0 or ids.max() >= vocab:
        raise InputError(f"token id out of range [0, {vocab})")
    return ids


class _Trace:
    """One batched pass: inputs seen per layer, outputs, per-sample losses."""

    def __init__(self):
        self.inputs: dict[str, np.ndarray] = {}
        self.outputs: dict[str, np.ndarray] = {}
        self.pre_acts: dict[str, np.ndarray] = {}
        self.sample_losses: np.ndarray | None = None
        self.logits: np.ndarray | None = None
        self.probs: np.ndarray | None = None
        self.ids: np.ndarray | None = None
        self.tokens: int = 1

    @property
    def loss(self) -> float:
        return float(np.mean(self.sample_losses))


def batch_input_matrix(model: ModelGraph, batch: CalibrationSet) -> tuple[np.ndarray, int]:
    """Stack the batch into the [K*tokens, d_in] matrix the first layer sees.

    For an embedding first layer this is the one-hot encoding of the token
    ids (so activation-based pruning sees column usage counts).  Returns
    the matrix and the tokens-per-sample count.
    """
    xs, _ = batch.stacked()
    layers = model.layers()
    if not layers:
        raise InputError("model has no layers")
    first = layers[0]
    if first.kind == "embedding":
        if xs.ndim != 2:
            raise DimensionError("embedding input must be [K, T] token ids")
        ids = _token_ids(xs, first.d_in)
        tokens = ids.shape[1]
        flat = ids.reshape(-1)
        onehot = np.zeros((flat.size, first.d_in))
        onehot[np.arange(flat.size), flat] = 1.0
        return onehot, tokens
    if xs.ndim == 2:
        return xs, 1
    if xs.ndim == 3:
        return xs.reshape(xs.shape[0] * xs.shape[1], xs.shape[2]), xs.shape[1]
    raise DimensionError("linear input must be [K, d] or [K, T, d]")


def layer_preact(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Pre-activation output x @ W.T (+ bias) of one layer."""
    if x.shape[1] != layer.d_in:
        raise DimensionError(
            f"layer {layer.name!r}: input width {x.shape[1]} != d_in {layer.d_in}"
        )
    pre = x @ layer.weight.T
    if layer.bias is not None:
        pre = pre + layer.bias
    return pre


def layer_forward(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Post-activation output of one layer on an input matrix."""
    return _act(layer.activation, layer_preact(layer, x))


def _forward_trace(model: ModelGraph, batch: CalibrationSet) -> _Trace:
    """Run the stacked batch through the model, recording layer inputs."""
    _, ys = batch.stacked()
    layers = model.layers()
    tr = _Trace()
    k = batch.count
    h, tokens = batch_input_matrix(model, batch)

    for layer in layers:
        tr.inputs[layer.name] = h
        pre = layer_preact(layer, h)
        tr.pre_acts[layer.name] = pre
        h = _act(layer.activation, pre)
        tr.outputs[layer.name] = h

    check_finite(h, "model output")
    out = h.reshape(k, tokens, -1)

    if model.head == "mse":
        if ys.ndim == 2:
            target = ys.reshape(k, 1, -1)
        elif ys.ndim == 3:
            target = ys
        else:
            raise DimensionError("mse targets must be [K, d] or [K, T, d]")
        if target.shape[1] not in (1, tokens) or target.shape[2] != out.shape[2]:
            raise DimensionError("mse target shape does not match predictions")
        diff = out - target
        tr.sample_losses = np.mean(diff * diff, axis=(1, 2))
    elif model.head == "cross_entropy":
        if tokens != 1:
            raise DimensionError("cross_entropy head expects single-token samples")
        if ys.ndim != 1:
            raise DimensionError("cross_entropy targets must be [K] class ids")
        classes = _token_ids(ys.reshape(k, 1), out.shape[2]).reshape(k)
        logits = out.reshape(k, -1)
        tr.logits = logits
        logp = logits - _logsumexp(logits)
        tr.probs = np.exp(logp)
        tr.sample_losses = -logp[np.arange(k), classes]
    else:  # next_token_cross_entropy
        if ys.ndim != 2 or ys.shape != (k, tokens):
            raise DimensionError("next-token targets must be [K, T] class ids")
        classes = _token_ids(ys, out.shape[2])
        logits = out.reshape(k * tokens, -1)
        tr.logits = logits
        logp = logits - _logsumexp(logits)
        tr.probs = np.exp(logp)
        nll = -logp[np.arange(k * tokens), classes.reshape(-1)]
        tr.sample_losses = nll.reshape(k, tokens).mean(axis=1)

    check_finite(tr.sample_losses, "loss")
    model.forward_count += k
    tr.tokens = tokens
    return tr


def _logsumexp(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    return m + np.log(np.sum(np.exp(logits - m), axis=1, keepdims=True))


def forward_with_activations(
    model: ModelGraph, batch: CalibrationSet
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over the batch plus the input tensor seen by each layer.

    activations[name] has shape [K*tokens, d_in]; for the embedding layer
    it is the stacked one-hot id matrix.
    """
    tr = _forward_trace(model, batch)
    return tr.loss, tr.inputs


def forward_loss(model: ModelGraph, batch: CalibrationSet) -> float:
    return _forward_trace(model, batch).loss


def per_sample_losses(model: ModelGraph, batch: CalibrationSet) -> np.ndarray:
    """Loss of each calibration sample individually, shape [K]."""
    return _forward_trace(model, batch).sample_losses


def forward_outputs(model: ModelGraph, batch: CalibrationSet) -> np.ndarray:
    """Final post-activation outputs, shape [K, tokens, d_out]."""
    tr = _forward_trace(model, batch)
    out = tr.outputs[model.layers()[-1].name]
    return out.reshape(batch.count, tr.tokens, -1)


def backprop_gradients(
    model: ModelGraph, batch: CalibrationSet
) -> dict[str, np.ndarray]:
    """d(mean batch loss)/dW for every layer, same shapes as the weights.

    relu contributes subgradient 0 at 0; gradients match central finite
    differences to 1e-4 relative at desk scale.
    """
    tr = _forward_trace(model, batch)
    layers = model.layers()
    k = batch.count
    tokens = tr.tokens
    _, ys = batch.stacked()

    # dL/d(final post-activation output), flattened to [K*tokens, d_out]
    if model.head == "mse":
        out = tr.outputs[layers[-1].name].reshape(k, tokens, -1)
        if ys.ndim == 2:
            target = ys.reshape(k, 1, -1)
        else:
            target = ys
        d = out.shape[2]
        grad = (2.0 / (tokens * d * k)) * (out - target)
        grad = grad.reshape(k * tokens, d)
    else:
        probs = tr.probs.copy()
        n = probs.shape[0]
        if model.head == "cross_entropy":
            classes = ys.astype(np.int64)
            scale = 1.0 / k
        else:
            classes = ys.astype(np.int64).reshape(-1)
            scale = 1.0 / (k * tokens)
        probs[np.arange(n), classes] -= 1.0
        grad = probs * scale

    grads: dict[str, np.ndarray] = {}
    for layer in reversed(layers):
        grad = grad * _act_grad(layer.activation, tr.pre_acts[layer.name])
        x = tr.inputs[layer.name]
        grads[layer.name] = grad.T @ x
        if layer is not layers[0]:
            grad = grad @ layer.weight
    return {l.name: grads[l.name] for l in layers}


def set_layer_weights(
    model: ModelGraph,
    layer_name: str,
    tensor: np.ndarray,
    override_frozen: bool = False,
) -> ModelGraph:
    """Replace one layer's weight in place; subsequent forwards use it."""
    layer = model.layer(layer_name)
    if layer.frozen and not override_frozen:
        raise FrozenLayerError(f"layer {layer_name!r} is frozen")
    tensor = as_tensor(tensor)
    if tensor.shape != layer.weight.shape:
        raise DimensionError(
            f"layer {layer_name!r}: shape {tensor.shape} != {layer.weight.shape}"
        )
    check_finite(tensor, f"weights for {layer_name!r}")
    layer.weight = tensor
    return model
