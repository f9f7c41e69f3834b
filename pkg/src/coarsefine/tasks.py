"""Desk-scale tasks: data generation, reference training, splits.

Four task kinds cover the pruning surfaces: linear regression (identity
chain), Gaussian-blob classification, a character LM over a synthetic
bigram corpus, and a two-tower regression net whose frozen fusion adapter
exercises the frozen-layer path.  Everything is generated from the task
seed; training is deterministic full-batch gradient descent, so the same
spec always yields bit-identical models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .model import (
    Block,
    CalibrationSet,
    LayerSpec,
    ModelGraph,
    backprop_gradients,
)

TASK_KINDS = (
    "synthetic_regression",
    "synthetic_classification",
    "char_lm",
    "two_tower_fusion",
)

_DEFAULT_SIZES = {
    "synthetic_regression": {"d_in": 8, "d_hidden": 8, "d_out": 4},
    "synthetic_classification": {"d_in": 8, "d_hidden": 16, "classes": 2},
    "char_lm": {"vocab": 20, "d_embed": 10, "d_hidden": 48, "seq_len": 16},
    "two_tower_fusion": {
        "d_in": 16,
        "tower_a_width": 32,
        "tower_b_width": 16,
        "d_mid": 16,
        "d_fused": 8,
        "d_out": 4,
        "tower_a_scale": 1.0,
        "tower_b_scale": 1.0,
    },
}

_DEFAULT_COUNTS = {
    "synthetic_regression": (256, 64, 32),
    "synthetic_classification": (256, 64, 32),
    "char_lm": (192, 48, 32),
    "two_tower_fusion": (256, 64, 32),
}

_TRAINING = {
    # (learning rate, epochs)
    "synthetic_regression": (0.02, 300),
    "synthetic_classification": (0.02, 300),
    "char_lm": (0.02, 200),
    "two_tower_fusion": (0.02, 600),
}

_FLOORS = {
    "synthetic_regression": {"loss": 1e-2},
    "synthetic_classification": {"accuracy": 0.95},
    "char_lm": {"perplexity": 8.0},
    "two_tower_fusion": {"loss": 0.1},
}


@dataclass
class TaskSpec:
    """A reproducible desk-scale task: sizes, seed, split counts, floor."""

    kind: str
    seed: int = 0
    n_train: int = 0
    n_val: int = 0
    n_calib: int = 0
    sizes: dict = field(default_factory=dict)
    floor: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise InputError(f"unknown task kind {self.kind!r}")
        if self.n_calib > self.n_train:
            raise InputError("calibration must fit inside the train split")


def make_task(kind: str, seed: int = 0, **overrides) -> TaskSpec:
    if kind not in TASK_KINDS:
        raise InputError(f"unknown task kind {kind!r}")
    sizes = dict(_DEFAULT_SIZES[kind])
    n_train, n_val, n_calib = _DEFAULT_COUNTS[kind]
    for key, value in overrides.items():
        if key in ("n_train", "n_val", "n_calib"):
            continue
        if key not in sizes:
            raise InputError(f"unknown size override {key!r} for {kind}")
        sizes[key] = value
    return TaskSpec(
        kind=kind,
        seed=seed,
        n_train=int(overrides.get("n_train", n_train)),
        n_val=int(overrides.get("n_val", n_val)),
        n_calib=int(overrides.get("n_calib", n_calib)),
        sizes=sizes,
        floor=dict(_FLOORS[kind]),
    )


def _rng(task: TaskSpec, stream: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=(task.seed, stream)))
    )


# -- data generation ---------------------------------------------------------


def _teacher_forward(ws: list[np.ndarray], x: np.ndarray) -> np.ndarray:
    h = x
    for i, w in enumerate(ws):
        h = h @ w.T
        if i < len(ws) - 1:
            h = np.maximum(h, 0.0)
    return h


def _gen_samples(task: TaskSpec, count: int) -> list[tuple[np.ndarray, np.ndarray]]:
    s = task.sizes
    rng = _rng(task, 0)
    if task.kind == "synthetic_regression":
        target_map = _rng(task, 2).normal(size=(s["d_out"], s["d_in"])) / np.sqrt(s["d_in"])
        xs = rng.normal(size=(count, s["d_in"]))
        ys = xs @ target_map.T
        return [(xs[i], ys[i]) for i in range(count)]
    if task.kind == "synthetic_classification":
        direction = _rng(task, 2).normal(size=s["d_in"])
        direction /= np.linalg.norm(direction)
        labels = rng.integers(0, s["classes"], size=count)
        centers = np.where(labels[:, None] == 0, -2.0, 2.0) * direction[None, :]
        xs = centers + 0.8 * rng.normal(size=(count, s["d_in"]))
        return [(xs[i], np.float64(labels[i])) for i in range(count)]
    if task.kind == "char_lm":
        v, t = s["vocab"], s["seq_len"]
        trng = _rng(task, 2)
        # sparse bigram language: each symbol has 3 likely successors
        trans = np.full((v, v), 0.1 / (v - 3))
        for c in range(v):
            succ = trng.choice(v, size=3, replace=False)
            trans[c, :] = 0.1 / (v - 3)
            trans[c, succ] = np.array([0.6, 0.2, 0.1])
        trans /= trans.sum(axis=1, keepdims=True)
        seqs = np.empty((count, t + 1), dtype=np.int64)
        seqs[:, 0] = rng.integers(0, v, size=count)
        for pos in range(1, t + 1):
            u = rng.random(count)
            cdf = np.cumsum(trans[seqs[:, pos - 1]], axis=1)
            seqs[:, pos] = np.minimum((u[:, None] > cdf).sum(axis=1), v - 1)
        return [
            (seqs[i, :t].astype(np.float64), seqs[i, 1:].astype(np.float64))
            for i in range(count)
        ]
    # two_tower_fusion: teacher net defines the regression target
    trng = _rng(task, 2)
    t1 = trng.normal(size=(10, s["d_in"])) / np.sqrt(s["d_in"])
    t2 = trng.normal(size=(s["d_out"], 10)) / np.sqrt(10)
    xs = rng.normal(size=(count, s["d_in"]))
    ys = _teacher_forward([t1, t2], xs)
    return [(xs[i], ys[i]) for i in range(count)]


def get_split(task: TaskSpec, split: str) -> CalibrationSet:
    """train / val / calib samples; calib is a prefix of train."""
    if split not in ("train", "val", "calib"):
        raise InputError(f"unknown split {split!r}")
    total = task.n_train + task.n_val
    samples = _gen_samples(task, total)
    if split == "train":
        picked = samples[: task.n_train]
    elif split == "val":
        picked = samples[task.n_train :]
    else:
        picked = samples[: task.n_calib]
    if not picked:
        raise InputError(f"split {split!r} of task {task.kind} is empty")
    return CalibrationSet(picked)


# -- architectures -------------------------------------------------------------


def _init(rng: np.random.Generator, d_out: int, d_in: int, scale: float = 1.0) -> np.ndarray:
    return scale * rng.normal(size=(d_out, d_in)) / np.sqrt(d_in)


def build_model(task: TaskSpec) -> ModelGraph:
    """Untrained architecture for the task, seeded init."""
    s = task.sizes
    rng = _rng(task, 1)
    if task.kind == "synthetic_regression":
        return ModelGraph(
            blocks=[
                Block("body", [
                    LayerSpec("body.fc", "linear", _init(rng, s["d_hidden"], s["d_in"])),
                ]),
                Block("head", [
                    LayerSpec("head.out", "linear", _init(rng, s["d_out"], s["d_hidden"])),
                ]),
            ],
            head="mse",
        )
    if task.kind == "synthetic_classification":
        return ModelGraph(
            blocks=[
                Block("body", [
                    LayerSpec("body.fc", "linear",
                              _init(rng, s["d_hidden"], s["d_in"]), activation="relu"),
                ]),
                Block("head", [
                    LayerSpec("head.out", "linear", _init(rng, s["classes"], s["d_hidden"])),
                ]),
            ],
            head="cross_entropy",
        )
    if task.kind == "char_lm":
        return ModelGraph(
            blocks=[
                Block("embed", [
                    LayerSpec("embed.tok", "embedding", _init(rng, s["d_embed"], s["vocab"])),
                ]),
                Block("body", [
                    LayerSpec("body.fc1", "linear",
                              _init(rng, s["d_hidden"], s["d_embed"]), activation="relu"),
                    LayerSpec("body.fc2", "linear",
                              _init(rng, s["d_hidden"], s["d_hidden"]), activation="relu"),
                ]),
                Block("head", [
                    LayerSpec("head.out", "linear", _init(rng, s["vocab"], s["d_hidden"])),
                ]),
            ],
            head="next_token_cross_entropy",
        )
    # two_tower_fusion: tower_a -> frozen fusion adapter -> tower_b -> head.
    # Tower A is wide and redundant, tower B sits behind the narrow frozen
    # adapter and is tight.  With tower_b_width == tower_a_width and
    # d_fused == d_mid the towers mirror exactly, so the per-tower init
    # scales map directly onto mean-magnitude ratios.
    sa, sb = s["tower_a_scale"], s["tower_b_scale"]
    wa, wb = s["tower_a_width"], s["tower_b_width"]
    mid, fused = s["d_mid"], s["d_fused"]
    return ModelGraph(
        blocks=[
            Block("tower_a", [
                LayerSpec("tower_a.fc1", "linear",
                          _init(rng, wa, s["d_in"], sa), activation="relu"),
                LayerSpec("tower_a.fc2", "linear",
                          _init(rng, mid, wa, sa), activation="relu"),
            ]),
            Block("fusion", [
                LayerSpec("fusion.adapter", "linear",
                          _init(rng, fused, mid), frozen=True),
            ]),
            Block("tower_b", [
                LayerSpec("tower_b.fc1", "linear",
                          _init(rng, wb, fused, sb), activation="relu"),
                LayerSpec("tower_b.fc2", "linear",
                          _init(rng, fused, wb, sb), activation="relu"),
            ]),
            Block("head", [
                LayerSpec("head.out", "linear", _init(rng, s["d_out"], fused)),
            ]),
        ],
        head="mse",
    )


# -- training -------------------------------------------------------------------


def _adam_train(
    model: ModelGraph,
    batch: CalibrationSet,
    lr: float,
    epochs: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Full-batch Adam on the non-frozen weights; fully deterministic."""
    trainable = [l for l in model.layers() if not l.frozen]
    m = {l.name: np.zeros_like(l.weight) for l in trainable}
    v = {l.name: np.zeros_like(l.weight) for l in trainable}
    for step in range(1, epochs + 1):
        grads = backprop_gradients(model, batch)
        c1 = 1.0 - beta1**step
        c2 = 1.0 - beta2**step
        for layer in trainable:
            g = grads[layer.name]
            mw = m[layer.name]
            vw = v[layer.name]
            mw *= beta1
            mw += (1.0 - beta1) * g
            vw *= beta2
            vw += (1.0 - beta2) * g * g
            layer.weight = layer.weight - lr * (mw / c1) / (np.sqrt(vw / c2) + eps)


def train_reference(task: TaskSpec) -> ModelGraph:
    """Deterministically train the task's reference model to its floor."""
    model = build_model(task)
    train = get_split(task, "train")
    lr, epochs = _TRAINING[task.kind]
    _adam_train(model, train, lr, epochs)
    _check_floor(model, task)
    return model


def inject_scale_imbalance(
    model: ModelGraph, layer_up: str, layer_down: str, factor: float
) -> ModelGraph:
    """Scale one layer's weights by `factor` and the next layer's by
    1/factor.  With a relu or identity activation in between the network
    function is exactly preserved, but the downstream layer now sees
    input activations `factor` times larger - the cross-layer scale
    imbalance that makes local scores incomparable across layers."""
    up = model.layer(layer_up)
    down = model.layer(layer_down)
    if up.activation not in ("relu", "identity"):
        raise InputError("scale injection needs a positively homogeneous activation")
    if factor <= 0:
        raise InputError("scale factor must be positive")
    names = [l.name for l in model.layers()]
    if names.index(layer_down) != names.index(layer_up) + 1:
        raise InputError("layers must be adjacent for an exact rescale")
    up.weight = up.weight * factor
    down.weight = down.weight / factor
    return model


def _check_floor(model: ModelGraph, task: TaskSpec) -> None:
    from .evaluation import evaluate  # local import to avoid a cycle

    result = evaluate(model, task, "val")
    for metric, bound in task.floor.items():
        value = getattr(result, metric)
        if metric == "accuracy":
            ok = value is not None and value >= bound
        else:
            ok = value is not None and value <= bound
        if not ok:
            raise InputError(
                f"fixture error: task {task.kind} (seed {task.seed}) reached "
                f"{metric}={value}, floor is {bound}; task misconfigured"
            )
