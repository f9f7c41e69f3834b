"""Forward-only gradient-magnitude estimation via paired Gaussian noise.

A layer's score is the empirical mean over calibration samples d and
noises z of |(L(W + eps*z, d) - L(W - eps*z, d)) / (2*eps)|, with only
that layer perturbed.  The noise is never stored: it is regenerated from
a counter-based seed, so the whole procedure needs one extra layer-sized
noise buffer at a time (plus one layer-sized rounding-compensation tail
that makes the restore bit-exact, see below).

Round-trip exactness.  Applying +eps*z, -2*eps*z, +eps*z naively does
not return the original weights: float addition rounds, and roughly half
of all entries come back one ulp off.  Each transition here therefore
uses an error-free TwoSum, carrying the rounding residue in a tail
buffer; the restore step folds head, noise, and tail back together and
lands on the original bits (holds for weights that are exactly zero or
not astronomically smaller than their perturbation, i.e. any realistic
model).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FrozenLayerError, InputError, NumericalError
from .model import CalibrationSet, ModelGraph, per_sample_losses
from .scoring import ScoreMap

RESTORE = "restore"


@dataclass
class ZOConfig:
    """Knobs for the zeroth-order estimator."""

    epsilon: float = 1e-3
    noises_per_sample: int = 1
    seed: int = 0
    mode: str = "per_layer"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise InputError("epsilon must be positive")
        if self.noises_per_sample < 1:
            raise InputError("noises_per_sample must be >= 1")
        if self.seed < 0:
            raise InputError("seed must be a nonnegative integer")
        if self.mode != "per_layer":
            raise InputError(f"unsupported mode {self.mode!r}")


class BufferMeter:
    """Tracks transient buffers so the memory contract can be asserted.

    noise buffers: regenerated Gaussian tensors (at most one alive);
    extra elements: noise plus the per-cycle compensation tail.
    """

    def __init__(self):
        self.current_noise_buffers = 0
        self.peak_noise_buffers = 0
        self.current_extra_elements = 0
        self.peak_extra_elements = 0
        self.peak_noise_elements = 0

    def _bump(self):
        self.peak_noise_buffers = max(self.peak_noise_buffers, self.current_noise_buffers)
        self.peak_extra_elements = max(self.peak_extra_elements, self.current_extra_elements)

    def grab_noise(self, n: int):
        self.current_noise_buffers += 1
        self.current_extra_elements += n
        self.peak_noise_elements = max(self.peak_noise_elements, n)
        self._bump()

    def drop_noise(self, n: int):
        self.current_noise_buffers -= 1
        self.current_extra_elements -= n

    def grab_tail(self, n: int):
        self.current_extra_elements += n
        self._bump()

    def drop_tail(self, n: int):
        self.current_extra_elements -= n


def noise_seed(global_seed: int, layer_index: int, noise_index: int) -> tuple:
    """Counter-based key: one independent stream per (seed, layer, noise)."""
    return (int(global_seed), int(layer_index), int(noise_index))


def _regenerate(seed_key, n: int) -> np.ndarray:
    if isinstance(seed_key, (int, np.integer)):
        seed_key = (int(seed_key),)
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed_key)))
    return gen.standard_normal(n)


def _two_sum(a: np.ndarray, b: np.ndarray):
    """Error-free addition: returns (fl(a+b), exact residue)."""
    s = a + b
    bb = s - a
    err = (a - (s - bb)) + (b - bb)
    return s, err


def perturb_replay(
    model: ModelGraph,
    layer_name: str,
    seed,
    epsilon: float,
    direction,
    meter: BufferMeter | None = None,
) -> ModelGraph:
    """Apply one leg of the +eps*z / -2*eps*z / +eps*z replay cycle.

    direction +1 sets W <- W + eps*z and opens a cycle; -1 follows with
    W <- W - eps*z by subtracting 2*eps*z regenerated from the same seed;
    "restore" regenerates z once more and returns W to its original bits.
    A mismatched seed on replay is undetectable by construction - callers
    must thread the same seed through the whole cycle.
    """
    if epsilon <= 0:
        raise InputError("epsilon must be positive (zero makes the estimate 0/0)")
    layer = model.layer(layer_name)
    if layer.frozen:
        raise FrozenLayerError(f"layer {layer_name!r} is frozen")
    if direction not in (1, -1, RESTORE):
        raise InputError(f"direction must be +1, -1 or 'restore', got {direction!r}")

    cycle = getattr(layer, "_perturb_cycle", None)
    if direction == 1 and cycle is not None:
        raise InputError(f"layer {layer_name!r} already has an active cycle")
    if direction == -1 and (cycle is None or cycle["phase"] != 1):
        raise InputError(
            f"direction -1 on layer {layer_name!r} requires an open +1 cycle"
        )
    if direction == RESTORE and cycle is None:
        raise InputError(f"no active perturbation cycle on layer {layer_name!r}")

    w = layer.weight.reshape(-1)
    n = w.size
    z = _regenerate(seed, n)
    if meter:
        meter.grab_noise(n)
    u = epsilon * z

    if direction == 1:
        head, tail = _two_sum(w, u)
        layer.weight = head.reshape(layer.weight.shape)
        layer._perturb_cycle = {"phase": 1, "tail": tail}
        if meter:
            meter.grab_tail(n)
    elif direction == -1:
        head, res = _two_sum(w, -2.0 * u)
        layer.weight = head.reshape(layer.weight.shape)
        cycle["tail"] = res + cycle["tail"]
        cycle["phase"] = -1
    else:
        delta = u if cycle["phase"] == -1 else -u
        head, res = _two_sum(w, delta)
        restored = head + (res + cycle["tail"])
        layer.weight = restored.reshape(layer.weight.shape)
        del layer._perturb_cycle
        if meter:
            meter.drop_tail(n)

    if meter:
        meter.drop_noise(n)
    return model


def _abort_cycle(model: ModelGraph, layer_name: str, seed, epsilon: float, meter):
    """Best-effort restore when a loss evaluation fails mid-cycle."""
    layer = model.layer(layer_name)
    if getattr(layer, "_perturb_cycle", None) is not None:
        perturb_replay(model, layer_name, seed, epsilon, RESTORE, meter)


def zo_layer_score(
    model: ModelGraph,
    layer_name: str,
    batch: CalibrationSet,
    cfg: ZOConfig,
    meter: BufferMeter | None = None,
) -> float:
    """Mean |central difference| / (2*eps) over samples and noises.

    Deterministic given (cfg.seed, batch order); costs 2*K forward passes
    per noise, all on the perturbed model with only this layer touched.
    """
    layer = model.layer(layer_name)
    if layer.frozen:
        raise FrozenLayerError(f"layer {layer_name!r} is frozen")
    layer_index = model.layer_index(layer_name)
    eps = cfg.epsilon
    per_noise = np.empty((cfg.noises_per_sample, batch.count))
    for j in range(cfg.noises_per_sample):
        key = noise_seed(cfg.seed, layer_index, j)
        perturb_replay(model, layer_name, key, eps, 1, meter)
        try:
            loss_plus = per_sample_losses(model, batch)
            perturb_replay(model, layer_name, key, eps, -1, meter)
            loss_minus = per_sample_losses(model, batch)
        except NumericalError as e:
            _abort_cycle(model, layer_name, key, eps, meter)
            raise NumericalError(f"layer {layer_name!r}: {e}") from e
        perturb_replay(model, layer_name, key, eps, RESTORE, meter)
        per_noise[j] = np.abs((loss_plus - loss_minus) / (2.0 * eps))
    # inner mean over noises, outer mean over samples
    return float(np.mean(np.mean(per_noise, axis=0)))


def zo_all_scores(
    model: ModelGraph,
    batch: CalibrationSet,
    cfg: ZOConfig,
    meter: BufferMeter | None = None,
) -> ScoreMap:
    """Score every prunable layer in model order; 2*L*K*noises forwards."""
    entries = {}
    for layer in model.prunable_layers():
        entries[layer.name] = zo_layer_score(model, layer.name, batch, cfg, meter)
    return ScoreMap(
        entries=entries,
        method="zeroth_order",
        aggregation="scalar",
        seed=cfg.seed,
        sample_count=batch.count,
    )
