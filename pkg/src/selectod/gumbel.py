"""Gumbel-Softmax sampling with a straight-through hard mode, and the temperature schedule."""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import RngState, Tensor

logger = logging.getLogger(__name__)

UNIFORM_EPS = 1e-12


@dataclass
class GumbelConfig:
    tau_initial: float = 4.0
    tau_final: float = 0.8
    hard: bool = True
    epsilon_floor: float = UNIFORM_EPS

    def __post_init__(self):
        if not self.tau_final > 0:
            raise ValueError("tau_final must be positive")
        if self.tau_initial < self.tau_final:
            raise ValueError("tau_initial must be >= tau_final")
        if not 0 < self.epsilon_floor < 0.5:
            raise ValueError("epsilon_floor must be a small positive number")


@dataclass
class SoftSample:
    """Relaxed sample: ``soft`` rows are probabilities, ``hard`` (if set) the one-hot forward value."""

    soft: Tensor
    argmax_ids: np.ndarray
    hard: Tensor | None = None

    @property
    def value(self) -> Tensor:
        return self.hard if self.hard is not None else self.soft


def gumbel_from_uniform(u, eps: float = UNIFORM_EPS) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), eps, 1.0 - eps)
    return -np.log(-np.log(u))


def gumbel_noise(shape, rng: RngState, eps: float = UNIFORM_EPS) -> np.ndarray:
    """I.i.d. standard Gumbel draws, ``-log(-log(u))`` with ``u`` clamped to [eps, 1-eps]."""
    return gumbel_from_uniform(rng.uniform(shape), eps)


def gumbel_softmax(logits: Tensor, tau: float, rng: RngState | None = None, noise: np.ndarray | None = None) -> SoftSample:
    """``softmax((logits + g) / tau)`` over the last axis.

    Noise is added to the raw logits. Pass ``noise`` to fix ``g`` (e.g. zeros).
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise is required")
        noise = gumbel_noise(logits.shape, rng)
    g = Tensor(np.asarray(noise, dtype=logits.dtype), dtype=logits.dtype)
    soft = T.softmax((logits + g) * (1.0 / tau), axis=-1)
    return SoftSample(soft=soft, argmax_ids=np.argmax(soft.data, axis=-1))


def one_hot(ids, depth: int, dtype=np.float64) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros(ids.shape + (depth,), dtype=dtype)
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


class _StraightThroughTape:
    """Replays the (one-hot - soft) offsets recorded on the first pass.

    Inside :func:`frozen_straight_through`, the hard sample becomes
    ``soft + constant`` so finite differences see the same function the
    straight-through backward pass differentiates.
    """

    def __init__(self):
        self.offsets: list[np.ndarray] = []
        self.cursor = 0
        self.recording = True

    def rewind(self) -> None:
        if self.offsets:
            self.recording = False
        self.cursor = 0

    def next_offset(self, soft: np.ndarray, hard: np.ndarray) -> np.ndarray:
        if self.recording:
            self.offsets.append(hard - soft)
            return self.offsets[-1]
        offset = self.offsets[self.cursor]
        self.cursor += 1
        return offset


_TAPE: _StraightThroughTape | None = None


@contextlib.contextmanager
def frozen_straight_through():
    global _TAPE
    prev, _TAPE = _TAPE, _StraightThroughTape()
    try:
        yield _TAPE
    finally:
        _TAPE = prev


def straight_through(sample: SoftSample, mode: str = "straight_through") -> SoftSample:
    """Harden ``sample.soft`` to one-hot at its argmax (lowest index wins ties).

    ``mode="straight_through"`` passes gradients to the soft values unchanged;
    ``mode="argmax"`` returns a constant one-hot with no gradient path.
    """
    soft = sample.soft
    ids = np.argmax(soft.data, axis=-1)
    hot = one_hot(ids, soft.shape[-1], dtype=soft.dtype)
    if mode == "argmax":
        return SoftSample(soft=soft, argmax_ids=ids, hard=Tensor(hot, dtype=soft.dtype))
    if mode != "straight_through":
        raise ValueError(f"unknown hardening mode {mode!r}")
    if _TAPE is not None:
        offset = _TAPE.next_offset(soft.data, hot)
        hard = soft + Tensor(offset, dtype=soft.dtype)
    else:
        hard = Tensor._make(hot, (soft,), lambda g: (g,), "straight_through")
    return SoftSample(soft=soft, argmax_ids=ids, hard=hard)


def tau_schedule(step: int, total_steps: int, cfg: GumbelConfig) -> float:
    """Linear decay from ``tau_initial`` at step 0 to ``tau_final`` at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if step < 0 or step > total_steps:
        logger.warning("tau_schedule step %d outside [0, %d]; clamping", step, total_steps)
        step = min(max(step, 0), total_steps)
    frac = step / total_steps
    return cfg.tau_initial * (1.0 - frac) + cfg.tau_final * frac
