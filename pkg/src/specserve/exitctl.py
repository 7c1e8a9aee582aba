"""Acceptance-aware early-exit gate and the per-token Top-K exit test."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from specserve.latmodel import LatencyModelError, LatencyModels


@dataclass(frozen=True)
class ExitPolicy:
    """When and how strictly drafted tokens may exit verification early.

    ``l_init > layers`` disables early exit entirely.
    """

    layers: int = 32
    l_init: int = 8
    k_init: int = 10
    k_final: int = 2

    def __post_init__(self) -> None:
        if self.layers < 1 or self.l_init < 1:
            raise ValueError("layers and l_init must be positive")
        if self.k_final < 1 or self.k_init < self.k_final:
            raise ValueError("need k_init >= k_final >= 1")

    @classmethod
    def disabled(cls, layers: int = 32) -> ExitPolicy:
        return cls(layers=layers, l_init=layers + 1)

    @property
    def enabled(self) -> bool:
        return self.l_init <= self.layers

    def k_at(self, layer: int) -> int:
        """Depth-dependent threshold: ``k_init`` at ``l_init`` falling linearly to
        ``k_final`` at the last layer."""
        if layer <= self.l_init or self.layers == self.l_init:
            return self.k_init
        frac = (layer - self.l_init) / (self.layers - self.l_init)
        return int(math.floor(self.k_init + (self.k_final - self.k_init) * frac + 0.5))

    def k_schedule(self) -> np.ndarray:
        """``K`` for layers ``1..L`` (entries below ``l_init`` are unused)."""
        return self._k_schedule

    @cached_property
    def _k_schedule(self) -> np.ndarray:
        k = np.array([self.k_at(layer) for layer in range(1, self.layers + 1)], dtype=np.int16)
        k.setflags(write=False)
        return k


def token_exit_test(logits: np.ndarray, drafted_token: int, k: int) -> bool:
    """True when ``drafted_token`` is a prune candidate, i.e. at least ``k``
    tokens have a strictly larger logit (it lies outside the Top-``k``)."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return int(np.count_nonzero(logits > logits[drafted_token])) >= k


def estimate_prunable(batch: Sequence[tuple[int, float]]) -> float:
    """Expected number of rejected-suffix tokens in the batch.

    ``batch`` holds ``(s_i, a_i)`` pairs: speculative length and historical
    acceptance rate of each request.
    """
    total = 0.0
    for s, a in batch:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"acceptance {a} outside [0, 1]")
        total += s * (1.0 - a)
    return total


def effective_saving(
    layer: int,
    b: int,
    r: float | None,
    s_eff: float,
    models: LatencyModels,
    layers: int,
) -> tuple[float, float]:
    """Remaining prunable depth and the verification time it could still save.

    Returns ``(L_r', T_save)``.  ``r`` is the draft-side SM share, ``None``
    for serial execution on the whole GPU.
    """
    if not 1 <= layer <= layers:
        raise ValueError(f"layer {layer} outside [1, {layers}]")
    t_target = models.t_target(b, s_eff, r)
    if t_target == 0.0:
        raise LatencyModelError("target latency of zero")
    t_ee = models.t_early_exit(b, s_eff, r)
    delta = layers * t_ee / t_target
    remaining = max(layers - layer - delta, 0.0)
    return remaining, remaining / layers * t_target


def _s_eff(k_rej: float) -> int:
    return max(1, math.ceil(k_rej - 1e-9))


def should_prune(
    layer: int,
    batch: Sequence[tuple[int, float]],
    b: int,
    r: float | None,
    models: LatencyModels,
    layers: int,
) -> bool:
    """Strict comparison of what pruning can still save against its cost."""
    s_eff = _s_eff(estimate_prunable(batch))
    _, t_save = effective_saving(layer, b, r, s_eff, models, layers)
    return t_save > models.t_prune(b, s_eff, r)


@dataclass(frozen=True)
class PruneGate:
    """Per-layer gate decisions for one verification pass.

    ``open_layers[l - 1]`` says whether estimator output computed after layer
    ``l`` is acted on; ``delay`` is the estimator latency expressed in layers,
    i.e. how much later the resulting mask takes effect.
    """

    open_layers: tuple[bool, ...]
    delay: float = 0.0

    def should_prune(self, layer: int) -> bool:
        return 1 <= layer <= len(self.open_layers) and self.open_layers[layer - 1]

    @property
    def any_open(self) -> bool:
        return any(self.open_layers)

    @cached_property
    def mask(self) -> np.ndarray:
        """Boolean array over layers ``1..L``."""
        m = np.array(self.open_layers, dtype=bool)
        m.setflags(write=False)
        return m

    @classmethod
    def always(cls, layers: int, policy: ExitPolicy) -> PruneGate:
        return cls(tuple(policy.l_init <= layer < layers for layer in range(1, layers + 1)))

    @classmethod
    def never(cls, layers: int) -> PruneGate:
        return cls((False,) * layers)


def build_gate(
    batch: Sequence[tuple[int, float]],
    b: int,
    r: float | None,
    models: LatencyModels,
    policy: ExitPolicy,
) -> PruneGate:
    """Evaluate the prune trigger at every eligible layer for one batch."""
    layers = policy.layers
    if not policy.enabled or not batch:
        return PruneGate.never(layers)
    s_eff = _s_eff(estimate_prunable(batch))
    t_target = models.t_target(b, s_eff, r)
    t_prune = models.t_prune(b, s_eff, r)
    delta = layers * models.t_early_exit(b, s_eff, r) / t_target
    flags = []
    for layer in range(1, layers + 1):
        if layer < policy.l_init:
            flags.append(False)
            continue
        remaining = max(layers - layer - delta, 0.0)
        flags.append(remaining / layers * t_target > t_prune)
    return PruneGate(tuple(flags), delta)
