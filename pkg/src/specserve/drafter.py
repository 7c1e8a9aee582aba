"""Adaptive per-request speculative length via GP-LCB over candidate lengths.

Each serving context ``(b, r)`` keeps a Gaussian-process posterior over the
realized per-token cost of every candidate length.  Requests share that
posterior but weight it by their own acceptance history, so one batch may
mix different lengths.
"""

from __future__ import annotations

import math
from collections import deque
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve


@dataclass(frozen=True)
class DrafterConfig:
    candidates: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 8, 10)
    epsilon: float = 1e-6
    window: int = 64
    length_scale: float = 1.0
    signal_var: float = 1.0
    noise_var: float = 0.1
    # beta_n = beta_scale * ln(|S| n^2 pi^2 / 6)
    beta_scale: float = 2.0
    cold_start: bool = True

    def __post_init__(self) -> None:
        cands = tuple(int(s) for s in self.candidates)
        if not cands or list(cands) != sorted(set(cands)) or cands[0] < 1:
            raise ValueError("candidates must be non-empty, sorted, distinct and positive")
        object.__setattr__(self, "candidates", cands)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if min(self.length_scale, self.signal_var, self.noise_var, self.beta_scale) <= 0:
            raise ValueError("GP hyperparameters and beta_scale must be positive")

    def beta(self, n: int) -> float:
        """Exploration weight for round ``n`` (1-based); positive and non-decreasing."""
        n = max(int(n), 1)
        return self.beta_scale * math.log(len(self.candidates) * n * n * math.pi**2 / 6.0)

    def index_of(self, s: int) -> int:
        try:
            return self.candidates.index(int(s))
        except ValueError:
            raise ValueError(f"length {s} is not a candidate") from None


@dataclass(frozen=True, order=True)
class ContextKey:
    """Batch size rounded to the nearest power of two and draft share to 0.1."""

    batch_bucket: int
    sm_bucket: float

    @classmethod
    def of(cls, b: int, r: float | None) -> ContextKey:
        if b < 1:
            raise ValueError("batch size must be positive")
        bucket = 1 << int(round(math.log2(b)))
        # serial execution is treated as the whole GPU
        sm = 1.0 if r is None else round(float(r), 1)
        return cls(bucket, sm)


def objective(t_hat: float, s: int, a_hat: float, epsilon: float = 1e-6) -> float:
    """Latency per committed token for length ``s`` at acceptance ``a_hat``."""
    if t_hat <= 0:
        raise ValueError("t_hat must be positive")
    if s < 1:
        raise ValueError("s must be at least 1")
    return t_hat / (s * a_hat + epsilon)


@dataclass(frozen=True)
class Observation:
    s: int
    cost: float
    round: int
    acceptance: float


@dataclass
class GpPosterior:
    """GP over candidate indices with a constant prior mean equal to the
    window mean, so shifting every observed cost shifts ``mu`` uniformly.

    Costs are in ms per committed token; the kernel and noise variances are
    in ms squared.
    """

    context: ContextKey
    config: DrafterConfig = field(default_factory=DrafterConfig)
    observations: deque[Observation] = field(init=False)
    rounds: int = 0
    mu: np.ndarray = field(init=False)
    sigma: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.observations = deque(maxlen=self.config.window)
        self._refit()

    def _kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d = a[:, None] - b[None, :]
        return self.config.signal_var * np.exp(-0.5 * (d / self.config.length_scale) ** 2)

    def _refit(self) -> None:
        cfg = self.config
        grid = np.arange(len(cfg.candidates), dtype=np.float64)
        if not self.observations:
            self.mu = np.zeros(len(grid))
            self.sigma = np.full(len(grid), math.sqrt(cfg.signal_var))
            return
        x = np.array([cfg.index_of(o.s) for o in self.observations], dtype=np.float64)
        y = np.array([o.cost for o in self.observations])
        prior = float(y.mean())
        k = self._kernel(x, x) + cfg.noise_var * np.eye(len(x))
        ks = self._kernel(x, grid)
        chol = cho_factor(k, lower=True)
        mu = prior + ks.T @ cho_solve(chol, y - prior)
        var = cfg.signal_var - np.einsum("ij,ij->j", ks, cho_solve(chol, ks))
        self.mu = mu
        self.sigma = np.sqrt(np.maximum(var, 1e-12))

    def mean_acceptance(self, s: int | None = None) -> float | None:
        """Mean observed acceptance at ``s`` (or overall) in the window."""
        vals = [o.acceptance for o in self.observations if s is None or o.s == s]
        return float(np.mean(vals)) if vals else None

    def lcb(self, n: int) -> np.ndarray:
        return self.mu - math.sqrt(self.config.beta(n)) * self.sigma


def observe(
    posterior: GpPosterior,
    s: int,
    t_obs: float,
    a_obs: float,
    n: int,
) -> float:
    """Record the realized cost of one round at length ``s``; returns it."""
    cfg = posterior.config
    cfg.index_of(s)
    if not t_obs > 0:
        raise ValueError("observed latency must be positive")
    if not 0.0 <= a_obs <= 1.0:
        raise ValueError("observed acceptance must lie in [0, 1]")
    cost = objective(t_obs, s, a_obs, cfg.epsilon)
    posterior.observations.append(Observation(int(s), cost, int(n), float(a_obs)))
    posterior._refit()
    return cost


def in_cold_start(posterior: GpPosterior, n: int) -> bool:
    return posterior.config.cold_start and n <= len(posterior.config.candidates)


def select_length(posterior: GpPosterior, n: int) -> int:
    """LCB argmin over the candidates; ties go to the smaller length.

    During cold start the candidates are swept in order instead.
    """
    cfg = posterior.config
    if in_cold_start(posterior, n):
        return cfg.candidates[n - 1]
    # np.argmin returns the first minimum, i.e. the smallest length
    return cfg.candidates[int(np.argmin(posterior.lcb(n)))]


AcceptanceProfile = Callable[[int], float] | Mapping[int, float]


def _acceptance(profile: AcceptanceProfile, s: int, fallback: float) -> float:
    if callable(profile):
        return float(profile(s))
    return float(profile.get(s, fallback))


def assign_lengths(
    profiles: Sequence[AcceptanceProfile],
    posterior: GpPosterior,
    n: int,
    default_acceptance: float = 0.7,
) -> list[int]:
    """Per-request lengths from the shared context posterior.

    The posterior models the batch-average cost ``T(s) / (s * a_bar(s))``.
    Request ``i`` rescales it by ``(s * a_bar(s) + eps) / (s * a_i(s) + eps)``,
    where ``a_bar`` is the batch mean of the same per-request estimates, so
    identical requests always get identical lengths.  Lengths missing from a
    mapping profile inherit the context's observed acceptance at that length.
    The lower bound is floored at zero before rescaling so an optimistic bound
    never rewards a request for low acceptance.
    """
    cfg = posterior.config
    if in_cold_start(posterior, n):
        return [select_length(posterior, n)] * len(profiles)
    if not profiles:
        return []
    overall = posterior.mean_acceptance()
    fallback = []
    for s in cfg.candidates:
        a = posterior.mean_acceptance(s)
        fallback.append(a if a is not None else overall if overall is not None else default_acceptance)
    acc = np.array(
        [[_acceptance(p, s, fallback[k]) for k, s in enumerate(cfg.candidates)] for p in profiles]
    )
    if np.any(acc < 0.0) or np.any(acc > 1.0):
        raise ValueError("acceptance estimates must lie in [0, 1]")
    sizes = np.array(cfg.candidates, dtype=np.float64)
    ref = sizes * acc.mean(axis=0) + cfg.epsilon
    lcb = np.maximum(posterior.lcb(n), 0.0)
    scores = lcb[None, :] * ref[None, :] / (sizes[None, :] * acc + cfg.epsilon)
    # drafting runs for the longest length in the batch, so a request may
    # only shorten the context's own choice
    cap = int(np.argmin(posterior.lcb(n)))
    scores[:, cap + 1 :] = np.inf
    # argmin takes the first minimum, i.e. the shorter length on ties
    return [cfg.candidates[int(k)] for k in np.argmin(scores, axis=1)]


def end_round(posterior: GpPosterior) -> None:
    """Advance the context's round counter after its observations are in."""
    posterior.rounds += 1
