"""Piecewise-linear stage latency models: evaluation, fitting and profiling.

Every stage latency is ``factor(x) * load(b, s)`` where ``x`` is the SM share
the stage itself runs on (the draft-side fraction ``r`` for drafting and
pruning, ``1 - r`` for target verification and the early-exit check) and
``factor`` is a continuous two-segment linear function of ``x`` with a knee at
``R``::

    factor(x) = a1 - gamma1 * x    for x <= R
                a2 - gamma2 * x    for x >  R,   a2 = a1 - (gamma1 - gamma2) * R

Load terms per stage:

    draft            alpha * b + beta * s + c
    target           (alpha * b + lam) * s + c
    early-exit/prune alpha * b * s + beta

The factor/load split is only identified up to a common scale; fitted and
default parameter sets are normalised so that ``factor(1) == 1``.
"""

from __future__ import annotations

import enum
import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class LatencyModelError(ValueError):
    """Invalid evaluation arguments (e.g. an SM share outside (0, 1])."""


class FitError(RuntimeError):
    """Raised when a stage model cannot be fitted from the given samples."""


class StageKind(str, enum.Enum):
    DRAFT = "draft"
    TARGET = "target"
    EARLY_EXIT_CHECK = "early_exit_check"
    PRUNE = "prune"

    @property
    def load_names(self) -> tuple[str, ...]:
        return _LOAD_NAMES[self]

    @property
    def target_side(self) -> bool:
        """True when the stage runs on the target's ``1 - r`` share."""
        return self in (StageKind.TARGET, StageKind.EARLY_EXIT_CHECK)


_LOAD_NAMES = {
    StageKind.DRAFT: ("alpha", "beta", "c"),
    StageKind.TARGET: ("alpha", "lam", "c"),
    StageKind.EARLY_EXIT_CHECK: ("alpha", "beta"),
    StageKind.PRUNE: ("alpha", "beta"),
}


def own_share(stage: StageKind, r: float) -> float:
    return 1.0 - r if stage.target_side else r


@dataclass(frozen=True)
class PiecewiseLatencyParams:
    stage: StageKind
    knee: float
    a1: float
    gamma1: float
    gamma2: float
    load: tuple[float, ...]

    def __post_init__(self) -> None:
        if not 0.0 < self.knee < 1.0:
            raise LatencyModelError(f"knee {self.knee} must lie in (0, 1)")
        if len(self.load) != len(self.stage.load_names):
            raise LatencyModelError(
                f"{self.stage.value} needs load coefficients {self.stage.load_names}"
            )

    @property
    def a2(self) -> float:
        return self.a1 - (self.gamma1 - self.gamma2) * self.knee

    def factor(self, x: float | np.ndarray) -> float | np.ndarray:
        """Resource factor at the stage's own SM share ``x``."""
        x = np.asarray(x, dtype=np.float64)
        out = np.where(x <= self.knee, self.a1 - self.gamma1 * x, self.a2 - self.gamma2 * x)
        return float(out) if out.ndim == 0 else out

    def load_term(self, b: float | np.ndarray, s: float | np.ndarray) -> float | np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        s = np.asarray(s, dtype=np.float64)
        coef = self.load
        if self.stage is StageKind.DRAFT:
            out = coef[0] * b + coef[1] * s + coef[2]
        elif self.stage is StageKind.TARGET:
            out = (coef[0] * b + coef[1]) * s + coef[2]
        else:
            out = coef[0] * b * s + coef[1]
        return float(out) if out.ndim == 0 else out

    def predict(self, b, s, r):
        """Latency in ms at batch ``b``, token length ``s``, draft-side share ``r``."""
        if type(r) is float and type(b) in (int, float) and type(s) in (int, float):
            return self._predict_scalar(float(b), float(s), r)
        x = 1.0 - np.asarray(r, dtype=np.float64) if self.stage.target_side else np.asarray(r, dtype=np.float64)
        if np.any(x <= 0.0) or np.any(x > 1.0 + 1e-12):
            raise LatencyModelError(
                f"{self.stage.value}: own SM share must lie in (0, 1], got r={r}"
            )
        return self.factor(x) * self.load_term(b, s)

    def _predict_scalar(self, b: float, s: float, r: float) -> float:
        # plain-float fast path of predict for the simulator's inner loop
        x = 1.0 - r if self.stage.target_side else r
        if not 0.0 < x <= 1.0 + 1e-12:
            raise LatencyModelError(
                f"{self.stage.value}: own SM share must lie in (0, 1], got r={r}"
            )
        f = self.a1 - self.gamma1 * x if x <= self.knee else self.a2 - self.gamma2 * x
        c = self.load
        if self.stage is StageKind.DRAFT:
            load = c[0] * b + c[1] * s + c[2]
        elif self.stage is StageKind.TARGET:
            load = (c[0] * b + c[1]) * s + c[2]
        else:
            load = c[0] * b * s + c[1]
        return f * load

    def canonical(self) -> PiecewiseLatencyParams:
        """Rescale so that ``factor(1) == 1`` (load absorbs the scale)."""
        f1 = self.a2 - self.gamma2
        if f1 == 0.0:
            raise LatencyModelError("factor vanishes at full share; cannot normalise")
        return PiecewiseLatencyParams(
            stage=self.stage,
            knee=self.knee,
            a1=self.a1 / f1,
            gamma1=self.gamma1 / f1,
            gamma2=self.gamma2 / f1,
            load=tuple(c * f1 for c in self.load),
        )

    def as_vector(self) -> np.ndarray:
        return np.array([self.knee, self.a1, self.gamma1, self.gamma2, *self.load])

    def to_dict(self) -> dict:
        d = {
            "stage": self.stage.value,
            "knee": self.knee,
            "a1": self.a1,
            "gamma1": self.gamma1,
            "a2": self.a2,
            "gamma2": self.gamma2,
        }
        d.update(dict(zip(self.stage.load_names, self.load)))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PiecewiseLatencyParams:
        stage = StageKind(d["stage"])
        return cls(
            stage=stage,
            knee=float(d["knee"]),
            a1=float(d["a1"]),
            gamma1=float(d["gamma1"]),
            gamma2=float(d["gamma2"]),
            load=tuple(float(d[n]) for n in stage.load_names),
        )


def _check_stage(params: PiecewiseLatencyParams, *allowed: StageKind) -> None:
    if params.stage not in allowed:
        names = ", ".join(a.value for a in allowed)
        raise LatencyModelError(f"expected {names} parameters, got {params.stage.value}")


def eval_draft_latency(params: PiecewiseLatencyParams, b: float, s: float, r: float) -> float:
    _check_stage(params, StageKind.DRAFT)
    return params.predict(b, s, r)


def eval_target_latency(params: PiecewiseLatencyParams, b: float, s: float, r: float) -> float:
    """Verification latency; the target runs on the remaining ``1 - r`` share."""
    _check_stage(params, StageKind.TARGET)
    return params.predict(b, s, r)


def eval_overhead_latency(params: PiecewiseLatencyParams, b: float, s: float, r: float) -> float:
    _check_stage(params, StageKind.EARLY_EXIT_CHECK, StageKind.PRUNE)
    return params.predict(b, s, r)


@dataclass(frozen=True)
class LatencyModels:
    """The four fitted (or ground-truth) stage models used online."""

    draft: PiecewiseLatencyParams
    target: PiecewiseLatencyParams
    early_exit: PiecewiseLatencyParams
    prune: PiecewiseLatencyParams

    def __iter__(self):
        return iter((self.draft, self.target, self.early_exit, self.prune))

    def by_stage(self, stage: StageKind) -> PiecewiseLatencyParams:
        return {p.stage: p for p in self}[stage]

    # r is the draft-side share; None means serial execution with the whole
    # GPU given to the stage being evaluated
    def t_draft(self, b: float, s: float, r: float | None = None) -> float:
        return self.draft.predict(b, s, 1.0 if r is None else r)

    def t_target(self, b: float, s: float, r: float | None = None) -> float:
        return self.target.predict(b, s, 0.0 if r is None else r)

    def t_early_exit(self, b: float, s: float, r: float | None = None) -> float:
        return self.early_exit.predict(b, s, 0.0 if r is None else r)

    def t_prune(self, b: float, s: float, r: float | None = None) -> float:
        return self.prune.predict(b, s, 1.0 if r is None else r)

    def to_dict(self) -> dict:
        return {p.stage.value: p.to_dict() for p in self}

    @classmethod
    def from_dict(cls, d: dict) -> LatencyModels:
        return cls(
            draft=PiecewiseLatencyParams.from_dict({**d["draft"], "stage": "draft"}),
            target=PiecewiseLatencyParams.from_dict({**d["target"], "stage": "target"}),
            early_exit=PiecewiseLatencyParams.from_dict(
                {**d["early_exit_check"], "stage": "early_exit_check"}
            ),
            prune=PiecewiseLatencyParams.from_dict({**d["prune"], "stage": "prune"}),
        )


def _gt(stage: StageKind, knee: float, gamma1: float, gamma2: float, load) -> PiecewiseLatencyParams:
    # a1 chosen so that factor(1) == 1
    a2 = 1.0 + gamma2
    a1 = a2 + (gamma1 - gamma2) * knee
    return PiecewiseLatencyParams(stage, knee, a1, gamma1, gamma2, tuple(load))


# At full GPU, s=6: verify share ~42% at b=16 rising to ~88% at b=256.  Both
# models lose little speed above their knee, which is what makes partitioned
# co-execution worthwhile at small batches.
# Absolute scale: one s=4 round at b=32 takes ~56 ms, a large-model ballpark.
DEFAULT_GROUND_TRUTH = LatencyModels(
    draft=_gt(StageKind.DRAFT, 0.3, 2.5, 0.05, (0.025, 4.5, 7.5)),
    target=_gt(StageKind.TARGET, 0.6, 2.0, 0.05, (0.1875, 1.0, 1.5)),
    early_exit=_gt(StageKind.EARLY_EXIT_CHECK, 0.5, 1.5, 0.1, (0.01, 0.25)),
    prune=_gt(StageKind.PRUNE, 0.3, 1.5, 0.1, (0.005, 0.25)),
)


# -- profiling data -------------------------------------------------------------


@dataclass(frozen=True)
class ProfileSample:
    """One profiled latency.  ``r`` is the draft-side SM fraction; for
    target-side stages the stage itself ran on ``1 - r``."""

    stage: StageKind
    b: int
    s: int
    r: float
    latency: float

    def __post_init__(self) -> None:
        if self.b < 1 or self.s < 1:
            raise LatencyModelError("profile samples need b >= 1 and s >= 1")
        if not self.latency > 0.0:
            raise LatencyModelError("profile latency must be positive")
        x = own_share(self.stage, self.r)
        if not 0.0 < x <= 1.0 + 1e-12:
            raise LatencyModelError(f"{self.stage.value}: own share {x} outside (0, 1]")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage.value,
            "b": self.b,
            "s": self.s,
            "r": self.r,
            "latency_ms": self.latency,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ProfileSample:
        return cls(StageKind(d["stage"]), int(d["b"]), int(d["s"]), float(d["r"]), float(d["latency_ms"]))


@dataclass(frozen=True)
class ProfileGrid:
    batch_sizes: tuple[int, ...] = (4, 8, 16, 32, 64, 128, 256)
    token_lengths: tuple[int, ...] = (2, 4, 6, 8, 10)
    # SM share of the profiled stage itself
    shares: tuple[float, ...] = tuple(round(0.1 * k, 1) for k in range(1, 11))

    def points(self) -> Iterable[tuple[int, int, float]]:
        for b in self.batch_sizes:
            for s in self.token_lengths:
                for x in self.shares:
                    yield b, s, x


def generate_synthetic_profile(
    groundtruth: PiecewiseLatencyParams,
    grid: ProfileGrid = ProfileGrid(),
    sigma: float = 0.05,
    seed: int = 0,
) -> list[ProfileSample]:
    """Evaluate the ground truth on the grid with multiplicative lognormal noise."""
    stage = groundtruth.stage
    rng = np.random.default_rng(np.random.SeedSequence([seed, list(StageKind).index(stage)]))
    out = []
    for b, s, x in grid.points():
        r = round(1.0 - x, 12) if stage.target_side else x
        lat = groundtruth.predict(b, s, r)
        if sigma > 0.0:
            lat *= float(np.exp(sigma * rng.standard_normal()))
        out.append(ProfileSample(stage, b, s, r, lat))
    return out


def split_samples(
    samples: Sequence[ProfileSample], heldout_fraction: float = 0.2, seed: int = 0
) -> tuple[list[ProfileSample], list[ProfileSample]]:
    """Random train/held-out split."""
    n = len(samples)
    idx = np.random.default_rng(seed).permutation(n)
    n_test = int(round(heldout_fraction * n))
    test = sorted(idx[:n_test])
    train = sorted(idx[n_test:])
    return [samples[i] for i in train], [samples[i] for i in test]


# -- fitting --------------------------------------------------------------------


def _load_design(stage: StageKind, b: np.ndarray, s: np.ndarray) -> np.ndarray:
    if stage is StageKind.DRAFT:
        cols = [b, s, np.ones_like(b)]
    elif stage is StageKind.TARGET:
        cols = [b * s, s, np.ones_like(b)]
    else:
        cols = [b * s, np.ones_like(b)]
    return np.column_stack(cols)


def _factor_design(x: np.ndarray, knee: float) -> np.ndarray:
    # coefficients (a1, gamma1, gamma2) with continuity at the knee built in
    return np.column_stack([np.ones_like(x), -np.minimum(x, knee), -np.maximum(x - knee, 0.0)])


def _collinear_columns(design: np.ndarray, names: Sequence[str]) -> list[str]:
    _, sv, vt = np.linalg.svd(design, full_matrices=False)
    tol = sv.max() * max(design.shape) * np.finfo(float).eps
    null = vt[sv <= tol]
    if len(null) == 0:
        return []
    involved = np.any(np.abs(null) > 1e-8, axis=0)
    return [n for n, hit in zip(names, involved) if hit]


def _fit_at_knee(
    u_design: np.ndarray, v_design: np.ndarray, y: np.ndarray, w: np.ndarray, max_iter: int = 500
) -> tuple[np.ndarray, np.ndarray, float]:
    """Weighted least squares of ``y ~ (U u) * (V v)`` by a rank-one start and
    alternating least squares."""
    ku, kv = u_design.shape[1], v_design.shape[1]
    full = (u_design[:, :, None] * v_design[:, None, :]).reshape(len(y), ku * kv)
    coef, *_ = np.linalg.lstsq(full * w[:, None], y * w, rcond=None)
    mat = coef.reshape(ku, kv)
    left, sv, right = np.linalg.svd(mat)
    u = left[:, 0] * np.sqrt(sv[0])
    v = right[0] * np.sqrt(sv[0])

    def rss(u, v):
        return float(np.sum(((u_design @ u) * (v_design @ v) - y) ** 2 * w**2))

    best = rss(u, v)
    for _ in range(max_iter):
        g = v_design @ v
        u, *_ = np.linalg.lstsq(u_design * (g * w)[:, None], y * w, rcond=None)
        f = u_design @ u
        v, *_ = np.linalg.lstsq(v_design * (f * w)[:, None], y * w, rcond=None)
        cur = rss(u, v)
        if best - cur <= 1e-15 * max(best, 1e-300):
            best = min(best, cur)
            break
        best = cur
    return u, v, best


def fit(
    stage: StageKind,
    samples: Sequence[ProfileSample],
    relative: bool = True,
) -> PiecewiseLatencyParams:
    """Fit one stage model.

    The knee is searched exhaustively over the observed own-share values that
    leave at least two distinct shares on each side; for each candidate the
    continuity-constrained coefficients minimise the (relative, by default)
    residual sum of squares.

    Raises:
        FitError: too few samples, no admissible knee, or a rank-deficient
            load design (the message names the collinear columns).
    """
    samples = [p for p in samples if p.stage is stage]
    if len(samples) < 8:
        raise FitError(f"{stage.value}: need at least 8 samples, got {len(samples)}")
    b = np.array([p.b for p in samples], dtype=np.float64)
    s = np.array([p.s for p in samples], dtype=np.float64)
    x = np.array([own_share(stage, p.r) for p in samples], dtype=np.float64)
    x = np.round(x, 12)
    y = np.array([p.latency for p in samples], dtype=np.float64)
    w = 1.0 / y if relative else np.ones_like(y)

    v_design = _load_design(stage, b, s)
    if np.linalg.matrix_rank(v_design) < v_design.shape[1]:
        names = {
            StageKind.DRAFT: ("b", "s", "1"),
            StageKind.TARGET: ("b*s", "s", "1"),
        }.get(stage, ("b*s", "1"))
        cols = _collinear_columns(v_design, names)
        raise FitError(f"{stage.value}: rank-deficient load design; collinear columns {cols}")

    shares = np.unique(x)
    knees = [k for k in shares if np.sum(shares <= k) >= 2 and np.sum(shares > k) >= 2]
    if not knees:
        raise FitError(
            f"{stage.value}: need at least 2 distinct SM shares on each side of a knee, "
            f"got shares {shares.tolist()}"
        )

    best = None
    for knee in knees:
        u, v, rss = _fit_at_knee(_factor_design(x, knee), v_design, y, w)
        if best is None or rss < best[0]:
            best = (rss, float(knee), u, v)
    _, knee, u, v = best
    params = PiecewiseLatencyParams(stage, knee, float(u[0]), float(u[1]), float(u[2]), tuple(map(float, v)))
    return params.canonical()


def mape(params: PiecewiseLatencyParams, heldout: Sequence[ProfileSample]) -> float:
    """Mean absolute percentage error as a fraction."""
    if len(heldout) == 0:
        raise LatencyModelError("mape needs at least one held-out sample")
    total = 0.0
    for p in heldout:
        if p.latency == 0.0:
            raise LatencyModelError("observed latency of zero")
        total += abs(params.predict(p.b, p.s, p.r) - p.latency) / p.latency
    return total / len(heldout)


@dataclass
class ProfileReport:
    models: LatencyModels
    mape: dict[str, float] = field(default_factory=dict)
    samples: list[ProfileSample] = field(default_factory=list)


def profile_and_fit(
    groundtruth: LatencyModels = DEFAULT_GROUND_TRUTH,
    grid: ProfileGrid = ProfileGrid(),
    sigma: float = 0.05,
    seed: int = 0,
    heldout_fraction: float = 0.2,
) -> ProfileReport:
    """Synthesize profiles for all four stages, fit on 80% and score the rest."""
    fitted = {}
    errors = {}
    all_samples: list[ProfileSample] = []
    for gt in groundtruth:
        samples = generate_synthetic_profile(gt, grid, sigma, seed)
        train, test = split_samples(samples, heldout_fraction, seed)
        try:
            params = fit(gt.stage, train)
        except FitError as exc:
            raise FitError(f"stage {gt.stage.value}: {exc}") from exc
        fitted[gt.stage] = params
        errors[gt.stage.value] = mape(params, test)
        all_samples.extend(samples)
    models = LatencyModels(
        draft=fitted[StageKind.DRAFT],
        target=fitted[StageKind.TARGET],
        early_exit=fitted[StageKind.EARLY_EXIT_CHECK],
        prune=fitted[StageKind.PRUNE],
    )
    return ProfileReport(models, errors, all_samples)


def save_samples(path: Path, samples: Sequence[ProfileSample]) -> None:
    Path(path).write_text(json.dumps({"samples": [p.to_dict() for p in samples]}, indent=1) + "\n")


def load_samples(path: Path) -> list[ProfileSample]:
    return [ProfileSample.from_dict(d) for d in json.loads(Path(path).read_text())["samples"]]


def save_params(path: Path, models: LatencyModels) -> None:
    Path(path).write_text(json.dumps(models.to_dict(), indent=2, sort_keys=True) + "\n")


def load_params(path: Path) -> LatencyModels:
    return LatencyModels.from_dict(json.loads(Path(path).read_text()))
