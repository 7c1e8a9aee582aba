"""Frontier chunk pipeline: planning the chunk size and SM split, and turning
per-request verification outcomes into an iteration timeline.

Drafting and verification run on disjoint SM partitions: the draft lane gets
share ``r`` and the target lane ``1 - r``.  While the target verifies chunk
``k`` the draft lane prepares chunk ``k + 1``, so drafting runs at most one
chunk ahead of verification.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

from specserve.latmodel import LatencyModels
from specserve.sdcore import IllegalState, VerifyOutcome

DEFAULT_R_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass(frozen=True)
class OverlapPlan:
    enabled: bool
    s: int
    s_c: int
    r: float | None
    predicted_makespan: float
    serial_makespan: float

    def __post_init__(self) -> None:
        if self.enabled and not self.predicted_makespan < self.serial_makespan:
            raise ValueError("an enabled plan must beat the serial makespan")
        if self.enabled and not (self.r is not None and 0.0 < self.r < 1.0):
            raise ValueError("an enabled plan needs a draft share in (0, 1)")

    @classmethod
    def serial(cls, s: int, serial_makespan: float) -> OverlapPlan:
        return cls(False, s, s, None, serial_makespan, serial_makespan)


def chunk_lengths(s: int, s_c: int) -> list[int]:
    """Split ``s`` tokens into chunks of ``s_c``; the last may be short."""
    if s < 1 or s_c < 1:
        raise ValueError("s and s_c must be positive")
    full, rest = divmod(s, s_c)
    return [s_c] * full + ([rest] if rest else [])


def serial_makespan(s: int, b: int, models: LatencyModels) -> float:
    """Draft then verify, each with the whole GPU."""
    return models.t_draft(b, s, None) + models.t_target(b, s, None)


def pipeline_makespan(s: int, s_c: int, b: int, r: float, models: LatencyModels) -> float:
    """Makespan of an all-accepted iteration under the chunk pipeline.

    When ``s_c`` divides ``s`` and a draft chunk is no slower than a verify
    chunk this is ``T_q(s_c) + (s / s_c) * T_p(s_c)``.
    """
    draft_end = 0.0
    verify_end = 0.0
    verify_start_prev = 0.0
    for k, n in enumerate(chunk_lengths(s, s_c)):
        draft_start = 0.0 if k == 0 else max(draft_end, verify_start_prev)
        draft_end = draft_start + models.t_draft(b, n, r)
        verify_start_prev = max(verify_end, draft_end)
        verify_end = verify_start_prev + models.t_target(b, n, r)
    return verify_end


def plan(
    s: int,
    b: int,
    models: LatencyModels,
    r_grid: Sequence[float] = DEFAULT_R_GRID,
) -> OverlapPlan:
    """Pick the (chunk size, draft share) pair with the smallest pipelined
    makespan, enabling overlap only when it strictly beats serial execution."""
    if s < 1 or b < 1:
        raise ValueError("s and b must be positive")
    if any(not 0.0 < r < 1.0 for r in r_grid):
        raise ValueError("r_grid must lie inside (0, 1)")
    serial = serial_makespan(s, b, models)
    best: tuple[float, int, float] | None = None
    # s_c = s is a single chunk and cannot overlap anything
    for s_c in range(1, s):
        for r in r_grid:
            m = pipeline_makespan(s, s_c, b, r, models)
            if m < serial and (best is None or m < best[0]):
                best = (m, s_c, float(r))
    if best is None:
        return OverlapPlan.serial(s, serial)
    return OverlapPlan(True, s, best[1], best[2], best[0], serial)


def feasible_points(
    s: int, b: int, models: LatencyModels, r_grid: Sequence[float] = DEFAULT_R_GRID
) -> list[tuple[int, float]]:
    """All grid points at which the pipelined makespan beats serial."""
    serial = serial_makespan(s, b, models)
    return [
        (s_c, float(r))
        for s_c in range(1, s)
        for r in r_grid
        if pipeline_makespan(s, s_c, b, r, models) < serial
    ]


class EventKind(str, enum.Enum):
    DRAFT_CHUNK = "draft_chunk"
    VERIFY_CHUNK = "verify_chunk"
    RESET = "reset"
    COMMIT = "commit"


@dataclass(frozen=True)
class PipelineEvent:
    kind: EventKind
    start: float
    end: float
    chunk: int


@dataclass
class PipelineTimeline:
    events: list[PipelineEvent] = field(default_factory=list)
    # per request, time offset at which its tokens are committed
    commit_times: list[float] = field(default_factory=list)
    draft_time: float = 0.0
    verify_time: float = 0.0
    prune_time: float = 0.0
    layer_work: float = 0.0
    wasted_draft_tokens: int = 0

    @property
    def makespan(self) -> float:
        return max((e.end for e in self.events), default=0.0)


def _stop_chunk(outcome: VerifyOutcome, s_c: int) -> int:
    """Chunk holding the last drafted slot that had to be resolved."""
    if outcome.mismatch:
        last = outcome.accepted_count
    elif outcome.pruned_at is not None:
        last = outcome.pruned_at[0]
    else:
        last = len(outcome.drafted) - 1
    return last // s_c


def _prune_overhead(
    tokens: Sequence[tuple[float, bool]], b: int, r: float | None, models: LatencyModels
) -> float:
    # one prune launch per distinct layer at which some token stopped early
    per_layer: dict[float, int] = {}
    for layers, pruned in tokens:
        if pruned:
            per_layer[layers] = per_layer.get(layers, 0) + 1
    return sum(models.t_prune(b, count / b, r) for count in per_layer.values())


def schedule_iteration(
    plan: OverlapPlan,
    outcomes: Sequence[VerifyOutcome],
    models: LatencyModels,
    layers: int,
) -> PipelineTimeline:
    """Timeline of one batch iteration given each request's verification outcome.

    With a disabled plan the whole frontier is one chunk drafted and verified
    back to back on the full GPU.  With overlap, chunk ``k + 1`` is drafted
    while chunk ``k`` is verified; a request stops taking part after the chunk
    in which it was rejected or pruned, and anything already drafted for it
    beyond that chunk is wasted.
    """
    tl = PipelineTimeline(commit_times=[0.0] * len(outcomes))
    if not outcomes:
        return tl
    lengths = [len(o.drafted) for o in outcomes]
    if min(lengths) < 1:
        raise IllegalState("empty drafted frontier")
    if plan.enabled and max(lengths) > plan.s:
        raise IllegalState("an outcome is longer than the planned frontier")
    s_c = plan.s_c if plan.enabled else max(lengths)
    r = plan.r if plan.enabled else None
    stops = [_stop_chunk(o, s_c) for o in outcomes]
    n_chunks = max(math.ceil(n / s_c) for n in lengths)

    def tokens_in(i: int, k: int) -> range:
        return range(k * s_c, min((k + 1) * s_c, lengths[i]))

    draft_end = verify_end = verify_start_prev = 0.0
    last_verified = 0
    for k in range(n_chunks):
        # drafting of chunk k only knows verdicts up to chunk k - 2
        drafting = [i for i in range(len(outcomes)) if len(tokens_in(i, k)) and stops[i] >= k - 1]
        verifying = [i for i in drafting if stops[i] >= k]
        if not drafting:
            break
        width = max(len(tokens_in(i, k)) for i in drafting)
        draft_start = 0.0 if k == 0 else max(draft_end, verify_start_prev)
        draft_end = draft_start + models.t_draft(len(drafting), width, r)
        tl.draft_time += draft_end - draft_start
        tl.events.append(PipelineEvent(EventKind.DRAFT_CHUNK, draft_start, draft_end, k))
        tl.wasted_draft_tokens += sum(len(tokens_in(i, k)) for i in drafting if stops[i] < k)
        if not verifying:
            break
        work = 0.0
        marks: list[tuple[float, bool]] = []
        for i in verifying:
            o = outcomes[i]
            pruned_from = o.pruned_at[0] if o.pruned_at is not None else lengths[i]
            for t in tokens_in(i, k):
                work += o.token_layers[t]
                marks.append((o.token_layers[t], t >= pruned_from and o.token_layers[t] < layers))
        nb = len(verifying)
        v_start = max(verify_end, draft_end)
        v_main = models.t_target(nb, work / (layers * nb), r)
        v_prune = _prune_overhead(marks, nb, r, models)
        verify_end = v_start + v_main + v_prune
        verify_start_prev = v_start
        tl.verify_time += v_main
        tl.prune_time += v_prune
        tl.layer_work += work
        tl.events.append(PipelineEvent(EventKind.VERIFY_CHUNK, v_start, verify_end, k))
        last_verified = k
        stopped = [i for i in verifying if stops[i] == k]
        for i in stopped:
            tl.commit_times[i] = verify_end
        if any(lengths[i] > (k + 1) * s_c for i in stopped):
            tl.events.append(PipelineEvent(EventKind.RESET, verify_end, verify_end, k))
    tl.events.append(PipelineEvent(EventKind.COMMIT, verify_end, verify_end, last_verified))
    # stable sort keeps draft-before-verify order for equal start times
    tl.events.sort(key=lambda e: e.start)
    return tl
