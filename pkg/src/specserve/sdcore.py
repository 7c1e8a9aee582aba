"""Speculative-decoding semantics: drafting, verification and commit.

Only tokens that survived every target layer and matched the target's greedy
choice, plus target-produced recovery tokens, are ever committed.  Early exit
and chunking can therefore change how much work a round costs but never what
a request outputs.
"""

from __future__ import annotations

import math
from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from specserve.exitctl import ExitPolicy, PruneGate
from specserve.toylm import LayeredToyLM

DEFAULT_WINDOW = 16
DEFAULT_ACCEPTANCE_PRIOR = 0.7
# pseudo-observations backing the prior in the per-token agreement estimate
_PRIOR_WEIGHT = 2.0


class IllegalState(RuntimeError):
    """Operation invoked on a request in the wrong state."""


@dataclass(frozen=True)
class RoundStat:
    """Bookkeeping for one verification round of one request.

    ``censored`` marks rounds cut short by pruning before any mismatch was
    observed, so the number of accepted tokens is only a lower bound.
    """

    drafted: int
    accepted: int
    censored: bool = False

    @property
    def ratio(self) -> float:
        return self.accepted / self.drafted


@dataclass
class Request:
    id: int
    arrival_time: float
    prompt: tuple[int, ...]
    max_out: int
    committed: list[int] = field(default_factory=list)
    spec_length: int = 4
    window: int = DEFAULT_WINDOW
    accept_prior: float = DEFAULT_ACCEPTANCE_PRIOR
    done: bool = False
    finish_time: float | None = None
    first_token_time: float | None = None
    # absolute output position whose next draft is exempt from early exit
    ee_exempt_pos: int | None = None
    accept_window: deque[RoundStat] = field(init=False)
    _agreement: float | None = field(init=False, default=None, repr=False)

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.max_out < 1:
            raise ValueError("max_out must be at least 1")
        self.prompt = tuple(int(t) for t in self.prompt)
        self.accept_window = deque(maxlen=self.window)

    @property
    def prefix(self) -> list[int]:
        return [*self.prompt, *self.committed]

    @property
    def remaining(self) -> int:
        return self.max_out - len(self.committed)

    def acceptance_rate(self) -> float:
        """Mean accepted/drafted ratio over the window (the prior if empty)."""
        if not self.accept_window:
            return self.accept_prior
        return float(np.mean([st.ratio for st in self.accept_window]))

    def token_agreement(self) -> float:
        """Smoothed per-token probability that a drafted token is accepted.

        Each uncensored round contributes its accepted tokens as successes
        and one failure; the prior acts as ``_PRIOR_WEIGHT`` pseudo-tokens.
        """
        if self._agreement is None:
            acc = sum(st.accepted for st in self.accept_window)
            miss = sum(1 for st in self.accept_window if not st.censored and st.accepted < st.drafted)
            self._agreement = (acc + self.accept_prior * _PRIOR_WEIGHT) / (acc + miss + _PRIOR_WEIGHT)
        return self._agreement

    def record_round(self, stat: RoundStat) -> None:
        self.accept_window.append(stat)
        self._agreement = None

    def acceptance_at(self, s: int) -> float:
        """Expected accepted fraction of ``s`` drafted tokens.

        Greedy verification accepts a prefix, so with per-token agreement
        ``p`` the expected accepted count is ``p + p^2 + ... + p^s``.
        """
        return expected_acceptance(self.token_agreement(), s)

    def yield_at(self, s: int) -> float:
        """Expected committed tokens per drafted token for length ``s``.

        A round commits the accepted prefix plus a recovery token on
        mismatch, i.e. ``1 + p + ... + p^(s-1)`` tokens in expectation.
        """
        return expected_yield(self.token_agreement(), s)


def expected_acceptance(p: float, s: int) -> float:
    if s < 1:
        raise ValueError("s must be at least 1")
    if p >= 1.0:
        return 1.0
    return p * (1.0 - p**s) / ((1.0 - p) * s)


def expected_yield(p: float, s: int) -> float:
    if s < 1:
        raise ValueError("s must be at least 1")
    if p >= 1.0:
        return 1.0
    return (1.0 - p**s) / ((1.0 - p) * s)


@dataclass
class Frontier:
    """Drafted-but-uncommitted tokens of one request, verified in chunks."""

    base: int
    drafted: list[int] = field(default_factory=list)
    chunk_size: int = 1
    verified_upto: int = 0

    def __post_init__(self) -> None:
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be at least 1")

    def chunks(self) -> list[tuple[int, int]]:
        """Half-open index ranges of the chunks; the last may be short."""
        n = len(self.drafted)
        return [(i, min(i + self.chunk_size, n)) for i in range(0, n, self.chunk_size)]

    def advance(self, upto: int) -> None:
        if not self.verified_upto <= upto <= len(self.drafted):
            raise IllegalState(f"cannot advance verification to {upto}")
        self.verified_upto = upto

    def reset(self, new_base: int) -> None:
        self.base = new_base
        self.drafted = []
        self.verified_upto = 0


@dataclass(frozen=True)
class VerifyOutcome:
    """Result of verifying one request's drafted tokens.

    ``token_layers[j]`` is the (possibly fractional) number of target layers
    spent on drafted token ``j``; ``full_layers_run`` is their sum.
    """

    request_id: int
    base: int
    drafted: tuple[int, ...]
    accepted_count: int
    recovery_token: int | None
    pruned_at: tuple[int, int] | None
    token_layers: tuple[float, ...]
    false_prune: bool = False

    @property
    def full_layers_run(self) -> float:
        return float(sum(self.token_layers))

    @property
    def mismatch(self) -> bool:
        return self.recovery_token is not None

    @property
    def committable(self) -> int:
        """Tokens this outcome commits before EOS / length truncation."""
        return self.accepted_count + (1 if self.mismatch else 0)

    @property
    def pruned_count(self) -> int:
        return 0 if self.pruned_at is None else len(self.drafted) - self.pruned_at[0]



def draft_tokens(model: LayeredToyLM, req: Request, s: int) -> list[int]:
    if req.done:
        raise IllegalState(f"request {req.id} is done")
    if s < 1:
        raise ValueError("s must be at least 1")
    seq = req.prefix
    out: list[int] = []
    for _ in range(s):
        tok = model.draft_next(seq)
        out.append(tok)
        seq.append(tok)
        if tok == model.eos:
            break
    return out


def _accepted_prefix(model: LayeredToyLM, prefix: list[int], drafted: Sequence[int], upto: int):
    """Longest matching prefix among the first ``upto`` tokens plus the
    target token at the first mismatch (or None)."""
    seq = list(prefix)
    for j in range(upto):
        tok = model.target_next(seq)
        if drafted[j] != tok:
            return j, tok
        seq.append(tok)
    return upto, None


def full_verify(model: LayeredToyLM, req: Request, drafted: Sequence[int]) -> VerifyOutcome:
    if not drafted:
        raise ValueError("drafted must be non-empty")
    drafted = tuple(int(t) for t in drafted)
    accepted, recovery = _accepted_prefix(model, req.prefix, drafted, len(drafted))
    return VerifyOutcome(
        request_id=req.id,
        base=len(req.committed),
        drafted=drafted,
        accepted_count=accepted,
        recovery_token=recovery,
        pruned_at=None,
        token_layers=(float(model.layers),) * len(drafted),
    )


def first_exit_layers(
    model: LayeredToyLM,
    prefix: Sequence[int],
    drafted: Sequence[int],
    policy: ExitPolicy,
    gate: PruneGate,
    exempt: int | None = None,
) -> list[float]:
    """Per drafted token, the first gated layer at which it fails the Top-K
    test (``inf`` if never).  ``exempt`` indexes a token that is never tested."""
    open_mask = gate.mask.copy()
    open_mask[: policy.l_init - 1] = False
    if not open_mask.any():
        return [math.inf] * len(drafted)
    k = policy.k_schedule()
    seq = list(prefix)
    out = []
    for j, tok in enumerate(drafted):
        if j == exempt:
            out.append(math.inf)
        else:
            ranks = model.layer_ranks(seq)[:, tok]
            hits = np.flatnonzero(open_mask & (ranks >= k))
            out.append(float(hits[0] + 1) if hits.size else math.inf)
        seq.append(tok)
    return out


def verify_with_early_exit(
    model: LayeredToyLM,
    req: Request,
    drafted: Sequence[int],
    policy: ExitPolicy,
    gate: PruneGate,
) -> VerifyOutcome:
    """Layer-by-layer verification with token-wise early exit.

    Drafted token ``j`` is judged by the logits of the position that carries
    token ``j - 1`` (the last committed token for ``j = 0``).  When token
    ``m`` fails the exit test at layer ``l``, the positions carrying tokens
    ``m, m + 1, ...`` stop; the position judging token ``m`` keeps running, so
    slot ``m`` is still resolved by the final layer.  The stop takes effect
    ``gate.delay`` layers after ``l`` because the estimator runs off the
    critical path.

    A correct prune therefore commits exactly what full verification would.
    A false prune (token ``m`` was right) commits token ``m`` as accepted but
    loses everything drafted after it.
    """
    if not drafted:
        raise ValueError("drafted must be non-empty")
    if policy.layers != model.layers:
        raise ValueError("exit policy depth differs from the model depth")
    drafted = tuple(int(t) for t in drafted)
    prefix = req.prefix
    base = len(req.committed)
    exempt = None
    if req.ee_exempt_pos is not None and 0 <= req.ee_exempt_pos - base < len(drafted):
        exempt = req.ee_exempt_pos - base
    fails = first_exit_layers(model, prefix, drafted, policy, gate, exempt)
    n = len(drafted)
    # the position carrying token j stops at the earliest failure among 0..j
    stop = np.minimum.accumulate(fails)
    m = next((j for j in range(n) if math.isfinite(stop[j])), n)
    if m == n:
        return full_verify(model, req, drafted)
    full = float(model.layers)
    layers = [full] * m + [min(full, float(stop[j]) + gate.delay) for j in range(m, n)]
    accepted, recovery = _accepted_prefix(model, prefix, drafted, m + 1)
    return VerifyOutcome(
        request_id=req.id,
        base=base,
        drafted=drafted,
        accepted_count=accepted,
        recovery_token=recovery,
        pruned_at=(m, int(stop[m])),
        token_layers=tuple(layers),
        false_prune=accepted == m + 1,
    )


def commit(req: Request, outcome: VerifyOutcome, eos: int, now: float | None = None) -> int:
    """Append the accepted prefix and recovery token; returns tokens added."""
    if req.done:
        raise IllegalState(f"request {req.id} is done")
    if outcome.request_id != req.id or outcome.base != len(req.committed):
        raise IllegalState(f"stale outcome for request {req.id}")
    tokens = list(outcome.drafted[: outcome.accepted_count])
    if outcome.recovery_token is not None:
        tokens.append(outcome.recovery_token)
    if eos in tokens:
        tokens = tokens[: tokens.index(eos) + 1]
    tokens = tokens[: req.remaining]
    req.committed.extend(tokens)
    censored = outcome.pruned_at is not None and not outcome.mismatch
    req.record_round(RoundStat(len(outcome.drafted), outcome.accepted_count, censored=censored))
    if censored:
        req.ee_exempt_pos = len(req.committed)
    else:
        req.ee_exempt_pos = None
    if tokens and now is not None and req.first_token_time is None:
        req.first_token_time = now
    if len(req.committed) >= req.max_out or (req.committed and req.committed[-1] == eos):
        req.done = True
        req.finish_time = now
    return len(tokens)
