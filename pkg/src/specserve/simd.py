"""Discrete-event serving simulator.

One loop iteration is one batched speculative-decoding round: admit arrived
requests (continuous batching), choose speculative lengths, draft, plan the
draft/verify overlap, verify with optional early exit, commit, and advance the
virtual clock by the iteration's timeline.  Controllers consult the fitted
latency models; the clock runs on the ground-truth ones.
"""

from __future__ import annotations

import enum
import json
from collections import Counter, deque
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from specserve import drafter as dr
from specserve import overlap as ov
from specserve.exitctl import ExitPolicy, PruneGate, build_gate
from specserve.latmodel import DEFAULT_GROUND_TRUTH, LatencyModels
from specserve.sdcore import (
    DEFAULT_ACCEPTANCE_PRIOR,
    DEFAULT_WINDOW,
    Request,
    commit,
    draft_tokens,
    full_verify,
    verify_with_early_exit,
)
from specserve.toylm import LayeredToyLM
from specserve.workload import TraceRecord, WorkloadSpec, synth_prompt, synth_workload


class Mode(str, enum.Enum):
    VSD = "VSD"
    VSD_AD = "VSD_AD"
    VSD_AD_EE = "VSD_AD_EE"
    FULL = "FULL"

    @property
    def adaptive(self) -> bool:
        return self is not Mode.VSD

    @property
    def early_exit(self) -> bool:
        return self in (Mode.VSD_AD_EE, Mode.FULL)

    @property
    def overlap(self) -> bool:
        return self is Mode.FULL


LADDER = (Mode.VSD, Mode.VSD_AD, Mode.VSD_AD_EE, Mode.FULL)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    layers: int = 32
    order: int = 2
    seed: int = 0
    draft_divergence: float = 0.4
    logit_scale: float = 3.0
    noise_scale: float = 0.3
    draft_noise_scale: float = 8.0
    eos_bias: float = -1.0

    def build(self) -> LayeredToyLM:
        return LayeredToyLM(
            vocab_size=self.vocab_size,
            layers=self.layers,
            order=self.order,
            seed=self.seed,
            draft_divergence=self.draft_divergence,
            logit_scale=self.logit_scale,
            noise_scale=self.noise_scale,
            draft_noise_scale=self.draft_noise_scale,
            eos_bias=self.eos_bias,
        )


@dataclass(frozen=True)
class SimConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    # latencies that drive the clock
    ground_truth: LatencyModels = DEFAULT_GROUND_TRUTH
    # latencies the controllers plan with; None means they see the ground truth
    fitted: LatencyModels | None = None
    drafter: dr.DrafterConfig = field(default_factory=dr.DrafterConfig)
    exit_policy: ExitPolicy = field(default_factory=ExitPolicy)
    r_grid: tuple[float, ...] = ov.DEFAULT_R_GRID
    mode: Mode = Mode.FULL
    # None follows the mode; True/False forces the chunk pipeline on or off
    overlap: bool | None = None
    fixed_length: int = 4
    b_max: int = 256
    accept_window: int = DEFAULT_WINDOW
    accept_prior: float = DEFAULT_ACCEPTANCE_PRIOR
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    # explicit arrivals override the synthetic workload
    trace: tuple[TraceRecord, ...] | None = None
    seed: int = 0
    check_oracle: bool = True
    record_iterations: bool = False

    def __post_init__(self) -> None:
        if self.b_max < 1:
            raise ValueError("b_max must be positive")
        if self.fixed_length < 1:
            raise ValueError("fixed_length must be positive")
        if self.exit_policy.layers != self.model.layers:
            raise ValueError("exit policy depth must match the model depth")
        object.__setattr__(self, "mode", Mode(self.mode))

    @property
    def use_overlap(self) -> bool:
        return self.mode.overlap if self.overlap is None else self.overlap

    @property
    def planning_models(self) -> LatencyModels:
        return self.fitted if self.fitted is not None else self.ground_truth

    def arrivals(self) -> list[TraceRecord]:
        if self.trace is not None:
            return sorted(self.trace)
        return synth_workload(self.workload, self.seed)


@dataclass
class Metrics:
    requests: int = 0
    finished: int = 0
    total_tokens: int = 0
    sim_time_ms: float = 0.0
    busy_time_ms: float = 0.0
    iterations: int = 0
    mean_latency_ms: float = 0.0
    p50_latency_ms: float = 0.0
    p99_latency_ms: float = 0.0
    mean_tpot_ms: float = 0.0
    throughput_tok_s: float = 0.0
    draft_time_ms: float = 0.0
    verify_time_ms: float = 0.0
    prune_time_ms: float = 0.0
    draft_share: float = 0.0
    verify_share: float = 0.0
    drafted_tokens: int = 0
    accepted_tokens: int = 0
    acceptance_ratio: float = 0.0
    layer_work: float = 0.0
    layer_work_full: float = 0.0
    pruned_tokens: int = 0
    prune_rounds: int = 0
    false_prunes: int = 0
    wasted_draft_tokens: int = 0
    overlap_iterations: int = 0
    early_exit_per_layer: list[int] = field(default_factory=list)
    spec_length_hist: dict[str, int] = field(default_factory=dict)
    batch_size_hist: dict[str, int] = field(default_factory=dict)
    oracle_checked: int = 0
    oracle_mismatches: int = 0
    conserved_tokens: bool = True
    controllers_use_ground_truth: bool = True
    mode: str = ""
    seed: int = 0
    iteration_records: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "iteration_records"}
        out["type"] = "summary"
        return out

    def to_jsonl(self) -> str:
        lines = [json.dumps(self.summary(), sort_keys=True)]
        lines += [json.dumps({"type": "iteration", **rec}, sort_keys=True) for rec in self.iteration_records]
        return "\n".join(lines) + "\n"

    def write(self, path: Path | str) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


class Simulator:
    """Holds the mutable state of one run; use :func:`run`."""

    def __init__(self, config: SimConfig) -> None:
        self.cfg = config
        self.model = config.model.build()
        self.truth = config.ground_truth
        self.plan_models = config.planning_models
        self.posteriors: dict[dr.ContextKey, dr.GpPosterior] = {}
        self._plans: dict[tuple[int, int], ov.OverlapPlan] = {}
        self.metrics = Metrics(
            early_exit_per_layer=[0] * config.model.layers,
            controllers_use_ground_truth=config.fitted is None,
            mode=config.mode.value,
            seed=config.seed,
        )
        self.spec_hist: Counter[int] = Counter()
        self.batch_hist: Counter[int] = Counter()
        self.finished: list[Request] = []

    # -- controllers -------------------------------------------------------

    def _posterior(self, key: dr.ContextKey) -> dr.GpPosterior:
        post = self.posteriors.get(key)
        if post is None:
            post = dr.GpPosterior(key, self.cfg.drafter)
            self.posteriors[key] = post
        return post

    def _plan(self, s: int, b: int) -> ov.OverlapPlan:
        key = (s, b)
        p = self._plans.get(key)
        if p is None:
            if self.cfg.use_overlap:
                p = ov.plan(s, b, self.plan_models, self.cfg.r_grid)
            else:
                p = ov.OverlapPlan.serial(s, ov.serial_makespan(s, b, self.plan_models))
            self._plans[key] = p
        return p

    def _context(self, b: int) -> dr.ContextKey:
        # the SM split that characterises a batch is the one planned for it at
        # the reference length, so selection and observation share a context
        p = self._plan(self.cfg.fixed_length, b)
        return dr.ContextKey.of(b, p.r if p.enabled else None)

    def _assign(self, batch: Sequence[Request]) -> list[int]:
        cfg = self.cfg
        if not cfg.mode.adaptive:
            return [cfg.fixed_length] * len(batch)
        post = self._posterior(self._context(len(batch)))
        return dr.assign_lengths([req.yield_at for req in batch], post, post.rounds + 1)

    def _observe(self, batch, lengths, outcomes, makespan: float) -> None:
        b = len(batch)
        post = self._posterior(self._context(b))
        n = post.rounds + 1
        actual = self._plan(max(lengths), b).predicted_makespan
        for s in sorted(set(lengths)):
            idx = [i for i, si in enumerate(lengths) if si == s]
            drafted = sum(len(outcomes[i].drafted) for i in idx)
            committed = sum(outcomes[i].committable for i in idx)
            # share of the round attributed to length s, by predicted cost
            t_attr = makespan * self._plan(s, b).predicted_makespan / actual
            dr.observe(post, s, t_attr, min(committed / drafted, 1.0), n)
        dr.end_round(post)

    # -- main loop -------------------------------------------------------

    def run(self) -> Metrics:
        cfg = self.cfg
        model = self.model
        m = self.metrics
        arrivals = deque(enumerate(cfg.arrivals()))
        m.requests = len(arrivals)
        running: list[Request] = []
        finished: list[Request] = []
        clock = 0.0
        while arrivals or running:
            while arrivals and arrivals[0][1].arrival_ms <= clock and len(running) < cfg.b_max:
                idx, rec = arrivals.popleft()
                running.append(
                    Request(
                        id=idx,
                        arrival_time=float(rec.arrival_ms),
                        prompt=synth_prompt(cfg.seed, idx, rec.input_len, model.vocab_size),
                        max_out=max(rec.output_len, 1),
                        window=cfg.accept_window,
                        accept_prior=cfg.accept_prior,
                    )
                )
            if not running:
                clock = max(clock, float(arrivals[0][1].arrival_ms))
                continue
            clock = self._iteration(running, clock)
            finished.extend(req for req in running if req.done)
            running = [req for req in running if not req.done]
        self._finalize(finished, clock)
        return m

    def _iteration(self, batch: list[Request], clock: float) -> float:
        cfg = self.cfg
        m = self.metrics
        model = self.model
        b = len(batch)
        lengths = self._assign(batch)
        drafts = [draft_tokens(model, req, min(s, req.remaining)) for req, s in zip(batch, lengths)]
        width = max(len(d) for d in drafts)
        plan = self._plan(width, b)
        r = plan.r if plan.enabled else None
        if cfg.mode.early_exit:
            gate_batch = [(len(d), req.acceptance_at(len(d))) for req, d in zip(batch, drafts)]
            gate = build_gate(gate_batch, b, r, self.plan_models, cfg.exit_policy)
        else:
            gate = PruneGate.never(model.layers)
        outcomes = []
        for req, d in zip(batch, drafts):
            if gate.any_open:
                outcomes.append(verify_with_early_exit(model, req, d, cfg.exit_policy, gate))
            else:
                outcomes.append(full_verify(model, req, d))
        tl = ov.schedule_iteration(plan, outcomes, self.truth, model.layers)
        for req, out, t in zip(batch, outcomes, tl.commit_times):
            m.total_tokens += commit(req, out, model.eos, now=clock + t)
            m.drafted_tokens += len(out.drafted)
            m.accepted_tokens += out.accepted_count
            if out.pruned_at is not None:
                m.prune_rounds += 1
                m.pruned_tokens += out.pruned_count
                m.false_prunes += int(out.false_prune)
                m.early_exit_per_layer[out.pruned_at[1] - 1] += out.pruned_count
        m.layer_work += tl.layer_work
        m.layer_work_full += model.layers * sum(len(o.drafted) for o in outcomes)
        m.draft_time_ms += tl.draft_time
        m.verify_time_ms += tl.verify_time
        m.prune_time_ms += tl.prune_time
        m.wasted_draft_tokens += tl.wasted_draft_tokens
        m.overlap_iterations += int(plan.enabled)
        m.iterations += 1
        makespan = tl.makespan
        m.busy_time_ms += makespan
        self.spec_hist.update(lengths)
        self.batch_hist[b] += 1
        if cfg.mode.adaptive:
            self._observe(batch, lengths, outcomes, makespan)
        if cfg.record_iterations:
            m.iteration_records.append(
                {
                    "clock_ms": clock,
                    "batch": b,
                    "lengths": lengths,
                    "overlap": plan.enabled,
                    "s_c": plan.s_c,
                    "r": r,
                    "makespan_ms": makespan,
                    "accepted": sum(o.accepted_count for o in outcomes),
                    "pruned": sum(o.pruned_count for o in outcomes),
                }
            )
        return clock + makespan

    def _finalize(self, finished: list[Request], clock: float) -> None:
        m = self.metrics
        self.finished = sorted(finished, key=lambda req: req.id)
        m.finished = len(finished)
        m.sim_time_ms = clock
        m.spec_length_hist = {str(k): v for k, v in sorted(self.spec_hist.items())}
        m.batch_size_hist = {str(k): v for k, v in sorted(self.batch_hist.items())}
        if finished:
            lat = np.array([req.finish_time - req.arrival_time for req in finished])
            tpot = lat / np.array([len(req.committed) for req in finished])
            m.mean_latency_ms = float(lat.mean())
            m.p50_latency_ms = float(np.percentile(lat, 50))
            m.p99_latency_ms = float(np.percentile(lat, 99))
            m.mean_tpot_ms = float(tpot.mean())
        if clock > 0:
            m.throughput_tok_s = m.total_tokens / (clock / 1000.0)
        busy = m.draft_time_ms + m.verify_time_ms + m.prune_time_ms
        if busy > 0:
            m.draft_share = m.draft_time_ms / busy
            m.verify_share = (m.verify_time_ms + m.prune_time_ms) / busy
        if m.drafted_tokens:
            m.acceptance_ratio = m.accepted_tokens / m.drafted_tokens
        m.conserved_tokens = m.total_tokens == sum(len(req.committed) for req in finished)
        if self.cfg.check_oracle:
            expected = 0
            for req in finished:
                oracle = self.model.autoregressive_decode(req.prompt, req.max_out)
                expected += len(oracle)
                m.oracle_checked += 1
                if req.committed != oracle:
                    m.oracle_mismatches += 1
            m.conserved_tokens = m.conserved_tokens and m.total_tokens == expected


def run(config: SimConfig) -> Metrics:
    return Simulator(config).run()
