"""YAML experiment configuration: defaults, overrides, hashing, and
construction of the simulator and profiler inputs."""

from __future__ import annotations

import copy
import hashlib
import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from specserve import overlap as ov
from specserve.drafter import DrafterConfig
from specserve.exitctl import ExitPolicy
from specserve.latmodel import DEFAULT_GROUND_TRUTH, LatencyModels, ProfileGrid, load_params
from specserve.simd import Mode, ModelConfig, SimConfig
from specserve.workload import (
    LengthDist,
    RateSpec,
    TraceParseError,
    WorkloadSpec,
    burst_workload,
    ingest_trace,
)


class ConfigError(ValueError):
    """Invalid, inconsistent or unreadable configuration."""


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "model": {
        "vocab_size": 64,
        "layers": 32,
        "order": 2,
        "seed": 0,
        "draft_divergence": 0.4,
        "logit_scale": 3.0,
        "noise_scale": 0.3,
        "draft_noise_scale": 8.0,
        "eos_bias": -1.0,
    },
    "latency": {
        # parameter files (JSON); null ground_truth = built-in defaults,
        # null fitted = controllers plan with the ground truth
        "ground_truth": None,
        "fitted": None,
    },
    "profile": {
        "sigma": 0.05,
        "heldout_fraction": 0.2,
        "batch_sizes": [4, 8, 16, 32, 64, 128, 256],
        "token_lengths": [2, 4, 6, 8, 10],
        "shares": [round(0.1 * k, 1) for k in range(1, 11)],
    },
    "drafter": {
        "candidates": [1, 2, 3, 4, 5, 6, 8, 10],
        "epsilon": 1e-6,
        "window": 64,
        "length_scale": 1.0,
        "signal_var": 1.0,
        "noise_var": 0.1,
        "beta_scale": 2.0,
        "cold_start": True,
    },
    "exit": {"l_init": 8, "k_init": 10, "k_final": 2},
    "overlap": {
        # null follows the mode
        "enabled": None,
        "r_grid": list(ov.DEFAULT_R_GRID),
    },
    "sim": {
        "mode": "FULL",
        "fixed_length": 4,
        "b_max": 256,
        "accept_window": 16,
        "accept_prior": 0.7,
        "check_oracle": True,
        "record_iterations": False,
    },
    "workload": {
        # synthetic | trace | burst
        "kind": "synthetic",
        "trace": None,
        "duration_s": 60.0,
        "rate": {
            "kind": "piecewise",
            "segments": [[10.0, 47.3], [10.0, 4.73]],
            "mean": 26.0,
            "amplitude": 0.8,
            "period_s": 20.0,
        },
        "input_len": [4, 32],
        "output_len": [16, 128],
        # burst: requests = burst_requests, or burst_per_batch * b_max if set
        "burst_requests": 64,
        "burst_per_batch": None,
        "burst_input_len": 16,
        "burst_output_len": 96,
    },
}


def _merge(base: dict, extra: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {where!r} must be a section")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    """``section.key=value`` with the value parsed as YAML."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not of the form key=value")
    return key.strip().split("."), yaml.safe_load(raw)


def _nest(path: Sequence[str], value: Any) -> dict:
    out: Any = value
    for part in reversed(path):
        out = {part: out}
    return out


@dataclass(frozen=True)
class ResolvedConfig:
    """Fully merged configuration plus the directory relative paths resolve against."""

    data: dict
    source: Path | None = None

    @property
    def base_dir(self) -> Path:
        return self.source.parent if self.source is not None else Path.cwd()

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def canonical_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def with_overrides(self, overrides: Mapping) -> ResolvedConfig:
        return ResolvedConfig(_merge(self.data, overrides), self.source)

    def resolve_path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    # -- builders -------------------------------------------------------------

    def latency_models(self, key: str) -> LatencyModels | None:
        path = self.resolve_path(self.data["latency"][key])
        if path is None:
            return None
        if not path.is_file():
            raise ConfigError(f"latency.{key}: params file {path} does not exist")
        try:
            return load_params(path)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"latency.{key}: cannot read {path}: {exc}") from exc

    def ground_truth(self) -> LatencyModels:
        return self.latency_models("ground_truth") or DEFAULT_GROUND_TRUTH

    def profile_grid(self) -> ProfileGrid:
        p = self.data["profile"]
        return ProfileGrid(
            tuple(int(b) for b in p["batch_sizes"]),
            tuple(int(s) for s in p["token_lengths"]),
            tuple(float(x) for x in p["shares"]),
        )

    def _workload(self, b_max: int):
        w = self.data["workload"]
        kind = w["kind"]
        if kind == "trace":
            path = self.resolve_path(w["trace"])
            if path is None:
                raise ConfigError("workload.kind is 'trace' but workload.trace is not set")
            if not path.is_file():
                raise ConfigError(f"trace file {path} does not exist")
            try:
                return tuple(ingest_trace(path)), WorkloadSpec()
            except TraceParseError as exc:
                raise ConfigError(str(exc)) from exc
        if kind == "burst":
            n = w["burst_requests"] if w["burst_per_batch"] is None else w["burst_per_batch"] * b_max
            trace = burst_workload(int(n), int(w["burst_input_len"]), int(w["burst_output_len"]))
            return tuple(trace), WorkloadSpec()
        if kind != "synthetic":
            raise ConfigError(f"unknown workload.kind {kind!r}")
        r = w["rate"]
        rate = RateSpec(
            kind=r["kind"],
            segments=tuple(tuple(seg) for seg in r["segments"]),
            mean=float(r["mean"]),
            amplitude=float(r["amplitude"]),
            period_s=float(r["period_s"]),
        )
        spec = WorkloadSpec(
            rate=rate,
            duration_s=float(w["duration_s"]),
            input_len=LengthDist(*map(int, w["input_len"])),
            output_len=LengthDist(*map(int, w["output_len"])),
        )
        return None, spec

    def sim_config(self) -> SimConfig:
        d = self.data
        try:
            model = ModelConfig(**d["model"])
            s = d["sim"]
            trace, workload = self._workload(int(s["b_max"]))
            return SimConfig(
                model=model,
                ground_truth=self.ground_truth(),
                fitted=self.latency_models("fitted"),
                drafter=DrafterConfig(
                    **{**d["drafter"], "candidates": tuple(d["drafter"]["candidates"])}
                ),
                exit_policy=ExitPolicy(layers=model.layers, **d["exit"]),
                r_grid=tuple(float(r) for r in d["overlap"]["r_grid"]),
                mode=Mode(s["mode"]),
                overlap=d["overlap"]["enabled"],
                fixed_length=int(s["fixed_length"]),
                b_max=int(s["b_max"]),
                accept_window=int(s["accept_window"]),
                accept_prior=float(s["accept_prior"]),
                workload=workload,
                trace=trace,
                seed=self.seed,
                check_oracle=bool(s["check_oracle"]),
                record_iterations=bool(s["record_iterations"]),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc


def load_config(
    path: Path | str | None = None, overrides: Sequence[str] = ()
) -> ResolvedConfig:
    """Defaults, then the YAML file (if any), then ``key=value`` overrides."""
    data = copy.deepcopy(DEFAULTS)
    source = None
    if path is not None:
        source = Path(path)
        if not source.is_file():
            raise ConfigError(f"config file {source} does not exist")
        try:
            loaded = yaml.safe_load(source.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        if not isinstance(loaded, Mapping):
            raise ConfigError(f"{source}: top level must be a mapping")
        data = _merge(data, loaded)
    for text in overrides:
        key, value = parse_override(text)
        data = _merge(data, _nest(key, value))
    return ResolvedConfig(data, source)
