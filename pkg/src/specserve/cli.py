"""Command-line harness: ``profile``, ``simulate``, ``sweep`` and ``ablate``.

Every command writes ``manifest.json`` into its output directory before
anything else; all results are JSON or CSV files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

from specserve.config import ConfigError, ResolvedConfig, load_config
from specserve.latmodel import FitError, profile_and_fit, save_params, save_samples
from specserve.simd import LADDER, Metrics, run

log = logging.getLogger("specserve")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_ORACLE = 3

SWEEP_COLUMNS = (
    "axis",
    "value",
    "mean_latency_ms",
    "mean_tpot_ms",
    "throughput_tok_s",
    "verify_share",
    "acceptance_ratio",
)
ABLATION_COLUMNS = (
    "mode",
    "mean_latency_ms",
    "p99_latency_ms",
    "mean_tpot_ms",
    "throughput_tok_s",
    "acceptance_ratio",
    "layer_work",
    "oracle_mismatches",
)


class OracleMismatch(RuntimeError):
    pass


@dataclass(frozen=True)
class RunManifest:
    config_path: str | None
    config_hash: str
    seed: int
    out_dir: str
    command: str
    timestamp: str

    def write(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        text = json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"
        (out_dir / "manifest.json").write_text(text, encoding="utf-8")


def _manifest(cfg: ResolvedConfig, out_dir: Path, command: str) -> RunManifest:
    return RunManifest(
        config_path=str(cfg.source) if cfg.source is not None else None,
        config_hash=cfg.hash(),
        seed=cfg.seed,
        out_dir=str(out_dir),
        command=command,
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )


def _scalar_summary(m: Metrics) -> dict:
    return {k: v for k, v in m.summary().items() if not isinstance(v, (list, dict))}


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _simulate_into(cfg: ResolvedConfig, out_dir: Path) -> Metrics:
    sim_cfg = cfg.sim_config()
    if sim_cfg.fitted is None:
        log.info("no fitted latency params configured; controllers use the ground truth")
    metrics = run(sim_cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write(out_dir / "metrics.jsonl")
    summary = _scalar_summary(metrics)
    _write_csv(out_dir / "summary.csv", sorted(summary), [summary])
    return metrics


def _check_oracle(metrics: Metrics, label: str) -> None:
    if metrics.oracle_mismatches:
        raise OracleMismatch(
            f"{label}: {metrics.oracle_mismatches} of {metrics.oracle_checked} outputs differ from the oracle"
        )


# -- commands -------------------------------------------------------------------


def cmd_profile(cfg: ResolvedConfig, out_dir: Path) -> int:
    p = cfg.data["profile"]
    report = profile_and_fit(
        cfg.ground_truth(),
        cfg.profile_grid(),
        sigma=float(p["sigma"]),
        seed=cfg.seed,
        heldout_fraction=float(p["heldout_fraction"]),
    )
    save_samples(out_dir / "profile_samples.json", report.samples)
    save_params(out_dir / "params.json", report.models)
    _write_csv(
        out_dir / "mape.csv",
        ("stage", "mape"),
        [{"stage": k, "mape": v} for k, v in report.mape.items()],
    )
    for stage, err in report.mape.items():
        log.info("%s: held-out MAPE %.4f", stage, err)
    return EXIT_OK


def cmd_simulate(cfg: ResolvedConfig, out_dir: Path, oracle_check: bool = False) -> int:
    if oracle_check:
        cfg = cfg.with_overrides({"sim": {"check_oracle": True}})
    metrics = _simulate_into(cfg, out_dir)
    log.info(
        "%s: %d requests, mean latency %.1f ms, tpot %.2f ms",
        metrics.mode,
        metrics.finished,
        metrics.mean_latency_ms,
        metrics.mean_tpot_ms,
    )
    if oracle_check:
        _check_oracle(metrics, metrics.mode)
    return EXIT_OK


def _axis_override(axis: str, value: float) -> dict:
    if axis == "batch":
        return {"sim": {"b_max": int(value)}}
    if axis == "spec_length":
        # a length sweep is a fixed-length study
        return {"sim": {"fixed_length": int(value), "mode": "VSD"}}
    if axis == "sm_split":
        if not 0.0 < value < 1.0:
            raise ConfigError(f"sm_split values must lie in (0, 1), got {value}")
        return {"overlap": {"enabled": True, "r_grid": [float(value)]}}
    raise ConfigError(f"unknown sweep axis {axis!r}")


def cmd_sweep(
    cfg: ResolvedConfig,
    axis: str,
    values: Sequence[float],
    out_dir: Path,
    oracle_check: bool = False,
) -> int:
    if not values:
        raise ConfigError("sweep needs at least one value")
    rows = []
    for value in values:
        run_cfg = cfg.with_overrides(_axis_override(axis, value))
        if oracle_check:
            run_cfg = run_cfg.with_overrides({"sim": {"check_oracle": True}})
        label = f"{axis}_{value:g}"
        metrics = _simulate_into(run_cfg, out_dir / "runs" / label)
        if oracle_check:
            _check_oracle(metrics, label)
        rows.append({"axis": axis, "value": f"{value:g}", **metrics.summary()})
        log.info("%s: tpot %.2f ms, verify share %.3f", label, metrics.mean_tpot_ms, metrics.verify_share)
    _write_csv(out_dir / "sweep.csv", SWEEP_COLUMNS, rows)
    return EXIT_OK


def cmd_ablate(cfg: ResolvedConfig, out_dir: Path, oracle_check: bool = False) -> int:
    rows = []
    for mode in LADDER:
        run_cfg = cfg.with_overrides({"sim": {"mode": mode.value}})
        if oracle_check:
            run_cfg = run_cfg.with_overrides({"sim": {"check_oracle": True}})
        metrics = _simulate_into(run_cfg, out_dir / "runs" / mode.value)
        if oracle_check:
            _check_oracle(metrics, mode.value)
        rows.append({"mode": mode.value, **metrics.summary()})
        log.info("%s: mean latency %.1f ms", mode.value, metrics.mean_latency_ms)
    _write_csv(out_dir / "ablation.csv", ABLATION_COLUMNS, rows)
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


def _values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key, e.g. sim.b_max=64 (repeatable)",
    )
    common.add_argument("-v", "--verbose", action="store_true")

    oracle = argparse.ArgumentParser(add_help=False)
    oracle.add_argument(
        "--oracle-check",
        action="store_true",
        help="compare every output with greedy decoding; exit nonzero on any mismatch",
    )

    parser = argparse.ArgumentParser(prog="specserve", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("profile", parents=[common], help="synthesize profiles and fit latency models")
    sim = sub.add_parser("simulate", parents=[common, oracle], help="run one simulation")
    sim.add_argument("--params", type=Path, help="fitted latency params (from `profile`)")
    sim.add_argument("--mode", choices=[m.value for m in LADDER])
    sweep = sub.add_parser("sweep", parents=[common, oracle], help="one simulation per axis value")
    sweep.add_argument("--axis", required=True, choices=("batch", "spec_length", "sm_split"))
    sweep.add_argument("--values", required=True, type=_values)
    sub.add_parser("ablate", parents=[common, oracle], help="run VSD, VSD_AD, VSD_AD_EE and FULL")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "mode", None):
        overrides.append(f"sim.mode={args.mode}")
    if getattr(args, "params", None):
        overrides.append(f"latency.fitted={args.params.resolve()}")
    try:
        cfg = load_config(args.config, overrides)
        out_dir: Path = args.out
        _manifest(cfg, out_dir, " ".join(["specserve", *(argv if argv is not None else sys.argv[1:])])).write(out_dir)
        oracle_check = getattr(args, "oracle_check", False)
        if args.command == "profile":
            return cmd_profile(cfg, out_dir)
        if args.command == "simulate":
            return cmd_simulate(cfg, out_dir, oracle_check)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.axis, args.values, out_dir, oracle_check)
        return cmd_ablate(cfg, out_dir, oracle_check)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except OracleMismatch as exc:
        log.error("oracle check failed: %s", exc)
        return EXIT_ORACLE
    except (FitError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
