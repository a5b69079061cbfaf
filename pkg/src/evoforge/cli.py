"""Configuration loading, run lifecycle, and the operator command line.

Exit codes: 0 success, 1 candidate-level failure (seed or verification
failure), 2 infrastructure or configuration failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import re
import sys
from dataclasses import fields as dc_fields
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .integrity import ManifestError, ProtectedParams, default_protected, verify_report
from .lm_gateway import ModelConfig
from .pipeline import (
    EvolutionEngine,
    HarnessConfig,
    RunConfig,
    SeedEvaluationError,
    completed_cycles,
    prepare_run,
    run_evolution,
)
from .program_store import ProgramStore
from .telemetry import (
    FrontierState,
    parse_metrics,
    render_report_ndjson,
    render_report_text,
    render_run_report,
    update_frontier,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CANDIDATE = 1
EXIT_INFRA = 2

_ENV_REF = re.compile(r"^\$\{([A-Za-z_][A-Za-z0-9_]*)\}$")


class ConfigError(ValueError):
    pass


def _check_keys(raw: Dict[str, Any], allowed: set, context: str) -> None:
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in {context}")


def _interpolate_credentials(raw: Dict[str, Any]) -> Dict[str, Any]:
    # Interpolation is restricted to the model section (credential material).
    out = dict(raw)
    for key, value in out.items():
        if isinstance(value, str):
            m = _ENV_REF.match(value)
            if m:
                out[key] = os.environ.get(m.group(1), "")
    return out


def config_from_dict(raw: Dict[str, Any]) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a mapping")
    top_allowed = {f.name for f in dc_fields(RunConfig)}
    _check_keys(raw, top_allowed, "config")
    for required in ("model", "harness"):
        if required not in raw:
            raise ConfigError(f"missing required section '{required}'")

    model_raw = _interpolate_credentials(dict(raw["model"]))
    _check_keys(model_raw, {f.name for f in dc_fields(ModelConfig)}, "model")
    model = ModelConfig(**model_raw)

    if "protected" in raw:
        try:
            protected = ProtectedParams.from_dict(raw["protected"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad protected section: {exc}") from exc
    else:
        protected = default_protected()

    harness_raw = dict(raw["harness"])
    _check_keys(harness_raw, {f.name for f in dc_fields(HarnessConfig)}, "harness")
    harness = HarnessConfig(**harness_raw)

    rest = {k: v for k, v in raw.items() if k not in ("model", "protected", "harness")}
    config = RunConfig(model=model, protected=protected, harness=harness, **rest)
    try:
        config.validate()
    except (ValueError, ManifestError) as exc:
        raise ConfigError(str(exc)) from exc
    return config


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for f in dc_fields(RunConfig):
        value = getattr(config, f.name)
        if f.name == "model":
            out["model"] = {mf.name: getattr(value, mf.name) for mf in dc_fields(ModelConfig)}
        elif f.name == "protected":
            out["protected"] = value.to_dict()
        elif f.name == "harness":
            out["harness"] = {hf.name: getattr(value, hf.name) for hf in dc_fields(HarnessConfig)}
        else:
            out[f.name] = value
    return out


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(raw or {})


def config_digest(config: RunConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# Run lifecycle


class LockHeldError(RuntimeError):
    pass


class RunLock:
    """One active writer per run directory."""

    def __init__(self, run_root: Path):
        self.path = run_root / "LOCK"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockHeldError(f"run directory is locked by another writer: {self.path}") from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except OSError:
            pass
        return False


def _write_handle(run_root: Path, run_id: str, state: str, digest: str) -> None:
    (run_root / "handle.json").write_text(
        json.dumps({"run_id": run_id, "state": state, "config_digest": digest}, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def _resolve_run_id(config: RunConfig) -> str:
    return config.run_id or f"run-{config_digest(config)[:8]}"


def _rebuild_frontier(store: ProgramStore) -> FrontierState:
    frontier = FrontierState()
    for rec in sorted(store.all_records(), key=lambda r: r.created_at):
        if rec.score is not None:
            frontier = update_frontier(frontier, rec)
    return frontier


# --------------------------------------------------------------------------
# Subcommands


def cmd_run(args) -> int:
    config = load_config(args.config)
    config.run_id = _resolve_run_id(config)
    run_root = Path(config.run_root) / config.run_id
    run_root.mkdir(parents=True, exist_ok=True)
    digest = config_digest(config)
    with RunLock(run_root):
        _write_handle(run_root, config.run_id, "running", digest)
        (run_root / "config.yaml").write_text(
            yaml.safe_dump(config_to_dict(config), sort_keys=True), encoding="utf-8"
        )
        try:
            summary = run_evolution(config)
        except SeedEvaluationError as exc:
            _write_handle(run_root, config.run_id, "interrupted", digest)
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CANDIDATE
        _write_handle(run_root, config.run_id, "complete", digest)
    print(f"run {summary.run_id} complete: {summary.completed_iterations} iterations, "
          f"{summary.total_lm_calls} LM calls")
    best = summary.frontier.best_score
    if best != float("inf"):
        print(f"best score: {best:.9g}")
    return EXIT_OK


def cmd_resume(args) -> int:
    run_root = Path(args.run_root) / args.run_id
    config_path = run_root / "config.yaml"
    if args.config:
        config_path = Path(args.config)
    if not config_path.exists():
        print(f"error: no config found for run {args.run_id}", file=sys.stderr)
        return EXIT_INFRA
    config = load_config(config_path)
    config.run_id = args.run_id
    config.run_root = args.run_root
    handle_path = run_root / "handle.json"
    digest = config_digest(config)
    if handle_path.exists():
        handle = json.loads(handle_path.read_text(encoding="utf-8"))
        if handle.get("config_digest") != digest and not args.allow_config_change:
            print("error: config digest mismatch; pass --allow-config-change to override", file=sys.stderr)
            return EXIT_INFRA
    with RunLock(run_root):
        _write_handle(run_root, args.run_id, "running", digest)
        try:
            summary = run_evolution(config, resume=True)
        except SeedEvaluationError as exc:
            _write_handle(run_root, args.run_id, "interrupted", digest)
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CANDIDATE
        _write_handle(run_root, args.run_id, "complete", digest)
    print(f"run {summary.run_id} resumed and complete ({summary.completed_iterations} iterations)")
    return EXIT_OK


def cmd_report(args) -> int:
    run_root = Path(args.run_root) / args.run_id
    if not run_root.exists():
        print(f"error: run directory not found: {run_root}", file=sys.stderr)
        return EXIT_INFRA
    store = ProgramStore.load(run_root)
    frontier = _rebuild_frontier(store)
    report = render_run_report(store, frontier)
    text = render_report_text(report)
    (run_root / "report.txt").write_text(text, encoding="utf-8")
    (run_root / "report.ndjson").write_text(render_report_ndjson(report), encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    config = load_config(args.config)
    metrics_path = Path(args.metrics)
    if not metrics_path.exists():
        print(f"error: metrics file not found: {metrics_path}", file=sys.stderr)
        return EXIT_INFRA
    try:
        report = parse_metrics(metrics_path.read_bytes())
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CANDIDATE
    verdict = verify_report(report, config.protected)
    if verdict.ok:
        print("ok: attestation matches the protected-parameter manifest")
        return EXIT_OK
    print("integrity violations: " + ", ".join(verdict.violations))
    return EXIT_CANDIDATE


def cmd_bench_seed(args) -> int:
    config = load_config(args.config)
    config.run_id = (config.run_id or _resolve_run_id(config)) + "-bench"
    run_root, store, gateway = prepare_run(config)
    engine = EvolutionEngine(config, run_root, gateway, store)
    try:
        seed = engine.evaluate_seed()
    except SeedEvaluationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CANDIDATE
    m = seed.metrics
    print(f"seed status: {seed.status}")
    print(f"score: {seed.score:.9g}")
    print(f"final_val_loss: {m.final_val_loss:.6f}  step_avg_time: {m.step_avg_time:.6f}s  "
          f"total_train_time: {m.total_train_time:.3f}s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evoforge", description="Evolutionary program-search engine")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("run", help="start a new evolution run")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", help="resume an interrupted run")
    p.add_argument("run_id")
    p.add_argument("--run-root", default="runs")
    p.add_argument("--config", default=None)
    p.add_argument("--allow-config-change", action="store_true")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("report", help="render run report")
    p.add_argument("run_id")
    p.add_argument("--run-root", default="runs")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="integrity-check a single metrics report")
    p.add_argument("metrics")
    p.add_argument("config")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench-seed", help="evaluate only the seed program")
    p.add_argument("config")
    p.set_defaults(func=cmd_bench_seed)

    return parser


def cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_INFRA
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFRA
    except (ConfigError, ManifestError, LockHeldError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFRA


def main() -> None:
    logging.basicConfig(level=os.environ.get("EVOFORGE_LOG_LEVEL", "INFO"))
    sys.exit(cli())


if __name__ == "__main__":
    main()
