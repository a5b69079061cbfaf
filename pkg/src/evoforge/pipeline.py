"""The evolution loop: generate children via the LM, fast-check with bounded
repair, fully evaluate through the subprocess harness contract, score,
classify, and store.

The harness is an external command rendered from a template with
``{candidate_path} {manifest_path} {metrics_out} {mode}`` placeholders;
exit 0 means a clean run and metrics arrive only via the metrics file.
"""

from __future__ import annotations

import logging
import math
import os
import random
import shlex
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from . import prompt_engine
from .integrity import ProtectedParams, Verdict, verify_report
from .lm_gateway import EmptyCompletionError, LMGateway, ModelConfig, TransportError
from .program_store import ProgramRecord, ProgramStore
from .prompt_engine import (
    FailedMatchError,
    MalformedScriptError,
    NoEditsError,
    Snippet,
    TemplatePool,
    apply_edit_script,
    build_direct_prompt,
    build_meta_prompts,
    build_repair_prompt,
    parse_edit_script,
)
from .telemetry import FrontierState, MetricsReport, parse_metrics, update_frontier

logger = logging.getLogger(__name__)

SUSPICIOUS_LOSS_FRACTION = 0.5


class NoScoreError(ValueError):
    """Report has no usable score (failed disposition or missing fields)."""


class InfrastructureError(RuntimeError):
    """The harness itself could not be launched; not a candidate failure."""


class SeedEvaluationError(RuntimeError):
    """The seed program failed its baseline full evaluation."""


@dataclass
class HarnessConfig:
    command: str = ""
    working_dir: str = "."
    fast_check_budget: float = 30.0
    fast_step_cap: int = 8
    full_eval_timeout: float = 300.0
    memory_cap_bytes: Optional[int] = None
    no_network: bool = True
    metrics_out_template: str = "metrics/{eval_id}.json"

    def validate(self) -> None:
        if not self.command:
            raise ValueError("harness.command is required")
        if self.fast_check_budget >= self.full_eval_timeout:
            raise ValueError("fast_check_budget must be strictly smaller than full_eval_timeout")


@dataclass
class RunConfig:
    model: ModelConfig
    protected: ProtectedParams
    harness: HarnessConfig
    seed_program: str = ""
    branching_factor: int = 10
    n_fast: int = 3
    meta_prompt_start_iteration: int = 20
    max_iterations: int = 10
    top_count: int = 3
    diverse_count: int = 2
    island_count: int = 4
    migration_interval: int = 10
    p_elite: float = 0.5
    archive_capacity: int = 20
    seed: int = 0
    deterministic: bool = True
    run_root: str = "runs"
    run_id: Optional[str] = None
    task: Dict[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        for name in ("branching_factor", "island_count", "migration_interval", "archive_capacity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        # max_iterations 0 is allowed: it yields a baseline-only run.
        for name in ("n_fast", "meta_prompt_start_iteration", "top_count", "diverse_count", "max_iterations"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (0.0 <= self.p_elite <= 1.0):
            raise ValueError("p_elite must lie in [0, 1]")
        if not self.seed_program:
            raise ValueError("seed_program path is required")
        self.model.validate()
        self.protected.validate()
        self.harness.validate()


# --------------------------------------------------------------------------
# Scoring and classification


def compute_score(report: MetricsReport) -> float:
    """Combined score: step-average time times final validation loss (lower wins)."""
    if report.exit_disposition != "ok":
        raise NoScoreError(f"disposition {report.exit_disposition!r} yields no score")
    if report.step_avg_time is None or report.final_val_loss is None:
        raise NoScoreError("step_avg_time and final_val_loss required for scoring")
    return report.step_avg_time * report.final_val_loss


def is_suspicious(report: MetricsReport, loss_threshold: float) -> bool:
    if report.final_val_loss is None:
        return False
    return report.final_val_loss < SUSPICIOUS_LOSS_FRACTION * loss_threshold


def classify(report: MetricsReport, protected: ProtectedParams, verdict: Optional[Verdict] = None) -> str:
    if verdict is None:
        verdict = verify_report(report, protected)
    if report.exit_disposition != "ok" or not verdict.ok:
        return "buggy"
    if report.final_val_loss is None or report.final_val_loss > protected.loss_threshold:
        return "over_threshold"
    return "acceptable"


# --------------------------------------------------------------------------
# Harness subprocess contract


@dataclass
class FastResult:
    passed: bool
    error_text: str = ""
    timed_out: bool = False


@dataclass
class EvalOutcome:
    exit_code: int
    stderr: str
    timed_out: bool
    metrics_path: Path


class HarnessRunner:
    def __init__(self, cfg: HarnessConfig, manifest_path: Path, run_root: Path):
        self.cfg = cfg
        self.manifest_path = manifest_path
        self.run_root = run_root
        (run_root / "metrics").mkdir(parents=True, exist_ok=True)

    def _command(self, candidate_path: Path, metrics_out: Path, mode: str) -> List[str]:
        rendered = self.cfg.command.format(
            candidate_path=str(candidate_path),
            manifest_path=str(self.manifest_path),
            metrics_out=str(metrics_out),
            mode=mode,
        )
        return shlex.split(rendered)

    def _env(self) -> Dict[str, str]:
        env = dict(os.environ)
        if self.cfg.no_network:
            for var in ("HTTP_PROXY", "HTTPS_PROXY", "http_proxy", "https_proxy"):
                env.pop(var, None)
            env["EVOFORGE_NO_NETWORK"] = "1"
        return env

    def _preexec(self):
        cap = self.cfg.memory_cap_bytes
        if cap is None:
            return None

        def set_limits():
            try:
                import resource

                resource.setrlimit(resource.RLIMIT_AS, (cap, cap))
            except (ImportError, ValueError, OSError):
                pass

        return set_limits

    def run(self, candidate_path: Path, metrics_out: Path, mode: str) -> EvalOutcome:
        timeout = self.cfg.fast_check_budget if mode == "fast" else self.cfg.full_eval_timeout
        cmd = self._command(candidate_path, metrics_out, mode)
        try:
            proc = subprocess.run(
                cmd,
                cwd=self.cfg.working_dir,
                env=self._env(),
                capture_output=True,
                text=True,
                timeout=timeout,
                preexec_fn=self._preexec(),
            )
        except subprocess.TimeoutExpired as exc:
            stderr = exc.stderr.decode() if isinstance(exc.stderr, bytes) else (exc.stderr or "")
            return EvalOutcome(exit_code=-1, stderr=stderr, timed_out=True, metrics_path=metrics_out)
        except (OSError, FileNotFoundError) as exc:
            raise InfrastructureError(f"cannot launch harness {cmd!r}: {exc}") from exc
        return EvalOutcome(exit_code=proc.returncode, stderr=proc.stderr, timed_out=False, metrics_path=metrics_out)


def fast_check(runner: HarnessRunner, candidate_path: Path, metrics_out: Path) -> FastResult:
    outcome = runner.run(candidate_path, metrics_out, "fast")
    if outcome.timed_out:
        return FastResult(False, f"fast check exceeded {runner.cfg.fast_check_budget}s budget", timed_out=True)
    if outcome.exit_code != 0:
        return FastResult(False, outcome.stderr or f"harness exited {outcome.exit_code}")
    return FastResult(True)


def repair_loop(
    candidate_source: str,
    n_fast: int,
    gateway: LMGateway,
    runner: HarnessRunner,
    error_text: str,
    workdir: Path,
    child_id: str,
    journal=lambda event: None,
) -> Tuple[Optional[str], str]:
    """At most n_fast repair attempts (one LM completion each). Returns
    (fixed source, "") on success, (None, last error) on failure."""
    source = candidate_source
    last_error = error_text
    for attempt in range(n_fast):
        bundle = build_repair_prompt(source, last_error)
        try:
            completion = gateway.complete(bundle)
            script = parse_edit_script(completion.response_text)
            source = apply_edit_script(source, script)
        except (EmptyCompletionError, TransportError, NoEditsError, MalformedScriptError, FailedMatchError) as exc:
            journal({"event": "repair_attempt", "child": child_id, "attempt": attempt, "result": f"edit-failure: {exc}"})
            last_error = str(exc)
            continue
        attempt_path = workdir / f"{child_id}.r{attempt}.py"
        attempt_path.write_text(source, encoding="utf-8")
        result = fast_check(runner, attempt_path, runner.run_root / "metrics" / f"{child_id}.r{attempt}.json")
        journal(
            {
                "event": "repair_attempt",
                "child": child_id,
                "attempt": attempt,
                "result": "pass" if result.passed else "fail",
            }
        )
        if result.passed:
            return source, ""
        last_error = result.error_text
    return None, last_error


# --------------------------------------------------------------------------
# Generation loop


@dataclass
class ChildPlan:
    index: int
    island_id: int
    parent: ProgramRecord
    use_meta: bool
    top_ids: List[str]
    diverse_ids: List[str]


def _snippet(record: ProgramRecord) -> Snippet:
    parts = []
    if record.score is not None:
        parts.append(f"score={record.score:.6g}")
    if record.metrics is not None:
        if record.metrics.final_val_loss is not None:
            parts.append(f"loss={record.metrics.final_val_loss:.6g}")
        if record.metrics.step_avg_time is not None:
            parts.append(f"step_avg={record.metrics.step_avg_time:.6g}s")
        top_sections = sorted(record.metrics.sections, key=lambda s: -s.pct_of_total)[:3]
        if top_sections:
            parts.append("hot=" + ",".join(f"{s.name}:{s.pct_of_total:.1f}%" for s in top_sections))
    return Snippet(source=record.source, summary="; ".join(parts) or "unscored")


class EvolutionEngine:
    def __init__(self, config: RunConfig, run_root: Path, gateway: LMGateway, store: ProgramStore):
        config.validate()
        self.config = config
        self.run_root = run_root
        self.gateway = gateway
        self.store = store
        self.frontier = FrontierState()
        self.pool = TemplatePool()
        self.candidates_dir = run_root / "candidates"
        self.candidates_dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = run_root / "manifest.yaml"
        if not self.manifest_path.exists():
            manifest = {"protected": config.protected.to_dict(), "task": config.task}
            self.manifest_path.write_text(yaml.safe_dump(manifest, sort_keys=True), encoding="utf-8")
        self.runner = HarnessRunner(config.harness, self.manifest_path, run_root)
        self.generation_counts: Dict[int, Dict[str, int]] = {}

    # -- record insertion with frontier maintenance -------------------------

    def _insert(self, record: ProgramRecord) -> None:
        self.store.insert_program(record)
        if record.score is not None:
            self.frontier = update_frontier(self.frontier, record)

    # -- full evaluation -----------------------------------------------------

    def _full_evaluate(self, child_id: str, source: str) -> Tuple[str, Optional[MetricsReport], Optional[float]]:
        """Run full evaluation; returns (status, metrics, score)."""
        candidate_path = self.candidates_dir / f"{child_id}.py"
        candidate_path.write_text(source, encoding="utf-8")
        metrics_out = self.run_root / "metrics" / f"{child_id}.full.json"
        outcome = self.runner.run(candidate_path, metrics_out, "full")
        if outcome.timed_out:
            self.store.append_event({"event": "eval_timeout", "child": child_id})
            return "buggy", None, None
        report: Optional[MetricsReport] = None
        if metrics_out.exists():
            try:
                report = parse_metrics(metrics_out.read_bytes())
            except ValueError as exc:
                self.store.append_event({"event": "bad_metrics", "child": child_id, "error": str(exc)})
                return "buggy", None, None
        if report is None:
            return "buggy", None, None
        if outcome.exit_code != 0 and report.exit_disposition == "ok":
            # Harness crashed after writing an "ok" report; do not trust it.
            return "buggy", report, None
        verdict = verify_report(report, self.config.protected)
        if not verdict.ok:
            self.store.append_event(
                {"event": "integrity_violation", "child": child_id, "violations": verdict.violations}
            )
        status = classify(report, self.config.protected, verdict)
        score = None
        if status in ("over_threshold", "acceptable"):
            score = compute_score(report)
            if is_suspicious(report, self.config.protected.loss_threshold):
                self.store.append_event(
                    {"event": "suspicious_loss", "child": child_id, "final_val_loss": report.final_val_loss}
                )
        return status, report, score

    # -- one generation ------------------------------------------------------

    def run_generation(self, cycle_index: int) -> List[ProgramRecord]:
        cfg = self.config
        rng = random.Random(f"{cfg.seed}:{cycle_index}")
        plans: List[ChildPlan] = []
        for j in range(cfg.branching_factor):
            island_id = j % cfg.island_count
            parent = self.store.sample_parent(island_id, rng)
            top_ids, diverse_ids = self.store.sample_inspirations(cfg.top_count, cfg.diverse_count, parent.id, rng)
            plans.append(
                ChildPlan(
                    index=j,
                    island_id=island_id,
                    parent=parent,
                    use_meta=cycle_index >= cfg.meta_prompt_start_iteration,
                    top_ids=top_ids,
                    diverse_ids=diverse_ids,
                )
            )

        children: List[ProgramRecord] = []
        infra_errors = 0
        for plan in plans:
            child_id = f"g{cycle_index:03d}c{plan.index:02d}"
            try:
                record = self._produce_child(cycle_index, child_id, plan, rng)
            except InfrastructureError as exc:
                infra_errors += 1
                self.store.append_event({"event": "infrastructure_error", "child": child_id, "error": str(exc)})
                continue
            self._insert(record)
            children.append(record)

        self.store.migrate(cycle_index)

        counts = {"buggy": 0, "over_threshold": 0, "acceptable": 0}
        for rec in children:
            counts[rec.status] += 1
        self.generation_counts[cycle_index] = counts
        degraded = infra_errors >= math.ceil(cfg.branching_factor / 2)
        self.store.append_event(
            {
                "event": "generation_commit",
                "cycle_index": cycle_index,
                "counts": counts,
                "infrastructure_errors": infra_errors,
                "degraded": degraded,
            }
        )
        return children

    def _produce_child(
        self, cycle_index: int, child_id: str, plan: ChildPlan, rng: random.Random
    ) -> ProgramRecord:
        cfg = self.config
        generation = max(cycle_index, plan.parent.generation + 1)
        child_rng = random.Random(f"{cfg.seed}:{cycle_index}:{plan.index}:fallback")
        top = [_snippet(self.store.get(rid)) for rid in plan.top_ids]
        diverse = [_snippet(self.store.get(rid)) for rid in plan.diverse_ids]

        def buggy(reason: str) -> ProgramRecord:
            self.store.append_event({"event": "child_failed", "child": child_id, "reason": reason})
            return ProgramRecord(
                id=child_id,
                island_id=plan.island_id,
                generation=generation,
                source=plan.parent.source,
                status="buggy",
                parent_id=plan.parent.id,
            )

        # Prompt + completion
        try:
            if plan.use_meta:
                stage1, stage2 = build_meta_prompts(plan.parent.source, top, diverse, rng)
                idea = self.gateway.complete(stage1).response_text.strip()
                if idea:
                    bundle = stage2(idea)
                else:
                    bundle = build_direct_prompt(plan.parent.source, top, diverse, child_rng, self.pool)
            else:
                bundle = build_direct_prompt(plan.parent.source, top, diverse, rng, self.pool)
            completion = self.gateway.complete(bundle)
        except (EmptyCompletionError, TransportError) as exc:
            return buggy(f"completion-failure: {exc}")
        self.store.append_event(
            {
                "event": "child_prompted",
                "child": child_id,
                "kind": bundle.kind,
                "template_id": bundle.template_id,
                "parent_id": plan.parent.id,
                "prompt_hash": completion.prompt_hash,
            }
        )

        # Edit application
        try:
            script = parse_edit_script(completion.response_text)
            child_source = apply_edit_script(
                plan.parent.source, script,
                on_warning=lambda msg: self.store.append_event(
                    {"event": "ambiguous_match", "child": child_id, "detail": msg}
                ),
            )
        except (NoEditsError, MalformedScriptError, FailedMatchError) as exc:
            return buggy(f"edit-failure: {exc}")

        # Fast check with bounded repair
        candidate_path = self.candidates_dir / f"{child_id}.py"
        candidate_path.write_text(child_source, encoding="utf-8")
        result = fast_check(self.runner, candidate_path, self.run_root / "metrics" / f"{child_id}.fast.json")
        if not result.passed:
            fixed, last_error = repair_loop(
                child_source,
                cfg.n_fast,
                self.gateway,
                self.runner,
                result.error_text,
                self.candidates_dir,
                child_id,
                journal=self.store.append_event,
            )
            if fixed is None:
                record = buggy(f"fast-check-failure: {last_error[:500]}")
                record.source = child_source
                return record
            child_source = fixed

        # Full evaluation
        status, report, score = self._full_evaluate(child_id, child_source)
        return ProgramRecord(
            id=child_id,
            island_id=plan.island_id,
            generation=generation,
            source=child_source,
            status=status,
            parent_id=plan.parent.id,
            metrics=report,
            score=score,
        )

    # -- seed + whole run ----------------------------------------------------

    def evaluate_seed(self) -> ProgramRecord:
        seed_source = Path(self.config.seed_program).read_text(encoding="utf-8")
        status, report, score = self._full_evaluate("seed", seed_source)
        if status == "buggy" or report is None:
            raise SeedEvaluationError(
                "seed program failed baseline evaluation "
                f"(status={status}); cannot establish a baseline score"
            )
        first: Optional[ProgramRecord] = None
        for island_id in range(self.config.island_count):
            rec = ProgramRecord(
                id=f"seed-{island_id}",
                island_id=island_id,
                generation=0,
                source=seed_source,
                status=status,
                metrics=report,
                score=score,
            )
            self._insert(rec)
            if first is None:
                first = rec
        return first


@dataclass
class RunSummary:
    run_id: str
    root: str
    frontier: FrontierState
    generation_counts: Dict[int, Dict[str, int]]
    total_lm_calls: int
    completed_iterations: int


def _logical_clock():
    state = {"t": 0.0}

    def tick() -> float:
        state["t"] += 1.0
        return state["t"]

    return tick


def prepare_run(config: RunConfig, resume: bool = False) -> Tuple[Path, ProgramStore, LMGateway]:
    config.validate()
    run_id = config.run_id or "run"
    run_root = Path(config.run_root) / run_id
    run_root.mkdir(parents=True, exist_ok=True)
    clock = _logical_clock() if config.deterministic else time.time
    if resume and (run_root / "journal.ndjson").exists():
        store = ProgramStore.load(
            run_root,
            island_count=config.island_count,
            archive_capacity=config.archive_capacity,
            p_elite=config.p_elite,
            migration_interval=config.migration_interval,
        )
        store.clock = clock
        if config.deterministic and store.records:
            # Fast-forward the logical clock past every persisted timestamp.
            last = max(rec.created_at for rec in store.records.values())
            while clock() < last:
                pass
            store.clock = clock
    else:
        store = ProgramStore(
            island_count=config.island_count,
            archive_capacity=config.archive_capacity,
            p_elite=config.p_elite,
            migration_interval=config.migration_interval,
            root=run_root,
            clock=clock,
        )
    gateway = LMGateway(config.model, log_path=run_root / "completions.ndjson")
    return run_root, store, gateway


def completed_cycles(run_root: Path) -> int:
    journal = run_root / "journal.ndjson"
    last = 0
    if journal.exists():
        import json as _json

        for line in journal.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            event = _json.loads(line)
            if event.get("event") == "generation_commit":
                last = max(last, int(event["cycle_index"]))
    return last


def run_evolution(config: RunConfig, resume: bool = False) -> RunSummary:
    run_root, store, gateway = prepare_run(config, resume=resume)
    engine = EvolutionEngine(config, run_root, gateway, store)
    start_cycle = 1
    if resume and store.records:
        # Rebuild the frontier by replaying scored records in insertion order.
        for rec in sorted(store.all_records(), key=lambda r: r.created_at):
            if rec.score is not None:
                engine.frontier = update_frontier(engine.frontier, rec)
        start_cycle = completed_cycles(run_root) + 1
    else:
        engine.evaluate_seed()
        store.append_event({"event": "run_started", "seed": config.seed})
    for cycle in range(start_cycle, config.max_iterations + 1):
        engine.run_generation(cycle)
    store.append_event({"event": "run_complete", "iterations": config.max_iterations})
    return RunSummary(
        run_id=config.run_id or "run",
        root=str(run_root),
        frontier=engine.frontier,
        generation_counts=engine.generation_counts,
        total_lm_calls=gateway.total_calls,
        completed_iterations=config.max_iterations,
    )
