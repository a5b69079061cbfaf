"""Metrics schema, report parsing/validation, and efficiency-frontier tracking.

The metrics JSON contract is the single source of truth shared with the
evaluation harness: field names and invariants here are exact, and
serialization is canonical (stable key order, decimal seconds) so golden
fixtures round-trip byte-stably.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)

SECTION_NAMES = ("forward", "backward", "optimizer", "data_loading")
TABLE_CAP = 15

DISPOSITIONS = ("ok", "nonzero_exit", "timeout", "crash")

SECTION_TOLERANCE = 1e-6


class SchemaError(ValueError):
    """A required field is missing or has the wrong shape."""

    def __init__(self, field_name: str, detail: str = ""):
        self.field_name = field_name
        super().__init__(f"metrics schema error at '{field_name}'" + (f": {detail}" if detail else ""))


class MetricsValidationError(ValueError):
    """A structural invariant of the report is violated."""

    def __init__(self, field_name: str, detail: str):
        self.field_name = field_name
        super().__init__(f"metrics invariant violated at '{field_name}': {detail}")


@dataclass
class SectionProfile:
    name: str
    total_time: float
    avg_time: float
    pct_of_total: float
    call_count: int

    def validate(self) -> None:
        if self.call_count <= 0:
            raise MetricsValidationError("sections", f"{self.name}: call_count must be positive")
        if not (0.0 <= self.pct_of_total <= 100.0):
            raise MetricsValidationError("sections", f"{self.name}: pct_of_total out of [0,100]")
        expected = self.avg_time * self.call_count
        scale = max(abs(self.total_time), abs(expected), 1e-30)
        if abs(expected - self.total_time) / scale > SECTION_TOLERANCE:
            raise MetricsValidationError(
                "sections", f"{self.name}: avg_time*call_count != total_time (rel > {SECTION_TOLERANCE})"
            )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "total_time": self.total_time,
            "avg_time": self.avg_time,
            "pct_of_total": self.pct_of_total,
            "call_count": self.call_count,
        }


@dataclass
class TableEntry:
    name: str
    total_time: float
    call_count: int

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "total_time": self.total_time, "call_count": self.call_count}


@dataclass
class Checkpoint:
    step: int
    step_avg_time: float
    val_loss: float

    def to_dict(self) -> Dict[str, Any]:
        return {"step": self.step, "step_avg_time": self.step_avg_time, "val_loss": self.val_loss}


@dataclass
class Attestation:
    manifest_digest: str
    attested: Dict[str, Any]

    def to_dict(self) -> Dict[str, Any]:
        return {"manifest_digest": self.manifest_digest, "attested": self.attested}


@dataclass
class MetricsReport:
    exit_disposition: str
    final_val_loss: Optional[float] = None
    total_train_time: Optional[float] = None
    step_avg_time: Optional[float] = None
    iterations: Optional[int] = None
    checkpoints: List[Checkpoint] = field(default_factory=list)
    sections: List[SectionProfile] = field(default_factory=list)
    kernel_table: List[TableEntry] = field(default_factory=list)
    cpu_op_table: List[TableEntry] = field(default_factory=list)
    throughput_tokens_per_s: Optional[float] = None
    peak_memory_bytes: Optional[int] = None
    attestation: Optional[Attestation] = None
    extras: Dict[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.exit_disposition == "ok"

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "final_val_loss": self.final_val_loss,
            "total_train_time": self.total_train_time,
            "step_avg_time": self.step_avg_time,
            "iterations": self.iterations,
            "checkpoints": [c.to_dict() for c in self.checkpoints],
            "sections": [s.to_dict() for s in self.sections],
            "kernel_table": [e.to_dict() for e in self.kernel_table],
            "cpu_op_table": [e.to_dict() for e in self.cpu_op_table],
            "throughput_tokens_per_s": self.throughput_tokens_per_s,
            "peak_memory_bytes": self.peak_memory_bytes,
            "attestation": self.attestation.to_dict() if self.attestation else None,
            "exit_disposition": self.exit_disposition,
        }
        for key, value in sorted(self.extras.items()):
            out[key] = value
        return out


_KNOWN_FIELDS = {
    "final_val_loss",
    "total_train_time",
    "step_avg_time",
    "iterations",
    "checkpoints",
    "sections",
    "kernel_table",
    "cpu_op_table",
    "throughput_tokens_per_s",
    "peak_memory_bytes",
    "attestation",
    "exit_disposition",
}

# Fields that must be present and non-null on a clean run.
_REQUIRED_WHEN_OK = (
    "final_val_loss",
    "total_train_time",
    "step_avg_time",
    "iterations",
    "sections",
    "throughput_tokens_per_s",
    "peak_memory_bytes",
)


def _parse_table(raw: Any, field_name: str) -> List[TableEntry]:
    if not isinstance(raw, list):
        raise SchemaError(field_name, "expected a list")
    if len(raw) > TABLE_CAP:
        raise MetricsValidationError(field_name, f"{len(raw)} entries exceeds cap of {TABLE_CAP}")
    entries = []
    for item in raw:
        try:
            entries.append(TableEntry(str(item["name"]), float(item["total_time"]), int(item["call_count"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(field_name, f"bad entry: {exc}") from exc
    for prev, cur in zip(entries, entries[1:]):
        if cur.total_time > prev.total_time:
            raise MetricsValidationError(field_name, "entries not sorted descending by total_time")
    return entries


def parse_metrics(data: bytes | str) -> MetricsReport:
    """Parse and strictly validate a metrics JSON document.

    Unknown top-level fields are preserved in ``extras``. Raises SchemaError
    for missing/misshapen fields and MetricsValidationError for invariant
    breaches.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SchemaError("<document>", f"not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaError("<document>", "top level must be an object")

    disposition = raw.get("exit_disposition")
    if disposition is None:
        raise SchemaError("exit_disposition")
    if disposition not in DISPOSITIONS:
        raise SchemaError("exit_disposition", f"unknown disposition {disposition!r}")

    if disposition == "ok":
        for name in _REQUIRED_WHEN_OK:
            if raw.get(name) is None:
                raise SchemaError(name)

    checkpoints = []
    for item in raw.get("checkpoints") or []:
        try:
            checkpoints.append(Checkpoint(int(item["step"]), float(item["step_avg_time"]), float(item["val_loss"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError("checkpoints", f"bad entry: {exc}") from exc
    for prev, cur in zip(checkpoints, checkpoints[1:]):
        if cur.step < prev.step:
            raise MetricsValidationError("checkpoints", "not sorted by step")

    sections = []
    for item in raw.get("sections") or []:
        try:
            sections.append(
                SectionProfile(
                    str(item["name"]),
                    float(item["total_time"]),
                    float(item["avg_time"]),
                    float(item["pct_of_total"]),
                    int(item["call_count"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError("sections", f"bad entry: {exc}") from exc
    if disposition == "ok":
        names = [s.name for s in sections]
        for required in SECTION_NAMES:
            if required not in names:
                raise SchemaError("sections", f"missing section '{required}'")
        if len(names) != len(SECTION_NAMES):
            raise MetricsValidationError("sections", f"expected exactly {len(SECTION_NAMES)} sections")
        for s in sections:
            s.validate()
        pct_sum = sum(s.pct_of_total for s in sections)
        if pct_sum > 100.0 + 1e-6:
            raise MetricsValidationError("sections", f"percentage shares sum to {pct_sum:.6f} > 100")

    attestation = None
    raw_att = raw.get("attestation")
    if raw_att is not None:
        try:
            attestation = Attestation(str(raw_att["manifest_digest"]), dict(raw_att["attested"]))
        except (KeyError, TypeError) as exc:
            raise SchemaError("attestation", f"bad shape: {exc}") from exc

    step_avg_time = raw.get("step_avg_time")
    if disposition == "ok" and not (step_avg_time and step_avg_time > 0):
        raise MetricsValidationError("step_avg_time", "must be > 0 when disposition is ok")

    report = MetricsReport(
        exit_disposition=disposition,
        final_val_loss=None if raw.get("final_val_loss") is None else float(raw["final_val_loss"]),
        total_train_time=None if raw.get("total_train_time") is None else float(raw["total_train_time"]),
        step_avg_time=None if step_avg_time is None else float(step_avg_time),
        iterations=None if raw.get("iterations") is None else int(raw["iterations"]),
        checkpoints=checkpoints,
        sections=sections,
        kernel_table=_parse_table(raw.get("kernel_table") or [], "kernel_table"),
        cpu_op_table=_parse_table(raw.get("cpu_op_table") or [], "cpu_op_table"),
        throughput_tokens_per_s=(
            None if raw.get("throughput_tokens_per_s") is None else float(raw["throughput_tokens_per_s"])
        ),
        peak_memory_bytes=None if raw.get("peak_memory_bytes") is None else int(raw["peak_memory_bytes"]),
        attestation=attestation,
        extras={k: v for k, v in raw.items() if k not in _KNOWN_FIELDS},
    )
    return report


def serialize_metrics(report: MetricsReport) -> bytes:
    """Canonical serialization: fixed field order, sorted extras, compact floats."""
    return (json.dumps(report.to_dict(), indent=2, sort_keys=False) + "\n").encode("utf-8")


# --------------------------------------------------------------------------
# Efficiency frontier


@dataclass
class FrontierState:
    best_score: float = float("inf")
    best_time_at_threshold: float = float("inf")
    best_loss: float = float("inf")
    history: List[Tuple[int, str, float]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "best_score": None if self.best_score == float("inf") else self.best_score,
            "best_time_at_threshold": (
                None if self.best_time_at_threshold == float("inf") else self.best_time_at_threshold
            ),
            "best_loss": None if self.best_loss == float("inf") else self.best_loss,
            "history": [list(h) for h in self.history],
        }


def update_frontier(state: FrontierState, record) -> FrontierState:
    """Fold one scored record into the frontier (strict improvement only).

    ``record`` is a program_store.ProgramRecord with a score and metrics.
    Returns a new FrontierState; the input is not mutated.
    """
    if record.score is None:
        raise ValueError(f"record {record.id} has no score")
    new = FrontierState(
        best_score=state.best_score,
        best_time_at_threshold=state.best_time_at_threshold,
        best_loss=state.best_loss,
        history=list(state.history),
    )
    if record.score < new.best_score:
        new.best_score = record.score
        new.history.append((record.generation, record.id, record.score))
    if record.metrics is not None and record.metrics.final_val_loss is not None:
        new.best_loss = min(new.best_loss, record.metrics.final_val_loss)
    if record.status == "acceptable" and record.metrics is not None:
        t = record.metrics.total_train_time
        if t is not None and t < new.best_time_at_threshold:
            new.best_time_at_threshold = t
    return new


def render_run_report(store, frontier: FrontierState) -> Dict[str, Any]:
    """Build the machine-readable run report: per-generation status counts,
    frontier trajectory, and a top-10 program table."""
    by_generation: Dict[int, Dict[str, int]] = {}
    for rec in store.all_records():
        counts = by_generation.setdefault(rec.generation, {"buggy": 0, "over_threshold": 0, "acceptable": 0})
        if rec.status in counts:
            counts[rec.status] += 1
    scored = [r for r in store.all_records() if r.score is not None and r.status != "buggy"]
    scored.sort(key=lambda r: (r.score, r.created_at))
    top10 = [
        {
            "id": r.id,
            "generation": r.generation,
            "island_id": r.island_id,
            "status": r.status,
            "score": r.score,
            "final_val_loss": r.metrics.final_val_loss if r.metrics else None,
            "total_train_time": r.metrics.total_train_time if r.metrics else None,
        }
        for r in scored[:10]
    ]
    return {
        "generations": [
            {"generation": gen, **by_generation[gen]} for gen in sorted(by_generation)
        ],
        "frontier": frontier.to_dict(),
        "top_programs": top10,
    }


def render_report_text(report: Dict[str, Any]) -> str:
    """Plain-text rendering of render_run_report output."""
    lines = ["generation  buggy  over_threshold  acceptable"]
    for row in report["generations"]:
        lines.append(
            f"{row['generation']:>10}  {row['buggy']:>5}  {row['over_threshold']:>14}  {row['acceptable']:>10}"
        )
    lines.append("")
    lines.append("frontier trajectory (generation, id, score):")
    for gen, rid, score in report["frontier"]["history"]:
        lines.append(f"  {gen:>4}  {rid}  {score:.9g}")
    lines.append("")
    lines.append("top programs:")
    lines.append("rank  id  status  score  loss  time")
    for i, row in enumerate(report["top_programs"], 1):
        lines.append(
            f"{i:>4}  {row['id']}  {row['status']}  "
            f"{row['score']:.9g}  {row['final_val_loss']}  {row['total_train_time']}"
        )
    return "\n".join(lines) + "\n"


def render_report_ndjson(report: Dict[str, Any]) -> str:
    """NDJSON rendering: one row per generation, then frontier and top rows."""
    rows = []
    for row in report["generations"]:
        rows.append(json.dumps({"row": "generation", **row}, sort_keys=True))
    for gen, rid, score in report["frontier"]["history"]:
        rows.append(json.dumps({"row": "frontier", "generation": gen, "id": rid, "score": score}, sort_keys=True))
    for i, row in enumerate(report["top_programs"], 1):
        rows.append(json.dumps({"row": "top", "rank": i, **row}, sort_keys=True))
    return "\n".join(rows) + ("\n" if rows else "")
