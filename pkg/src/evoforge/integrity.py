"""Anti-gaming manifest: protected evaluation parameters, their injection
plan, and post-hoc verification of harness attestations.

The harness owns the evaluation entry point and runs candidates under the
manifest values, so textual tampering in candidate source is inert. This
module only compiles the plan and checks the attestation that comes back.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, List, Optional

from .telemetry import MetricsReport

logger = logging.getLogger(__name__)

INJECT_AT_RUNTIME = "inject_at_runtime"
VERIFY_AFTER = "verify_after"

PROTECTED_SLOTS = (
    "train_slice",
    "val_slice",
    "val_seq_len",
    "loss_fn_id",
    "mask_policy_id",
    "loss_threshold",
)


class ManifestError(ValueError):
    """Protected-parameter manifest fails validation."""


@dataclass(frozen=True)
class SliceSpec:
    """Half-open token range [start, end) within a dataset path pattern."""

    path_pattern: str
    start: int
    end: int

    def overlaps(self, other: "SliceSpec") -> bool:
        if self.path_pattern != other.path_pattern:
            return False
        return self.start < other.end and other.start < self.end

    def to_dict(self) -> Dict[str, Any]:
        return {"path_pattern": self.path_pattern, "start": self.start, "end": self.end}

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "SliceSpec":
        return cls(str(raw["path_pattern"]), int(raw["start"]), int(raw["end"]))


@dataclass(frozen=True)
class ProtectedParams:
    train_slice: SliceSpec
    val_slice: SliceSpec
    val_seq_len: int
    loss_fn_id: str
    mask_policy_id: str
    loss_threshold: float

    def validate(self) -> None:
        if self.val_seq_len <= 0:
            raise ManifestError("val_seq_len must be positive")
        if self.loss_threshold <= 0:
            raise ManifestError("loss_threshold must be positive")
        if self.train_slice.start >= self.train_slice.end or self.val_slice.start >= self.val_slice.end:
            raise ManifestError("slices must be non-empty (start < end)")
        if self.train_slice.overlaps(self.val_slice):
            raise ManifestError("train and validation slices overlap")

    def slot_value(self, slot: str) -> Any:
        value = getattr(self, slot)
        if isinstance(value, SliceSpec):
            return value.to_dict()
        return value

    def to_dict(self) -> Dict[str, Any]:
        return {slot: self.slot_value(slot) for slot in PROTECTED_SLOTS}

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ProtectedParams":
        try:
            return cls(
                train_slice=SliceSpec.from_dict(raw["train_slice"]),
                val_slice=SliceSpec.from_dict(raw["val_slice"]),
                val_seq_len=int(raw["val_seq_len"]),
                loss_fn_id=str(raw["loss_fn_id"]),
                mask_policy_id=str(raw["mask_policy_id"]),
                loss_threshold=float(raw["loss_threshold"]),
            )
        except KeyError as exc:
            raise ManifestError(f"missing protected field: {exc}") from exc


def default_protected() -> ProtectedParams:
    """Manifest for the bundled CPU-scale toy training task. The loss
    threshold is calibrated once against the shipped seed program."""
    return ProtectedParams(
        train_slice=SliceSpec("toy://stream", 0, 200000),
        val_slice=SliceSpec("toy://stream", 200000, 220000),
        val_seq_len=32,
        loss_fn_id="harness_ce_v1",
        mask_policy_id="causal_doc_v1",
        loss_threshold=1.70,
    )


def manifest_digest(params: ProtectedParams) -> str:
    canonical = json.dumps(params.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class InjectionSpec:
    overrides: Dict[str, Any]
    enforcement: Dict[str, FrozenSet[str]]
    manifest_digest: str


def compile_injection_plan(params: ProtectedParams) -> InjectionSpec:
    """Compile the manifest into a deterministic enforcement plan.

    Every slot is attested and verified after the run; every slot except
    loss_threshold (a classification parameter, not a training input) is
    also injected at runtime by the harness.
    """
    params.validate()
    enforcement: Dict[str, FrozenSet[str]] = {}
    for slot in PROTECTED_SLOTS:
        modes = {VERIFY_AFTER}
        if slot != "loss_threshold":
            modes.add(INJECT_AT_RUNTIME)
        enforcement[slot] = frozenset(modes)
    return InjectionSpec(
        overrides={slot: params.slot_value(slot) for slot in PROTECTED_SLOTS},
        enforcement=enforcement,
        manifest_digest=manifest_digest(params),
    )


@dataclass
class Verdict:
    ok: bool
    violations: List[str] = field(default_factory=list)


def _values_equal(a: Any, b: Any) -> bool:
    if isinstance(a, float) or isinstance(b, float):
        try:
            return float(a) == float(b)
        except (TypeError, ValueError):
            return False
    return a == b


def verify_report(report: MetricsReport, params: ProtectedParams) -> Verdict:
    """Check a harness report's attestation against the manifest.

    Returns ok only when the digest matches and every verify_after slot's
    attested value equals the manifest value. Order-independent and pure.
    """
    plan = compile_injection_plan(params)
    if report.attestation is None:
        return Verdict(ok=False, violations=["no-attestation"])
    violations: List[str] = []
    if report.attestation.manifest_digest != plan.manifest_digest:
        violations.append("manifest_digest")
    attested = report.attestation.attested
    for slot in sorted(plan.enforcement):
        if VERIFY_AFTER not in plan.enforcement[slot]:
            continue
        if slot not in attested:
            violations.append(slot)
        elif not _values_equal(attested[slot], plan.overrides[slot]):
            violations.append(slot)
    return Verdict(ok=not violations, violations=violations)
