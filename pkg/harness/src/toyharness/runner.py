"""Evaluation-side owner of the subprocess contract.

Given a candidate training program, a protected-parameter manifest, and a
mode (fast or full), this module loads the candidate's build hooks, runs the
train/validate loop under manifest-owned data slices, sequence length, loss
function, and masks, and writes the metrics JSON including the attestation.
The candidate never controls any protected value: the harness computes the
loss itself and reads data only through bounds-checked slice accessors, so
textual tampering inside the candidate is inert.
"""

from __future__ import annotations

import cProfile
import hashlib
import json
import logging
import math
import sys
import time
import traceback
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import yaml

from . import kernels
from .dataset import SliceAccessor, SliceBoundsError, StreamSpec, build_stream
from .profiler import (
    SectionTimer,
    collect_op_tables,
    peak_memory_bytes,
    profile_sections,
)

logger = logging.getLogger(__name__)

REQUIRED_HOOKS = ("init_model", "init_optimizer", "forward", "backward", "optimizer_step")
SUPPORTED_LOSS_FNS = ("harness_ce_v1",)
SUPPORTED_MASK_POLICIES = ("causal_doc_v1",)

PROTECTED_SLOTS = (
    "train_slice",
    "val_slice",
    "val_seq_len",
    "loss_fn_id",
    "mask_policy_id",
    "loss_threshold",
)

# Canonical top-level key order of the metrics JSON.
_FIELD_ORDER = (
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
)


class ManifestFormatError(ValueError):
    """The manifest file is unreadable or names unsupported policies."""


class CandidateError(Exception):
    """The candidate failed; carries the disposition to report."""

    def __init__(self, disposition: str, message: str):
        self.disposition = disposition
        super().__init__(message)


@dataclass(frozen=True)
class TaskSpec:
    """Dimensions and budgets of the toy language-model training task,
    sized so a full evaluation finishes in well under a minute on one CPU
    core. Values may be overridden by the manifest's task section."""

    vocab_size: int = 64
    seq_len: int = 32
    model_width: int = 32
    layer_count: int = 2
    batch_size: int = 8
    doc_len: int = 64
    p_follow: float = 0.8
    follow_mult: int = 5
    follow_inc: int = 1
    full_steps: int = 200
    fast_steps: int = 8
    profile_steps: int = 5
    checkpoint_count: int = 8
    checkpoint_val_batches: int = 20
    model_seed: int = 7
    batch_seed: int = 11

    def validate(self) -> None:
        for name in ("vocab_size", "seq_len", "model_width", "layer_count", "batch_size",
                     "doc_len", "full_steps", "fast_steps", "profile_steps", "checkpoint_count"):
            if getattr(self, name) <= 0:
                raise ManifestFormatError(f"task.{name} must be positive")


@dataclass
class HarnessContext:
    """Everything a candidate's build hooks may see: task dimensions and the
    two slice-guarded data accessors."""

    task: TaskSpec
    train_data: SliceAccessor
    val_data: SliceAccessor
    val_seq_len: int


# --------------------------------------------------------------------------
# Manifest handling


def _canonical_digest(protected: Dict[str, Any]) -> str:
    canonical = json.dumps(protected, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_manifest(manifest_path: Path) -> tuple[Dict[str, Any], TaskSpec, str]:
    """Read the manifest and return (protected, task spec, manifest digest)."""
    try:
        raw = yaml.safe_load(Path(manifest_path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ManifestFormatError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if not isinstance(raw, dict) or not isinstance(raw.get("protected"), dict):
        raise ManifestFormatError("manifest must be a mapping with a 'protected' section")
    protected = raw["protected"]
    for slot in PROTECTED_SLOTS:
        if slot not in protected:
            raise ManifestFormatError(f"manifest missing protected slot '{slot}'")
    if protected["loss_fn_id"] not in SUPPORTED_LOSS_FNS:
        raise ManifestFormatError(f"unsupported loss_fn_id {protected['loss_fn_id']!r}")
    if protected["mask_policy_id"] not in SUPPORTED_MASK_POLICIES:
        raise ManifestFormatError(f"unsupported mask_policy_id {protected['mask_policy_id']!r}")

    task_raw = raw.get("task") or {}
    allowed = {f.name for f in dc_fields(TaskSpec)}
    for key in task_raw:
        if key not in allowed:
            raise ManifestFormatError(f"unknown task key '{key}'")
    task = TaskSpec(**task_raw)
    task.validate()
    return protected, task, _canonical_digest(protected)


def build_context(protected: Dict[str, Any], task: TaskSpec, digest: str) -> HarnessContext:
    train = protected["train_slice"]
    val = protected["val_slice"]
    length = max(int(train["end"]), int(val["end"]))
    # The stream seed is derived from the manifest digest: same manifest,
    # bit-identical dataset; any change to a protected slot reshuffles it.
    spec = StreamSpec(
        length=length,
        vocab_size=task.vocab_size,
        doc_len=task.doc_len,
        p_follow=task.p_follow,
        follow_mult=task.follow_mult,
        follow_inc=task.follow_inc,
        seed=int(digest[:8], 16) % (2**31),
    )
    stream = build_stream(spec)
    return HarnessContext(
        task=task,
        train_data=SliceAccessor(stream, int(train["start"]), int(train["end"]), "train"),
        val_data=SliceAccessor(stream, int(val["start"]), int(val["end"]), "val"),
        val_seq_len=int(protected["val_seq_len"]),
    )


# --------------------------------------------------------------------------
# Candidate loading


def load_candidate(candidate_path: Path) -> Dict[str, Callable]:
    """Execute the candidate module and pull out its build hooks."""
    source = Path(candidate_path).read_text(encoding="utf-8")
    namespace: Dict[str, Any] = {"__name__": "candidate"}
    try:
        code = compile(source, str(candidate_path), "exec")
        exec(code, namespace)
    except BaseException:
        raise CandidateError("nonzero_exit", traceback.format_exc()) from None
    missing = [h for h in REQUIRED_HOOKS if not callable(namespace.get(h))]
    if missing:
        raise CandidateError("nonzero_exit", f"candidate missing hooks: {', '.join(missing)}")
    return {h: namespace[h] for h in REQUIRED_HOOKS}


# --------------------------------------------------------------------------
# Loss (harness-owned)


def masked_xent(logits: np.ndarray, targets: np.ndarray, valid: np.ndarray):
    """Mean cross-entropy over valid positions, plus the gradient scattered
    back to the full [B, T, V] logits shape (zero at masked positions)."""
    b, t, v = logits.shape
    flat_logits = logits.reshape(-1, v)
    flat_targets = targets.reshape(-1).astype(np.int64)
    idx = np.nonzero(valid.reshape(-1))[0]
    if idx.size == 0:
        raise CandidateError("crash", "no valid loss positions in batch")
    loss, dpacked = kernels.softmax_xent(
        np.ascontiguousarray(flat_logits[idx], dtype=np.float64), flat_targets[idx]
    )
    dlogits = np.zeros((b * t, v), dtype=np.float64)
    dlogits[idx] = dpacked
    return float(loss), int(idx.size), dlogits.reshape(b, t, v)


def _fetch_batch(accessor: SliceAccessor, starts: np.ndarray, seq_len: int, doc_len: int):
    n = starts.shape[0]
    xb = np.empty((n, seq_len), dtype=np.int64)
    yb = np.empty((n, seq_len), dtype=np.int64)
    positions = np.empty((n, seq_len), dtype=np.int64)
    for i, start in enumerate(starts):
        w = accessor.window(int(start), seq_len + 1)
        xb[i] = w[:seq_len]
        yb[i] = w[1:]
        positions[i] = np.arange(start, start + seq_len)
    # A target is valid only when it stays inside the same document.
    valid = (positions % doc_len) != (doc_len - 1)
    return xb, yb, positions, valid


def evaluate_val_loss(candidate, params, ctx: HarnessContext, limit_batches: Optional[int] = None) -> float:
    """Validation cross-entropy over non-overlapping windows of the
    manifest's validation slice, at the manifest's sequence length."""
    seq_len = ctx.val_seq_len
    task = ctx.task
    starts = np.arange(ctx.val_data.start, ctx.val_data.end - seq_len, seq_len, dtype=np.int64)
    total_loss = 0.0
    total_count = 0
    batches = 0
    for i in range(0, starts.shape[0], task.batch_size):
        if limit_batches is not None and batches >= limit_batches:
            break
        chunk = starts[i : i + task.batch_size]
        xb, yb, positions, valid = _fetch_batch(ctx.val_data, chunk, seq_len, task.doc_len)
        mask = kernels.build_mask(positions, task.doc_len)
        logits, _ = candidate["forward"](params, xb, mask)
        loss, count, _ = masked_xent(np.asarray(logits, dtype=np.float64), yb, valid)
        total_loss += loss * count
        total_count += count
        batches += 1
    return total_loss / total_count


# --------------------------------------------------------------------------
# Training loop


def train_and_evaluate(
    candidate, ctx: HarnessContext, steps: int, final_val_batches: Optional[int] = None
) -> Dict[str, Any]:
    task = ctx.task
    rng_model = np.random.RandomState(task.model_seed)
    params = candidate["init_model"](rng_model, ctx)
    opt_state = candidate["init_optimizer"](params)
    batch_rng = np.random.RandomState(task.batch_seed)

    timer = SectionTimer()
    checkpoints: List[dict] = []
    ckpt_every = max(1, math.ceil(steps / task.checkpoint_count))
    step_time_total = 0.0
    seq_len = task.seq_len
    start_low = ctx.train_data.start
    start_high = ctx.train_data.end - seq_len  # window needs seq_len + 1 tokens
    loop_t0 = time.perf_counter()

    for step in range(1, steps + 1):
        step_t0 = time.perf_counter()
        with timer.measure("data_loading"):
            starts = batch_rng.randint(start_low, start_high, size=task.batch_size)
            xb, yb, positions, valid = _fetch_batch(ctx.train_data, starts, seq_len, task.doc_len)
            mask = kernels.build_mask(positions, task.doc_len)
        with timer.measure("forward"):
            logits, cache = candidate["forward"](params, xb, mask)
            _, _, dlogits = masked_xent(np.asarray(logits, dtype=np.float64), yb, valid)
        with timer.measure("backward"):
            grads = candidate["backward"](params, cache, dlogits)
        with timer.measure("optimizer"):
            candidate["optimizer_step"](params, grads, opt_state, step)
        step_time_total += time.perf_counter() - step_t0

        if step % ckpt_every == 0 or step == steps:
            val_loss = evaluate_val_loss(candidate, params, ctx, limit_batches=task.checkpoint_val_batches)
            checkpoints.append(
                {"step": step, "step_avg_time": step_time_total / step, "val_loss": val_loss}
            )

    final_val_loss = evaluate_val_loss(candidate, params, ctx, limit_batches=final_val_batches)
    total_train_time = time.perf_counter() - loop_t0

    return {
        "final_val_loss": final_val_loss,
        "total_train_time": total_train_time,
        "step_avg_time": step_time_total / steps,
        "iterations": steps,
        "checkpoints": checkpoints,
        "sections": profile_sections(timer, total_train_time),
        "throughput_tokens_per_s": steps * task.batch_size * seq_len / total_train_time,
    }


# --------------------------------------------------------------------------
# Metrics emission


def emit_metrics(collected: Dict[str, Any], path: Path) -> None:
    """Write the metrics JSON with canonical key order, two-space indent,
    and a trailing newline, so identical contents are byte-identical."""
    ordered = {key: collected.get(key) for key in _FIELD_ORDER}
    Path(path).write_text(json.dumps(ordered, indent=2) + "\n", encoding="utf-8")


def _failure_report(disposition: str, attestation: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    return {
        "checkpoints": [],
        "sections": [],
        "kernel_table": [],
        "cpu_op_table": [],
        "attestation": attestation,
        "exit_disposition": disposition,
    }


# --------------------------------------------------------------------------
# Entry point


def run_candidate(candidate_path: str, manifest_path: str, metrics_out: str, mode: str) -> int:
    """Execute one evaluation. Returns the process exit code: 0 for a clean
    run, 1 for a candidate failure (metrics still written with the failure
    disposition). Manifest or IO problems raise instead; the CLI maps those
    to exit 2."""
    if mode not in ("fast", "full"):
        raise ManifestFormatError(f"mode must be 'fast' or 'full', got {mode!r}")
    protected, task, digest = load_manifest(Path(manifest_path))
    # Attest exactly the values this process will enforce, before the
    # candidate gets any chance to run.
    attestation = {"manifest_digest": digest, "attested": json.loads(json.dumps(protected))}
    steps = task.fast_steps if mode == "fast" else task.full_steps

    try:
        candidate = load_candidate(Path(candidate_path))
    except CandidateError as exc:
        sys.stderr.write(str(exc) + "\n")
        emit_metrics(_failure_report(exc.disposition, attestation), Path(metrics_out))
        return 1

    ctx = build_context(protected, task, digest)
    profile = cProfile.Profile()
    try:
        # The timed run is unprofiled so profiler overhead cannot distort
        # the reported step times; op tables come from a short profiled
        # replay of the same loop afterwards.
        collected = train_and_evaluate(candidate, ctx, steps)
        profile.enable()
        try:
            train_and_evaluate(
                candidate,
                ctx,
                min(task.profile_steps, steps),
                final_val_batches=task.checkpoint_val_batches,
            )
        finally:
            profile.disable()
    except SliceBoundsError as exc:
        sys.stderr.write(f"SliceBoundsError: {exc}\n")
        emit_metrics(_failure_report("crash", attestation), Path(metrics_out))
        return 1
    except CandidateError as exc:
        sys.stderr.write(str(exc) + "\n")
        emit_metrics(_failure_report(exc.disposition, attestation), Path(metrics_out))
        return 1
    except Exception:
        sys.stderr.write(traceback.format_exc())
        emit_metrics(_failure_report("crash", attestation), Path(metrics_out))
        return 1

    kernel_table, cpu_op_table, raw_ops = collect_op_tables(profile)
    logger.info("profiled %d ops (%d kernel, %d cpu after truncation)",
                raw_ops, len(kernel_table), len(cpu_op_table))
    collected["kernel_table"] = kernel_table
    collected["cpu_op_table"] = cpu_op_table
    collected["peak_memory_bytes"] = peak_memory_bytes()
    collected["attestation"] = attestation
    collected["exit_disposition"] = "ok"
    emit_metrics(collected, Path(metrics_out))
    return 0
