"""CPU-scale evaluation harness for candidate training programs.

Owns the evaluation entry point: loads a candidate's build hooks, trains a
toy language model on a deterministic synthetic stream under manifest-owned
protected parameters, profiles the loop, and emits the metrics JSON with an
attestation of the values actually used.
"""

from .dataset import SliceAccessor, SliceBoundsError, StreamSpec, build_stream
from .kernels import BACKEND, HAS_NUMBA
from .profiler import SectionTimer, collect_op_tables, profile_sections
from .runner import (
    CandidateError,
    HarnessContext,
    ManifestFormatError,
    TaskSpec,
    emit_metrics,
    evaluate_val_loss,
    load_candidate,
    load_manifest,
    run_candidate,
    train_and_evaluate,
)

__all__ = [
    "BACKEND",
    "HAS_NUMBA",
    "CandidateError",
    "HarnessContext",
    "ManifestFormatError",
    "SectionTimer",
    "SliceAccessor",
    "SliceBoundsError",
    "StreamSpec",
    "TaskSpec",
    "build_stream",
    "collect_op_tables",
    "emit_metrics",
    "evaluate_val_loss",
    "load_candidate",
    "load_manifest",
    "profile_sections",
    "run_candidate",
    "train_and_evaluate",
]
