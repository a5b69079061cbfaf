import sys
from pathlib import Path

import pytest

from evoforge.integrity import ProtectedParams, SliceSpec, manifest_digest
from evoforge.telemetry import Attestation, Checkpoint, MetricsReport, SectionProfile, TableEntry

FIXTURES = Path(__file__).parent / "fixtures"

STUB_HARNESS_CMD = (
    f"{sys.executable} {FIXTURES / 'stub_harness.py'} "
    "{candidate_path} {manifest_path} {metrics_out} {mode}"
)


def make_params(loss_threshold: float = 3.28) -> ProtectedParams:
    return ProtectedParams(
        train_slice=SliceSpec("toy://stream", 0, 100000),
        val_slice=SliceSpec("toy://stream", 100000, 110000),
        val_seq_len=16,
        loss_fn_id="harness_ce_v1",
        mask_policy_id="causal_doc_v1",
        loss_threshold=loss_threshold,
    )


def make_report(
    loss: float = 3.2,
    t_step: float = 0.1,
    disposition: str = "ok",
    params: ProtectedParams | None = None,
    steps: int = 100,
    total_time: float | None = None,
) -> MetricsReport:
    params = params or make_params()
    total_time = total_time if total_time is not None else t_step * steps
    fractions = [("forward", 0.4), ("backward", 0.35), ("optimizer", 0.15), ("data_loading", 0.1)]
    sections = [
        SectionProfile(name, total_time * f, total_time * f / steps, f * 100.0, steps)
        for name, f in fractions
    ]
    return MetricsReport(
        exit_disposition=disposition,
        final_val_loss=loss,
        total_train_time=total_time,
        step_avg_time=t_step,
        iterations=steps,
        checkpoints=[Checkpoint(steps // 2, t_step, loss + 0.1), Checkpoint(steps, t_step, loss)],
        sections=sections,
        kernel_table=[TableEntry(f"op_{i}", 1.0 / (i + 1), steps) for i in range(5)],
        cpu_op_table=[TableEntry(f"cpu_{i}", 0.5 / (i + 1), steps) for i in range(5)],
        throughput_tokens_per_s=4096.0 / t_step,
        peak_memory_bytes=64 * 1024 * 1024,
        attestation=Attestation(manifest_digest(params), params.to_dict()),
    )


@pytest.fixture
def params() -> ProtectedParams:
    return make_params()
