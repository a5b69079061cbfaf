import json
import random
import time

import pytest

from evoforge.lm_gateway import LMGateway, ModelConfig, ScriptedProvider
from evoforge.pipeline import (
    EvolutionEngine,
    FastResult,
    HarnessConfig,
    HarnessRunner,
    InfrastructureError,
    NoScoreError,
    RunConfig,
    SeedEvaluationError,
    classify,
    compute_score,
    fast_check,
    is_suspicious,
    repair_loop,
    run_evolution,
)
from evoforge.program_store import ProgramStore
from evoforge.telemetry import MetricsReport

from .conftest import STUB_HARNESS_CMD, make_params, make_report

SEED_SOURCE = "# seed training program (stub)\n# FORCE_LOSS: 3.2\n# FORCE_TSTEP: 0.1\nBASE = 0\n"

TWEAK_RESPONSE = "<<<<<<< SEARCH\nBASE = 0\n=======\nBASE = 0  # tweak\n>>>>>>> REPLACE\n"


def edit_response(search, replace):
    return f"<<<<<<< SEARCH\n{search}\n=======\n{replace}\n>>>>>>> REPLACE\n"


class TestComputeScore:
    def test_direct_product(self):
        assert compute_score(make_report(loss=3.28, t_step=2.0)) == pytest.approx(6.56, rel=1e-12)

    def test_zero_loss_scores_zero_and_is_suspicious(self):
        report = make_report(loss=0.0, t_step=0.5)
        assert compute_score(report) == 0.0
        assert is_suspicious(report, loss_threshold=3.28)

    def test_fixture_pair_independent_multiplication(self):
        report = make_report(loss=3.3001, t_step=0.1234)
        assert compute_score(report) == pytest.approx(0.1234 * 3.3001, rel=1e-9)

    def test_1000_random_pairs_match_product_oracle(self):
        rng = random.Random(2024)
        for _ in range(1000):
            t = rng.uniform(1e-4, 10.0)
            loss = rng.uniform(0.01, 12.0)
            report = make_report(loss=loss, t_step=t)
            expected = t * loss
            assert abs(compute_score(report) - expected) <= 1e-9 * abs(expected)

    def test_strict_monotonicity(self):
        rng = random.Random(7)
        for _ in range(1000):
            t = rng.uniform(1e-3, 5.0)
            loss = rng.uniform(0.1, 8.0)
            base = compute_score(make_report(loss=loss, t_step=t))
            assert compute_score(make_report(loss=loss * 0.9, t_step=t)) < base
            assert compute_score(make_report(loss=loss, t_step=t * 0.9)) < base

    def test_failed_disposition_has_no_score(self):
        with pytest.raises(NoScoreError):
            compute_score(MetricsReport(exit_disposition="crash"))


class TestClassify:
    def test_loss_below_threshold_acceptable(self, params):
        assert classify(make_report(loss=3.279, params=params), params) == "acceptable"

    def test_loss_above_threshold(self, params):
        assert classify(make_report(loss=3.30, params=params), params) == "over_threshold"

    def test_loss_equal_threshold_is_acceptable(self, params):
        assert classify(make_report(loss=3.28, params=params), params) == "acceptable"

    def test_integrity_violation_dominates_good_loss(self, params):
        report = make_report(loss=3.0, params=params)
        report.attestation.attested["val_seq_len"] = 4
        assert classify(report, params) == "buggy"

    def test_partition_exhaustive_and_exclusive(self, params):
        corpus = []
        for disposition in ("ok", "nonzero_exit", "timeout", "crash"):
            for loss in (3.0, 3.279, 3.28, 3.281, 3.5):
                corpus.append(make_report(loss=loss, disposition=disposition, params=params))
        tampered = make_report(loss=3.0, params=params)
        tampered.attestation.attested["loss_fn_id"] = "evil"
        corpus.append(tampered)
        for report in corpus:
            status = classify(report, params)
            assert status in {"buggy", "over_threshold", "acceptable"}
            if report.exit_disposition != "ok":
                assert status == "buggy"


# --------------------------------------------------------------------------
# Harness-backed pieces (stub harness fixture)


def make_config(tmp_path, branching=3, islands=2, **overrides):
    seed_path = tmp_path / "seed.py"
    if not seed_path.exists():
        seed_path.write_text(SEED_SOURCE)
    defaults = dict(
        model=ModelConfig(provider="scripted", script_path="<inline>"),
        protected=make_params(),
        harness=HarnessConfig(command=STUB_HARNESS_CMD, fast_check_budget=20.0, full_eval_timeout=60.0),
        seed_program=str(seed_path),
        branching_factor=branching,
        island_count=islands,
        max_iterations=2,
        top_count=2,
        diverse_count=1,
        run_root=str(tmp_path / "runs"),
        run_id="t",
    )
    defaults.update(overrides)
    return RunConfig(**defaults)


def make_engine(tmp_path, responses=None, keyed=None, **overrides):
    config = make_config(tmp_path, **overrides)
    run_root = tmp_path / "runs" / "t"
    counter = {"t": 0.0}

    def clock():
        counter["t"] += 1.0
        return counter["t"]

    store = ProgramStore(
        island_count=config.island_count,
        archive_capacity=config.archive_capacity,
        p_elite=config.p_elite,
        migration_interval=config.migration_interval,
        root=run_root,
        clock=clock,
    )
    gateway = LMGateway(config.model, provider=ScriptedProvider(responses or [], keyed or []))
    return EvolutionEngine(config, run_root, gateway, store)


def journal_events(run_root):
    path = run_root / "journal.ndjson"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


class TestFastCheck:
    def _runner(self, tmp_path, **harness_overrides):
        engine = make_engine(tmp_path, keyed=[("", TWEAK_RESPONSE)])
        cfg = engine.runner.cfg
        for k, v in harness_overrides.items():
            setattr(cfg, k, v)
        return engine.runner

    def test_seed_program_passes(self, tmp_path):
        runner = self._runner(tmp_path)
        path = tmp_path / "cand.py"
        path.write_text(SEED_SOURCE)
        result = fast_check(runner, path, tmp_path / "m.json")
        assert result.passed

    def test_syntax_error_fails_with_diagnostic(self, tmp_path):
        runner = self._runner(tmp_path)
        path = tmp_path / "bad.py"
        path.write_text("def broken(:\n")
        result = fast_check(runner, path, tmp_path / "m.json")
        assert not result.passed
        assert "SyntaxError" in result.error_text

    def test_infinite_loop_times_out_within_budget(self, tmp_path):
        runner = self._runner(tmp_path, fast_check_budget=1.5)
        path = tmp_path / "hang.py"
        path.write_text("# FORCE_HANG\n")
        start = time.monotonic()
        result = fast_check(runner, path, tmp_path / "m.json")
        elapsed = time.monotonic() - start
        assert not result.passed
        assert result.timed_out
        assert elapsed <= 1.5 + 3.0  # budget plus scheduling slack

    def test_unlaunchable_harness_is_infrastructure_error(self, tmp_path):
        runner = self._runner(tmp_path)
        runner.cfg.command = "/nonexistent/harness {candidate_path} {manifest_path} {metrics_out} {mode}"
        path = tmp_path / "cand.py"
        path.write_text(SEED_SOURCE)
        with pytest.raises(InfrastructureError):
            fast_check(runner, path, tmp_path / "m.json")


BROKEN_SOURCE = "def broken(:\n    pass\n"
FIX_RESPONSE = edit_response("def broken(:", "def broken():")
NON_FIX_RESPONSE = edit_response("pass", "pass  # still broken")


class TestRepairLoop:
    def _run(self, tmp_path, responses, n_fast):
        engine = make_engine(tmp_path)
        gateway = LMGateway(
            ModelConfig(provider="scripted", script_path="<inline>"),
            provider=ScriptedProvider(responses),
        )
        fixed, err = repair_loop(
            BROKEN_SOURCE,
            n_fast,
            gateway,
            engine.runner,
            "SyntaxError: invalid syntax",
            tmp_path,
            "childX",
        )
        return fixed, err, gateway.provider.calls

    def test_zero_budget_immediate_failure_zero_calls(self, tmp_path):
        fixed, err, calls = self._run(tmp_path, [FIX_RESPONSE], n_fast=0)
        assert fixed is None
        assert calls == 0

    def test_second_response_fixes_exactly_two_calls(self, tmp_path):
        fixed, err, calls = self._run(tmp_path, [NON_FIX_RESPONSE, FIX_RESPONSE, FIX_RESPONSE], n_fast=3)
        assert fixed is not None
        assert "def broken():" in fixed
        assert calls == 2

    def test_three_non_fixing_responses_failure_after_three(self, tmp_path):
        fixed, err, calls = self._run(tmp_path, [NON_FIX_RESPONSE] * 5, n_fast=3)
        assert fixed is None
        assert calls == 3


class TestGeneration:
    def test_branching_factor_children_inserted(self, tmp_path):
        engine = make_engine(tmp_path, keyed=[("", TWEAK_RESPONSE)], branching=10)
        engine.evaluate_seed()
        children = engine.run_generation(1)
        assert len(children) == 10
        counts = engine.generation_counts[1]
        assert sum(counts.values()) == 10

    def test_before_meta_gate_all_prompts_direct(self, tmp_path):
        engine = make_engine(tmp_path, keyed=[("", TWEAK_RESPONSE)], branching=4)
        engine.evaluate_seed()
        engine.run_generation(19)
        kinds = [e["kind"] for e in journal_events(engine.run_root) if e.get("event") == "child_prompted"]
        assert kinds == ["direct"] * 4

    def test_at_meta_gate_prompts_are_meta(self, tmp_path):
        engine = make_engine(tmp_path, keyed=[("", TWEAK_RESPONSE)], branching=4)
        engine.evaluate_seed()
        engine.run_generation(20)
        kinds = [e["kind"] for e in journal_events(engine.run_root) if e.get("event") == "child_prompted"]
        assert kinds == ["meta_implement"] * 4
        # two LM calls per child (idea + implementation)
        assert engine.gateway.total_calls == 8

    def test_failed_edit_child_stored_as_buggy(self, tmp_path):
        bad = edit_response("THIS TEXT DOES NOT EXIST", "x")
        engine = make_engine(tmp_path, keyed=[("", bad)], branching=3)
        engine.evaluate_seed()
        children = engine.run_generation(1)
        assert [c.status for c in children] == ["buggy"] * 3
        assert all(c.metrics is None for c in children)

    def test_unparseable_completion_child_buggy(self, tmp_path):
        engine = make_engine(tmp_path, keyed=[("", "no blocks here, sorry")], branching=2)
        engine.evaluate_seed()
        children = engine.run_generation(1)
        assert [c.status for c in children] == ["buggy"] * 2

    def test_infrastructure_degradation_journaled(self, tmp_path):
        engine = make_engine(tmp_path, keyed=[("", TWEAK_RESPONSE)], branching=2)
        engine.evaluate_seed()
        engine.runner.cfg.command = "/nonexistent/harness {candidate_path} {manifest_path} {metrics_out} {mode}"
        engine.run_generation(1)
        events = journal_events(engine.run_root)
        commit = [e for e in events if e.get("event") == "generation_commit"][-1]
        assert commit["degraded"] is True
        assert commit["infrastructure_errors"] == 2

    def test_migration_fires_on_interval(self, tmp_path):
        engine = make_engine(tmp_path, keyed=[("", TWEAK_RESPONSE)], branching=2, migration_interval=1)
        engine.evaluate_seed()
        engine.run_generation(1)
        events = journal_events(engine.run_root)
        assert any(e.get("event") == "migration" for e in events)


class TestRunEvolution:
    def _write_script(self, tmp_path):
        script = tmp_path / "script.ndjson"
        script.write_text(json.dumps({"match": "", "response": TWEAK_RESPONSE}) + "\n")
        return script

    def test_zero_iterations_baseline_only(self, tmp_path):
        config = make_config(tmp_path, max_iterations=0)
        config.model.script_path = str(self._write_script(tmp_path))
        summary = run_evolution(config)
        assert summary.completed_iterations == 0
        assert summary.frontier.best_score < float("inf")
        assert summary.generation_counts == {}

    def test_seed_failure_aborts(self, tmp_path):
        config = make_config(tmp_path)
        config.model.script_path = str(self._write_script(tmp_path))
        (tmp_path / "seed.py").write_text("# FORCE_CRASH\n")
        with pytest.raises(SeedEvaluationError):
            run_evolution(config)

    def test_two_generations_full_run(self, tmp_path):
        config = make_config(tmp_path, branching=3, max_iterations=2)
        config.model.script_path = str(self._write_script(tmp_path))
        summary = run_evolution(config)
        assert set(summary.generation_counts) == {1, 2}
        assert sum(summary.generation_counts[1].values()) == 3
        assert summary.total_lm_calls >= 6

    def test_resume_continues_from_journal(self, tmp_path):
        config = make_config(tmp_path, branching=2, max_iterations=1)
        config.model.script_path = str(self._write_script(tmp_path))
        run_evolution(config)
        config2 = make_config(tmp_path, branching=2, max_iterations=3)
        config2.model.script_path = config.model.script_path
        summary = run_evolution(config2, resume=True)
        run_root = tmp_path / "runs" / "t"
        events = journal_events(run_root)
        commits = [e["cycle_index"] for e in events if e.get("event") == "generation_commit"]
        assert commits == [1, 2, 3]
        assert summary.completed_iterations == 3
