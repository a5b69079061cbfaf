"""Evolutionary program-search engine with an island database, LLM-driven
search/replace edits, and integrity-guarded subprocess evaluation."""

from .integrity import (
    InjectionSpec,
    ProtectedParams,
    SliceSpec,
    compile_injection_plan,
    manifest_digest,
    verify_report,
)
from .lm_gateway import LMGateway, ModelConfig, ScriptedProvider, load_script
from .pipeline import (
    EvolutionEngine,
    HarnessConfig,
    RunConfig,
    RunSummary,
    classify,
    compute_score,
    run_evolution,
)
from .program_store import EliteArchive, IslandState, ProgramRecord, ProgramStore
from .prompt_engine import (
    EditScript,
    PromptBundle,
    apply_edit_script,
    build_direct_prompt,
    build_meta_prompts,
    build_repair_prompt,
    parse_edit_script,
)
from .telemetry import (
    FrontierState,
    MetricsReport,
    SectionProfile,
    parse_metrics,
    render_run_report,
    serialize_metrics,
    update_frontier,
)

__version__ = "0.1.0"
