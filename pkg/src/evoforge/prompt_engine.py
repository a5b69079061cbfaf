"""Prompt construction and search/replace edit handling.

Builds direct, two-stage meta, and repair prompts from a parent program and
sampled inspirations, and parses/applies the edit scripts the model returns.
Stateless: every function is a pure function of its inputs plus an explicit
random.Random for template choice.
"""

from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)

SEARCH_MARKER = "<<<<<<< SEARCH"
DIVIDER_MARKER = "======="
REPLACE_MARKER = ">>>>>>> REPLACE"

IDEA_CAP_CHARS = 4000
ERROR_CAP_CHARS = 8000
INSPIRATION_BYTE_BUDGET = 24000

FORMAT_INSTRUCTIONS = """Respond with one or more edit blocks in exactly this format:

<<<<<<< SEARCH
(exact lines copied from the current program)
=======
(replacement lines)
>>>>>>> REPLACE

The SEARCH text must match the current program verbatim, including
whitespace. Use several small blocks rather than one large rewrite."""


class PromptConfigError(ValueError):
    """Template pool or template file problems."""


class NoEditsError(ValueError):
    """Completion contained zero well-formed edit blocks."""


class MalformedScriptError(ValueError):
    """An edit block was opened but not correctly terminated."""


class FailedMatchError(ValueError):
    """A block's search text was not found in the working source."""

    def __init__(self, block_index: int, search_text: str):
        self.block_index = block_index
        preview = search_text[:80].replace("\n", "\\n")
        super().__init__(f"edit block {block_index}: search text not found: '{preview}'")


@dataclass
class EditBlock:
    search: str
    replace: str


@dataclass
class EditScript:
    blocks: List[EditBlock]


@dataclass
class Snippet:
    """One inspiration program: its source plus a short metrics summary."""

    source: str
    summary: str


@dataclass
class PromptBundle:
    kind: str  # direct | meta_idea | meta_implement | repair
    template_id: str
    parent_source: str
    top_snippets: List[Snippet] = field(default_factory=list)
    diverse_snippets: List[Snippet] = field(default_factory=list)
    idea_text: Optional[str] = None
    error_text: Optional[str] = None
    rendered: str = ""


_PLACEHOLDER_RE = re.compile(r"\{\{(parent|inspirations|idea|error|format_instructions)\}\}")


def render_template(template: str, values: Dict[str, str]) -> str:
    """Substitute {{name}} placeholders. Only placeholders present in the
    template itself are expanded; placeholder-like text inside substituted
    values is left alone."""
    parts: List[str] = []
    pos = 0
    for match in _PLACEHOLDER_RE.finditer(template):
        parts.append(template[pos : match.start()])
        parts.append(values.get(match.group(1), ""))
        pos = match.end()
    parts.append(template[pos:])
    return "".join(parts)


# --------------------------------------------------------------------------
# Built-in templates

_DIRECT_TEMPLATES: List[Tuple[str, str]] = [
    (
        "conservative-optimize",
        """You are optimizing a training program for speed at a fixed validation-loss target.
Make one or two careful, low-risk changes that reduce step time without hurting loss.

Current program:
```
{{parent}}
```
{{inspirations}}
{{format_instructions}}""",
    ),
    (
        "aggressive-rewrite",
        """You are optimizing a training program for speed at a fixed validation-loss target.
Propose a bold restructuring of the slowest part of the program. Larger changes
are welcome as long as the program still runs.

Current program:
```
{{parent}}
```
{{inspirations}}
{{format_instructions}}""",
    ),
    (
        "profile-guided",
        """You are optimizing a training program for speed at a fixed validation-loss target.
Study the profiling summaries below, identify the section with the largest time
share, and change the program to shrink it.

Current program:
```
{{parent}}
```
{{inspirations}}
{{format_instructions}}""",
    ),
]

_META_IDEA_TEMPLATES: List[Tuple[str, str]] = [
    (
        "meta-idea-novel",
        """Below is a training program being optimized for speed at a fixed validation-loss
target, along with reference programs and their metrics. Do NOT write code.
Describe, in plain language, one novel and creative idea for making this
program train faster. Emphasize novelty: avoid ideas already visible in the
reference programs.

Current program:
```
{{parent}}
```
{{inspirations}}
Reply with the idea only, as prose.""",
    ),
    (
        "meta-idea-transfer",
        """Below is a training program being optimized for speed at a fixed validation-loss
target, along with reference programs and their metrics. Do NOT write code.
Describe, in plain language, one creative idea that transfers a technique from a
different area of numerical computing into this program.

Current program:
```
{{parent}}
```
{{inspirations}}
Reply with the idea only, as prose.""",
    ),
]

_META_IMPLEMENT_TEMPLATES: List[Tuple[str, str]] = [
    (
        "meta-implement-a",
        """Implement the following idea in the program below.

Idea:
{{idea}}

Current program:
```
{{parent}}
```
{{format_instructions}}""",
    ),
    (
        "meta-implement-b",
        """Apply this proposed improvement to the program below, keeping the change as
faithful to the idea as practical.

Idea:
{{idea}}

Current program:
```
{{parent}}
```
{{format_instructions}}""",
    ),
]

_REPAIR_TEMPLATE = (
    "repair-default",
    """The following program fails to run. Fix it with minimal changes.

Program:
```
{{parent}}
```

Captured error output:
```
{{error}}
```
{{format_instructions}}""",
)


@dataclass
class TemplatePool:
    """Pool of direct-prompt templates; user files may extend or replace it."""

    templates: List[Tuple[str, str]] = field(default_factory=lambda: list(_DIRECT_TEMPLATES))

    def __post_init__(self):
        if not self.templates:
            raise PromptConfigError("template pool is empty")

    @classmethod
    def from_files(cls, paths: Sequence[Path]) -> "TemplatePool":
        templates = []
        for p in paths:
            text = Path(p).read_text(encoding="utf-8")
            if "{{parent}}" not in text:
                raise PromptConfigError(f"template {p} lacks a {{{{parent}}}} placeholder")
            templates.append((Path(p).stem, text))
        return cls(templates=templates)

    def choose(self, rng: random.Random) -> Tuple[str, str]:
        return self.templates[rng.randrange(len(self.templates))]


def _render_inspirations(
    top: Sequence[Snippet], diverse: Sequence[Snippet], byte_budget: int = INSPIRATION_BYTE_BUDGET
) -> str:
    """Format inspiration sections, T first then D. When over budget, sources
    are truncated starting from the least-elite entries (diverse set first,
    in reverse order), keeping the head of each source."""
    labeled = [("Top program", s) for s in top] + [("Diverse program", s) for s in diverse]
    if not labeled:
        return ""
    sources = [s.source for _, s in labeled]
    total = sum(len(src.encode("utf-8")) for src in sources)
    marker = "\n... [truncated]"
    for i in range(len(sources) - 1, -1, -1):
        if total <= byte_budget:
            break
        over = total - byte_budget
        keep = max(0, len(sources[i].encode("utf-8")) - over - len(marker))
        truncated = sources[i].encode("utf-8")[:keep].decode("utf-8", errors="ignore") + marker
        total -= len(sources[i].encode("utf-8")) - len(truncated.encode("utf-8"))
        sources[i] = truncated
    parts = []
    for (label, snip), src in zip(labeled, sources):
        parts.append(f"--- {label} ({snip.summary}) ---\n```\n{src}\n```\n")
    return "Reference programs for inspiration:\n" + "".join(parts)


def build_direct_prompt(
    parent_source: str,
    top: Sequence[Snippet],
    diverse: Sequence[Snippet],
    rng: random.Random,
    pool: Optional[TemplatePool] = None,
) -> PromptBundle:
    pool = pool or TemplatePool()
    template_id, template = pool.choose(rng)
    rendered = render_template(
        template,
        {
            "parent": parent_source,
            "inspirations": _render_inspirations(top, diverse),
            "format_instructions": FORMAT_INSTRUCTIONS,
        },
    )
    return PromptBundle(
        kind="direct",
        template_id=template_id,
        parent_source=parent_source,
        top_snippets=list(top),
        diverse_snippets=list(diverse),
        rendered=rendered,
    )


def build_meta_prompts(
    parent_source: str,
    top: Sequence[Snippet],
    diverse: Sequence[Snippet],
    rng: random.Random,
) -> Tuple[PromptBundle, Callable[[str], PromptBundle]]:
    """Two-stage meta prompting: stage 1 asks for a prose idea (no code),
    the returned builder embeds that idea into a stage-2 implementation
    prompt. One template draw covers both stages."""
    idx = rng.randrange(len(_META_IDEA_TEMPLATES))
    idea_id, idea_template = _META_IDEA_TEMPLATES[idx]
    impl_id, impl_template = _META_IMPLEMENT_TEMPLATES[idx % len(_META_IMPLEMENT_TEMPLATES)]

    stage1 = PromptBundle(
        kind="meta_idea",
        template_id=idea_id,
        parent_source=parent_source,
        top_snippets=list(top),
        diverse_snippets=list(diverse),
        rendered=render_template(
            idea_template,
            {"parent": parent_source, "inspirations": _render_inspirations(top, diverse)},
        ),
    )

    def stage2(idea_text: str) -> PromptBundle:
        if not idea_text or not idea_text.strip():
            raise ValueError("stage-2 meta prompt requires a non-empty idea")
        idea = idea_text.strip()
        if len(idea) > IDEA_CAP_CHARS:
            idea = idea[:IDEA_CAP_CHARS]
        return PromptBundle(
            kind="meta_implement",
            template_id=impl_id,
            parent_source=parent_source,
            idea_text=idea,
            rendered=render_template(
                impl_template,
                {
                    "parent": parent_source,
                    "idea": idea,
                    "format_instructions": FORMAT_INSTRUCTIONS,
                },
            ),
        )

    return stage1, stage2


def build_repair_prompt(candidate_source: str, error_text: str) -> PromptBundle:
    if not error_text:
        raise ValueError("repair prompt requires non-empty error text")
    if len(error_text) > ERROR_CAP_CHARS:
        # Tail-biased: errors usually sit at the end of the log.
        error_text = "[... truncated ...]\n" + error_text[-ERROR_CAP_CHARS:]
    template_id, template = _REPAIR_TEMPLATE
    rendered = render_template(
        template,
        {
            "parent": candidate_source,
            "error": error_text,
            "format_instructions": FORMAT_INSTRUCTIONS,
        },
    )
    return PromptBundle(
        kind="repair",
        template_id=template_id,
        parent_source=candidate_source,
        error_text=error_text,
        rendered=rendered,
    )


# --------------------------------------------------------------------------
# Edit scripts


def parse_edit_script(completion_text: str) -> EditScript:
    """Extract search/replace blocks delimited by the exact marker lines.

    Payload bytes between markers are taken verbatim (lines joined with \\n);
    anything outside blocks is ignored.
    """
    lines = completion_text.split("\n")
    blocks: List[EditBlock] = []
    i = 0
    while i < len(lines):
        if lines[i].strip() != SEARCH_MARKER:
            i += 1
            continue
        search_lines: List[str] = []
        replace_lines: List[str] = []
        i += 1
        while i < len(lines) and lines[i].strip() != DIVIDER_MARKER:
            if lines[i].strip() == REPLACE_MARKER or lines[i].strip() == SEARCH_MARKER:
                raise MalformedScriptError(f"block {len(blocks)}: missing '{DIVIDER_MARKER}' divider")
            search_lines.append(lines[i])
            i += 1
        if i >= len(lines):
            raise MalformedScriptError(f"block {len(blocks)}: unterminated (no divider)")
        i += 1
        while i < len(lines) and lines[i].strip() != REPLACE_MARKER:
            if lines[i].strip() == SEARCH_MARKER:
                raise MalformedScriptError(f"block {len(blocks)}: unterminated (no '{REPLACE_MARKER}')")
            replace_lines.append(lines[i])
            i += 1
        if i >= len(lines):
            raise MalformedScriptError(f"block {len(blocks)}: unterminated (no '{REPLACE_MARKER}')")
        i += 1
        search = "\n".join(search_lines)
        if not search:
            raise MalformedScriptError(f"block {len(blocks)}: empty search text")
        blocks.append(EditBlock(search=search, replace="\n".join(replace_lines)))
    if not blocks:
        raise NoEditsError("completion contains no well-formed edit blocks")
    return EditScript(blocks=blocks)


def apply_edit_script(
    source: str,
    script: EditScript,
    on_warning: Optional[Callable[[str], None]] = None,
) -> str:
    """Apply blocks sequentially, each replacing the first occurrence of its
    search text. Multiple occurrences trigger an ambiguous-match warning;
    zero occurrences raise FailedMatchError naming the block."""
    if not script.blocks:
        raise ValueError("empty edit script")
    warn = on_warning or (lambda msg: logger.warning(msg))
    working = source
    for index, block in enumerate(script.blocks):
        count = working.count(block.search)
        if count == 0:
            raise FailedMatchError(index, block.search)
        if count > 1:
            warn(f"edit block {index}: search text matches {count} locations; using the first")
        pos = working.index(block.search)
        working = working[:pos] + block.replace + working[pos + len(block.search) :]
    return working
