"""Prompt assembly under a token budget, plus the baseline prompt modes."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .context import (
    CLASS_FIELD,
    CLASS_SIGNATURE,
    DOCSTRING,
    FOCAL_METHOD,
    GLOBAL_EXPRESSION,
    IMPORT,
    PEER_METHOD_FULL,
    PEER_METHOD_SIGNATURE,
    ContextElement,
    MarkedMethod,
    MethodSpan,
)
from .errors import ArityError, HardOverflow

logger = logging.getLogger(__name__)

HINT_HEADER = "// Structurally similar fix"
HINT = "hint"
BUG_TYPE = "bug_type"
MARKED_METHOD = "marked_method"

# template order of the five prompt sections
SECTION = {
    HINT: 1,
    BUG_TYPE: 2,
    IMPORT: 3,
    CLASS_SIGNATURE: 3,
    CLASS_FIELD: 3,
    DOCSTRING: 3,
    PEER_METHOD_SIGNATURE: 3,
    GLOBAL_EXPRESSION: 3,
    PEER_METHOD_FULL: 3,
    FOCAL_METHOD: 4,
    MARKED_METHOD: 5,
}

# eviction order under budget pressure; bug type and marked method are never dropped
DROP_ORDER = (
    PEER_METHOD_FULL,
    GLOBAL_EXPRESSION,
    PEER_METHOD_SIGNATURE,
    DOCSTRING,
    IMPORT,
    CLASS_FIELD,
    HINT,
    CLASS_SIGNATURE,
    FOCAL_METHOD,
)

_WORD_OR_PUNCT = re.compile(r"\w+|[^\w\s]")
_SUBWORD = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|\d+|[^\W\d_A-Za-z]+")


def tokenize(text: str) -> list[str]:
    """Backend-independent sub-word pieces.

    Split on whitespace and punctuation (each punctuation character is a piece),
    then split identifiers on snake_case and camelCase boundaries.
    """
    pieces: list[str] = []
    for tok in _WORD_OR_PUNCT.findall(text):
        if tok[0].isalnum() or tok[0] == "_":
            pieces.extend(_SUBWORD.findall(tok))
        else:
            pieces.append(tok)
    return pieces


def count_tokens(text: str) -> int:
    return len(tokenize(text))


@dataclass(frozen=True)
class TokenBudget:
    context_window: int = 2048
    generation_reserve: int = 1024
    backend_counts_tokens: bool = False
    safety_margin: float = 0.10

    def __post_init__(self) -> None:
        if self.context_window - self.generation_reserve <= 0:
            raise ValueError("prompt budget must be positive")

    @property
    def prompt_budget(self) -> int:
        budget = self.context_window - self.generation_reserve
        if self.backend_counts_tokens:
            # our count only approximates the backend tokenizer
            budget = int(budget * (1.0 - self.safety_margin))
        return budget


@dataclass(frozen=True)
class PromptPart:
    kind: str
    text: str
    token_count: int


@dataclass
class PromptBundle:
    parts: list[PromptPart]
    budget: int
    dropped_parts: list[dict] = field(default_factory=list)

    @property
    def assembled_text(self) -> str:
        return "\n".join(p.text for p in self.parts)

    @property
    def total_tokens(self) -> int:
        return count_tokens(self.assembled_text)

    def kinds(self) -> list[str]:
        return [p.kind for p in self.parts]

    def to_json(self) -> dict:
        return {
            "parts": [asdict(p) for p in self.parts],
            "assembled_text": self.assembled_text,
            "total_tokens": self.total_tokens,
            "budget": self.budget,
            "dropped_parts": self.dropped_parts,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, ensure_ascii=False)


def bug_type_line(bug_type: str) -> str:
    return f"// Bug type: {bug_type}"


def _part(kind: str, text: str) -> PromptPart:
    return PromptPart(kind, text, count_tokens(text))


def assemble_repair_prompt(
    hints: Sequence[str],
    bug_type: str,
    ewash_elements: Sequence[ContextElement],
    focal: Sequence[MethodSpan | str],
    marked_method: MarkedMethod | str,
    budget: TokenBudget | None = None,
    file_text: str | None = None,
) -> PromptBundle:
    """Build the repair prompt: hints, bug type, file context, focal methods, buggy method.

    File-context elements are rendered in file order. When the prompt is over
    budget, parts are evicted in ``DROP_ORDER``; within a kind, the lowest-priority
    element goes first (for hints, the second before the first).
    """
    budget = budget or TokenBudget()
    limit = budget.prompt_budget
    marked = marked_method.text_with_markers if isinstance(marked_method, MarkedMethod) else marked_method

    # (section, position within section, eviction priority within kind, part)
    entries: list[tuple[int, int, int, PromptPart]] = []
    for i, fix in enumerate(hints):
        entries.append((SECTION[HINT], i, i, _part(HINT, f"{HINT_HEADER}\n{fix}")))
    entries.append((SECTION[BUG_TYPE], 0, 0, _part(BUG_TYPE, bug_type_line(bug_type))))
    for el in ewash_elements:
        if el.kind == FOCAL_METHOD:
            continue
        entries.append((SECTION[el.kind], el.offset, el.priority_rank, _part(el.kind, el.text)))
    for i, f in enumerate(focal):
        if isinstance(f, MethodSpan):
            text = f.full_text(file_text) if file_text is not None else (
                f"{f.docstring}\n{f.body_text}" if f.docstring else f.body_text
            )
        else:
            text = f
        entries.append((SECTION[FOCAL_METHOD], i, i, _part(FOCAL_METHOD, text)))
    entries.append((SECTION[MARKED_METHOD], 0, 0, _part(MARKED_METHOD, marked)))

    fixed_cost = count_tokens(marked) + count_tokens(bug_type_line(bug_type))
    if fixed_cost > limit:
        raise HardOverflow(f"buggy method needs {fixed_cost} tokens, budget is {limit}")

    entries.sort(key=lambda e: (e[0], e[1]))
    kept = list(entries)
    dropped: list[dict] = []
    total = sum(e[3].token_count for e in kept)
    for kind in DROP_ORDER:
        if total <= limit:
            break
        victims = sorted((e for e in kept if e[3].kind == kind), key=lambda e: -e[2])
        for victim in victims:
            if total <= limit:
                break
            kept.remove(victim)
            total -= victim[3].token_count
            dropped.append({"kind": kind, "tokens": victim[3].token_count, "reason": "over_budget"})
    bundle = PromptBundle(parts=[e[3] for e in kept], budget=limit, dropped_parts=dropped)
    if dropped:
        logger.debug("dropped %d prompt part(s) to fit %d tokens", len(dropped), limit)
    return bundle


# -- baseline prompts --------------------------------------------------------

BUGGY_HEADER = "// Buggy code"
FIXED_HEADER = "// Fixed code"
ONLY_CODE_DIRECTIVE = "Only output the fixed code snippet in your response, with no explanation."

DEMONSTRATION = "demonstration"
COMPLETION = "completion"
INSTRUCTION = "instruction"


def assemble_baseline_prompt(
    mode: str,
    *,
    buggy_snippet: str = "",
    exemplars: Sequence[tuple[str, str]] = (),
    file_text: str = "",
    method: MethodSpan | None = None,
    bug_type: str = "",
    qualifier: str = "",
    language: str = "Java",
    budget: TokenBudget | None = None,
) -> PromptBundle:
    """Few-shot demonstration, zero-shot completion, or natural-language instruction prompt."""
    budget = budget or TokenBudget()
    limit = budget.prompt_budget
    if mode == DEMONSTRATION:
        if len(exemplars) != 2:
            raise ArityError(f"demonstration prompts take exactly 2 exemplars, got {len(exemplars)}")
        blocks = [f"{BUGGY_HEADER}\n{b}\n{FIXED_HEADER}\n{f}\n" for b, f in exemplars]
        parts = [_part("exemplar", b) for b in blocks]
        parts.append(_part("query", f"{BUGGY_HEADER}\n{buggy_snippet}\n{FIXED_HEADER}"))
        dropped: list[dict] = []
    elif mode == COMPLETION:
        if method is None:
            raise ValueError("completion prompts need the buggy method span")
        prefix = file_text[: method.start_offset]
        dropped = []
        # keep the lines nearest to the method when the prefix is too long
        while count_tokens(prefix) > limit and "\n" in prefix:
            cut = prefix.index("\n") + 1
            dropped.append({"kind": "prefix_line", "tokens": count_tokens(prefix[:cut]), "reason": "over_budget"})
            prefix = prefix[cut:]
        parts = [_part("prefix", prefix)]
    elif mode == INSTRUCTION:
        statement = (
            f"The static analyzer reports a {bug_type} bug in the following {language} method: "
            f"{qualifier}\nFix the bug and return the corrected method."
        )
        parts = [_part("instruction", statement), _part("query", buggy_snippet), _part("directive", ONLY_CODE_DIRECTIVE)]
        dropped = []
    else:
        raise ValueError(f"unknown baseline mode {mode!r}")
    bundle = PromptBundle(parts=parts, budget=limit, dropped_parts=dropped)
    if bundle.total_tokens > limit:
        raise HardOverflow(f"{mode} prompt needs {bundle.total_tokens} tokens, budget is {limit}")
    return bundle
