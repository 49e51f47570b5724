"""Explanations, word budgets, and budget-constrained regeneration.

A level-0 explanation is the model's free-length justification of its
answer. For each enforced reduction level v in {10..90} the explanation
is regenerated under a word budget of floor((1 - v/100) * base words),
retried a fixed number of times on violation, then hard-truncated.
"""

from __future__ import annotations

import logging
import re
import unicodedata
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .corpus import QuestionItem
    from .gateway import Gateway, GenerationResult, ModelEndpoint
    from .prompts import PromptTemplateSet

log = logging.getLogger(__name__)

CONSTRAINT_LEVELS = tuple(range(10, 100, 10))
ALL_LEVELS = (0,) + CONSTRAINT_LEVELS

# regenerations after the first attempt, before hard truncation
BUDGET_RETRIES = 3

LENGTH_STATUSES = ("within_budget", "truncated", "over_budget_accepted")
MASKING_STATES = ("raw", "masked")


class ExplanationError(ValueError):
    """Invalid explanation state or level."""


class UnparseableOutput(ExplanationError):
    """Generator output does not follow the Answer/Explanation format."""


class EmptyRegeneration(ExplanationError):
    """Constrained regeneration produced no usable text after all retries."""


def count_words(text: str, language: str | None = None) -> int:
    """Number of maximal non-whitespace runs after NFC normalization.

    The rule is script-agnostic; `language` is accepted for interface
    symmetry and ignored.
    """
    return len(unicodedata.normalize("NFC", text).split())


@dataclass(frozen=True)
class Explanation:
    """One explanation text at one reduction level.

    word_count must equal count_words(text); level 0 is the
    unconstrained base and is always within budget by definition.
    """

    item_id: str
    language: str
    generator_model: str
    level: int
    text: str
    word_count: int
    masking: str = "raw"
    length_status: str = "within_budget"
    run_id: str = ""

    def __post_init__(self) -> None:
        if self.level not in ALL_LEVELS:
            raise ExplanationError(f"level {self.level!r} not in {ALL_LEVELS}")
        if self.masking not in MASKING_STATES:
            raise ExplanationError(f"unknown masking state {self.masking!r}")
        if self.length_status not in LENGTH_STATUSES:
            raise ExplanationError(f"unknown length status {self.length_status!r}")
        if self.level == 0 and self.length_status != "within_budget":
            raise ExplanationError("level 0 explanations are unconstrained")
        actual = count_words(self.text)
        if self.word_count != actual:
            raise ExplanationError(
                f"{self.item_id}: word_count {self.word_count} != counted {actual}"
            )


def make_explanation(
    item_id: str,
    language: str,
    generator_model: str,
    level: int,
    text: str,
    *,
    masking: str = "raw",
    length_status: str = "within_budget",
) -> Explanation:
    """Build an Explanation with NFC-normalized text and derived word count."""
    text = unicodedata.normalize("NFC", text)
    return Explanation(
        item_id=item_id,
        language=language,
        generator_model=generator_model,
        level=level,
        text=text,
        word_count=count_words(text),
        masking=masking,
        length_status=length_status,
    )


@dataclass(frozen=True)
class BudgetTable:
    """Word budgets per reduction level for one base explanation."""

    base_word_count: int
    budgets: dict[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.base_word_count < 1:
            raise ExplanationError("base explanation must contain at least one word")
        if tuple(self.budgets) != CONSTRAINT_LEVELS:
            raise ExplanationError(f"budget table must cover levels {CONSTRAINT_LEVELS}")
        values = list(self.budgets.values())
        if any(b < 1 for b in values):
            raise ExplanationError("budgets must be >= 1")
        if any(a < b for a, b in zip(values, values[1:])):
            raise ExplanationError("budgets must be non-increasing in the level")


def compute_budgets(base: Explanation) -> BudgetTable:
    """Budget per level: max(1, floor((1 - v/100) * base words)).

    Computed in integer arithmetic; float multiplication loses exactness
    (e.g. a 20-word base at level 90 must give 2, not floor(1.9999...)).
    """
    if base.level != 0:
        raise ExplanationError(f"budgets derive from the level-0 base, got level {base.level}")
    wc = base.word_count
    budgets = {v: max(1, (100 - v) * wc // 100) for v in CONSTRAINT_LEVELS}
    return BudgetTable(base_word_count=wc, budgets=budgets)


_ANSWER_RE = re.compile(r"^\s*answer\s*:\s*(\S+)\s*$", re.IGNORECASE)
_EXPLANATION_RE = re.compile(r"^\s*explanation\s*:\s*(.*)$", re.IGNORECASE)


def extract_answer_and_explanation(raw: "GenerationResult | str") -> tuple[str, str]:
    """Parse the required generator output format:

        Answer: <letter>
        Explanation: <free text, may span lines>

    Keywords tolerate leading whitespace and any case; the letter itself
    must be an uppercase A-D. Anything else raises UnparseableOutput.
    """
    text = raw if isinstance(raw, str) else raw.text
    lines = text.splitlines()
    i = 0
    while i < len(lines) and not lines[i].strip():
        i += 1
    if i == len(lines):
        raise UnparseableOutput("empty generator output")
    m = _ANSWER_RE.match(lines[i])
    if not m:
        raise UnparseableOutput(f"first line is not an answer declaration: {lines[i]!r}")
    letter = m.group(1)
    if letter not in ("A", "B", "C", "D"):
        raise UnparseableOutput(f"answer label {letter!r} outside A-D")
    i += 1
    while i < len(lines) and not lines[i].strip():
        i += 1
    if i == len(lines):
        raise UnparseableOutput("no explanation section")
    m = _EXPLANATION_RE.match(lines[i])
    if not m:
        raise UnparseableOutput(f"expected an explanation section, got {lines[i]!r}")
    parts = [m.group(1)] + lines[i + 1:]
    explanation = "\n".join(parts).strip()
    if not explanation:
        raise UnparseableOutput("empty explanation body")
    return letter, explanation


def _strip_regenerated(text: str) -> str:
    """Constrained rewrites should be bare text, but tolerate a leading
    Explanation: keyword echoed back by the generator."""
    text = text.strip()
    m = _EXPLANATION_RE.match(text)
    if m:
        text = text[m.start(1):].strip()
    return text


def _truncate_words(text: str, budget: int) -> str:
    return " ".join(unicodedata.normalize("NFC", text).split()[:budget])


def constrain_explanation(
    item: "QuestionItem",
    base: Explanation,
    level: int,
    endpoint: "ModelEndpoint",
    templates: "PromptTemplateSet",
    gateway: "Gateway",
    *,
    temperature: float = 0.0,
    max_tokens: int = 512,
    retries: int = BUDGET_RETRIES,
) -> Explanation:
    """Regenerate `base` under the word budget for `level`.

    Retries up to `retries` times on a budget violation; if every attempt
    is over budget the last text is hard-truncated to the first budget
    words and marked length_status="truncated". Retried requests carry a
    cache salt so they are distinct deterministic calls rather than
    replays of the identical one.
    """
    from .prompts import render_constrain

    if level not in CONSTRAINT_LEVELS:
        raise ExplanationError(f"level {level!r} not in {CONSTRAINT_LEVELS}")
    budget = compute_budgets(base).budgets[level]
    prompt = render_constrain(item, base, budget, templates)

    text = ""
    for attempt in range(retries + 1):
        salt = f"retry-{attempt}" if attempt else ""
        result = gateway.generate(
            endpoint, prompt, temperature=temperature, max_tokens=max_tokens, cache_salt=salt
        )
        text = _strip_regenerated(result.text)
        if not text:
            continue
        if count_words(text) <= budget:
            return make_explanation(
                item.id, item.language, endpoint.model_id, level, text,
                length_status="within_budget",
            )
        log.debug(
            "%s level %d attempt %d over budget (%d > %d)",
            item.id, level, attempt, count_words(text), budget,
        )
    if not text:
        raise EmptyRegeneration(f"{item.id}: no text after {retries + 1} attempts")
    return make_explanation(
        item.id, item.language, endpoint.model_id, level, _truncate_words(text, budget),
        length_status="truncated",
    )


def realized_reduction(base: Explanation, constrained: Explanation) -> float:
    """Achieved shrinkage 1 - wc(constrained)/wc(base), recorded for audit;
    the enforced level is what analysis keys on."""
    if base.word_count < 1:
        raise ExplanationError("base explanation must contain at least one word")
    return 1.0 - constrained.word_count / base.word_count
