"""Prompt construction from versioned on-disk template sets.

A template set lives in ``<root>/<template_id>/`` with one UTF-8 file
per (kind, language): generate, constrain, score, baseline. Placeholders
use ``{name}`` syntax and every template must contain exactly the
placeholders its kind requires, checked at load time.

Scoring and baseline templates must end with the exact suffix
``"The answer is "`` so that option letters can be teacher-forced as the
continuation; the loader strips only trailing newline characters so the
trailing space survives.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

from .corpus import QuestionItem

if TYPE_CHECKING:
    from .constrainer import Explanation

ANSWER_SUFFIX = "The answer is "
KINDS = ("generate", "constrain", "score", "baseline")
DEFAULT_TEMPLATE_ID = "default-v1"

REQUIRED_PLACEHOLDERS: dict[str, frozenset[str]] = {
    "generate": frozenset({"stem", "options"}),
    "constrain": frozenset({"stem", "options", "base_explanation", "word_budget"}),
    "score": frozenset({"stem", "explanation", "options"}),
    "baseline": frozenset({"stem", "options"}),
}


class PromptError(ValueError):
    """Invalid render request."""


class TemplateError(PromptError):
    """Missing template file or malformed placeholder set."""


class UnmaskedExplanationError(PromptError):
    """An explanation that has not passed leak masking reached scoring."""


def default_template_root() -> Path:
    return Path(__file__).resolve().parent / "templates"


def _check_placeholders(kind: str, template: str) -> None:
    found: set[str] = set()
    for _literal, field_name, format_spec, conversion in string.Formatter().parse(template):
        if field_name is None:
            continue
        if field_name == "" or field_name.isdigit():
            raise TemplateError(f"{kind}: positional placeholders are not allowed")
        if format_spec or conversion is not None:
            raise TemplateError(f"{kind}: placeholder {{{field_name}}} must be bare")
        found.add(field_name)
    required = REQUIRED_PLACEHOLDERS[kind]
    if found != required:
        missing = sorted(required - found)
        extra = sorted(found - required)
        raise TemplateError(
            f"{kind}: placeholder set mismatch (missing {missing}, unexpected {extra})"
        )


@dataclass(frozen=True)
class PromptTemplateSet:
    """The four templates for one (template_id, language)."""

    template_id: str
    language: str
    generation_template: str
    constrain_template: str
    scoring_template: str
    baseline_template: str

    def __post_init__(self) -> None:
        for kind, template in self._by_kind().items():
            _check_placeholders(kind, template)
        for kind in ("score", "baseline"):
            if not self._by_kind()[kind].endswith(ANSWER_SUFFIX):
                raise TemplateError(f"{kind}: template must end with {ANSWER_SUFFIX!r}")

    def _by_kind(self) -> dict[str, str]:
        return {
            "generate": self.generation_template,
            "constrain": self.constrain_template,
            "score": self.scoring_template,
            "baseline": self.baseline_template,
        }


def load_template_set(
    template_id: str, language: str, root: Path | None = None
) -> PromptTemplateSet:
    """Read one template set from disk; strips only trailing newlines."""
    root = root if root is not None else default_template_root()
    set_dir = Path(root) / template_id
    if not set_dir.is_dir():
        raise TemplateError(f"unknown template id {template_id!r} under {root}")
    texts: dict[str, str] = {}
    for kind in KINDS:
        path = set_dir / f"{kind}_{language}.txt"
        try:
            raw = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise TemplateError(f"missing template file {path}: {exc}") from exc
        texts[kind] = raw.rstrip("\r\n")
    return PromptTemplateSet(
        template_id=template_id,
        language=language,
        generation_template=texts["generate"],
        constrain_template=texts["constrain"],
        scoring_template=texts["score"],
        baseline_template=texts["baseline"],
    )


@dataclass(frozen=True)
class RenderedPrompt:
    kind: str
    text: str
    item_id: str
    level: int | str
    template_id: str

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise PromptError(f"unknown prompt kind {self.kind!r}")
        if not self.text:
            raise PromptError("rendered prompt must be non-empty")
        if self.kind in ("score", "baseline") and not self.text.endswith(ANSWER_SUFFIX):
            raise PromptError(f"{self.kind} prompt must end with {ANSWER_SUFFIX!r}")


def format_options(item: QuestionItem) -> str:
    return "\n".join(f"{label}) {text}" for label, text in item.options.items())


def _render(kind: str, templates: PromptTemplateSet, mapping: dict[str, str]) -> str:
    try:
        return templates._by_kind()[kind].format_map(mapping)
    except (KeyError, IndexError) as exc:  # pragma: no cover - load-time checks make this unreachable
        raise TemplateError(f"{kind}: unbound placeholder {exc}") from exc


def _check_language(item: QuestionItem, templates: PromptTemplateSet) -> None:
    if item.language != templates.language:
        raise PromptError(
            f"item {item.id} is {item.language!r} but templates are {templates.language!r}"
        )


def render_generation(item: QuestionItem, templates: PromptTemplateSet) -> RenderedPrompt:
    """Prompt asking for an answer letter plus a free-length explanation."""
    _check_language(item, templates)
    text = _render("generate", templates, {"stem": item.stem, "options": format_options(item)})
    return RenderedPrompt("generate", text, item.id, 0, templates.template_id)


def render_constrain(
    item: QuestionItem,
    base: "Explanation",
    word_budget: int,
    templates: PromptTemplateSet,
) -> RenderedPrompt:
    """Prompt asking to rewrite the base explanation within a word budget."""
    _check_language(item, templates)
    if base.level != 0:
        raise PromptError(f"constrain rewrites the level-0 base, got level {base.level}")
    if base.item_id != item.id:
        raise PromptError(f"explanation {base.item_id!r} does not belong to item {item.id!r}")
    if word_budget < 1:
        raise PromptError(f"word budget must be >= 1, got {word_budget}")
    text = _render(
        "constrain",
        templates,
        {
            "stem": item.stem,
            "options": format_options(item),
            "base_explanation": base.text,
            "word_budget": str(word_budget),
        },
    )
    return RenderedPrompt("constrain", text, item.id, 0, templates.template_id)


def render_scoring(
    item: QuestionItem,
    explanation: "Explanation | None",
    templates: PromptTemplateSet,
) -> RenderedPrompt:
    """Scoring prompt for one explanation, or the no-explanation baseline.

    Refuses any explanation that is not marked masked or that still
    trips the leak check; raw explanation text must never reach the
    scoring model.
    """
    from .masker import verify_masked

    _check_language(item, templates)
    if explanation is None:
        text = _render(
            "baseline", templates, {"stem": item.stem, "options": format_options(item)}
        )
        return RenderedPrompt("baseline", text, item.id, "noexp", templates.template_id)

    if explanation.item_id != item.id:
        raise PromptError(
            f"explanation {explanation.item_id!r} does not belong to item {item.id!r}"
        )
    if explanation.masking != "masked":
        raise UnmaskedExplanationError(f"{item.id}: explanation has not been masked")
    if not verify_masked(explanation.text, item):
        raise UnmaskedExplanationError(f"{item.id}: masked explanation still leaks the answer")
    text = _render(
        "score",
        templates,
        {
            "stem": item.stem,
            "explanation": explanation.text,
            "options": format_options(item),
        },
    )
    return RenderedPrompt("score", text, item.id, explanation.level, templates.template_id)
