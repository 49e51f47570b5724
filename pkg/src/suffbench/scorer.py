"""Option-probability scoring with a fixed probe model.

Each of the four option letters is teacher-forced as the continuation
" X" of a prompt ending in "The answer is ", its token logprobs are
summed without length normalization, and a numerically stable softmax
over the four sums gives the option distribution. Sufficiency is the
probability assigned to the gold option; the prediction is the argmax
with alphabetical tie-breaking.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping

from .constrainer import ALL_LEVELS
from .corpus import LABELS, LANGUAGES, QuestionItem
from .gateway import Gateway, ModelEndpoint
from .prompts import ANSWER_SUFFIX, RenderedPrompt, render_scoring

if TYPE_CHECKING:
    from .constrainer import Explanation
    from .prompts import PromptTemplateSet

BASELINE_MODEL = "baseline"
BASELINE_LEVEL = "noexp"


class ScoringError(ValueError):
    """Malformed scoring input or result."""


def softmax_probs(logprobs: Mapping[str, float]) -> dict[str, float]:
    """Softmax over the four option logprob sums, max-subtracted so very
    negative inputs underflow to 0.0 instead of overflowing."""
    if set(logprobs) != set(LABELS):
        raise ScoringError(f"logprobs must cover exactly {LABELS}, got {sorted(logprobs)}")
    peak = max(logprobs.values())
    exps = {option: math.exp(logprobs[option] - peak) for option in LABELS}
    total = sum(exps.values())
    return {option: exps[option] / total for option in LABELS}


def predict(option_probs: Mapping[str, float]) -> str:
    """Argmax option; max() keeps the first maximum, so ties resolve
    alphabetically."""
    return max(LABELS, key=option_probs.__getitem__)


@dataclass(frozen=True)
class ScoreResult:
    item_id: str
    language: str
    generator_model: str
    level: int | str
    option_probs: dict[str, float]
    sufficiency: float
    predicted: str
    correct: bool
    scorer_model: str
    prompt_fingerprint: str
    run_id: str = ""

    def __post_init__(self) -> None:
        if self.language not in LANGUAGES:
            raise ScoringError(f"unknown language {self.language!r}")
        if self.level != BASELINE_LEVEL and self.level not in ALL_LEVELS:
            raise ScoringError(f"level {self.level!r} not in {ALL_LEVELS} or {BASELINE_LEVEL!r}")
        if (self.level == BASELINE_LEVEL) != (self.generator_model == BASELINE_MODEL):
            raise ScoringError("baseline rows pair level 'noexp' with model 'baseline'")
        if tuple(self.option_probs) != LABELS:
            raise ScoringError(f"option_probs must be keyed {LABELS} in order")
        if any(p < 0.0 for p in self.option_probs.values()):
            raise ScoringError("option probabilities must be non-negative")
        if abs(sum(self.option_probs.values()) - 1.0) > 1e-9:
            raise ScoringError("option probabilities must sum to 1")
        if not 0.0 <= self.sufficiency <= 1.0:
            raise ScoringError(f"sufficiency {self.sufficiency} outside [0, 1]")
        if self.predicted not in LABELS:
            raise ScoringError(f"predicted {self.predicted!r} outside A-D")


def _prompt_fingerprint(scorer_model: str, prompt_text: str) -> str:
    blob = f"{scorer_model}\n{prompt_text}".encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def score_options(
    gateway: Gateway, scorer: ModelEndpoint, prompt: RenderedPrompt
) -> dict[str, float]:
    """Option distribution for one scoring or baseline prompt."""
    if prompt.kind not in ("score", "baseline"):
        raise ScoringError(f"cannot score a {prompt.kind!r} prompt")
    if not prompt.text.endswith(ANSWER_SUFFIX):
        raise ScoringError(f"scoring prompt must end with {ANSWER_SUFFIX!r}")
    totals = {
        option: gateway.score_continuation(scorer, prompt.text, f" {option}").total_logprob
        for option in LABELS
    }
    return softmax_probs(totals)


def score_item(
    gateway: Gateway,
    scorer: ModelEndpoint,
    item: QuestionItem,
    explanation: "Explanation | None",
    templates: "PromptTemplateSet",
) -> ScoreResult:
    """Score one masked explanation, or the no-explanation baseline when
    explanation is None."""
    prompt = render_scoring(item, explanation, templates)
    option_probs = score_options(gateway, scorer, prompt)
    predicted = predict(option_probs)
    return ScoreResult(
        item_id=item.id,
        language=item.language,
        generator_model=explanation.generator_model if explanation else BASELINE_MODEL,
        level=explanation.level if explanation else BASELINE_LEVEL,
        option_probs=option_probs,
        sufficiency=option_probs[item.gold],
        predicted=predicted,
        correct=predicted == item.gold,
        scorer_model=scorer.model_id,
        prompt_fingerprint=_prompt_fingerprint(scorer.model_id, prompt.text),
    )
