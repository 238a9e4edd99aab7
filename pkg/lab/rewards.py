"""Verifiable rewards for tagged multiple-choice responses.

A response earns four rule-based components: format adherence, answer
correctness, a length-shaped cosine term and a repeated n-gram penalty. The
total is their weighted sum.
"""

import logging
import math
import re
from enum import Enum
from typing import Optional, Sequence

from pydantic import BaseModel, Field, model_validator

from lab.errors import ConfigError, InputError

logger = logging.getLogger(__name__)

# Structural tags of the response grammar
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "</answer>"
STRUCTURAL_TAGS = (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)

# Option letters, enough for nine options
CHOICE_LETTERS = "ABCDEFGHI"

DEFAULT_NGRAM = 3

_ANSWER_SPAN = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_TAGGED_RESPONSE = re.compile(r"\s*<think>(.*?)</think>\s*<answer>(.*?)</answer>\s*", re.DOTALL)


class Outcome(str, Enum):
    CORRECT = "correct"
    WRONG_VALID = "wrong_valid"
    INVALID = "invalid"


class RewardWeights(BaseModel):
    w_cls: float = Field(3.0, ge=0)
    w_fmt: float = Field(1.0, ge=0)
    w_cos: float = Field(1.0, ge=0)
    w_rep: float = Field(1.0, ge=0)


class CosineSchedule(BaseModel):
    """Endpoints of the length-shaped reward for correct and wrong answers."""

    l_max: int = Field(16, gt=0)
    r_correct_at_0: float = 1.0
    r_correct_at_lmax: float = 0.0
    r_wrong_at_0: float = -0.5
    r_wrong_at_lmax: float = 0.0

    @model_validator(mode="after")
    def check_endpoints(self) -> "CosineSchedule":
        if not self.r_correct_at_0 > self.r_correct_at_lmax:
            raise ValueError("correct answers must prefer shorter reasoning")
        if not self.r_wrong_at_0 < self.r_wrong_at_lmax:
            raise ValueError("wrong answers must prefer longer reasoning")
        endpoints = (self.r_correct_at_0, self.r_correct_at_lmax, self.r_wrong_at_0, self.r_wrong_at_lmax)
        # -1 is reserved for invalid answers
        if any(not -1.0 < r <= 1.0 for r in endpoints):
            raise ValueError("cosine endpoints must lie in (-1, 1]")
        return self


class RewardBreakdown(BaseModel):
    format: int
    classification: int
    cosine: float
    repetition: float
    total: float


def option_letters(n_options: int) -> str:
    """Letters valid for a question with ``n_options`` options"""
    if not 2 <= n_options <= len(CHOICE_LETTERS):
        raise InputError(f"n_options must be in 2..{len(CHOICE_LETTERS)}, got {n_options}")
    return CHOICE_LETTERS[:n_options]


def parse_answer(text: str) -> Optional[str]:
    """Extract the option letter from the first answer span, if it holds exactly one"""
    match = _ANSWER_SPAN.search(text)
    if match is None:
        return None
    content = match.group(1).strip()
    if len(content) == 1 and content in CHOICE_LETTERS:
        return content
    return None


def format_reward(text: str) -> int:
    """1 iff the text is exactly one think span followed by exactly one answer span"""
    if any(text.count(tag) != 1 for tag in STRUCTURAL_TAGS):
        return 0
    return 1 if _TAGGED_RESPONSE.fullmatch(text) else 0


def think_span_length(text: str) -> int:
    """Token count strictly inside the think span; 0 when the format is invalid"""
    if not format_reward(text):
        return 0
    match = _TAGGED_RESPONSE.fullmatch(text)
    return len(match.group(1).split())


def classification_reward(parsed: Optional[str], gold: str, n_options: int) -> int:
    letters = option_letters(n_options)
    if len(gold) != 1 or gold not in letters:
        raise InputError(f"gold answer {gold!r} is not one of {letters}")
    if parsed is None or len(parsed) != 1 or parsed not in letters:
        return -1
    return 1 if parsed == gold else 0


def answer_outcome(parsed: Optional[str], gold: str, n_options: int) -> Outcome:
    cls = classification_reward(parsed, gold, n_options)
    if cls == 1:
        return Outcome.CORRECT
    if cls == 0:
        return Outcome.WRONG_VALID
    return Outcome.INVALID


def is_correct(parsed: Optional[str], gold: str) -> bool:
    return parsed is not None and parsed == gold


def cosine_reward(outcome: Outcome, think_len: int, sched: CosineSchedule) -> float:
    """Length-shaped reward: shorter reasoning pays when correct, longer when wrong.

    r = r_end + (r_start - r_end) * (1 + cos(pi * L / L_max)) / 2 with L
    clamped to L_max. Invalid answers always get -1.
    """
    if sched.l_max <= 0:
        raise ConfigError(f"cosine schedule l_max must be positive, got {sched.l_max}")
    if think_len < 0:
        raise InputError(f"think length must be non-negative, got {think_len}")
    if outcome == Outcome.INVALID:
        return -1.0
    if outcome == Outcome.CORRECT:
        r_start, r_end = sched.r_correct_at_0, sched.r_correct_at_lmax
    else:
        r_start, r_end = sched.r_wrong_at_0, sched.r_wrong_at_lmax
    progress = min(think_len, sched.l_max) / sched.l_max
    return r_end + 0.5 * (r_start - r_end) * (1.0 + math.cos(math.pi * progress))


def repetition_reward(token_ids: Sequence[int], n: int = DEFAULT_NGRAM) -> float:
    """Negative fraction of repeated n-grams, in [-1, 0]"""
    if n < 1:
        raise InputError(f"n-gram order must be >= 1, got {n}")
    ids = list(token_ids)
    if len(ids) < n:
        return 0.0
    grams = [tuple(ids[i:i + n]) for i in range(len(ids) - n + 1)]
    return len(set(grams)) / len(grams) - 1.0


def score(
    text: str,
    token_ids: Sequence[int],
    gold: str,
    n_options: int,
    weights: Optional[RewardWeights] = None,
    sched: Optional[CosineSchedule] = None,
    ngram: int = DEFAULT_NGRAM,
) -> RewardBreakdown:
    """Compute all four reward components and their weighted total"""
    weights = weights or RewardWeights()
    sched = sched or CosineSchedule()

    parsed = parse_answer(text)
    fmt = format_reward(text)
    cls = classification_reward(parsed, gold, n_options)
    outcome = answer_outcome(parsed, gold, n_options)
    cos = cosine_reward(outcome, think_span_length(text), sched)
    rep = repetition_reward(token_ids, ngram)

    total = weights.w_cls * cls + weights.w_fmt * fmt + weights.w_cos * cos + weights.w_rep * rep
    return RewardBreakdown(format=fmt, classification=cls, cosine=cos, repetition=rep, total=total)
