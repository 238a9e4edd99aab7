"""Toy autoregressive categorical policy standing in for a multimodal LLM.

Logits are indexed by (context, position, token). In ``question`` mode the
context is the question id; in ``question_prev_token`` mode the previous
token is folded into the context as ``question * (V + 1) + prev`` where
``prev == V`` marks the start of the response. Log-probabilities and their
gradients are analytic.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError
from scipy.special import log_softmax

from lab.errors import InputError, ParseError
from lab.rewards import CHOICE_LETTERS, STRUCTURAL_TAGS, parse_answer

logger = logging.getLogger(__name__)

EOS_TOKEN = "<eos>"
DEFAULT_T_MAX = 32
DEFAULT_N_FILLERS = 4
CHECKPOINT_SCHEMA_VERSION = 1


class ContextMode(str, Enum):
    QUESTION = "question"
    QUESTION_PREV_TOKEN = "question_prev_token"


@dataclass(frozen=True)
class Vocabulary:
    tokens: Tuple[str, ...]
    structural_ids: Tuple[int, ...]
    choice_ids: Tuple[int, ...]
    filler_ids: Tuple[int, ...]
    eos_id: int

    @classmethod
    def build(cls, n_choices: int = len(CHOICE_LETTERS), n_fillers: int = DEFAULT_N_FILLERS) -> "Vocabulary":
        """Structural tags, option letters, reasoning fillers f1..fN and eos, in that order"""
        if not 2 <= n_choices <= len(CHOICE_LETTERS):
            raise InputError(f"n_choices must be in 2..{len(CHOICE_LETTERS)}, got {n_choices}")
        if n_fillers < 1:
            raise InputError(f"need at least one filler token, got {n_fillers}")
        letters = list(CHOICE_LETTERS[:n_choices])
        fillers = [f"f{i + 1}" for i in range(n_fillers)]
        tokens = list(STRUCTURAL_TAGS) + letters + fillers + [EOS_TOKEN]
        n_struct = len(STRUCTURAL_TAGS)
        return cls(
            tokens=tuple(tokens),
            structural_ids=tuple(range(n_struct)),
            choice_ids=tuple(range(n_struct, n_struct + n_choices)),
            filler_ids=tuple(range(n_struct + n_choices, n_struct + n_choices + n_fillers)),
            eos_id=len(tokens) - 1,
        )

    @property
    def size(self) -> int:
        return len(self.tokens)

    @cached_property
    def index(self) -> Dict[str, int]:
        return {tok: i for i, tok in enumerate(self.tokens)}

    def id_of(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise InputError(f"unknown token {token!r}") from None

    def letter_id(self, letter: str) -> int:
        return self.choice_ids[CHOICE_LETTERS.index(letter)]


@dataclass
class PolicyParams:
    logits: np.ndarray
    context_mode: ContextMode = ContextMode.QUESTION

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.context_mode = ContextMode(self.context_mode)
        if self.logits.ndim != 3 or min(self.logits.shape) < 1:
            raise InputError(f"logits must be a non-empty (contexts, T_max, V) array, got {self.logits.shape}")
        if not np.all(np.isfinite(self.logits)):
            raise InputError("logits must be finite")
        if self.context_mode == ContextMode.QUESTION_PREV_TOKEN and self.n_contexts % (self.vocab_size + 1):
            raise InputError("previous-token contexts must come in blocks of V + 1 per question")

    @classmethod
    def zeros(cls, n_questions: int, vocab_size: int, t_max: int = DEFAULT_T_MAX,
              context_mode: ContextMode = ContextMode.QUESTION) -> "PolicyParams":
        per_question = 1 if ContextMode(context_mode) == ContextMode.QUESTION else vocab_size + 1
        return cls(np.zeros((n_questions * per_question, t_max, vocab_size)), context_mode)

    @property
    def n_contexts(self) -> int:
        return self.logits.shape[0]

    @property
    def t_max(self) -> int:
        return self.logits.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[2]

    @property
    def rows_per_question(self) -> int:
        return 1 if self.context_mode == ContextMode.QUESTION else self.vocab_size + 1

    @property
    def n_questions(self) -> int:
        return self.n_contexts // self.rows_per_question

    def question_rows(self, question: int) -> slice:
        if not 0 <= question < self.n_questions:
            raise InputError(f"question context {question} out of range 0..{self.n_questions - 1}")
        start = question * self.rows_per_question
        return slice(start, start + self.rows_per_question)

    def local_rows(self, token_ids: Sequence[int]) -> np.ndarray:
        """Row of each position inside the question's block of contexts"""
        ids = np.asarray(token_ids, dtype=np.int64)
        if self.context_mode == ContextMode.QUESTION or len(ids) == 0:
            return np.zeros(len(ids), dtype=np.int64)
        return np.concatenate([[self.vocab_size], ids[:-1]]).astype(np.int64)

    def context_rows(self, question: int, token_ids: Sequence[int]) -> np.ndarray:
        return self.question_rows(question).start + self.local_rows(token_ids)

    def same_layout(self, other: "PolicyParams") -> bool:
        return self.logits.shape == other.logits.shape and self.context_mode == other.context_mode

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.logits.copy(), self.context_mode)


@dataclass(frozen=True, eq=False)
class Response:
    token_ids: Tuple[int, ...]
    text: str
    logprobs_old: np.ndarray
    truncated: bool
    parsed_answer: Optional[str]

    @property
    def length(self) -> int:
        return len(self.token_ids)


def log_prob_table(params: PolicyParams, question: int) -> np.ndarray:
    """log softmax over tokens for every (local row, position) of one question"""
    return log_softmax(params.logits[params.question_rows(question)], axis=-1)


def _check_ids(params: PolicyParams, token_ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1:
        raise InputError("token ids must be a flat sequence")
    if len(ids) > params.t_max:
        raise InputError(f"sequence of length {len(ids)} exceeds T_max={params.t_max}")
    if len(ids) and (ids.min() < 0 or ids.max() >= params.vocab_size):
        raise InputError(f"token id out of range 0..{params.vocab_size - 1}")
    return ids


def render(token_ids: Sequence[int], vocab: Vocabulary) -> str:
    """Join tokens with single spaces, dropping eos"""
    for tok in token_ids:
        if not 0 <= tok < vocab.size:
            raise InputError(f"token id {tok} out of range")
    return " ".join(vocab.tokens[tok] for tok in token_ids if tok != vocab.eos_id)


def tokenize(text: str, vocab: Vocabulary) -> List[int]:
    return [vocab.id_of(tok) for tok in text.split()]


def sample(params: PolicyParams, question_context: int, group_size: int,
           rng: np.random.Generator, vocab: Vocabulary) -> List[Response]:
    """Draw ``group_size`` responses token by token until eos or T_max"""
    if group_size < 1:
        raise InputError(f"group size must be >= 1, got {group_size}")
    if vocab.size != params.vocab_size:
        raise InputError("vocabulary does not match policy parameters")
    table = log_prob_table(params, question_context)
    question_mode = params.context_mode == ContextMode.QUESTION

    responses = []
    for _ in range(group_size):
        ids: List[int] = []
        logprobs: List[float] = []
        prev = params.vocab_size
        for t in range(params.t_max):
            row = table[0 if question_mode else prev, t]
            cdf = np.cumsum(np.exp(row))
            tok = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), params.vocab_size - 1)
            ids.append(tok)
            logprobs.append(row[tok])
            if tok == vocab.eos_id:
                break
            prev = tok
        text = render(ids, vocab)
        responses.append(Response(
            token_ids=tuple(ids),
            text=text,
            logprobs_old=np.array(logprobs),
            truncated=ids[-1] != vocab.eos_id,
            parsed_answer=parse_answer(text),
        ))
    return responses


def logprob(params: PolicyParams, question_context: int, token_ids: Sequence[int]) -> np.ndarray:
    """Per-token log pi(o_t | q, o_<t)"""
    ids = _check_ids(params, token_ids)
    table = log_prob_table(params, question_context)
    return table[params.local_rows(ids), np.arange(len(ids)), ids]


def logprob_grad(params: PolicyParams, question_context: int, token_ids: Sequence[int], t: int) -> np.ndarray:
    """Gradient of log-prob entry ``t`` with respect to every logit.

    Only the row (c_t, t) is non-zero: onehot(o_t) - softmax(logits[c_t, t]).
    """
    ids = _check_ids(params, token_ids)
    if not 0 <= t < len(ids):
        raise InputError(f"position {t} outside sequence of length {len(ids)}")
    row = params.context_rows(question_context, ids)[t]
    grad = np.zeros_like(params.logits)
    grad[row, t] = -np.exp(log_softmax(params.logits[row, t]))
    grad[row, t, ids[t]] += 1.0
    return grad


def forced_answer_distribution(params: PolicyParams, question_context: int, prefix_ids: Sequence[int],
                               vocab: Vocabulary, n_options: int) -> np.ndarray:
    """Probabilities of the first ``n_options`` letters right after a forced prefix"""
    ids = _check_ids(params, prefix_ids)
    t = len(ids)
    if t >= params.t_max:
        raise InputError("prefix leaves no room for an answer token")
    local = 0 if params.context_mode == ContextMode.QUESTION else (ids[-1] if t else params.vocab_size)
    row = log_prob_table(params, question_context)[local, t]
    return np.exp(row[list(vocab.choice_ids[:n_options])])


class PolicyCheckpointHeader(BaseModel):
    schema_version: int = CHECKPOINT_SCHEMA_VERSION
    vocab_size: int = Field(gt=0)
    t_max: int = Field(gt=0)
    n_contexts: int = Field(gt=0)
    context_mode: ContextMode


def save_params(params: PolicyParams, path: Path) -> None:
    """Write header fields followed by row-major logits as one JSON object"""
    header = PolicyCheckpointHeader(
        vocab_size=params.vocab_size,
        t_max=params.t_max,
        n_contexts=params.n_contexts,
        context_mode=params.context_mode,
    )
    payload = header.model_dump(mode="json")
    payload["logits"] = params.logits.ravel().tolist()
    Path(path).write_text(json.dumps(payload), encoding="utf-8")
    logger.debug("wrote checkpoint %s", path)


def load_params(path: Path) -> PolicyParams:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        logits = payload.pop("logits")
        header = PolicyCheckpointHeader.model_validate(payload)
    except (json.JSONDecodeError, KeyError, AttributeError, ValidationError) as e:
        raise ParseError(f"malformed checkpoint {path}: {e}") from e
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION:
        raise ParseError(f"unsupported checkpoint schema {header.schema_version}")
    shape = (header.n_contexts, header.t_max, header.vocab_size)
    if len(logits) != int(np.prod(shape)):
        raise ParseError(f"checkpoint holds {len(logits)} logits, header implies {shape}")
    return PolicyParams(np.array(logits, dtype=np.float64).reshape(shape), header.context_mode)
