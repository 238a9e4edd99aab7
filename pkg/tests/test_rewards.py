import math

import numpy as np
import pytest
from pydantic import ValidationError

from lab.errors import ConfigError, InputError
from lab.rewards import (
    CHOICE_LETTERS,
    CosineSchedule,
    Outcome,
    RewardWeights,
    answer_outcome,
    classification_reward,
    cosine_reward,
    format_reward,
    parse_answer,
    repetition_reward,
    score,
    think_span_length,
)


@pytest.mark.parametrize("text, expected", [
    ("<think> x </think> <answer> B </answer>", "B"),
    ("<answer> maybe A </answer>", None),
    ("no tags at all", None),
    ("<think></think><answer>C</answer>", "C"),
    ("<answer> AB </answer>", None),
    ("<answer> Z </answer>", None),
])
def test_parse_answer(text, expected):
    assert parse_answer(text) == expected


@pytest.mark.parametrize("text, expected", [
    ("<think> f1 f2 </think> <answer> A </answer>", 1),
    ("<answer> A </answer>", 0),
    ("<think> a </think> <think> b </think> <answer> A </answer>", 0),
    ("<think> a </think> <answer> A </answer> <answer> B </answer>", 0),
    ("<answer> A </answer> <think> a </think>", 0),
    ("<think> a </think> trailing <answer> A </answer>", 0),
    ("<think> a </think> <answer> A </answer> extra", 0),
    ("  <think></think><answer>A</answer>  ", 1),
])
def test_format_reward(text, expected):
    assert format_reward(text) == expected


def test_think_span_length():
    assert think_span_length("<think> f1 f2 f3 </think> <answer> A </answer>") == 3
    assert think_span_length("<think> </think> <answer> A </answer>") == 0
    assert think_span_length("<answer> A </answer>") == 0


def test_classification_reward_examples():
    assert classification_reward("B", "B", 4) == 1
    assert classification_reward("C", "B", 4) == 0
    assert classification_reward(None, "B", 4) == -1
    # letter outside the question's options is invalid
    assert classification_reward("E", "B", 4) == -1


def test_classification_reward_exhaustive():
    for n in range(2, 10):
        letters = CHOICE_LETTERS[:n]
        for gold in letters:
            for parsed in list(CHOICE_LETTERS) + [None]:
                expected = -1 if parsed is None or parsed not in letters else int(parsed == gold)
                assert classification_reward(parsed, gold, n) == expected


@pytest.mark.parametrize("gold, n", [("E", 4), ("", 4), ("AB", 4), ("A", 1), ("A", 10)])
def test_classification_reward_rejects_bad_gold(gold, n):
    with pytest.raises(InputError):
        classification_reward("A", gold, n)


def test_answer_outcome():
    assert answer_outcome("A", "A", 2) == Outcome.CORRECT
    assert answer_outcome("B", "A", 2) == Outcome.WRONG_VALID
    assert answer_outcome(None, "A", 2) == Outcome.INVALID


def test_cosine_reward_endpoints():
    sched = CosineSchedule()
    assert cosine_reward(Outcome.CORRECT, 0, sched) == 1.0
    assert cosine_reward(Outcome.CORRECT, sched.l_max, sched) == pytest.approx(0.0, abs=1e-15)
    assert cosine_reward(Outcome.WRONG_VALID, 0, sched) == -0.5
    assert cosine_reward(Outcome.WRONG_VALID, sched.l_max, sched) == pytest.approx(0.0, abs=1e-15)
    assert cosine_reward(Outcome.CORRECT, 4 * sched.l_max, sched) == cosine_reward(Outcome.CORRECT, sched.l_max, sched)
    for length in (0, 3, 100):
        assert cosine_reward(Outcome.INVALID, length, sched) == -1.0


def test_cosine_reward_formula_midpoint():
    sched = CosineSchedule(l_max=10)
    expected = 0.0 + 0.5 * (1.0 - 0.0) * (1 + math.cos(math.pi * 0.3))
    assert cosine_reward(Outcome.CORRECT, 3, sched) == pytest.approx(expected, rel=1e-15)


def test_cosine_reward_monotone():
    sched = CosineSchedule()
    correct = [cosine_reward(Outcome.CORRECT, n, sched) for n in range(sched.l_max + 1)]
    wrong = [cosine_reward(Outcome.WRONG_VALID, n, sched) for n in range(sched.l_max + 1)]
    assert all(a >= b for a, b in zip(correct, correct[1:]))
    assert all(a <= b for a, b in zip(wrong, wrong[1:]))


def test_cosine_reward_errors():
    sched = CosineSchedule.model_construct(l_max=0, r_correct_at_0=1.0, r_correct_at_lmax=0.0,
                                           r_wrong_at_0=-0.5, r_wrong_at_lmax=0.0)
    with pytest.raises(ConfigError):
        cosine_reward(Outcome.CORRECT, 1, sched)
    with pytest.raises(InputError):
        cosine_reward(Outcome.CORRECT, -1, CosineSchedule())


@pytest.mark.parametrize("fields", [
    {"l_max": 0},
    {"r_correct_at_0": 0.0, "r_correct_at_lmax": 0.5},
    {"r_wrong_at_0": 0.2, "r_wrong_at_lmax": 0.0},
    {"r_wrong_at_0": -1.0},
])
def test_cosine_schedule_validation(fields):
    with pytest.raises(ValidationError):
        CosineSchedule(**fields)


def test_repetition_reward_examples():
    assert repetition_reward([1, 2, 3, 4, 5]) == 0.0
    assert repetition_reward([0, 1, 0, 1, 0, 1, 0, 1], 3) == pytest.approx(-2 / 3)
    assert repetition_reward([1, 2], 3) == 0.0
    assert repetition_reward([], 3) == 0.0
    assert repetition_reward([7] * 10, 1) == pytest.approx(-0.9)
    with pytest.raises(InputError):
        repetition_reward([1, 2, 3], 0)


def test_repetition_reward_bounds():
    rng = np.random.default_rng(0)
    for _ in range(200):
        ids = rng.integers(0, 4, size=int(rng.integers(0, 20))).tolist()
        value = repetition_reward(ids, 2)
        assert -1.0 <= value <= 0.0
        grams = [tuple(ids[i:i + 2]) for i in range(len(ids) - 1)]
        assert (value == 0.0) == (len(set(grams)) == len(grams))


def test_score_component_table():
    perfect = score("<think> </think> <answer> A </answer>", [0, 1, 2, 4, 3], "A", 4)
    assert (perfect.format, perfect.classification, perfect.cosine, perfect.repetition) == (1, 1, 1.0, 0.0)
    assert perfect.total == 5.0

    wrong = score("<think> </think> <answer> B </answer>", [0, 1, 2, 5, 3], "A", 4)
    assert (wrong.format, wrong.classification, wrong.cosine) == (1, 0, -0.5)
    assert wrong.total == 0.5

    untagged = score("A", [4], "A", 4)
    assert (untagged.format, untagged.classification, untagged.cosine, untagged.repetition) == (0, -1, -1.0, 0.0)
    assert untagged.total == -4.0


def test_score_invalid_couples_classification_and_cosine():
    for text in ["<answer> A </answer>", "<think> x </think> <answer> maybe </answer>", "nothing"]:
        breakdown = score(text, [0], "A", 4)
        assert (breakdown.classification == -1) == (breakdown.cosine == -1.0)


def test_score_is_linear_in_weights():
    text = "<think> f1 f1 f1 f1 </think> <answer> B </answer>"
    ids = [0, 9, 9, 9, 9, 1, 2, 5, 3]
    base = score(text, ids, "A", 4)
    for field_name, component in [("w_cls", "classification"), ("w_fmt", "format"),
                                  ("w_cos", "cosine"), ("w_rep", "repetition")]:
        bumped = RewardWeights(**{field_name: getattr(RewardWeights(), field_name) + 2.0})
        assert score(text, ids, "A", 4, weights=bumped).total == pytest.approx(
            base.total + 2.0 * getattr(base, component), abs=1e-12)


def test_reward_weights_reject_negative():
    with pytest.raises(ValidationError):
        RewardWeights(w_cls=-1)
