"""Difficulty-aware GRPO.

Group rewards are standardized into advantages, groups without a correct
answer are redrawn up to a budget, advantages are scaled by the share of
incorrect responses, and the policy is updated by gradient ascent on the
token-level clipped surrogate with a KL penalty toward a frozen reference.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from functools import partial
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field
from torch import nn
from torch.optim.lr_scheduler import LambdaLR

from lab.errors import InputError, NumericalError
from lab.rewards import DEFAULT_NGRAM, CosineSchedule, RewardBreakdown, RewardWeights, is_correct, score
from lab.rollout_policy import PolicyParams, Response, Vocabulary, log_prob_table, sample
from lab.taskgen import McqSample

logger = logging.getLogger(__name__)

# (params, question context, group size, rng) -> responses
Sampler = Callable[[PolicyParams, int, int, np.random.Generator], List[Response]]


class KlMode(str, Enum):
    K3 = "k3"
    EXACT = "exact"


class OptimizerKind(str, Enum):
    GRADIENT_ASCENT = "gradient_ascent"
    ADAMW = "adamw"


class LrSchedule(str, Enum):
    CONSTANT = "constant"
    WARMUP_COSINE = "warmup_cosine"


class GrpoConfig(BaseModel):
    group_size: int = Field(8, ge=2)
    eps_clip: float = Field(0.2, gt=0, lt=1)
    beta: float = Field(0.01, ge=0)
    eps_std: float = Field(1e-6, ge=0)
    max_resample_rounds: int = Field(4, ge=0)
    lr: float = Field(100.0, ge=0)
    seed: int = 0
    resampling: bool = True
    reweighting: bool = True
    kl_mode: KlMode = KlMode.K3
    optimizer: OptimizerKind = OptimizerKind.GRADIENT_ASCENT
    lr_schedule: LrSchedule = LrSchedule.CONSTANT
    warmup_steps: int = Field(0, ge=0)
    weight_decay: float = Field(0.0, ge=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    workers: int = Field(1, ge=1)


@dataclass
class GroupBatch:
    question: McqSample
    context: int
    responses: List[Response]
    rewards: List[RewardBreakdown]
    correct_flags: List[bool]
    advantages: np.ndarray
    weight: float
    resample_rounds: int
    exhausted: bool = False

    def __post_init__(self):
        n = len(self.responses)
        if n == 0:
            raise InputError(f"group for {self.question.sample_id} has no responses")
        if not len(self.rewards) == len(self.correct_flags) == len(self.advantages) == n:
            raise InputError(f"group for {self.question.sample_id} needs one reward, flag and advantage "
                             f"per response ({n}), got {len(self.rewards)}/{len(self.correct_flags)}/"
                             f"{len(self.advantages)}")

    @property
    def reweighted_advantages(self) -> np.ndarray:
        return reweight(self.advantages, self.weight)

    @property
    def total_tokens(self) -> int:
        return sum(r.length for r in self.responses)

    @property
    def correctness_rate(self) -> float:
        return sum(self.correct_flags) / len(self.correct_flags)


@dataclass
class StepReport:
    objective: float
    grad_norm: float
    mean_reward: float
    resample_fraction: float
    mean_weight: float
    correctness_rates: List[float]
    format_rate: float
    exhausted_fraction: float

    def as_row(self) -> dict:
        return {
            "objective": self.objective,
            "grad_norm": self.grad_norm,
            "mean_reward": self.mean_reward,
            "resample_fraction": self.resample_fraction,
            "mean_weight": self.mean_weight,
            "correctness_rate": float(np.mean(self.correctness_rates)),
            "format_rate": self.format_rate,
            "exhausted_fraction": self.exhausted_fraction,
        }


def compute_advantages(totals: Sequence[float], eps_std: float = 1e-6) -> np.ndarray:
    """Standardize group rewards with the population std; flat groups get zeros"""
    rewards = np.asarray(totals, dtype=np.float64)
    if rewards.ndim != 1 or len(rewards) < 2:
        raise InputError(f"need a group of at least 2 rewards, got {rewards.shape}")
    std = rewards.std()
    if std <= eps_std:
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / std


def difficulty_weight(correct_flags: Sequence[bool]) -> float:
    """w = (#incorrect) / G + 1"""
    flags = list(correct_flags)
    if not flags:
        raise InputError("difficulty weight needs at least one response")
    return sum(not f for f in flags) / len(flags) + 1.0


def reweight(advantages: Sequence[float], w: float) -> np.ndarray:
    if w < 1:
        raise InputError(f"difficulty weight must be >= 1, got {w}")
    return w * np.asarray(advantages, dtype=np.float64)


def token_kl(logprob_theta, logprob_ref):
    """Non-negative per-token estimator exp(d) - d - 1 with d = l_ref - l_theta"""
    d = np.asarray(logprob_ref, dtype=np.float64) - np.asarray(logprob_theta, dtype=np.float64)
    # expm1 keeps the result >= 0 when d is tiny
    return np.expm1(d) - d


def policy_sampler(vocab: Vocabulary) -> Sampler:
    def _sample(params: PolicyParams, context: int, group_size: int, rng: np.random.Generator) -> List[Response]:
        return sample(params, context, group_size, rng, vocab)

    return _sample


def rollout_with_resampling(
    question: McqSample,
    context: int,
    policy_old: PolicyParams,
    sampler: Sampler,
    cfg: GrpoConfig,
    rng: np.random.Generator,
    weights: Optional[RewardWeights] = None,
    sched: Optional[CosineSchedule] = None,
    ngram: int = DEFAULT_NGRAM,
) -> GroupBatch:
    """Sample a group, redrawing it whole while it holds no correct answer.

    Redraws stop at the first group with a correct response or after
    ``max_resample_rounds`` extra rounds; the last group is returned either
    way and earlier groups are discarded.
    """
    gold = question.gold_letter
    n_options = len(question.options)

    rounds = 0
    while True:
        responses = sampler(policy_old, context, cfg.group_size, rng)
        flags = [is_correct(r.parsed_answer, gold) for r in responses]
        if any(flags) or not cfg.resampling or rounds >= cfg.max_resample_rounds:
            break
        rounds += 1
        logger.debug("question %s: no correct response, resampling round %d", question.sample_id, rounds)

    if cfg.resampling and not any(flags):
        logger.debug("question %s: resampling budget exhausted", question.sample_id)

    rewards = [score(r.text, r.token_ids, gold, n_options, weights, sched, ngram) for r in responses]
    advantages = compute_advantages([r.total for r in rewards], cfg.eps_std)
    weight = difficulty_weight(flags) if cfg.reweighting else 1.0
    return GroupBatch(
        question=question,
        context=context,
        responses=responses,
        rewards=rewards,
        correct_flags=flags,
        advantages=advantages,
        weight=weight,
        resample_rounds=rounds,
        exhausted=cfg.resampling and not any(flags),
    )


def rollout_group_batches(
    items: Sequence[Tuple[McqSample, int]],
    policy_old: PolicyParams,
    sampler: Sampler,
    cfg: GrpoConfig,
    rngs: Sequence[np.random.Generator],
    weights: Optional[RewardWeights] = None,
    sched: Optional[CosineSchedule] = None,
    ngram: int = DEFAULT_NGRAM,
) -> List[GroupBatch]:
    """Roll out every (question, context) pair, each with its own generator.

    Results come back in item order whatever the worker count.
    """
    if len(items) != len(rngs):
        raise InputError("need one generator per question")

    def _one(index: int) -> GroupBatch:
        question, context = items[index]
        return rollout_with_resampling(question, context, policy_old, sampler, cfg, rngs[index], weights, sched, ngram)

    if cfg.workers == 1:
        return [_one(i) for i in range(len(items))]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(_one, range(len(items))))


def _question_objective(batch: GroupBatch, theta: PolicyParams, theta_old: PolicyParams,
                        theta_ref: PolicyParams, cfg: GrpoConfig) -> Tuple[float, np.ndarray]:
    """J_q and its gradient restricted to the question's block of contexts"""
    lp = log_prob_table(theta, batch.context)
    lp_old = log_prob_table(theta_old, batch.context)
    lp_ref = log_prob_table(theta_ref, batch.context)
    probs = np.exp(lp)
    eye = np.eye(theta.vocab_size)

    value = 0.0
    grad = np.zeros_like(lp)
    for response, adv in zip(batch.responses, batch.reweighted_advantages):
        ids = np.asarray(response.token_ids, dtype=np.int64)
        rows = theta.local_rows(ids)
        ts = np.arange(len(ids))
        l_theta = lp[rows, ts, ids]
        ratio = np.exp(l_theta - lp_old[rows, ts, ids])

        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip) * adv
        surrogate = np.minimum(unclipped, clipped)
        # only the unclipped branch depends on theta
        coef = np.where(unclipped <= clipped, unclipped, 0.0)

        if cfg.kl_mode == KlMode.K3:
            d = lp_ref[rows, ts, ids] - l_theta
            kl = token_kl(l_theta, lp_ref[rows, ts, ids])
            coef = coef - cfg.beta * (1.0 - np.exp(d))
        else:
            p_rows = probs[rows, ts]
            diff = lp[rows, ts] - lp_ref[rows, ts]
            kl = np.sum(p_rows * diff, axis=-1)
            np.add.at(grad, (rows, ts), -cfg.beta * p_rows * (diff - kl[:, None]))

        np.add.at(grad, (rows, ts), coef[:, None] * (eye[ids] - probs[rows, ts]))
        value += surrogate.sum() - cfg.beta * kl.sum()

    n_tokens = batch.total_tokens
    return value / n_tokens, grad / n_tokens


def objective(batches: Sequence[GroupBatch], theta: PolicyParams, theta_old: PolicyParams,
              theta_ref: PolicyParams, cfg: GrpoConfig) -> Tuple[float, np.ndarray]:
    """Mean over questions of the length-normalized clipped surrogate minus beta * KL.

    Returns J and its exact gradient with respect to theta's logits.
    """
    if not batches:
        raise InputError("objective needs at least one group batch")
    if not (theta.same_layout(theta_old) and theta.same_layout(theta_ref)):
        raise InputError("theta, theta_old and theta_ref must share shape and context mode")

    total = 0.0
    grad = np.zeros_like(theta.logits)
    # merged in question order so the sum is reproducible
    for batch in batches:
        j_q, g_q = _question_objective(batch, theta, theta_old, theta_ref, cfg)
        total += j_q
        grad[theta.question_rows(batch.context)] += g_q
    n = len(batches)
    return total / n, grad / n


def lr_factor(cfg: GrpoConfig, step_index: int, total_steps: int) -> float:
    """Constant, or linear warm-up followed by cosine decay to zero"""
    if cfg.lr_schedule == LrSchedule.CONSTANT:
        return 1.0
    if step_index < cfg.warmup_steps:
        return (step_index + 1) / cfg.warmup_steps
    decay_steps = max(1, total_steps - cfg.warmup_steps)
    progress = min(1.0, (step_index - cfg.warmup_steps) / decay_steps)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def learning_rate(cfg: GrpoConfig, step_index: int, total_steps: int) -> float:
    return cfg.lr * lr_factor(cfg, step_index, total_steps)


class PolicyOptimizer:
    """torch SGD or AdamW over the logits, stepped by a LambdaLR schedule.

    torch minimizes, so the negated analytic gradient of J is written to
    ``.grad`` before every step.
    """

    def __init__(self, logits: np.ndarray, cfg: GrpoConfig, total_steps: int):
        self.param = nn.Parameter(torch.from_numpy(np.array(logits, dtype=np.float64)))
        if cfg.optimizer == OptimizerKind.ADAMW:
            self.optimizer = torch.optim.AdamW([self.param], lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
                                               eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
        else:
            self.optimizer = torch.optim.SGD([self.param], lr=cfg.lr)
        self.scheduler = LambdaLR(self.optimizer, partial(lr_factor, cfg, total_steps=total_steps))

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def update(self, logits: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if logits.shape != tuple(self.param.shape):
            raise InputError(f"optimizer holds logits of shape {tuple(self.param.shape)}, got {logits.shape}")
        with torch.no_grad():
            self.param.copy_(torch.from_numpy(np.ascontiguousarray(logits, dtype=np.float64)))
        self.param.grad = torch.from_numpy(-np.ascontiguousarray(grad, dtype=np.float64))
        self.optimizer.step()
        self.scheduler.step()
        return self.param.detach().numpy().copy()


def summarize_step(batches: Sequence[GroupBatch], objective_value: float, grad: np.ndarray) -> StepReport:
    totals = [r.total for b in batches for r in b.rewards]
    formats = [r.format for b in batches for r in b.rewards]
    return StepReport(
        objective=float(objective_value),
        grad_norm=float(np.linalg.norm(grad)),
        mean_reward=float(np.mean(totals)),
        resample_fraction=sum(b.resample_rounds > 0 for b in batches) / len(batches),
        mean_weight=float(np.mean([b.weight for b in batches])),
        correctness_rates=[b.correctness_rate for b in batches],
        format_rate=float(np.mean(formats)),
        exhausted_fraction=sum(b.exhausted for b in batches) / len(batches),
    )


def step(theta: PolicyParams, batches: Sequence[GroupBatch], cfg: GrpoConfig, theta_ref: PolicyParams,
         optimizer: Optional[PolicyOptimizer] = None,
         lr: Optional[float] = None) -> Tuple[PolicyParams, StepReport]:
    """One ascent step on J; the batches must have been sampled from ``theta``.

    theta doubles as theta_old because the behavior policy is refreshed at the
    start of every step. Without an optimizer the update is plain
    ``logits + lr * grad`` with ``lr`` defaulting to ``cfg.lr``.
    """
    objective_value, grad = objective(batches, theta, theta, theta_ref, cfg)
    bad = int(np.size(grad) - np.count_nonzero(np.isfinite(grad)))
    if bad or not math.isfinite(objective_value):
        raise NumericalError(f"non-finite gradient: {bad} bad entries, J={objective_value}")

    if optimizer is None:
        lr = cfg.lr if lr is None else lr
        logits = theta.logits + lr * grad
    else:
        lr = optimizer.lr
        logits = optimizer.update(theta.logits, grad)
    if not np.all(np.isfinite(logits)):
        raise NumericalError(f"update with lr={lr} produced non-finite logits")
    return PolicyParams(logits, theta.context_mode), summarize_step(batches, objective_value, grad)


class GrpoTrainer:
    """Holds theta, the frozen reference and optimizer state across steps"""

    def __init__(self, theta: PolicyParams, cfg: GrpoConfig, sampler: Sampler, total_steps: int,
                 weights: Optional[RewardWeights] = None, sched: Optional[CosineSchedule] = None,
                 ngram: int = DEFAULT_NGRAM):
        self.theta = theta.copy()
        self.theta_ref = theta.copy()
        self.cfg = cfg
        self.sampler = sampler
        self.total_steps = total_steps
        self.weights = weights
        self.sched = sched
        self.ngram = ngram
        self.optimizer = PolicyOptimizer(self.theta.logits, cfg, total_steps)
        self.step_index = 0

    @property
    def lr(self) -> float:
        return self.optimizer.lr

    def train_step(self, items: Sequence[Tuple[McqSample, int]],
                   rngs: Sequence[np.random.Generator]) -> Tuple[List[GroupBatch], StepReport]:
        theta_old = self.theta.copy()
        batches = rollout_group_batches(items, theta_old, self.sampler, self.cfg, rngs,
                                        self.weights, self.sched, self.ngram)
        self.theta, report = step(self.theta, batches, self.cfg, self.theta_ref, self.optimizer)
        self.step_index += 1
        return batches, report
