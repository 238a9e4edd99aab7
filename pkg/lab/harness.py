"""Seeded end-to-end experiments on the toy policy.

Three modes share one loop shape: ``sft`` maximizes the likelihood of a gold
response template, ``grpo_plain`` runs group relative policy optimization
without resampling or reweighting, and ``grpo_difficulty_aware`` enables
both. Each run writes ``config.json``, ``steps.csv``, ``metrics.csv`` and
``checkpoint.json`` to its output directory.
"""

import csv
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from matplotlib.figure import Figure
from pydantic import BaseModel, Field, ValidationError, model_validator
from tqdm import tqdm

from lab.contrastive_heatmap import SoftPromptSpec
from lab.errors import ConfigError, InputError, ParseError
from lab.grpo_core import GrpoConfig, GrpoTrainer, StepReport, policy_sampler
from lab.rewards import (
    ANSWER_CLOSE, ANSWER_OPEN, DEFAULT_NGRAM, THINK_CLOSE, THINK_OPEN,
    CosineSchedule, RewardWeights, is_correct, score,
)
from lab.rollout_policy import (
    DEFAULT_N_FILLERS, ContextMode, PolicyParams, Vocabulary,
    forced_answer_distribution, load_params, log_prob_table, render, sample, save_params,
)
from lab.taskgen import QUESTION_TEXT, SYNTHETIC_OBJECTS, McqSample, TaskKind, load_samples

logger = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
DATASET_TIER = "dataset"

# Output files of a run
CONFIG_FILE = "config.json"
STEPS_FILE = "steps.csv"
METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.json"
SUMMARY_FILE = "summary.txt"


class Mode(str, Enum):
    SFT = "sft"
    GRPO_PLAIN = "grpo_plain"
    GRPO_DIFFICULTY_AWARE = "grpo_difficulty_aware"


class TierSpec(BaseModel):
    name: str = Field(pattern=r"^[a-z][a-z0-9_]*$")
    count: int = Field(ge=1)
    prior: float = Field(gt=0, lt=1)


class SyntheticTaskSpec(BaseModel):
    tiers: List[TierSpec] = [
        TierSpec(name="easy", count=50, prior=0.9),
        TierSpec(name="hard", count=50, prior=0.05),
    ]
    n_options: int = Field(4, ge=2, le=9)

    @model_validator(mode="after")
    def check_tiers(self) -> "SyntheticTaskSpec":
        if not self.tiers:
            raise ValueError("at least one difficulty tier is required")
        if len({t.name for t in self.tiers}) != len(self.tiers):
            raise ValueError("tier names must be distinct")
        if len({t.prior for t in self.tiers}) != len(self.tiers):
            raise ValueError("tiers must have distinct gold-answer priors")
        return self


class PolicyInitConfig(BaseModel):
    context_mode: ContextMode = ContextMode.QUESTION_PREV_TOKEN
    boost: float = Field(9.0, gt=0)
    think_close_prob: float = Field(0.5, gt=0, lt=1)
    n_fillers: int = Field(DEFAULT_N_FILLERS, ge=1)
    t_max: int = Field(16, ge=7)
    dataset_prior: float = Field(0.5, gt=0, lt=1)


class ExperimentConfig(BaseModel):
    schema_version: int = CONFIG_SCHEMA_VERSION
    mode: Mode = Mode.GRPO_DIFFICULTY_AWARE
    dataset: Optional[str] = None
    tasks: SyntheticTaskSpec = SyntheticTaskSpec()
    policy_init: PolicyInitConfig = PolicyInitConfig()
    grpo: GrpoConfig = GrpoConfig()
    reward_weights: RewardWeights = RewardWeights()
    cosine: CosineSchedule = CosineSchedule()
    ngram: int = Field(DEFAULT_NGRAM, ge=1)
    steps: int = Field(200, ge=1)
    batch_size: int = Field(8, ge=1)
    eval_every: int = Field(20, ge=1)
    eval_samples: int = Field(8, ge=1)
    heldout_think_lengths: List[int] = [2, 3]
    sft_lr: float = Field(50.0, ge=0)
    seed: int = 0
    out_dir: str = "runs/default"
    init_checkpoint: Optional[str] = None
    # recorded in config.json only; the tabular policy has no soft-prompt input
    soft_prompt: SoftPromptSpec = SoftPromptSpec()
    progress: bool = False

    @model_validator(mode="after")
    def check_version(self) -> "ExperimentConfig":
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {self.schema_version}")
        if any(n < 1 for n in self.heldout_think_lengths):
            raise ValueError("held-out think lengths must be >= 1")
        return self


def load_config(path: Path) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e


def build_config(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid config: {e}") from e


@dataclass
class TaskSet:
    samples: List[McqSample]
    tiers: List[str]
    priors: List[float]

    @property
    def tier_names(self) -> List[str]:
        return list(dict.fromkeys(self.tiers))

    def __len__(self) -> int:
        return len(self.samples)


def make_synthetic_tasks(spec: SyntheticTaskSpec, rng: np.random.Generator) -> TaskSet:
    """Questions whose difficulty comes from the policy prior on the gold letter"""
    pool = sorted({d for defects in SYNTHETIC_OBJECTS.values() for d in defects})
    samples, tiers, priors = [], [], []
    for tier in spec.tiers:
        for i in range(tier.count):
            options = [pool[k] for k in rng.choice(len(pool), spec.n_options, replace=False)]
            samples.append(McqSample(
                sample_id=f"{tier.name}-{i:04d}",
                task=TaskKind.DEFECT_CLASSIFICATION,
                question=QUESTION_TEXT[TaskKind.DEFECT_CLASSIFICATION],
                options=options,
                gold_index=int(rng.integers(spec.n_options)),
                object_type="synthetic",
                query_text=f"Synthetic {tier.name} item {i}.",
                provenance={"tier": tier.name},
            ))
            tiers.append(tier.name)
            priors.append(tier.prior)
    return TaskSet(samples, tiers, priors)


def load_tasks(config: ExperimentConfig) -> TaskSet:
    if config.dataset is None:
        return make_synthetic_tasks(config.tasks, np.random.default_rng([config.seed, 3]))
    samples = load_samples(Path(config.dataset))
    if not samples:
        raise ConfigError(f"dataset {config.dataset} holds no samples")
    n = len(samples)
    return TaskSet(samples, [DATASET_TIER] * n, [config.policy_init.dataset_prior] * n)


def build_vocabulary(tasks: TaskSet, init: PolicyInitConfig) -> Vocabulary:
    return Vocabulary.build(n_choices=max(len(s.options) for s in tasks.samples), n_fillers=init.n_fillers)


def _answer_logits(boost: float, prior: float, gold: int, n_options: int, vocab: Vocabulary) -> np.ndarray:
    row = np.zeros(vocab.size)
    for k in range(n_options):
        share = prior if k == gold else (1.0 - prior) / (n_options - 1)
        row[vocab.choice_ids[k]] = boost + np.log(share)
    return row


def init_policy(tasks: TaskSet, vocab: Vocabulary, init: PolicyInitConfig) -> PolicyParams:
    """Logits that follow the tagged grammar and put ``prior`` on each question's gold letter"""
    params = PolicyParams.zeros(len(tasks), vocab.size, init.t_max, init.context_mode)
    b = init.boost
    think_open, think_close = vocab.id_of(THINK_OPEN), vocab.id_of(THINK_CLOSE)
    answer_open, answer_close = vocab.id_of(ANSWER_OPEN), vocab.id_of(ANSWER_CLOSE)
    fillers = list(vocab.filler_ids)
    close_logit = b + np.log(len(fillers) * init.think_close_prob / (1 - init.think_close_prob))

    for q, (sample_, prior) in enumerate(zip(tasks.samples, tasks.priors)):
        block = params.logits[params.question_rows(q)]
        answer = _answer_logits(b, prior, sample_.gold_index, len(sample_.options), vocab)
        if init.context_mode == ContextMode.QUESTION:
            # fixed layout: <think> f </think> <answer> X </answer> eos
            block[0, 0, think_open] = b
            block[0, 1, fillers] = b
            block[0, 2, think_close] = b
            block[0, 3, answer_open] = b
            block[0, 4] = answer
            block[0, 5, answer_close] = b
            block[0, 6:, vocab.eos_id] = b
            continue
        block[vocab.size, :, think_open] = b
        block[think_open, :, fillers] = b
        for f in fillers:
            block[f, :, fillers] = b
            block[f, :, think_close] = close_logit
        block[think_close, :, answer_open] = b
        block[answer_open] = answer
        for letter in vocab.choice_ids:
            block[letter, :, answer_close] = b
        block[answer_close, :, vocab.eos_id] = b
    return params


def gold_template(sample_: McqSample, vocab: Vocabulary) -> List[int]:
    """<think> f1 </think> <answer> gold </answer> eos"""
    return [
        vocab.id_of(THINK_OPEN), vocab.filler_ids[0], vocab.id_of(THINK_CLOSE),
        vocab.id_of(ANSWER_OPEN), vocab.letter_id(sample_.gold_letter), vocab.id_of(ANSWER_CLOSE), vocab.eos_id,
    ]


def heldout_prefix(think_len: int, vocab: Vocabulary) -> List[int]:
    fillers = vocab.filler_ids
    return ([vocab.id_of(THINK_OPEN)] + [fillers[i % len(fillers)] for i in range(think_len)]
            + [vocab.id_of(THINK_CLOSE), vocab.id_of(ANSWER_OPEN)])


def sft_objective(theta: PolicyParams, items: Sequence[Tuple[McqSample, int]],
                  vocab: Vocabulary) -> Tuple[float, np.ndarray]:
    """Mean per-token log-likelihood of the gold templates and its gradient"""
    if not items:
        raise InputError("SFT objective needs at least one question")
    eye = np.eye(theta.vocab_size)
    value = 0.0
    grad = np.zeros_like(theta.logits)
    for sample_, context in items:
        ids = np.asarray(gold_template(sample_, vocab), dtype=np.int64)
        lp = log_prob_table(theta, context)
        rows, ts = theta.local_rows(ids), np.arange(len(ids))
        value += lp[rows, ts, ids].mean()
        g = np.zeros_like(lp)
        np.add.at(g, (rows, ts), eye[ids] - np.exp(lp[rows, ts]))
        grad[theta.question_rows(context)] += g / len(ids)
    return value / len(items), grad / len(items)


@dataclass
class MetricsRow:
    step: int
    mean_reward: float
    accuracy: float
    tier_accuracy: Dict[str, float]
    heldout_accuracy: float
    mean_weight: float
    resample_fraction: float
    format_rate: float
    objective: float
    grad_norm: float

    def as_row(self) -> Dict[str, Any]:
        row: Dict[str, Any] = {"step": self.step, "mean_reward": self.mean_reward, "accuracy": self.accuracy}
        row.update({f"accuracy_{name}": acc for name, acc in self.tier_accuracy.items()})
        row.update({
            "heldout_accuracy": self.heldout_accuracy,
            "mean_weight": self.mean_weight,
            "resample_fraction": self.resample_fraction,
            "format_rate": self.format_rate,
            "objective": self.objective,
            "grad_norm": self.grad_norm,
        })
        return row


def metrics_columns(tier_names: Sequence[str]) -> List[str]:
    """Fixed column order of metrics.csv"""
    return (["step", "mean_reward", "accuracy"] + [f"accuracy_{t}" for t in tier_names]
            + ["heldout_accuracy", "mean_weight", "resample_fraction", "format_rate", "objective", "grad_norm"])


STEP_COLUMNS = ["step", "lr", "objective", "grad_norm", "mean_reward", "resample_fraction", "mean_weight",
                "correctness_rate", "format_rate", "exhausted_fraction"]


def heldout_accuracy(theta: PolicyParams, tasks: TaskSet, vocab: Vocabulary, lengths: Sequence[int]) -> float:
    """Mean probability of the gold letter after think spans of lengths not used in SFT templates"""
    probs = []
    for q, sample_ in enumerate(tasks.samples):
        for length in lengths:
            dist = forced_answer_distribution(theta, q, heldout_prefix(length, vocab), vocab, len(sample_.options))
            probs.append(dist[sample_.gold_index])
    return float(np.mean(probs))


def evaluate(theta: PolicyParams, tasks: TaskSet, vocab: Vocabulary, config: ExperimentConfig,
             step: int, last: Optional[StepReport]) -> MetricsRow:
    """Sampled accuracy and reward on the training questions.

    The generator is rebuilt from the seed at every evaluation so a constant
    policy always yields the same numbers.
    """
    rng = np.random.default_rng([config.seed, 2])
    accuracies, totals, formats = [], [], []
    for q, sample_ in enumerate(tasks.samples):
        responses = sample(theta, q, config.eval_samples, rng, vocab)
        flags = [is_correct(r.parsed_answer, sample_.gold_letter) for r in responses]
        accuracies.append(float(np.mean(flags)))
        for r in responses:
            breakdown = score(r.text, r.token_ids, sample_.gold_letter, len(sample_.options),
                              config.reward_weights, config.cosine, config.ngram)
            totals.append(breakdown.total)
            formats.append(breakdown.format)

    tiers = np.array(tasks.tiers)
    acc = np.array(accuracies)
    return MetricsRow(
        step=step,
        mean_reward=float(np.mean(totals)),
        accuracy=float(acc.mean()),
        tier_accuracy={name: float(acc[tiers == name].mean()) for name in tasks.tier_names},
        heldout_accuracy=heldout_accuracy(theta, tasks, vocab, config.heldout_think_lengths),
        mean_weight=last.mean_weight if last else 1.0,
        resample_fraction=last.resample_fraction if last else 0.0,
        format_rate=float(np.mean(formats)),
        objective=last.objective if last else 0.0,
        grad_norm=last.grad_norm if last else 0.0,
    )


def _csv_value(value: Any) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


class CsvLog:
    """Append-only CSV writer with a fixed column order"""

    def __init__(self, path: Path, columns: Sequence[str]):
        self.path = Path(path)
        self.columns = list(columns)
        with open(self.path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(self.columns)

    def append(self, row: Dict[str, Any]) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=self.columns, lineterminator="\n")
            writer.writerow({k: _csv_value(row[k]) for k in self.columns})


@dataclass
class RunResult:
    config: ExperimentConfig
    theta: PolicyParams
    metrics: List[MetricsRow] = field(default_factory=list)
    steps: List[Dict[str, Any]] = field(default_factory=list)
    out_dir: Optional[Path] = None

    @property
    def final(self) -> MetricsRow:
        return self.metrics[-1]


def _prepare(config: ExperimentConfig) -> Tuple[TaskSet, Vocabulary, PolicyParams, Path]:
    tasks = load_tasks(config)
    vocab = build_vocabulary(tasks, config.policy_init)
    theta = init_policy(tasks, vocab, config.policy_init)
    if config.init_checkpoint:
        loaded = load_params(Path(config.init_checkpoint))
        if not loaded.same_layout(theta):
            raise ConfigError(f"checkpoint {config.init_checkpoint} does not match the task layout")
        theta = loaded
        logger.info("warm start from %s", config.init_checkpoint)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_FILE).write_text(config.model_dump_json(indent=2), encoding="utf-8")
    return tasks, vocab, theta, out_dir


def _batch_items(tasks: TaskSet, config: ExperimentConfig, step_index: int) -> List[Tuple[McqSample, int]]:
    rng = np.random.default_rng([config.seed, 0, step_index])
    size = min(config.batch_size, len(tasks))
    picked = np.sort(rng.choice(len(tasks), size, replace=False))
    return [(tasks.samples[q], int(q)) for q in picked]


def _should_eval(step: int, config: ExperimentConfig) -> bool:
    return step % config.eval_every == 0 or step == config.steps


def _run_loop(config: ExperimentConfig, tasks: TaskSet, vocab: Vocabulary, theta: PolicyParams,
              out_dir: Path, train_step) -> RunResult:
    steps_log = CsvLog(out_dir / STEPS_FILE, STEP_COLUMNS)
    metrics_log = CsvLog(out_dir / METRICS_FILE, metrics_columns(tasks.tier_names))
    result = RunResult(config=config, theta=theta, out_dir=out_dir)

    first = evaluate(theta, tasks, vocab, config, 0, None)
    metrics_log.append(first.as_row())
    result.metrics.append(first)

    last: Optional[StepReport] = None
    for step_index in tqdm(range(config.steps), disable=not config.progress, desc=config.mode.value):
        items = _batch_items(tasks, config, step_index)
        theta, last, lr = train_step(theta, items, step_index)
        row = {"step": step_index + 1, "lr": lr, **last.as_row()}
        steps_log.append(row)
        result.steps.append(row)
        if _should_eval(step_index + 1, config):
            metrics = evaluate(theta, tasks, vocab, config, step_index + 1, last)
            metrics_log.append(metrics.as_row())
            result.metrics.append(metrics)
            logger.info("%s step %d: accuracy %.3f %s, format %.3f", config.mode.value, metrics.step,
                        metrics.accuracy, metrics.tier_accuracy, metrics.format_rate)

    save_params(theta, out_dir / CHECKPOINT_FILE)
    result.theta = theta
    return result


def run_sft(config: ExperimentConfig) -> RunResult:
    """Likelihood training on gold templates; the baseline for the GRPO modes"""
    if config.mode != Mode.SFT:
        raise ConfigError(f"run_sft needs mode sft, got {config.mode.value}")
    tasks, vocab, theta, out_dir = _prepare(config)
    templates = [gold_template(s, vocab) for s in tasks.samples]
    template_reward = float(np.mean([
        score(render(ids, vocab), ids, s.gold_letter, len(s.options),
              config.reward_weights, config.cosine, config.ngram).total
        for s, ids in zip(tasks.samples, templates)
    ]))

    def train_step(theta: PolicyParams, items, step_index: int):
        value, grad = sft_objective(theta, items, vocab)
        report = StepReport(
            objective=float(value),
            grad_norm=float(np.linalg.norm(grad)),
            mean_reward=template_reward,
            resample_fraction=0.0,
            mean_weight=1.0,
            correctness_rates=[1.0],
            format_rate=1.0,
            exhausted_fraction=0.0,
        )
        return PolicyParams(theta.logits + config.sft_lr * grad, theta.context_mode), report, config.sft_lr

    return _run_loop(config, tasks, vocab, theta, out_dir, train_step)


def grpo_settings(config: ExperimentConfig) -> GrpoConfig:
    """The mode decides whether resampling and reweighting are on"""
    enabled = config.mode == Mode.GRPO_DIFFICULTY_AWARE
    return config.grpo.model_copy(update={"resampling": enabled, "reweighting": enabled, "seed": config.seed})


def run_grpo(config: ExperimentConfig) -> RunResult:
    if config.mode == Mode.SFT:
        raise ConfigError("run_grpo needs a grpo mode, got sft")
    tasks, vocab, theta, out_dir = _prepare(config)
    cfg = grpo_settings(config)
    trainer = GrpoTrainer(theta, cfg, policy_sampler(vocab), config.steps,
                          config.reward_weights, config.cosine, config.ngram)

    def train_step(theta: PolicyParams, items, step_index: int):
        rngs = [np.random.default_rng([config.seed, 1, step_index, q]) for _, q in items]
        lr = trainer.lr
        _, report = trainer.train_step(items, rngs)
        return trainer.theta, report, lr

    return _run_loop(config, tasks, vocab, theta, out_dir, train_step)


def run_experiment(config: ExperimentConfig) -> RunResult:
    return run_sft(config) if config.mode == Mode.SFT else run_grpo(config)


COMPARE_COLUMNS = ["mode", "seed", "accuracy", "heldout_accuracy", "format_rate"]


def compare_modes(config: ExperimentConfig, seeds: Sequence[int],
                  modes: Sequence[Mode] = tuple(Mode)) -> Dict[str, Dict[str, float]]:
    """Paired-seed runs with equal step budgets; returns per-mode means of the final metrics"""
    if not seeds:
        raise InputError("compare_modes needs at least one seed")
    base = Path(config.out_dir)
    finals: Dict[str, List[MetricsRow]] = {}
    for mode in modes:
        for seed in seeds:
            run_cfg = config.model_copy(update={"mode": Mode(mode), "seed": seed,
                                                "out_dir": str(base / Mode(mode).value / f"seed_{seed}")})
            finals.setdefault(Mode(mode).value, []).append(run_experiment(run_cfg).final)

    summary = {}
    for mode, rows in finals.items():
        entry = {
            "accuracy": float(np.mean([r.accuracy for r in rows])),
            "heldout_accuracy": float(np.mean([r.heldout_accuracy for r in rows])),
            "format_rate": float(np.mean([r.format_rate for r in rows])),
        }
        for name in rows[0].tier_accuracy:
            entry[f"accuracy_{name}"] = float(np.mean([r.tier_accuracy[name] for r in rows]))
        summary[mode] = entry

    columns = list(dict.fromkeys(k for entry in summary.values() for k in entry))
    log = CsvLog(base / "compare.csv", ["mode"] + columns)
    for mode, entry in summary.items():
        log.append({"mode": mode, **entry})
    return summary


REQUIRED_METRIC_COLUMNS = ["step", "mean_reward", "accuracy", "mean_weight", "resample_fraction", "format_rate"]

# Curves drawn by report: file stem -> (title, column prefix)
PLOTS = {
    "reward": ("Mean total reward", "mean_reward"),
    "accuracy": ("Accuracy by tier", "accuracy_"),
    "weight": ("Mean difficulty weight", "mean_weight"),
    "resample": ("Resample fraction", "resample_fraction"),
}


def read_metrics(path: Path) -> List[Dict[str, float]]:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            header = reader.fieldnames or []
            missing = [c for c in REQUIRED_METRIC_COLUMNS if c not in header]
            if missing:
                raise ParseError(f"{path}: missing columns {', '.join(missing)}", line=1)
            rows = []
            for lineno, raw in enumerate(reader, start=2):
                if None in raw or any(v is None for v in raw.values()):
                    raise ParseError(f"{path}: wrong number of fields", line=lineno)
                try:
                    rows.append({k: float(v) for k, v in raw.items()})
                except ValueError as e:
                    raise ParseError(f"{path}: {e}", line=lineno) from e
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    return rows


def run_labels(metrics_paths: Sequence[Path]) -> List[str]:
    """Run directories relative to their common parent, e.g. ``sft/seed_0``.

    A lone run keeps its directory name; repeated labels get a trailing ``'``.
    """
    runs = [p.parent if p.name == METRICS_FILE else p.with_suffix("") for p in map(Path, metrics_paths)]
    resolved = [r.resolve() for r in runs]
    common = Path(os.path.commonpath(resolved)) if resolved else None
    labels: List[str] = []
    for run, full in zip(runs, resolved):
        label = full.relative_to(common).as_posix() if full != common else ""
        label = label or run.name or "run"
        while label in labels:
            label += "'"
        labels.append(label)
    return labels


def _plot(runs: Dict[str, List[Dict[str, float]]], title: str, prefix: str, path: Path) -> None:
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    for label, rows in runs.items():
        steps = [r["step"] for r in rows]
        columns = [c for c in rows[0] if c.startswith(prefix)] if prefix.endswith("_") else [prefix]
        for column in columns:
            name = label if len(columns) == 1 else f"{label} {column[len(prefix):]}"
            ax.plot(steps, [r[column] for r in rows], label=name)
    ax.set_title(title)
    ax.set_xlabel("step")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})


def report(metrics_paths: Sequence[Path], out_dir: Path) -> str:
    """Learning-curve plots plus a text summary comparing every run against the first"""
    if not metrics_paths:
        raise InputError("report needs at least one metrics file")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = {label: read_metrics(path) for label, path in zip(run_labels(metrics_paths), metrics_paths)}

    non_empty = {label: rows for label, rows in runs.items() if rows}
    if not non_empty:
        summary = "no steps recorded\n"
        (out_dir / SUMMARY_FILE).write_text(summary, encoding="utf-8")
        return summary

    for stem, (title, prefix) in PLOTS.items():
        _plot(non_empty, title, prefix, out_dir / f"{stem}.png")

    lines = ["Run summary (final evaluation)", ""]
    for label, rows in runs.items():
        if not rows:
            lines.append(f"{label}: no steps recorded")
            continue
        final = rows[-1]
        accs = ", ".join(f"{c[len('accuracy_'):]}={final[c]:.4f}" for c in final if c.startswith("accuracy_"))
        lines.append(f"{label}: step {int(final['step'])}, accuracy {final['accuracy']:.4f} ({accs}), "
                     f"format {final['format_rate']:.4f}, mean w {final['mean_weight']:.4f}")

    base_label = next(iter(runs))
    base = runs[base_label]
    if len(runs) > 1 and base:
        lines += ["", f"Final accuracy delta versus {base_label}"]
        base_final = base[-1]
        for label, rows in list(runs.items())[1:]:
            if not rows:
                continue
            final = rows[-1]
            tiers = [c for c in final if c.startswith("accuracy") and c in base_final]
            deltas = ", ".join(f"{c}={final[c] - base_final[c]:+.4f}" for c in tiers)
            lines.append(f"{label}: {deltas}")
    summary = "\n".join(lines) + "\n"
    (out_dir / SUMMARY_FILE).write_text(summary, encoding="utf-8")
    logger.info("wrote report for %d runs to %s", len(runs), out_dir)
    return summary

