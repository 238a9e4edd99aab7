"""
Experiment presets for the difficulty-aware GRPO lab
Named starting points for `main.py train --preset <name>`
"""

from typing import Dict, Any, List, Optional
from dataclasses import dataclass, field

from lab.errors import ConfigError

@dataclass
class TierPreset:
    name: str
    count: int
    prior: float

@dataclass
class ExperimentPreset:
    name: str
    description: str  # metadata, not passed into ExperimentConfig
    mode: str
    steps: int
    eval_every: int
    tiers: List[TierPreset]
    eval_samples: int = 8
    batch_size: int = 8
    grpo: Dict[str, Any] = field(default_factory=dict)
    tags: List[str] = field(default_factory=list)  # metadata, not passed into ExperimentConfig

# Standard difficulty split
EASY_HARD_TIERS = [
    TierPreset("easy", 50, 0.9),
    TierPreset("hard", 50, 0.05),
]

# Smoke Preset - seconds on a laptop
SMOKE_PRESET = ExperimentPreset(
    name="smoke",
    description="Tiny run that exercises the whole loop: a handful of questions and steps.",
    mode="grpo_difficulty_aware",
    steps=4,
    eval_every=2,
    tiers=[TierPreset("easy", 4, 0.9), TierPreset("hard", 4, 0.05)],
    eval_samples=4,
    batch_size=4,
    grpo={"group_size": 4, "max_resample_rounds": 2},
    tags=["smoke", "ci"],
)

# Direction Preset - paired comparison of the three modes
DIRECTION_PRESET = ExperimentPreset(
    name="direction",
    description="50 easy and 50 hard questions, equal step budgets for every mode.",
    mode="grpo_difficulty_aware",
    steps=300,
    eval_every=50,
    tiers=EASY_HARD_TIERS,
    tags=["comparison", "difficulty"],
)

# SFT Baseline Preset
SFT_BASELINE_PRESET = ExperimentPreset(
    name="sft_baseline",
    description="Likelihood training on the gold template with a single reasoning token.",
    mode="sft",
    steps=300,
    eval_every=50,
    tiers=EASY_HARD_TIERS,
    tags=["baseline"],
)

ALL_PRESETS = {
    "smoke": SMOKE_PRESET,
    "direction": DIRECTION_PRESET,
    "sft_baseline": SFT_BASELINE_PRESET,
}

def get_preset(preset_name: str) -> Optional[ExperimentPreset]:
    """Get a preset by name"""
    return ALL_PRESETS.get(preset_name)

def get_all_presets() -> Dict[str, ExperimentPreset]:
    """Get all presets"""
    return ALL_PRESETS

def generate_experiment_config(preset_name: str, **overrides: Any) -> Dict[str, Any]:
    """Config dict for ExperimentConfig; keyword overrides replace top-level fields"""
    preset = get_preset(preset_name)
    if not preset:
        raise ConfigError(f"unknown preset {preset_name!r}, choose from {', '.join(sorted(ALL_PRESETS))}")

    config = {
        "mode": preset.mode,
        "steps": preset.steps,
        "eval_every": preset.eval_every,
        "eval_samples": preset.eval_samples,
        "batch_size": preset.batch_size,
        "tasks": {
            "tiers": [
                {"name": tier.name, "count": tier.count, "prior": tier.prior}
                for tier in preset.tiers
            ]
        },
        "grpo": dict(preset.grpo),
        "out_dir": f"runs/{preset.name}",
    }
    config.update({key: value for key, value in overrides.items() if value is not None})
    return config
