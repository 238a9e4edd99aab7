"""Multiple-choice task construction from anomaly annotation records.

Each record becomes up to four questions: anomaly discrimination, defect
classification, defect localization (on a 3x3 grid) and object
classification. Samples are exchanged as JSON Lines.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from string import Template
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from PIL import Image
from pydantic import BaseModel, Field, ValidationError, model_validator

from lab.errors import GenerationError, InputError, ParseError
from lab.rewards import CHOICE_LETTERS

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).parent / "templates"
N_DISTRACTORS = 3


class TaskKind(str, Enum):
    ANOMALY_DISCRIMINATION = "anomaly_discrimination"
    DEFECT_CLASSIFICATION = "defect_classification"
    DEFECT_LOCALIZATION = "defect_localization"
    OBJECT_CLASSIFICATION = "object_classification"


class RegionLabel(str, Enum):
    TOP_LEFT = "top left"
    TOP_CENTER = "top center"
    TOP_RIGHT = "top right"
    MIDDLE_LEFT = "middle left"
    CENTER = "center"
    MIDDLE_RIGHT = "middle right"
    BOTTOM_LEFT = "bottom left"
    BOTTOM_CENTER = "bottom center"
    BOTTOM_RIGHT = "bottom right"


# Reading order, top-left first
REGION_GRID = list(RegionLabel)

# Tasks that may carry domain knowledge
DEFECT_TASKS = {
    TaskKind.ANOMALY_DISCRIMINATION,
    TaskKind.DEFECT_CLASSIFICATION,
    TaskKind.DEFECT_LOCALIZATION,
}

# Tasks that receive the soft prompt and contrastive embeddings
CONTRASTIVE_TASKS = {TaskKind.ANOMALY_DISCRIMINATION, TaskKind.DEFECT_LOCALIZATION}

IMAGE_PREAMBLE = (
    "Two images of a product are provided. The first shows a reference item without defects. "
    "Inspect the product in the second image and answer the multiple-choice question. "
    "Exactly one option is correct."
)
TEXT_PREAMBLE = (
    "A product is described in text instead of shown in an image. "
    "Read the description and answer the multiple-choice question. "
    "Exactly one option is correct."
)

QUESTION_TEXT = {
    TaskKind.ANOMALY_DISCRIMINATION: "Is there any defect in the object?",
    TaskKind.DEFECT_CLASSIFICATION: "Which type of defect does the object have?",
    TaskKind.DEFECT_LOCALIZATION: "Where is the defect located in the image?",
    TaskKind.OBJECT_CLASSIFICATION: "What kind of object is shown?",
}


class PromptKind(str, Enum):
    DEFECT_KNOWLEDGE = "defect_knowledge"
    NORMAL_KNOWLEDGE = "normal_knowledge"
    DEFECT_DESCRIPTION = "defect_description"
    NORMAL_DESCRIPTION = "normal_description"


TEMPLATE_SLOTS = {
    PromptKind.DEFECT_KNOWLEDGE: ("object_type", "defect_type"),
    PromptKind.NORMAL_KNOWLEDGE: ("object_type",),
    PromptKind.DEFECT_DESCRIPTION: ("object_type", "defect_type", "defect_location"),
    PromptKind.NORMAL_DESCRIPTION: ("object_type",),
}


class AnnotationRecord(BaseModel):
    record_id: str
    object_type: str
    is_anomalous: bool
    defect_type: Optional[str] = None
    mask_rle: Optional[str] = None
    mask_path: Optional[str] = None
    image: Optional[str] = None
    description: Optional[str] = None
    defect_location: Optional[RegionLabel] = None
    split: str = "train"

    @model_validator(mode="after")
    def check_consistency(self) -> "AnnotationRecord":
        if self.is_anomalous and not self.defect_type:
            raise ValueError("anomalous records need a defect_type")
        if (self.mask_rle or self.mask_path) and not self.is_anomalous:
            raise ValueError("only anomalous records carry a mask")
        if (self.image is None) == (self.description is None):
            raise ValueError("a record needs exactly one of image or description")
        if self.defect_location is not None and (self.description is None or not self.is_anomalous):
            raise ValueError("defect_location is only stated for anomalous descriptive records")
        return self

    @property
    def has_mask(self) -> bool:
        return bool(self.mask_rle or self.mask_path)

    def mask_array(self, base_dir: Optional[Path] = None) -> Optional[np.ndarray]:
        if self.mask_rle:
            return decode_rle(self.mask_rle)
        if self.mask_path:
            path = Path(self.mask_path)
            return load_mask_pbm(path if base_dir is None or path.is_absolute() else Path(base_dir) / path)
        return None


class McqSample(BaseModel):
    sample_id: str
    task: TaskKind
    question: str
    options: List[str]
    gold_index: int = Field(ge=0)
    object_type: str
    domain_knowledge: Optional[str] = None
    query_image: Optional[str] = None
    query_text: Optional[str] = None
    contrastive: bool = False
    provenance: Dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_options(self) -> "McqSample":
        if not 2 <= len(self.options) <= len(CHOICE_LETTERS):
            raise ValueError(f"need 2..{len(CHOICE_LETTERS)} options, got {len(self.options)}")
        if len(set(self.options)) != len(self.options):
            raise ValueError("options must be pairwise distinct")
        if self.gold_index >= len(self.options):
            raise ValueError("gold index out of range")
        if self.task == TaskKind.ANOMALY_DISCRIMINATION and len(self.options) != 2:
            raise ValueError("anomaly discrimination has exactly two options")
        if self.task == TaskKind.OBJECT_CLASSIFICATION and self.domain_knowledge is not None:
            raise ValueError("object classification must not carry domain knowledge")
        if (self.query_image is None) == (self.query_text is None):
            raise ValueError("a sample needs exactly one of query_image or query_text")
        return self

    @property
    def gold_option(self) -> str:
        return self.options[self.gold_index]

    @property
    def gold_letter(self) -> str:
        return CHOICE_LETTERS[self.gold_index]

    def prompt(self) -> str:
        """Full question text as shown to the model"""
        parts = [IMAGE_PREAMBLE if self.query_image is not None else TEXT_PREAMBLE]
        if self.query_text is not None:
            parts.append(f"Description: {self.query_text}")
        if self.domain_knowledge:
            parts.append(f"Domain knowledge: {self.domain_knowledge}")
        parts.append(self.question)
        parts.extend(f"{CHOICE_LETTERS[i]}. {option}" for i, option in enumerate(self.options))
        return "\n".join(parts)


@dataclass
class DistractorPools:
    defects_by_object: Dict[str, List[str]] = field(default_factory=dict)
    objects: List[str] = field(default_factory=list)


@dataclass
class KnowledgeBase:
    entries: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_dir(cls, path: Path) -> "KnowledgeBase":
        """One ``<object_type>.txt`` file per object type"""
        directory = Path(path)
        if not directory.is_dir():
            raise InputError(f"knowledge directory {directory} does not exist")
        return cls({p.stem: p.read_text(encoding="utf-8").strip() for p in sorted(directory.glob("*.txt"))})

    def get(self, object_type: str) -> Optional[str]:
        return self.entries.get(object_type)


def encode_rle(mask: np.ndarray) -> str:
    """Row-major run lengths alternating 0/1, starting with a (possibly empty) run of 0"""
    flat = np.asarray(mask).astype(bool).ravel()
    h, w = np.asarray(mask).shape
    runs = []
    current, length = False, 0
    for value in flat:
        if value == current:
            length += 1
        else:
            runs.append(length)
            current, length = value, 1
    runs.append(length)
    return f"{h},{w}:" + ",".join(str(r) for r in runs)


def decode_rle(encoded: str) -> np.ndarray:
    try:
        shape_part, runs_part = encoded.split(":")
        h, w = (int(x) for x in shape_part.split(","))
        runs = [int(x) for x in runs_part.split(",")] if runs_part else []
    except ValueError as e:
        raise InputError(f"malformed run-length mask {encoded!r}") from e
    if h < 1 or w < 1 or any(r < 0 for r in runs) or sum(runs) != h * w:
        raise InputError(f"run lengths do not cover a {h}x{w} mask")
    values = np.repeat(np.arange(len(runs)) % 2, runs).astype(bool)
    return values.reshape(h, w)


def load_mask_pbm(path: Path) -> np.ndarray:
    """Read a bitmap mask; white pixels are positive"""
    try:
        with Image.open(path) as img:
            return np.array(img.convert("L")) > 127
    except OSError as e:
        raise InputError(f"cannot read mask {path}: {e}") from e


def save_mask_pbm(mask: np.ndarray, path: Path) -> None:
    Image.fromarray(np.asarray(mask).astype(bool)).save(path, format="PPM")


def mask_to_region(mask: np.ndarray) -> RegionLabel:
    """Grid cell holding the most positive pixels; ties go to the earlier cell in reading order.

    Rows split at h//3 and 2h//3, columns at w//3 and 2w//3, so remainder
    pixels fall into the last band.
    """
    grid = np.asarray(mask).astype(bool)
    if grid.ndim != 2:
        raise InputError(f"mask must be 2-D, got shape {grid.shape}")
    if not grid.any():
        raise InputError("no defect to localize: mask has no positive pixel")
    h, w = grid.shape
    row_edges = [0, h // 3, 2 * h // 3, h]
    col_edges = [0, w // 3, 2 * w // 3, w]
    counts = np.array([
        grid[row_edges[r]:row_edges[r + 1], col_edges[c]:col_edges[c + 1]].sum()
        for r in range(3) for c in range(3)
    ])
    return REGION_GRID[int(np.argmax(counts))]


def build_pools(records: Iterable[AnnotationRecord]) -> DistractorPools:
    defects: Dict[str, set] = {}
    objects = set()
    for record in records:
        objects.add(record.object_type)
        if record.defect_type:
            defects.setdefault(record.object_type, set()).add(record.defect_type)
    return DistractorPools({k: sorted(v) for k, v in sorted(defects.items())}, sorted(objects))


def _draw_distractors(candidates: Sequence[str], gold: str, rng: np.random.Generator, what: str) -> List[str]:
    pool = sorted(set(candidates) - {gold})
    if len(pool) < N_DISTRACTORS:
        raise GenerationError(f"{what} pool has {len(pool)} alternatives to {gold!r}, need {N_DISTRACTORS}")
    return [pool[i] for i in rng.choice(len(pool), N_DISTRACTORS, replace=False)]


def build_question(record: AnnotationRecord, task: TaskKind, pools: DistractorPools,
                   rng: np.random.Generator, knowledge: Optional[KnowledgeBase] = None,
                   base_dir: Optional[Path] = None) -> McqSample:
    """Turn one record into one multiple-choice sample of the given task"""
    task = TaskKind(task)
    if task in (TaskKind.DEFECT_CLASSIFICATION, TaskKind.DEFECT_LOCALIZATION) and not record.is_anomalous:
        raise InputError(f"{task.value} needs an anomalous record, {record.record_id} is normal")

    if task == TaskKind.ANOMALY_DISCRIMINATION:
        gold = "Yes" if record.is_anomalous else "No"
        options = [gold, "No" if record.is_anomalous else "Yes"]
    elif task == TaskKind.DEFECT_CLASSIFICATION:
        gold = record.defect_type
        pool = pools.defects_by_object.get(record.object_type, [])
        options = [gold] + _draw_distractors(pool, gold, rng, f"defect ({record.object_type})")
    elif task == TaskKind.DEFECT_LOCALIZATION:
        if record.has_mask:
            gold = mask_to_region(record.mask_array(base_dir)).value
        elif record.defect_location is not None:
            gold = record.defect_location.value
        else:
            raise InputError(f"record {record.record_id} has neither mask nor stated defect location")
        options = [gold] + _draw_distractors([r.value for r in REGION_GRID], gold, rng, "region")
    else:
        gold = record.object_type
        options = [gold] + _draw_distractors(pools.objects, gold, rng, "object")

    order = rng.permutation(len(options))
    shuffled = [options[i] for i in order]
    domain_knowledge = knowledge.get(record.object_type) if knowledge and task in DEFECT_TASKS else None

    return McqSample(
        sample_id=f"{record.record_id}/{task.value}",
        task=task,
        question=QUESTION_TEXT[task],
        options=shuffled,
        gold_index=int(np.flatnonzero(order == 0)[0]),
        object_type=record.object_type,
        domain_knowledge=domain_knowledge,
        query_image=record.image,
        query_text=record.description,
        contrastive=task in CONTRASTIVE_TASKS and record.image is not None,
        provenance={"record_id": record.record_id, "split": record.split},
    )


def applicable_tasks(record: AnnotationRecord) -> List[TaskKind]:
    tasks = [TaskKind.ANOMALY_DISCRIMINATION]
    if record.is_anomalous:
        tasks.append(TaskKind.DEFECT_CLASSIFICATION)
        if record.has_mask or record.defect_location is not None:
            tasks.append(TaskKind.DEFECT_LOCALIZATION)
    tasks.append(TaskKind.OBJECT_CLASSIFICATION)
    return tasks


def record_rng(seed: int, record_id: str) -> np.random.Generator:
    """Generator derived from the record id so output does not depend on processing order"""
    digest = hashlib.sha256(f"{seed}:{record_id}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def generate_samples(records: Sequence[AnnotationRecord], pools: Optional[DistractorPools] = None,
                     seed: int = 0, knowledge: Optional[KnowledgeBase] = None,
                     base_dir: Optional[Path] = None) -> List[McqSample]:
    """Every applicable task for every record, ordered by record id; failing items are skipped"""
    pools = pools or build_pools(records)
    samples = []
    for record in sorted(records, key=lambda r: r.record_id):
        rng = record_rng(seed, record.record_id)
        for task in applicable_tasks(record):
            try:
                samples.append(build_question(record, task, pools, rng, knowledge, base_dir))
            except (GenerationError, InputError) as e:
                logger.warning("skipping %s/%s: %s", record.record_id, task.value, e.detail)
    return samples


def _write_jsonl(models: Sequence[BaseModel], path: Path) -> None:
    lines = [m.model_dump_json() for m in models]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _read_jsonl(path: Path, model: type) -> list:
    items = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            items.append(model.model_validate_json(line))
        except ValidationError as e:
            raise ParseError(f"{path}: {e.errors()[0]['msg']}", line=lineno) from e
    return items


def emit_samples(samples: Sequence[McqSample], path: Path) -> None:
    _write_jsonl(samples, path)


def load_samples(path: Path) -> List[McqSample]:
    return _read_jsonl(path, McqSample)


def emit_records(records: Sequence[AnnotationRecord], path: Path) -> None:
    _write_jsonl(records, path)


def load_records(path: Path) -> List[AnnotationRecord]:
    return _read_jsonl(path, AnnotationRecord)


def render_prompt_template(kind: PromptKind, **slots: str) -> str:
    """Fill one of the four knowledge/description templates; no model is called"""
    kind = PromptKind(kind)
    missing = [name for name in TEMPLATE_SLOTS[kind] if not slots.get(name)]
    if missing:
        raise InputError(f"{kind.value} template needs {', '.join(missing)}")
    template = Template((TEMPLATE_DIR / f"{kind.value}.txt").read_text(encoding="utf-8"))
    return template.substitute({name: str(slots[name]) for name in TEMPLATE_SLOTS[kind]})


def record_from_folder_layout(object_type: str, folder: str, image_path: str,
                              mask_path: Optional[str] = None, split: str = "test") -> AnnotationRecord:
    """Adapter for datasets laid out as <object>/<split>/<good|defect_name>/<image>"""
    is_anomalous = folder != "good"
    return AnnotationRecord(
        record_id=f"{object_type}/{split}/{folder}/{Path(image_path).stem}",
        object_type=object_type,
        is_anomalous=is_anomalous,
        defect_type=folder.replace("_", " ") if is_anomalous else None,
        mask_path=mask_path if is_anomalous else None,
        image=image_path,
        split=split,
    )


# Synthetic catalogue used when no annotation file is given
SYNTHETIC_OBJECTS = {
    "bottle": ["broken large", "broken small", "contamination", "crack"],
    "cable": ["bent wire", "cable swap", "cut insulation", "missing wire", "poke insulation"],
    "capsule": ["crack", "faulty imprint", "poke", "scratch", "squeeze"],
    "metal nut": ["bent", "color", "flip", "scratch"],
    "screw": ["manipulated front", "scratch head", "scratch neck", "thread side", "thread top"],
}


def synthetic_records(n: int, rng: np.random.Generator, mask_shape=(48, 48),
                      descriptive_fraction: float = 0.2) -> List[AnnotationRecord]:
    objects = sorted(SYNTHETIC_OBJECTS)
    h, w = mask_shape
    records = []
    for i in range(n):
        object_type = objects[int(rng.integers(len(objects)))]
        anomalous = bool(rng.random() < 0.5)
        descriptive = bool(rng.random() < descriptive_fraction)
        defect_type = None
        mask_rle = None
        location = None
        if anomalous:
            defects = SYNTHETIC_OBJECTS[object_type]
            defect_type = defects[int(rng.integers(len(defects)))]
            if descriptive:
                location = REGION_GRID[int(rng.integers(len(REGION_GRID)))]
            else:
                mask = np.zeros(mask_shape, dtype=bool)
                top, left = int(rng.integers(h - 4)), int(rng.integers(w - 4))
                mask[top:top + int(rng.integers(2, 9)), left:left + int(rng.integers(2, 9))] = True
                mask_rle = encode_rle(mask)
        record_id = f"synthetic-{i:05d}"
        records.append(AnnotationRecord(
            record_id=record_id,
            object_type=object_type,
            is_anomalous=anomalous,
            defect_type=defect_type,
            mask_rle=mask_rle,
            image=None if descriptive else f"synthetic/{record_id}.png",
            description=(f"A {object_type} seen from above." if descriptive else None),
            defect_location=location,
        ))
    return records


def run_gen_tasks(out_path: Path, seed: int = 0, records_path: Optional[Path] = None,
                  knowledge_dir: Optional[Path] = None, n_synthetic: int = 200) -> List[McqSample]:
    """Load or synthesize records, build every sample and write them as JSON Lines"""
    if records_path is not None:
        records = load_records(records_path)
        base_dir = Path(records_path).parent
    else:
        records = synthetic_records(n_synthetic, np.random.default_rng(seed))
        base_dir = None
    knowledge = KnowledgeBase.from_dir(knowledge_dir) if knowledge_dir else None
    samples = generate_samples(records, seed=seed, knowledge=knowledge, base_dir=base_dir)
    emit_samples(samples, out_path)
    logger.info("wrote %d samples from %d records to %s", len(samples), len(records), out_path)
    return samples
