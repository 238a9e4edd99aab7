"""Contrastive heatmaps between query and reference patch features.

For each layer, every query patch is compared to the reference patches in a
(2k+1)x(2k+1) window around the same position and keeps the smallest cosine
distance. Layer maps are averaged and passed through a batchnorm -> conv ->
flatten projector to obtain a sequence of contrastive embeddings.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, Field, ValidationError
from torch import nn
from tqdm import tqdm

from lab.errors import InputError, ParseError

logger = logging.getLogger(__name__)

FEATURE_GRID_SCHEMA_VERSION = 1
MAX_DISTANCE = 2.0

# Projector defaults
DEFAULT_OUT_CHANNELS = 32
DEFAULT_KERNEL = 3
DEFAULT_MOMENTUM = 0.1
DEFAULT_BN_EPS = 1e-5


@dataclass
class FeatureGrid:
    layer: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise InputError(f"feature grid must be a non-empty m x n x d array, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InputError(f"feature grid for layer {self.layer} has non-finite values")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.values.shape


@dataclass
class Heatmap:
    values: np.ndarray
    layer: Optional[int] = None  # None for an aggregated map

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InputError(f"heatmap must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)) or self.values.min() < 0 or self.values.max() > MAX_DISTANCE:
            raise InputError("heatmap values must be finite and lie in [0, 2]")

    @property
    def aggregated(self) -> bool:
        return self.layer is None


class ProjectorMode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class ProjectorParams(nn.Module):
    """BatchNorm2d -> Conv2d in float64; ``mode`` mirrors ``nn.Module.training``"""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = DEFAULT_KERNEL,
                 stride: int = 1, padding: int = 1, eps: float = DEFAULT_BN_EPS,
                 momentum: float = DEFAULT_MOMENTUM):
        super().__init__()
        if min(in_channels, out_channels, kernel) < 1:
            raise InputError("projector channels and kernel size must be positive")
        if eps <= 0:
            raise InputError(f"batchnorm epsilon must be positive, got {eps}")
        if stride < 1 or padding < 0:
            raise InputError(f"invalid stride {stride} / padding {padding}")
        if not 0 <= momentum <= 1:
            raise InputError(f"momentum must lie in [0, 1], got {momentum}")
        self.norm = nn.BatchNorm2d(in_channels, eps=eps, momentum=momentum)
        self.conv = nn.Conv2d(in_channels, out_channels, kernel, stride=stride, padding=padding)
        self.double()

    @property
    def mode(self) -> ProjectorMode:
        return ProjectorMode.TRAIN if self.training else ProjectorMode.EVAL

    @mode.setter
    def mode(self, value: Union[ProjectorMode, str]) -> None:
        self.train(ProjectorMode(value) == ProjectorMode.TRAIN)

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    @property
    def running_mean(self) -> np.ndarray:
        return self.norm.running_mean.detach().numpy().copy()

    @property
    def running_var(self) -> np.ndarray:
        return self.norm.running_var.detach().numpy().copy()

    def output_shape(self, height: int, width: int) -> Tuple[int, int]:
        (k_h, k_w), (s_h, s_w), (p_h, p_w) = self.conv.kernel_size, self.conv.stride, self.conv.padding
        return (height + 2 * p_h - k_h) // s_h + 1, (width + 2 * p_w - k_w) // s_w + 1

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(self.norm(x))


@dataclass
class EmbeddingSequence:
    embeddings: np.ndarray  # (m' * n', C_out), row-major over spatial positions
    spatial_shape: Tuple[int, int]

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


class SoftPromptSpec(BaseModel):
    """Learnable prompt slots placed before the contrastive embeddings.

    Only recorded as metadata; there is no language-model embedding space here.
    """

    n_slots: int = Field(8, gt=0)
    init_cue: str = "Below are some hints for your reference:"
    tasks: List[str] = ["anomaly_discrimination", "defect_localization"]


class Rect(NamedTuple):
    row: int
    col: int
    height: int
    width: int

    def contains(self, i: int, j: int) -> bool:
        return self.row <= i < self.row + self.height and self.col <= j < self.col + self.width


def _cosine_distance_arrays(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Cosine distance between matching vectors of two (..., d) arrays.

    Dot products accumulate channel by channel in a fixed order so every
    batch shape gives bit-identical results.
    """
    uv = np.zeros(u.shape[:-1])
    uu = np.zeros(u.shape[:-1])
    vv = np.zeros(u.shape[:-1])
    for c in range(u.shape[-1]):
        uv = uv + u[..., c] * v[..., c]
        uu = uu + u[..., c] * u[..., c]
        vv = vv + v[..., c] * v[..., c]
    denom = np.sqrt(uu * vv)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(denom > 0, uv / np.where(denom > 0, denom, 1.0), 0.0)
    dist = np.where((uu == 0) & (vv == 0), 0.0, 1.0 - cos)
    return np.clip(dist, 0.0, MAX_DISTANCE)


def cosine_distance(u: Sequence[float], v: Sequence[float]) -> float:
    """1 - cos(u, v); 1 when exactly one vector is zero, 0 when both are"""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or u.shape != v.shape:
        raise InputError(f"vectors must be 1-D and of equal length, got {u.shape} and {v.shape}")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise InputError("vectors must be finite")
    return float(_cosine_distance_arrays(u[None], v[None])[0])


def layer_heatmap(query: FeatureGrid, reference: FeatureGrid, k: int) -> Heatmap:
    """Minimal cosine distance of each query patch to the reference patches within radius k"""
    if query.shape != reference.shape:
        raise InputError(f"feature grids differ in shape: {query.shape} vs {reference.shape}")
    if isinstance(k, bool) or int(k) != k or k < 0:
        raise InputError(f"window radius must be a non-negative integer, got {k}")
    k = int(k)
    q, r = query.values, reference.values
    m, n, _ = q.shape
    heat = np.full((m, n), np.inf)
    for di in range(-k, k + 1):
        i0, i1 = max(0, -di), min(m, m - di)
        if i0 >= i1:
            continue
        for dj in range(-k, k + 1):
            j0, j1 = max(0, -dj), min(n, n - dj)
            if j0 >= j1:
                continue
            dist = _cosine_distance_arrays(q[i0:i1, j0:j1], r[i0 + di:i1 + di, j0 + dj:j1 + dj])
            heat[i0:i1, j0:j1] = np.minimum(heat[i0:i1, j0:j1], dist)
    return Heatmap(heat, layer=query.layer)


def aggregate(maps: Sequence[Heatmap], layers: Optional[Sequence[int]] = None) -> Heatmap:
    """Elementwise mean of the layer maps, optionally restricted to ``layers``"""
    maps = list(maps)
    if layers is not None:
        by_layer = {h.layer: h for h in maps}
        missing = [layer for layer in layers if layer not in by_layer]
        if missing:
            raise InputError(f"no heatmap for layers {missing}")
        maps = [by_layer[layer] for layer in layers]
    if not maps:
        raise InputError("cannot aggregate an empty list of heatmaps")
    shapes = {h.values.shape for h in maps}
    if len(shapes) != 1:
        raise InputError(f"heatmaps differ in shape: {sorted(shapes)}")
    # sorted per position so the result does not depend on layer order
    stacked = np.sort(np.stack([h.values for h in maps]), axis=0)
    return Heatmap(np.clip(stacked.mean(axis=0), 0.0, MAX_DISTANCE), layer=None)


def stack_layers(maps: Sequence[Heatmap]) -> np.ndarray:
    """Per-layer maps as channels, shape (L, m, n)"""
    if not maps:
        raise InputError("cannot stack an empty list of heatmaps")
    if len({h.values.shape for h in maps}) != 1:
        raise InputError("heatmaps differ in shape")
    return np.stack([h.values for h in maps])


def init_projector(in_channels: int = 1, out_channels: int = DEFAULT_OUT_CHANNELS,
                   kernel: int = DEFAULT_KERNEL, stride: int = 1, padding: int = 1,
                   momentum: float = DEFAULT_MOMENTUM, eps: float = DEFAULT_BN_EPS,
                   rng: Optional[np.random.Generator] = None) -> ProjectorParams:
    """Projector with conv weights drawn uniformly in +-1/sqrt(fan_in) from ``rng``"""
    p = ProjectorParams(in_channels, out_channels, kernel, stride, padding, eps, momentum)
    rng = rng if rng is not None else np.random.default_rng(0)
    bound = 1.0 / np.sqrt(in_channels * kernel * kernel)
    with torch.no_grad():
        p.conv.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(p.conv.weight.shape))))
        p.conv.bias.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=out_channels)))
    return p


def _as_batch(batch: Union[Sequence[Heatmap], np.ndarray]) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 3:
            x = x[:, None]
    else:
        if not batch:
            raise InputError("projector batch is empty")
        if len({h.values.shape for h in batch}) != 1:
            raise InputError("heatmaps in a batch must share their shape")
        x = np.stack([h.values for h in batch])[:, None]
    if x.ndim != 4 or x.shape[0] < 1:
        raise InputError(f"projector input must be (N, C, H, W), got {x.shape}")
    return np.ascontiguousarray(x)


def _check_input(x: np.ndarray, p: ProjectorParams) -> None:
    if x.shape[1] != p.in_channels:
        raise InputError(f"projector expects {p.in_channels} channels, got {x.shape[1]}")
    if p.training and x.shape[0] < 2:
        raise InputError("train-mode batch normalization needs a batch of at least 2")


def batch_norm(x: np.ndarray, p: ProjectorParams) -> np.ndarray:
    """Normalized, scaled and shifted input.

    In train mode batch statistics are used and the running statistics are
    updated in place (unbiased variance, momentum ``p.norm.momentum``).
    """
    x = _as_batch(x)
    _check_input(x, p)
    with torch.no_grad():
        return p.norm(torch.from_numpy(x)).numpy()


def project(batch: Union[Sequence[Heatmap], np.ndarray], p: ProjectorParams) -> List[EmbeddingSequence]:
    """Batch norm, convolution, then row-major flatten into one embedding sequence per map"""
    x = _as_batch(batch)
    _check_input(x, p)
    h_out, w_out = p.output_shape(*x.shape[2:])
    if h_out < 1 or w_out < 1:
        raise InputError(f"kernel {tuple(p.conv.kernel_size)} larger than padded input {x.shape[2:]}")
    with torch.no_grad():
        out = p(torch.from_numpy(x)).flatten(2).transpose(1, 2).numpy()
    return [EmbeddingSequence(o.copy(), (h_out, w_out)) for o in out]


def _smooth_field(m: int, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    freq = rng.uniform(0.1, 0.6, size=(2, d))
    phase = rng.uniform(0, 2 * np.pi, size=d)
    base = rng.normal(size=d)
    field_ = base + np.sin(ii[..., None] * freq[0] + jj[..., None] * freq[1] + phase)
    return field_ / np.linalg.norm(field_, axis=-1, keepdims=True)


def _orthogonal_patch(window: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Unit vector orthogonal to the span of the window vectors (rows)"""
    d = window.shape[1]
    if window.shape[0] >= d:
        v = -window.mean(axis=0)
    else:
        basis, _ = np.linalg.qr(window.T)
        g = rng.normal(size=d)
        v = g - basis @ (basis.T @ g)
    return v / np.linalg.norm(v)


def synth_features(m: int, n: int, d: int, defect_region: Optional[Rect] = None,
                   shift: Tuple[int, int] = (0, 0), rng: Optional[np.random.Generator] = None,
                   n_layers: int = 2, window_radius: int = 1) -> List[Tuple[FeatureGrid, FeatureGrid]]:
    """Reference/query grid pairs per layer with an optional planted defect.

    The query is the reference translated by ``shift`` with border
    replication; defect patches are replaced by vectors orthogonal to the
    reference window of radius ``window_radius`` around them.
    """
    if min(m, n, d, n_layers) < 1:
        raise InputError(f"degenerate feature shape {m}x{n}x{d} with {n_layers} layers")
    di, dj = shift
    if abs(di) >= m or abs(dj) >= n:
        raise InputError(f"shift {shift} too large for a {m}x{n} grid")
    if defect_region is not None:
        rect = Rect(*defect_region)
        if rect.height < 1 or rect.width < 1 or rect.row < 0 or rect.col < 0 \
                or rect.row + rect.height > m or rect.col + rect.width > n:
            raise InputError(f"defect region {tuple(rect)} outside the {m}x{n} grid")
        defect_region = rect
    rng = rng if rng is not None else np.random.default_rng(0)

    rows = np.clip(np.arange(m) - di, 0, m - 1)
    cols = np.clip(np.arange(n) - dj, 0, n - 1)
    pairs = []
    for layer in range(n_layers):
        ref = _smooth_field(m, n, d, rng)
        query = ref[rows][:, cols].copy()
        if defect_region is not None:
            for i in range(defect_region.row, defect_region.row + defect_region.height):
                for j in range(defect_region.col, defect_region.col + defect_region.width):
                    window = ref[max(0, i - window_radius):i + window_radius + 1,
                                 max(0, j - window_radius):j + window_radius + 1].reshape(-1, d)
                    query[i, j] = _orthogonal_patch(window, rng)
        pairs.append((FeatureGrid(layer, ref), FeatureGrid(layer, query)))
    return pairs


def contrastive_map(pairs: Sequence[Tuple[FeatureGrid, FeatureGrid]], k: int,
                    layers: Optional[Sequence[int]] = None) -> Heatmap:
    return aggregate([layer_heatmap(query, ref, k) for ref, query in pairs], layers)


class FeatureGridHeader(BaseModel):
    schema_version: int = FEATURE_GRID_SCHEMA_VERSION
    layer: int
    m: int = Field(gt=0)
    n: int = Field(gt=0)
    d: int = Field(gt=0)


def save_feature_grid(grid: FeatureGrid, path: Path) -> None:
    m, n, d = grid.shape
    payload = FeatureGridHeader(layer=grid.layer, m=m, n=n, d=d).model_dump()
    payload["values"] = grid.values.ravel().tolist()
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_feature_grid(path: Path) -> FeatureGrid:
    """Read a grid dumped by an external feature extractor"""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        values = payload.pop("values")
        header = FeatureGridHeader.model_validate(payload)
    except (json.JSONDecodeError, KeyError, AttributeError, ValidationError) as e:
        raise ParseError(f"malformed feature grid {path}: {e}") from e
    if header.schema_version != FEATURE_GRID_SCHEMA_VERSION:
        raise ParseError(f"unsupported feature grid schema {header.schema_version}")
    if len(values) != header.m * header.n * header.d:
        raise ParseError(f"{path} holds {len(values)} values, header implies {header.m}x{header.n}x{header.d}")
    return FeatureGrid(header.layer, np.array(values, dtype=np.float64).reshape(header.m, header.n, header.d))


def heatmap_to_csv(heatmap: Heatmap, path: Path) -> None:
    np.savetxt(path, heatmap.values, delimiter=",", fmt="%.17g")


def heatmap_to_pgm(heatmap: Heatmap, path: Path, vmax: float = MAX_DISTANCE) -> None:
    """8-bit graymap, 0 -> black and ``vmax`` -> white"""
    if vmax <= 0:
        raise InputError(f"vmax must be positive, got {vmax}")
    scaled = np.round(np.clip(heatmap.values / vmax, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(scaled).save(path, format="PPM")


BENCH_COLUMNS = ["fixture", "defect_row", "defect_col", "defect_height", "defect_width",
                 "argmax_row", "argmax_col", "peak", "hit"]


@dataclass
class BenchResult:
    rows: List[Dict[str, Any]] = field(default_factory=list)
    maps: List[Heatmap] = field(default_factory=list)
    embedding_shape: Tuple[int, int] = (0, 0)

    @property
    def hit_rate(self) -> float:
        return sum(r["hit"] for r in self.rows) / len(self.rows) if self.rows else 0.0


def heatmap_bench(n_fixtures: int = 100, m: int = 12, n: int = 12, d: int = 16, k: int = 1,
                  n_layers: int = 2, defect_size: int = 3, seed: int = 0,
                  projector: Optional[ProjectorParams] = None, progress: bool = False) -> BenchResult:
    """Planted-defect benchmark: how often the aggregated map peaks inside the defect"""
    if n_fixtures < 1:
        raise InputError(f"need at least one fixture, got {n_fixtures}")
    if defect_size < 1 or defect_size > min(m, n):
        raise InputError(f"defect size {defect_size} does not fit a {m}x{n} grid")

    result = BenchResult()
    for idx in tqdm(range(n_fixtures), disable=not progress, desc="heatmap-bench"):
        rng = np.random.default_rng([seed, idx])
        rect = Rect(int(rng.integers(m - defect_size + 1)), int(rng.integers(n - defect_size + 1)),
                    defect_size, defect_size)
        heat = contrastive_map(synth_features(m, n, d, rect, rng=rng, n_layers=n_layers, window_radius=k), k)
        i, j = np.unravel_index(int(np.argmax(heat.values)), heat.values.shape)
        result.rows.append({
            "fixture": idx,
            "defect_row": rect.row,
            "defect_col": rect.col,
            "defect_height": rect.height,
            "defect_width": rect.width,
            "argmax_row": int(i),
            "argmax_col": int(j),
            "peak": float(heat.values[i, j]),
            "hit": int(rect.contains(int(i), int(j))),
        })
        result.maps.append(heat)

    if len(result.maps) >= 2:
        if projector is None:
            projector = init_projector(rng=np.random.default_rng(seed))
        sequences = project(result.maps, projector)
        result.embedding_shape = (len(sequences[0]), sequences[0].dim)
    logger.info("heatmap bench: %d fixtures, hit rate %.3f", n_fixtures, result.hit_rate)
    return result


def run_heatmap_bench(out_dir: Path, seed: int = 0, n_fixtures: int = 100, k: int = 1) -> BenchResult:
    """Write per-fixture results plus the first fixture's map as CSV and graymap"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = heatmap_bench(n_fixtures=n_fixtures, k=k, seed=seed)
    with open(out_dir / "heatmap_bench.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in result.rows:
            writer.writerow({**row, "peak": repr(row["peak"])})

    heatmap_to_csv(result.maps[0], out_dir / "fixture0_heatmap.csv")
    heatmap_to_pgm(result.maps[0], out_dir / "fixture0_heatmap.pgm")
    return result
