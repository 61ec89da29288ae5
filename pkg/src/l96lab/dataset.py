"""Trajectory-to-image-chunk datasets with parameter targets.

A trajectory becomes a grayscale image (rows = time, columns = variables)
via per-column min-max scaling fitted on the training portion only. The
image is cut into consecutive non-overlapping 20-row chunks; each chunk is
one training example labelled with the (b, c, h) that generated it.

Two tasks: XY keeps all K + J*K columns, Y_ONLY keeps only the J*K fast
columns. Two test modes: test_mode=False holds out a random fraction of
chunks inside every simulation; test_mode=True holds out whole simulations.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (
    ChecksumError,
    DegenerateColumn,
    FormatError,
    InsufficientData,
    RangeEmpty,
    ZeroVariance,
)
from .sim import ModelParams, Trajectory

DATASET_MAGIC = b"L96D"
DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sIQII")  # magic, version, count, height, width

CHUNK_HEIGHT = 20

TRAIN = 0
TEST = 1


class TaskKind(str, Enum):
    XY = "xy"
    Y_ONLY = "y"


@dataclass(frozen=True)
class ParameterSampler:
    """Uniform (b, c, h) draws; F and the ring shape stay fixed."""

    n_sims: int
    seed: int
    b_range: tuple[float, float] = (7.0, 13.0)
    c_range: tuple[float, float] = (7.0, 13.0)
    h_range: tuple[float, float] = (0.5, 1.5)
    F: float = 10.0
    K: int = 4
    J: int = 4

    def __post_init__(self):
        for name in ("b_range", "c_range", "h_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise RangeEmpty(f"{name} has low >= high: ({lo}, {hi})")
        if self.n_sims < 1:
            raise ValueError(f"n_sims must be >= 1; got {self.n_sims}")

    def to_dict(self) -> dict:
        return {
            "n_sims": self.n_sims,
            "seed": self.seed,
            "b_range": list(self.b_range),
            "c_range": list(self.c_range),
            "h_range": list(self.h_range),
            "F": self.F,
            "K": self.K,
            "J": self.J,
        }


def iter_parameters(sampler: ParameterSampler) -> Iterator[ModelParams]:
    """Endless deterministic stream of parameter draws (b, then c, then h)."""
    rng = np.random.Generator(np.random.PCG64(sampler.seed))
    while True:
        b = rng.uniform(*sampler.b_range)
        c = rng.uniform(*sampler.c_range)
        h = rng.uniform(*sampler.h_range)
        yield ModelParams(b=b, c=c, h=h, F=sampler.F, K=sampler.K, J=sampler.J)


def sample_parameters(sampler: ParameterSampler) -> list[ModelParams]:
    """First n_sims draws of the stream. Divergent draws are handled by the
    dataset builder, which replaces them with subsequent stream entries."""
    stream = iter_parameters(sampler)
    return [next(stream) for _ in range(sampler.n_sims)]


@dataclass
class NormalizationStats:
    """Per-column min/max over the training corpus plus target moments.

    col_min/col_max always cover all K + J*K variables; the rendering task
    selects the columns it keeps. target_std holds (sigma_b, sigma_c,
    sigma_h) over the training-chunk targets and normalizes the loss.
    """

    col_min: np.ndarray
    col_max: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    def __post_init__(self):
        self.col_min = np.asarray(self.col_min, dtype=np.float64)
        self.col_max = np.asarray(self.col_max, dtype=np.float64)
        self.target_mean = np.asarray(self.target_mean, dtype=np.float64)
        self.target_std = np.asarray(self.target_std, dtype=np.float64)
        if np.any(self.col_max <= self.col_min):
            bad = int(np.flatnonzero(self.col_max <= self.col_min)[0])
            raise DegenerateColumn(f"column {bad} has max <= min")
        if np.any(self.target_std <= 0.0):
            raise ZeroVariance("target standard deviations must be strictly positive")

    @classmethod
    def fit(cls, train_rows: np.ndarray, train_targets: np.ndarray) -> "NormalizationStats":
        """Fit from stacked raw training rows (N, n_vars) and chunk targets (M, 3)."""
        return cls.fit_from_minmax(train_rows.min(axis=0), train_rows.max(axis=0), train_targets)

    @classmethod
    def fit_from_minmax(
        cls, col_min: np.ndarray, col_max: np.ndarray, train_targets: np.ndarray
    ) -> "NormalizationStats":
        """Fit from precomputed column extrema plus chunk targets (M, 3)."""
        return cls(
            col_min=col_min,
            col_max=col_max,
            target_mean=train_targets.mean(axis=0),
            target_std=train_targets.std(axis=0),
        )

    def to_dict(self) -> dict:
        return {
            "col_min": self.col_min.tolist(),
            "col_max": self.col_max.tolist(),
            "target_mean": self.target_mean.tolist(),
            "target_std": self.target_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            col_min=np.array(d["col_min"]),
            col_max=np.array(d["col_max"]),
            target_mean=np.array(d["target_mean"]),
            target_std=np.array(d["target_std"]),
        )


def task_columns(task: TaskKind, K: int, n_vars: int) -> slice:
    """Column range a task keeps: everything for XY, fast block for Y_ONLY."""
    return slice(0, n_vars) if task == TaskKind.XY else slice(K, n_vars)


def render_image(traj: Trajectory, stats: NormalizationStats, task: TaskKind) -> np.ndarray:
    """Map a trajectory to a grayscale image: (v - min)/(max - min), clamped to [0, 1]."""
    cols = task_columns(task, traj.params.K, traj.params.n_vars)
    mn = stats.col_min[cols]
    mx = stats.col_max[cols]
    if np.any(mx <= mn):
        bad = int(np.flatnonzero(mx <= mn)[0])
        raise DegenerateColumn(f"retained column {bad} has max <= min")
    return np.clip((traj.states[:, cols] - mn) / (mx - mn), 0.0, 1.0)


def chunk_image(image: np.ndarray, height: int = CHUNK_HEIGHT) -> list[np.ndarray]:
    """Cut an image into consecutive non-overlapping row blocks.

    Trailing rows that do not fill a block are dropped (the builder records
    how many).
    """
    n = image.shape[0] // height
    return [image[i * height : (i + 1) * height] for i in range(n)]


@dataclass
class Chunk:
    """One training example: a (height, width) pixel block plus provenance."""

    pixels: np.ndarray
    target: np.ndarray  # (b, c, h)
    sim_id: int
    chunk_index: int


@dataclass
class ChunkDataset:
    """Column-array storage of all chunks, ordered by (sim_id, chunk_index)."""

    pixels: np.ndarray  # (N, height, width) float64 in [0, 1]
    targets: np.ndarray  # (N, 3) float64
    sim_ids: np.ndarray  # (N,) int32
    chunk_index: np.ndarray  # (N,) int32
    split: np.ndarray  # (N,) uint8; TRAIN=0, TEST=1
    stats: NormalizationStats
    task: TaskKind
    test_mode: bool
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    def chunk(self, i: int) -> Chunk:
        return Chunk(
            pixels=self.pixels[i],
            target=self.targets[i],
            sim_id=int(self.sim_ids[i]),
            chunk_index=int(self.chunk_index[i]),
        )

    def indices(self, split: int) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def sim_target(self, sim_id: int) -> np.ndarray:
        rows = np.flatnonzero(self.sim_ids == sim_id)
        if rows.size == 0:
            raise KeyError(f"no chunks for sim_id {sim_id}")
        return self.targets[rows[0]]


def _clamped_count(fraction: float, n: int) -> int:
    """round(fraction*n) kept strictly inside [1, n-1] so neither side is empty."""
    return min(max(int(round(fraction * n)), 1), n - 1)


def build_dataset(
    trajectories: list[Trajectory],
    task: TaskKind,
    test_mode: bool,
    split_seed: int,
    train_fraction: float = 0.9,
    holdout_sim_fraction: float = 0.2,
    height: int = CHUNK_HEIGHT,
) -> ChunkDataset:
    """Render, chunk, split, and normalize a set of trajectories.

    test_mode=False labels a seeded random train_fraction of chunk indices
    TRAIN inside each simulation; test_mode=True labels a seeded
    holdout_sim_fraction of whole simulations TEST. Normalization statistics
    are fitted on TRAIN chunks only and then applied to every chunk.
    """
    if len(trajectories) < 2:
        raise InsufficientData(f"need >= 2 trajectories; got {len(trajectories)}")
    for frac, name in ((train_fraction, "train_fraction"), (holdout_sim_fraction, "holdout_sim_fraction")):
        if not 0.0 < frac < 1.0:
            raise ValueError(f"{name} must be in (0, 1); got {frac}")
    first = trajectories[0].params
    for t in trajectories[1:]:
        if (t.params.K, t.params.J) != (first.K, first.J):
            raise ValueError("all trajectories must share the same (K, J)")

    n_sims = len(trajectories)
    n_chunks_per_sim = [t.n_steps // height for t in trajectories]
    dropped_rows = [t.n_steps % height for t in trajectories]
    if any(n < 1 for n in n_chunks_per_sim):
        raise InsufficientData("every trajectory must contain at least one full chunk")

    rng = np.random.Generator(np.random.PCG64(split_seed))
    # split labels per sim, chunk-index order
    split_per_sim: list[np.ndarray] = []
    if test_mode:
        n_test_sims = _clamped_count(holdout_sim_fraction, n_sims)
        test_sims = set(rng.permutation(n_sims)[:n_test_sims].tolist())
        for s, n in enumerate(n_chunks_per_sim):
            split_per_sim.append(np.full(n, TEST if s in test_sims else TRAIN, dtype=np.uint8))
    else:
        for s, n in enumerate(n_chunks_per_sim):
            if n < 2:
                raise InsufficientData(f"sim {s} has {n} chunk(s); in-simulation split needs >= 2")
            labels = np.full(n, TEST, dtype=np.uint8)
            n_train = _clamped_count(train_fraction, n)
            labels[rng.permutation(n)[:n_train]] = TRAIN
            split_per_sim.append(labels)

    # stats from the full-width rows of TRAIN chunks only
    col_min = None
    col_max = None
    target_list = []
    for s, traj in enumerate(trajectories):
        n = n_chunks_per_sim[s]
        full = traj.states[: n * height].reshape(n, height, traj.params.n_vars)
        mask = split_per_sim[s] == TRAIN
        if mask.any():
            block = full[mask]
            lo = block.min(axis=(0, 1))
            hi = block.max(axis=(0, 1))
            col_min = lo if col_min is None else np.minimum(col_min, lo)
            col_max = hi if col_max is None else np.maximum(col_max, hi)
            tgt = np.array([traj.params.b, traj.params.c, traj.params.h])
            target_list.append(np.tile(tgt, (int(mask.sum()), 1)))
    if col_min is None:
        raise InsufficientData("no TRAIN chunks after splitting")
    if not any((labels == TEST).any() for labels in split_per_sim):
        raise InsufficientData("no TEST chunks after splitting")
    stats = NormalizationStats.fit_from_minmax(col_min, col_max, np.concatenate(target_list))

    cols = task_columns(task, first.K, first.n_vars)
    pixels_parts = []
    targets_parts = []
    sim_id_parts = []
    chunk_idx_parts = []
    split_parts = []
    mn = stats.col_min[cols]
    mx = stats.col_max[cols]
    for s, traj in enumerate(trajectories):
        n = n_chunks_per_sim[s]
        img = np.clip((traj.states[: n * height, cols] - mn) / (mx - mn), 0.0, 1.0)
        pixels_parts.append(img.reshape(n, height, img.shape[1]))
        targets_parts.append(
            np.tile(np.array([traj.params.b, traj.params.c, traj.params.h]), (n, 1))
        )
        sim_id_parts.append(np.full(n, s, dtype=np.int32))
        chunk_idx_parts.append(np.arange(n, dtype=np.int32))
        split_parts.append(split_per_sim[s])

    return ChunkDataset(
        pixels=np.concatenate(pixels_parts),
        targets=np.concatenate(targets_parts),
        sim_ids=np.concatenate(sim_id_parts),
        chunk_index=np.concatenate(chunk_idx_parts),
        split=np.concatenate(split_parts),
        stats=stats,
        task=task,
        test_mode=test_mode,
        meta={
            "split_seed": split_seed,
            "train_fraction": train_fraction,
            "holdout_sim_fraction": holdout_sim_fraction,
            "height": height,
            "dropped_rows": dropped_rows,
            "K": first.K,
            "J": first.J,
            "F": first.F,
            "dt": trajectories[0].dt,
        },
    )


# ---------------------------------------------------------------------------
# Dataset file format: 24-byte header + float32 chunk payload, manifest JSON
# at <path>.json holding stats, task, split labels, and the payload digest.
# ---------------------------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_dataset(ds: ChunkDataset, path: str | Path) -> Path:
    path = Path(path)
    count = len(ds)
    payload = np.ascontiguousarray(ds.pixels, dtype="<f4").tobytes()
    header = _DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, count, ds.height, ds.width)
    path.write_bytes(header + payload)

    sims = []
    for sim_id in np.unique(ds.sim_ids):
        rows = np.flatnonzero(ds.sim_ids == sim_id)
        sims.append(
            {
                "sim_id": int(sim_id),
                "target": ds.targets[rows[0]].tolist(),
                "n_chunks": int(rows.size),
                "test_chunks": ds.chunk_index[rows[ds.split[rows] == TEST]].tolist(),
            }
        )
    manifest = {
        "format": DATASET_MAGIC.decode(),
        "version": DATASET_VERSION,
        "count": count,
        "height": ds.height,
        "width": ds.width,
        "task": ds.task.value,
        "test_mode": ds.test_mode,
        "stats": ds.stats.to_dict(),
        "sims": sims,
        "meta": ds.meta,
        "payload_sha256": _sha256(header + payload),
    }
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2))
    return path


def load_dataset(path: str | Path) -> ChunkDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _DATASET_HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, count, height, width = _DATASET_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = raw[_DATASET_HEADER.size :]
    expected = count * height * width * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    manifest_path = Path(str(path) + ".json")
    if not manifest_path.exists():
        raise FormatError(f"{path}: missing manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("payload_sha256") != _sha256(raw):
        raise ChecksumError(f"{path}: file digest does not match manifest")

    pixels = (
        np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(count, height, width)
    )
    targets = np.empty((count, 3), dtype=np.float64)
    sim_ids = np.empty(count, dtype=np.int32)
    chunk_index = np.empty(count, dtype=np.int32)
    split = np.empty(count, dtype=np.uint8)
    at = 0
    for sim in manifest["sims"]:
        n = sim["n_chunks"]
        rows = slice(at, at + n)
        targets[rows] = np.asarray(sim["target"], dtype=np.float64)
        sim_ids[rows] = sim["sim_id"]
        chunk_index[rows] = np.arange(n, dtype=np.int32)
        labels = np.full(n, TRAIN, dtype=np.uint8)
        labels[np.asarray(sim["test_chunks"], dtype=np.int64)] = TEST
        split[rows] = labels
        at += n
    if at != count:
        raise FormatError(f"{path}: manifest sims cover {at} chunks, header says {count}")

    return ChunkDataset(
        pixels=pixels,
        targets=targets,
        sim_ids=sim_ids,
        chunk_index=chunk_index,
        split=split,
        stats=NormalizationStats.from_dict(manifest["stats"]),
        task=TaskKind(manifest["task"]),
        test_mode=bool(manifest["test_mode"]),
        meta=manifest.get("meta", {}),
    )
