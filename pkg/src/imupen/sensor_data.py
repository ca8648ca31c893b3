"""Loading, cleaning, normalizing and splitting labeled pen recordings.

A recording is a (T, 13) float array with channel order
``acc_front xyz, acc_rear xyz, gyro xyz, mag xyz, force``, sampled at 100 Hz.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ctc import LATIN, Alphabet

log = logging.getLogger(__name__)

SAMPLE_RATE_HZ = 100
CHANNELS = (
    "acc_front_x", "acc_front_y", "acc_front_z",
    "acc_rear_x", "acc_rear_y", "acc_rear_z",
    "gyro_x", "gyro_y", "gyro_z",
    "mag_x", "mag_y", "mag_z",
    "force",
)
N_CHANNELS = len(CHANNELS)
FORCE = CHANNELS.index("force")

DEFAULT_FORCE_THRESHOLD = 1.0
DEFAULT_MIN_FRAMES = 20
DEFAULT_MAX_FRAMES = 1500
ZSCORE_EPS = 1e-8


class DatasetFormatError(ValueError):
    pass


class AllHoverError(ValueError):
    """No frame of the sample reaches the force threshold."""


@dataclass(frozen=True)
class SensorFrame:
    acc_front: tuple[float, float, float]
    acc_rear: tuple[float, float, float]
    gyro: tuple[float, float, float]
    mag: tuple[float, float, float]
    force: float

    def __post_init__(self):
        if self.force < 0:
            raise ValueError("force must be non-negative")

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "SensorFrame":
        if len(v) != N_CHANNELS:
            raise ValueError(f"expected {N_CHANNELS} channels, got {len(v)}")
        v = [float(x) for x in v]
        return cls(tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:9]), tuple(v[9:12]), v[12])

    def to_vector(self) -> list[float]:
        return [*self.acc_front, *self.acc_rear, *self.gyro, *self.mag, self.force]


@dataclass
class LabeledSample:
    writer_id: str
    label: str
    frames: np.ndarray  # (T, 13)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    def frame(self, t: int) -> SensorFrame:
        return SensorFrame.from_vector(self.frames[t])

    def replace_frames(self, frames: np.ndarray) -> "LabeledSample":
        return LabeledSample(self.writer_id, self.label, frames)


@dataclass
class Dataset:
    samples: list[LabeledSample] = field(default_factory=list)
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.provenance)

    @property
    def writers(self) -> list[str]:
        return sorted({s.writer_id for s in self.samples})


def validate_sample(sample: LabeledSample, alphabet: Alphabet = LATIN, normalized: bool = False) -> None:
    """Raise ValueError if the sample is malformed.

    Raw recordings must have non-negative force; z-scored ones (``normalized``) need not.
    """
    f = sample.frames
    if f.ndim != 2 or f.shape[1] != N_CHANNELS:
        raise ValueError(f"frames must have {N_CHANNELS} channels, got shape {f.shape}")
    if f.shape[0] < 1:
        raise ValueError("sample has no frames")
    if not sample.label:
        raise ValueError("empty label")
    bad = sorted({c for c in sample.label if c not in alphabet})
    if bad:
        raise ValueError(f"label {sample.label!r} has characters outside the alphabet: {bad}")
    if not np.all(np.isfinite(f)):
        raise ValueError("frames contain non-finite values")
    if not normalized and np.any(f[:, FORCE] < 0):
        raise ValueError("negative force reading")


def _sample_from_record(rec: dict, alphabet: Alphabet) -> LabeledSample:
    if not isinstance(rec, dict):
        raise ValueError("record is not a JSON object")
    missing = {"writer_id", "label", "frames"} - rec.keys()
    if missing:
        raise ValueError(f"missing fields {sorted(missing)}")
    frames = rec["frames"]
    if not isinstance(frames, list) or not frames:
        raise ValueError("frames must be a non-empty list")
    for t, fr in enumerate(frames):
        if not isinstance(fr, list) or len(fr) != N_CHANNELS:
            n = len(fr) if isinstance(fr, list) else "non-list"
            raise ValueError(f"frame {t} has {n} channels, expected {N_CHANNELS}")
    sample = LabeledSample(str(rec["writer_id"]), str(rec["label"]), np.asarray(frames, dtype=np.float64))
    normalized = rec.get("normalized", False)
    if not isinstance(normalized, bool):
        raise ValueError("normalized must be true or false")
    validate_sample(sample, alphabet, normalized)
    return sample


def parse_dataset(path: str | Path, alphabet: Alphabet = LATIN) -> Dataset:
    """Read a JSON Lines dataset; any malformed line raises with its line number."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                samples.append(_sample_from_record(rec, alphabet))
            except (ValueError, TypeError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
    return Dataset(samples, provenance=str(path))


def sample_to_record(sample: LabeledSample, normalized: bool = False) -> dict:
    rec = {"writer_id": sample.writer_id, "label": sample.label, "frames": sample.frames.tolist()}
    if normalized:
        rec["normalized"] = True
    return rec


def write_dataset(dataset: Dataset, path: str | Path, normalized: bool = False) -> None:
    """Write one JSON record per line; ``normalized`` marks z-scored samples."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset.samples:
            fh.write(json.dumps(sample_to_record(s, normalized), separators=(",", ":")))
            fh.write("\n")


def trim_hover(sample: LabeledSample, threshold: float = DEFAULT_FORCE_THRESHOLD) -> LabeledSample:
    """Drop leading and trailing frames whose force is below ``threshold``.

    Interior frames are kept even where the force dips under the threshold.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    down = np.flatnonzero(sample.frames[:, FORCE] >= threshold)
    if down.size == 0:
        raise AllHoverError(f"all-hover sample (writer {sample.writer_id}, label {sample.label!r})")
    return sample.replace_frames(sample.frames[down[0]: down[-1] + 1])


def filter_length(
    dataset: Dataset,
    min_frames: int = DEFAULT_MIN_FRAMES,
    max_frames: int = DEFAULT_MAX_FRAMES,
) -> tuple[Dataset, int]:
    """Keep samples with ``min_frames <= T <= max_frames``; returns (dataset, removed count)."""
    if not 0 < min_frames < max_frames:
        raise ValueError("need 0 < min_frames < max_frames")
    kept = [s for s in dataset.samples if min_frames <= s.n_frames <= max_frames]
    return Dataset(kept, dataset.provenance), len(dataset) - len(kept)


def zscore_normalize(sample: LabeledSample, eps: float = ZSCORE_EPS) -> LabeledSample:
    """Per-channel standardization over the sample's own frames (population std)."""
    x = sample.frames
    if x.shape[0] < 2:
        raise ValueError("z-score normalization needs at least 2 frames")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return sample.replace_frames((x - mean) / (std + eps))


def prepare_dataset(
    dataset: Dataset,
    threshold: float = DEFAULT_FORCE_THRESHOLD,
    min_frames: int = DEFAULT_MIN_FRAMES,
    max_frames: int = DEFAULT_MAX_FRAMES,
) -> tuple[Dataset, dict]:
    """Trim hover, drop out-of-range lengths, normalize. Returns the cleaned set and counts."""
    trimmed, hover = [], 0
    for s in dataset.samples:
        try:
            trimmed.append(trim_hover(s, threshold))
        except AllHoverError:
            hover += 1
    kept, removed = filter_length(Dataset(trimmed, dataset.provenance), min_frames, max_frames)
    out = Dataset([zscore_normalize(s) for s in kept.samples], dataset.provenance)
    stats = {"input": len(dataset), "all_hover": hover, "length_filtered": removed, "output": len(out)}
    if hover or removed:
        log.info("prepare: dropped %d all-hover and %d out-of-range samples", hover, removed)
    return out, stats


@dataclass
class FoldSplit:
    fold_index: int
    train_writers: list[str]
    test_writers: list[str]
    train_samples: list[int]
    val_samples: list[int]
    test_samples: list[int]

    def to_dict(self) -> dict:
        return {
            "fold": self.fold_index,
            "train_writers": self.train_writers,
            "test_writers": self.test_writers,
            "train": self.train_samples,
            "val": self.val_samples,
            "test": self.test_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSplit":
        return cls(d["fold"], d["train_writers"], d["test_writers"], d["train"], d["val"], d["test"])


def split_writer_folds(
    dataset: Dataset, k: int = 5, seed: int = 0, val_fraction: float = 0.2
) -> list[FoldSplit]:
    """Writer-disjoint k-fold split with a per-fold sample-level train/validation split.

    Writers are shuffled by ``seed`` and dealt round-robin into ``k`` folds.
    """
    writers = dataset.writers
    if len(writers) < k:
        raise ValueError(f"{len(writers)} writers cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    order = [writers[i] for i in rng.permutation(len(writers))]
    fold_writers = [sorted(order[f::k]) for f in range(k)]

    by_writer = [s.writer_id for s in dataset.samples]
    folds = []
    for f in range(k):
        test_w = set(fold_writers[f])
        test_idx = [i for i, w in enumerate(by_writer) if w in test_w]
        train_side = np.array([i for i, w in enumerate(by_writer) if w not in test_w], dtype=np.int64)
        perm = np.random.default_rng([seed, f + 1]).permutation(train_side.size)
        n_val = int(round(val_fraction * train_side.size))
        val_idx = sorted(int(i) for i in train_side[perm[:n_val]])
        train_idx = sorted(int(i) for i in train_side[perm[n_val:]])
        folds.append(FoldSplit(
            fold_index=f + 1,
            train_writers=sorted(set(writers) - test_w),
            test_writers=fold_writers[f],
            train_samples=train_idx,
            val_samples=val_idx,
            test_samples=test_idx,
        ))
    return folds


def write_manifests(folds: Sequence[FoldSplit], out_dir: str | Path, seed: int | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for fold in folds:
        blob = fold.to_dict()
        blob["k"] = len(folds)
        if seed is not None:
            blob["seed"] = seed
        p = out / f"fold{fold.fold_index}.json"
        p.write_text(json.dumps(blob, indent=1, sort_keys=True) + "\n")
        paths.append(p)
    return paths


def read_manifest(path: str | Path) -> FoldSplit:
    return FoldSplit.from_dict(json.loads(Path(path).read_text()))
