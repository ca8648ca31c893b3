"""Batching, Adam, plateau schedule, early stopping and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ctc
from .ctc import LATIN, Alphabet
from .evaluation import cer
from .network import (
    Batch,
    ModelSpec,
    ParameterStore,
    apply_state_updates,
    backward,
    build_model,
    forward,
    init_params,
    output_length,
)
from .sensor_data import LabeledSample

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class TrainRunConfig:
    model: str = "cldnn"
    batch_size: int = 64
    initial_lr: float = 1e-2
    min_lr: float = 1e-4
    lr_factor: float = 0.8
    lr_patience: int = 10
    stop_patience: int = 20
    min_delta: float = 1e-4
    max_epochs: int | None = None
    seed: int = 0
    fold: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-7
    clip_norm: float | None = None
    dtype: str = "float32"
    bucket_batches: int = 8

    def __post_init__(self):
        for name in ("batch_size", "initial_lr", "min_lr", "lr_factor", "lr_patience", "stop_patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_epochs is not None and self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- batches

def required_frames(spec: ModelSpec, label: Sequence[int]) -> int:
    """Input frames needed so the network output can still align ``label``."""
    return ctc.min_frames_required(label) * 2 ** spec.n_pools


def make_batches(
    samples: Sequence[LabeledSample],
    batch_size: int = 64,
    seed: int = 0,
    spec: ModelSpec | None = None,
    alphabet: Alphabet = LATIN,
    bucket_batches: int = 8,
    dtype=np.float32,
) -> list[Batch]:
    """Shuffle, bucket by length, and pad into batches.

    The shuffled order is cut into pools of ``bucket_batches * batch_size``
    samples; each pool is sorted by length before being cut into batches, and
    the batch order is shuffled again. Samples too short for their label
    (given ``spec``'s pooling) are left out with a warning.
    """
    rng = np.random.default_rng(seed)
    labels = [alphabet.encode(s.label) for s in samples]
    usable = []
    for i, s in enumerate(samples):
        if spec is not None and s.n_frames < max(required_frames(spec, labels[i]), 2 ** spec.n_pools):
            log.warning("skipping sample %d (%r): %d frames too short", i, s.label, s.n_frames)
            continue
        usable.append(i)
    order = [usable[i] for i in rng.permutation(len(usable))]
    pool = max(1, bucket_batches) * batch_size
    groups = []
    for p in range(0, len(order), pool):
        chunk = sorted(order[p: p + pool], key=lambda i: samples[i].n_frames)
        groups += [chunk[j: j + batch_size] for j in range(0, len(chunk), batch_size)]
    groups = [groups[i] for i in rng.permutation(len(groups))]
    return [
        Batch.from_arrays(
            [samples[i].frames for i in g],
            labels=[labels[i] for i in g],
            words=[samples[i].label for i in g],
            dtype=dtype,
        )
        for g in groups
    ]


# ---------------------------------------------------------------- optimizer / schedule

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    @classmethod
    def zeros_like(cls, params: ParameterStore, **kw) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.trainable.items()},
                   {k: np.zeros_like(p) for k, p in params.trainable.items()}, **kw)


def adam_step(params: ParameterStore, grads: dict[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """In-place bias-corrected Adam update of ``params.trainable`` and ``state``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {k}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p = params.trainable[k]
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


@dataclass
class ScheduleState:
    lr: float = 1e-2
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    min_lr: float = 1e-4
    factor: float = 0.8
    patience: int = 10
    min_delta: float = 1e-4
    min_lr_reached_at: int | None = None  # epochs seen when lr first hit min_lr
    epochs_seen: int = 0


def schedule_step(state: ScheduleState, val_loss: float) -> ScheduleState:
    """Reduce-on-plateau: after ``patience`` epochs without improvement, scale lr by ``factor``."""
    s = ScheduleState(**asdict(state))
    s.epochs_seen += 1
    if val_loss < s.best_val_loss - s.min_delta:
        s.best_val_loss = val_loss
        s.epochs_since_improvement = 0
    else:
        s.epochs_since_improvement += 1
        if s.epochs_since_improvement >= s.patience:
            s.lr = max(s.lr * s.factor, s.min_lr)
            s.epochs_since_improvement = 0
    if s.min_lr_reached_at is None and s.lr <= s.min_lr:
        s.lr = s.min_lr
        s.min_lr_reached_at = s.epochs_seen
    return s


def _trailing_non_improving(history: Sequence[float], min_delta: float) -> int:
    best, last_best = math.inf, -1
    for i, v in enumerate(history):
        if v < best - min_delta:
            best, last_best = v, i
    return len(history) - 1 - last_best


def early_stop(history: Sequence[float], schedule: ScheduleState, stop_patience: int = 20) -> bool:
    """True once lr sits at its floor and ``stop_patience`` epochs since then brought no new best."""
    if schedule.min_lr_reached_at is None:
        return False
    since_floor = len(history) - schedule.min_lr_reached_at
    stale = _trailing_non_improving(history, schedule.min_delta)
    return min(since_floor, stale) >= stop_patience


# ---------------------------------------------------------------- loss / evaluation

def batch_ctc(log_probs: np.ndarray, batch: Batch, out_lengths: np.ndarray, blank: int):
    """Per-sample CTC losses and d(mean loss)/d log_probs."""
    B = log_probs.shape[0]
    losses = np.zeros(B)
    grad = np.zeros(log_probs.shape, dtype=np.float64)
    for i in range(B):
        n = int(out_lengths[i])
        losses[i], gamma = ctc.occupancy(log_probs[i, :n], batch.labels[i], blank)
        grad[i, :n] = -gamma / B
    return losses, grad


@dataclass
class EvalResult:
    mean_loss: float
    predictions: list[str]
    references: list[str]

    @property
    def cer(self) -> float:
        return cer(list(zip(self.predictions, self.references))) if self.references else 0.0


def evaluate(spec: ModelSpec, params: ParameterStore, samples: Sequence[LabeledSample],
             alphabet: Alphabet = LATIN, batch_size: int = 64) -> EvalResult:
    """Eval-mode mean CTC loss and greedy decodes, in the given sample order."""
    losses, preds, refs = [], [], []
    dtype = params.dtype
    for start in range(0, len(samples), batch_size):
        chunk = samples[start: start + batch_size]
        labels = [alphabet.encode(s.label) for s in chunk]
        batch = Batch.from_arrays([s.frames for s in chunk], labels=labels, dtype=dtype)
        lp, cache = forward(spec, params, batch, "eval")
        out_len = cache["output_lengths"]
        for i, s in enumerate(chunk):
            n = int(out_len[i])
            frame_lp = lp[i, :n].astype(np.float64)
            try:
                losses.append(ctc.ctc_loss(frame_lp, labels[i], alphabet.blank_index)[0])
            except ctc.UnalignableLabelError:
                losses.append(math.inf)
            preds.append(ctc.greedy_decode(frame_lp, alphabet))
            refs.append(s.label)
    mean = float(np.mean(losses)) if losses else math.nan
    return EvalResult(mean, preds, refs)


def decode(spec: ModelSpec, params: ParameterStore, frames: np.ndarray, alphabet: Alphabet = LATIN) -> str:
    batch = Batch.from_arrays([frames], dtype=params.dtype)
    lp, _ = forward(spec, params, batch, "eval")
    return ctc.greedy_decode(lp[0], alphabet)


# ---------------------------------------------------------------- loop

LOG_FIELDS = ("epoch", "lr", "train_loss", "val_loss", "val_cer")


@dataclass
class TrainResult:
    spec: ModelSpec
    params: ParameterStore  # best checkpoint by validation loss
    best_epoch: int
    best_val_loss: float
    log: list[dict] = field(default_factory=list)
    stopped: str = ""

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in self.log:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])
        return buf.getvalue()

    def write_log(self, path: str | Path) -> None:
        Path(path).write_text(self.log_csv())


def _epoch_seed(seed: int, epoch: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([seed, epoch, salt]).generate_state(1)[0])


def train(
    config: TrainRunConfig,
    train_samples: Sequence[LabeledSample],
    val_samples: Sequence[LabeledSample],
    alphabet: Alphabet = LATIN,
    spec: ModelSpec | None = None,
    progress=None,
) -> TrainResult:
    """Train until early stopping (or ``max_epochs``) and keep the lowest-validation-loss weights.

    ``progress`` is called with each log row as it is produced.
    """
    spec = spec or build_model(config.model, output_classes=alphabet.num_classes)
    dtype = np.dtype(config.dtype)
    params = init_params(spec, config.seed, dtype)
    opt = OptimizerState.zeros_like(params, beta1=config.beta1, beta2=config.beta2, epsilon=config.adam_epsilon)
    sched = ScheduleState(lr=config.initial_lr, min_lr=config.min_lr, factor=config.lr_factor,
                          patience=config.lr_patience, min_delta=config.min_delta)
    best = params.copy()
    best_loss, best_epoch = math.inf, 0
    history: list[float] = []
    rows: list[dict] = []
    stopped = "max_epochs"
    epoch = 0
    while config.max_epochs is None or epoch < config.max_epochs:
        epoch += 1
        batches = make_batches(train_samples, config.batch_size, _epoch_seed(config.seed, epoch),
                               spec, alphabet, config.bucket_batches, dtype)
        total, count = 0.0, 0
        try:
            for bi, batch in enumerate(batches):
                lp, cache = forward(spec, params, batch, "train", seed=_epoch_seed(config.seed, epoch, bi + 1))
                losses, g = batch_ctc(lp.astype(np.float64), batch, cache["output_lengths"], alphabet.blank_index)
                if not np.all(np.isfinite(losses)):
                    raise NonFiniteGradientError("non-finite training loss")
                grads = backward(spec, params, cache, g.astype(dtype))
                if config.clip_norm:
                    clip_by_global_norm(grads, config.clip_norm)
                adam_step(params, grads, opt, sched.lr)
                apply_state_updates(params, cache)
                total += float(losses.sum())
                count += len(losses)
        except NonFiniteGradientError as exc:
            log.error("epoch %d aborted: %s; keeping last good checkpoint", epoch, exc)
            stopped = f"diverged: {exc}"
            break
        res = evaluate(spec, params, val_samples, alphabet, config.batch_size)
        if not math.isfinite(res.mean_loss):
            stopped = "diverged: non-finite validation loss"
            break
        row = {"epoch": epoch, "lr": sched.lr, "train_loss": total / max(count, 1),
               "val_loss": res.mean_loss, "val_cer": res.cer}
        rows.append(row)
        if progress is not None:
            progress(row)
        history.append(res.mean_loss)
        if res.mean_loss < best_loss:
            best_loss, best_epoch = res.mean_loss, epoch
            best = params.copy()
        sched = schedule_step(sched, res.mean_loss)
        if early_stop(history, sched, config.stop_patience):
            stopped = "early_stop"
            break
    return TrainResult(spec, best, best_epoch, best_loss, rows, stopped)
