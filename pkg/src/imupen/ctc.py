"""Connectionist temporal classification: alphabet, loss, gradient, decoding.

All arithmetic is done in log space. ``-inf`` stands for log(0).
"""

from __future__ import annotations

import itertools
import math
import string
from dataclasses import dataclass
from typing import Sequence

import numpy as np

NEG_INF = -np.inf


class UnalignableLabelError(ValueError):
    """Raised when no frame-level path of the given length collapses to the label."""


@dataclass(frozen=True)
class Alphabet:
    """Ordered character inventory; the blank class sits after the last character."""

    characters: str = string.ascii_uppercase + string.ascii_lowercase

    def __post_init__(self):
        if len(set(self.characters)) != len(self.characters):
            raise ValueError("alphabet characters must be unique")
        if not self.characters:
            raise ValueError("alphabet must not be empty")

    @property
    def blank_index(self) -> int:
        return len(self.characters)

    @property
    def num_classes(self) -> int:
        return len(self.characters) + 1

    def __contains__(self, ch: str) -> bool:
        return len(ch) == 1 and ch in self.characters

    def encode(self, word: str) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.characters)}
        try:
            return np.array([lookup[c] for c in word], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in alphabet") from None

    def decode(self, indices: Sequence[int]) -> str:
        return "".join(self.characters[int(i)] for i in indices)


LATIN = Alphabet()


@dataclass
class CtcTable:
    log_alpha: np.ndarray  # (T, 2L+1)
    log_beta: np.ndarray  # (T, 2L+1)
    log_likelihood: float


def extend_labels(label: Sequence[int], blank: int) -> np.ndarray:
    """Interleave blanks: ``[c1, c2]`` becomes ``[-, c1, -, c2, -]``."""
    label = np.asarray(label, dtype=np.int64)
    if label.size == 0:
        raise ValueError("label must contain at least one character")
    ext = np.full(2 * label.size + 1, blank, dtype=np.int64)
    ext[1::2] = label
    return ext


def min_frames_required(label: Sequence[int]) -> int:
    """Shortest input that can emit ``label``: one frame per character plus one per repeat."""
    label = list(label)
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def _check_alignable(n_frames: int, label: Sequence[int]) -> None:
    need = min_frames_required(label)
    if n_frames < need:
        raise UnalignableLabelError(
            f"label unalignable: {n_frames} frames < {need} required"
        )


def _skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    # s may be reached from s-2 when l'_s is a character differing from l'_{s-2}
    ok = np.zeros(ext.size, dtype=bool)
    ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return ok


def ctc_tables(log_probs: np.ndarray, label: Sequence[int], blank: int | None = None) -> CtcTable:
    """Forward and backward variables for one sequence.

    ``log_beta`` includes the emission at its own frame, so for every t
    ``logsumexp(log_alpha[t] + log_beta[t] - log y_t(l'))`` is the log-likelihood.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    n_frames, n_classes = log_probs.shape
    if blank is None:
        blank = n_classes - 1
    _check_alignable(n_frames, label)
    ext = extend_labels(label, blank)
    n_states = ext.size
    skip = _skip_allowed(ext, blank)
    emit = log_probs[:, ext]  # (T, S)

    alpha = np.full((n_frames, n_states), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    alpha[0, 1] = emit[0, 1]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    # skip_from[s] says whether s+2 -> s is allowed when walking backwards
    skip_from = np.zeros(n_states, dtype=bool)
    skip_from[:-2] = skip[2:]
    beta = np.full((n_frames, n_states), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    beta[-1, -2] = emit[-1, -2]
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip_from[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    ll = float(np.logaddexp(alpha[-1, -1], alpha[-1, -2]))
    if not np.isfinite(ll):
        raise UnalignableLabelError("label unalignable: zero path probability")
    return CtcTable(alpha, beta, ll)


def ctc_loss(log_probs: np.ndarray, label: Sequence[int], blank: int | None = None):
    """Negative log-likelihood of ``label`` given per-frame log-distributions.

    Returns ``(loss, table)``.
    """
    table = ctc_tables(log_probs, label, blank)
    return -table.log_likelihood, table


def occupancy(log_probs: np.ndarray, label: Sequence[int], blank: int | None = None):
    """Per-frame posterior probability of each class under the label's alignments.

    Returns ``(loss, gamma)`` with ``gamma`` shaped like ``log_probs``; each row sums to 1.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    n_classes = log_probs.shape[1]
    if blank is None:
        blank = n_classes - 1
    table = ctc_tables(log_probs, label, blank)
    ext = extend_labels(label, blank)
    post = np.exp(table.log_alpha + table.log_beta - log_probs[:, ext] - table.log_likelihood)
    gamma = np.zeros_like(log_probs)
    for s, k in enumerate(ext):
        gamma[:, k] += post[:, s]
    return -table.log_likelihood, gamma


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def ctc_grad(logits: np.ndarray, label: Sequence[int], blank: int | None = None):
    """Loss and its gradient with respect to pre-softmax ``logits`` (T x C)."""
    logits = np.asarray(logits, dtype=np.float64)
    log_probs = log_softmax(logits)
    loss, gamma = occupancy(log_probs, label, blank)
    return loss, np.exp(log_probs) - gamma


def collapse(path: Sequence[int], blank: int) -> list[int]:
    """Merge runs of identical classes, then drop blanks."""
    return [k for k, _ in itertools.groupby(int(p) for p in path) if k != blank]


def best_path(log_probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(np.asarray(log_probs), axis=-1)


def greedy_decode(log_probs: np.ndarray, alphabet: Alphabet = LATIN) -> str:
    """Best-path decoding: per-frame argmax, collapse repeats, remove blanks."""
    log_probs = np.asarray(log_probs)
    if log_probs.ndim != 2 or log_probs.shape[0] < 1:
        raise ValueError("expected a non-empty (frames x classes) array")
    return alphabet.decode(collapse(best_path(log_probs), alphabet.blank_index))


MAX_BRUTE_FRAMES = 8
MAX_BRUTE_CLASSES = 5


def brute_force_loss(log_probs: np.ndarray, label: Sequence[int], blank: int | None = None) -> float:
    """Reference loss by enumerating every frame-level path. Exponential; tiny inputs only.

    Returns ``inf`` when no path collapses to the label.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    n_frames, n_classes = log_probs.shape
    if n_frames > MAX_BRUTE_FRAMES or n_classes > MAX_BRUTE_CLASSES:
        raise ValueError(
            f"instance too large for enumeration: {n_frames} frames x {n_classes} classes"
        )
    if blank is None:
        blank = n_classes - 1
    target = [int(k) for k in label]
    probs = np.exp(log_probs)
    total = 0.0
    for path in itertools.product(range(n_classes), repeat=n_frames):
        if collapse(path, blank) == target:
            p = 1.0
            for t, k in enumerate(path):
                p *= probs[t, k]
            total += p
    if total == 0.0:
        return math.inf
    return -math.log(total)
