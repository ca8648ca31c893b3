"""Seeded synthetic pen recordings.

Each character has a smooth 13-channel prototype; a word is the
concatenation of per-writer warped and scaled prototypes, joined by short
transitions, with white noise and hover frames at both ends. No attempt is
made at physical realism.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicSpline

from .ctc import LATIN, Alphabet
from .sensor_data import FORCE, N_CHANNELS, Dataset, LabeledSample

# 30 words covering all 52 letters; the unseen list shares no word with it.
MAIN_VOCAB = (
    "Amber", "Bridge", "Cloud", "Dwarf", "Equinox", "Fjord", "Glyph", "Haze",
    "Ivory", "Jackal", "Kiwi", "Lumen", "Mosaic", "Nectar", "Orbit", "Pixel",
    "Quartz", "River", "Stabilo", "Tundra", "Umbra", "Velvet", "Wharf", "Xenon",
    "Yacht", "Zephyr", "pen", "ink", "sky", "flow",
)
UNSEEN_VOCAB = (
    "Lantern", "quill", "Marble", "frozen", "Copper",
    "whisky", "Signal", "jovial", "Beacon", "dusk",
)

MIN_CHAR_FRAMES = 24
STROKE_FORCE_MIN = 2.0
FORCE_MAX = 10.0
HOVER_FORCE_MAX = 0.8
DEFAULT_NOISE = 0.15
# rough per-channel scales: accelerometers (m/s^2), gyro (deg/s), magnetometer (uT)
CHANNEL_SCALE = np.array([2.0] * 6 + [40.0] * 3 + [15.0] * 3 + [1.0])
CHANNEL_BASE = np.array([0, 0, 9.81, 0, 0, 9.81, 0, 0, 0, 20.0, -5.0, 40.0, 0])


@dataclass(frozen=True)
class CharacterTemplate:
    char: str
    duration: int  # base length in frames
    knots: np.ndarray  # (n_knots, 13) control points on [0, 1]

    def render(self, n_frames: int) -> np.ndarray:
        xs = np.linspace(0.0, 1.0, self.knots.shape[0])
        curve = CubicSpline(xs, self.knots, axis=0)(np.linspace(0.0, 1.0, n_frames))
        curve[:, FORCE] = np.clip(curve[:, FORCE], STROKE_FORCE_MIN, FORCE_MAX)
        return curve


@lru_cache(maxsize=4096)
def character_template(char: str, template_seed: int = 0) -> CharacterTemplate:
    """Prototype for ``char``; depends only on the character and ``template_seed``."""
    rng = np.random.default_rng([template_seed, ord(char)])
    duration = int(rng.integers(30, 61))
    n_knots = int(rng.integers(6, 10))
    knots = rng.standard_normal((n_knots, N_CHANNELS)) * CHANNEL_SCALE + CHANNEL_BASE
    knots[:, FORCE] = rng.uniform(STROKE_FORCE_MIN + 0.5, 8.0, size=n_knots)
    return CharacterTemplate(char, duration, knots)


@dataclass(frozen=True)
class WriterProfile:
    writer_id: str
    gain: np.ndarray  # (13,) in [0.7, 1.3]
    offset: np.ndarray  # (13,), zero on the force channel
    warp: float  # time stretch in [0.8, 1.25]
    noise: float  # white-noise sigma as a fraction of per-channel signal RMS


def writer_profile(index: int, seed: int = 0, noise: float = DEFAULT_NOISE, prefix: str = "w") -> WriterProfile:
    rng = np.random.default_rng([seed, 7919, index])
    gain = rng.uniform(0.7, 1.3, N_CHANNELS)
    offset = rng.normal(0.0, 0.5, N_CHANNELS) * CHANNEL_SCALE
    offset[FORCE] = 0.0
    warp = float(rng.uniform(0.8, 1.25))
    return WriterProfile(f"{prefix}{index:03d}", gain, offset, warp, noise)


def synth_word(
    word: str,
    writer: WriterProfile,
    seed: int = 0,
    template_seed: int = 0,
    alphabet: Alphabet = LATIN,
) -> LabeledSample:
    """One recording of ``word`` by ``writer``, hover frames included."""
    if not word:
        raise ValueError("word must not be empty")
    bad = [c for c in word if c not in alphabet]
    if bad:
        raise ValueError(f"characters not in alphabet: {bad}")
    rng = np.random.default_rng([seed, abs(hash_word(word)), abs(hash_word(writer.writer_id))])

    pieces = []
    for k, ch in enumerate(word):
        tpl = character_template(ch, template_seed)
        n = int(round(tpl.duration * writer.warp * rng.uniform(0.9, 1.1)))
        seg = tpl.render(max(n, MIN_CHAR_FRAMES))
        if k:
            prev_end, start = pieces[-1][-1], seg[0]
            gap = int(rng.integers(2, 9))
            w = np.linspace(0.0, 1.0, gap + 2)[1:-1, None]
            trans = (1 - w) * prev_end + w * start
            if rng.random() < 0.3:  # brief pen lift between strokes
                trans[:, FORCE] = rng.uniform(0.2, 0.9, gap)
            pieces.append(trans)
        pieces.append(seg)
    body = np.concatenate(pieces) * writer.gain + writer.offset

    rms = np.sqrt(np.mean(body ** 2, axis=0))
    body = body + rng.standard_normal(body.shape) * (writer.noise * rms)
    lifted = np.zeros(body.shape[0], dtype=bool)
    start = 0
    for p in pieces:
        if p[:, FORCE].max() < STROKE_FORCE_MIN * 0.5:
            lifted[start: start + len(p)] = True
        start += len(p)
    f = body[:, FORCE]
    f = np.where(lifted, np.clip(f, 0.0, HOVER_FORCE_MAX), np.clip(f, 1.2, FORCE_MAX))
    body[:, FORCE] = f

    def hover(n, anchor):
        h = anchor + rng.standard_normal((n, N_CHANNELS)) * 0.05 * CHANNEL_SCALE
        h[:, FORCE] = rng.uniform(0.0, HOVER_FORCE_MAX, n)
        return h

    head = hover(int(rng.integers(5, 31)), body[0])
    tail = hover(int(rng.integers(5, 31)), body[-1])
    frames = np.concatenate([head, body, tail])
    return LabeledSample(writer.writer_id, word, frames)


def hash_word(s: str) -> int:
    # stable across processes, unlike hash()
    h = 2166136261
    for ch in s.encode("utf-8"):
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


def synth_dataset(
    vocab,
    n_writers: int,
    samples_per_writer: int,
    seed: int = 0,
    noise: float = DEFAULT_NOISE,
    template_seed: int = 0,
    writer_prefix: str = "w",
    alphabet: Alphabet = LATIN,
) -> Dataset:
    """Every writer records a seeded random multiset of ``vocab`` words."""
    vocab = list(vocab)
    if not vocab:
        raise ValueError("vocabulary must not be empty")
    samples = []
    for w in range(n_writers):
        prof = writer_profile(w, seed, noise, writer_prefix)
        rng = np.random.default_rng([seed, 104729, w])
        # cycle through shuffled copies so every word is written about equally often
        words = []
        while len(words) < samples_per_writer:
            words += [vocab[i] for i in rng.permutation(len(vocab))]
        for j, word in enumerate(words[:samples_per_writer]):
            samples.append(synth_word(word, prof, seed=seed * 1_000_003 + j, template_seed=template_seed, alphabet=alphabet))
    prov = f"synthetic seed={seed} writers={n_writers} per_writer={samples_per_writer} noise={noise}"
    return Dataset(samples, prov)


def synth_unseen_dataset(
    unseen_vocab=UNSEEN_VOCAB,
    main_vocab=MAIN_VOCAB,
    n_writers: int = 2,
    samples_per_writer: int = 100,
    seed: int = 1,
    **kw,
) -> Dataset:
    """Second test set: new writers, words disjoint from the main vocabulary."""
    overlap = set(unseen_vocab) & set(main_vocab)
    if overlap:
        raise ValueError(f"unseen vocabulary overlaps the main one: {sorted(overlap)}")
    return synth_dataset(unseen_vocab, n_writers, samples_per_writer, seed=seed, writer_prefix="u", **kw)
