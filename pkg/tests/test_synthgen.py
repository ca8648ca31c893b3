import numpy as np
import pytest

from imupen import sensor_data as sd
from imupen import synthgen as sg
from imupen.ctc import LATIN


def test_vocabularies():
    assert len(sg.MAIN_VOCAB) == 30 and len(sg.UNSEEN_VOCAB) == 10
    assert set("".join(sg.MAIN_VOCAB)) == set(LATIN.characters)
    assert not set(sg.MAIN_VOCAB) & set(sg.UNSEEN_VOCAB)


def test_template_deterministic_and_force():
    a = sg.character_template("Q", 0)
    b = sg.character_template("Q", 0)
    assert a.duration == b.duration and np.array_equal(a.knots, b.knots)
    assert 30 <= a.duration <= 60
    assert sg.character_template("q", 0).knots.tobytes() != a.knots.tobytes()
    assert np.all(a.render(45)[:, sd.FORCE] >= 2.0)


def test_writer_profile_ranges():
    for i in range(20):
        w = sg.writer_profile(i, seed=3)
        assert np.all((0.7 <= w.gain) & (w.gain <= 1.3))
        assert 0.8 <= w.warp <= 1.25
        assert w.offset[sd.FORCE] == 0
    assert sg.writer_profile(2, 3).warp == sg.writer_profile(2, 3).warp


def test_synth_word_deterministic():
    w = sg.writer_profile(0, 1)
    a = sg.synth_word("Haze", w, seed=4)
    b = sg.synth_word("Haze", w, seed=4)
    assert a.frames.tobytes() == b.frames.tobytes()
    c = sg.synth_word("Haze", w, seed=5)
    assert c.frames.shape != a.frames.shape or not np.array_equal(c.frames, a.frames)


def test_synth_word_rejects_bad_words():
    w = sg.writer_profile(0)
    with pytest.raises(ValueError):
        sg.synth_word("", w)
    with pytest.raises(ValueError):
        sg.synth_word("a-b", w)


def test_hover_trim_and_length_constraints():
    for i, word in enumerate(sg.MAIN_VOCAB + sg.UNSEEN_VOCAB + ("a", "Ab", "ll")):
        w = sg.writer_profile(i % 5, 2)
        s = sg.synth_word(word, w, seed=i)
        sd.validate_sample(s)
        f = s.frames[:, sd.FORCE]
        down = np.flatnonzero(f >= 1.0)
        head, tail = down[0], len(f) - 1 - down[-1]
        assert 5 <= head <= 30 and 5 <= tail <= 30
        assert np.all(f[:head] < 1.0) and np.all(f[len(f) - tail:] < 1.0)
        t = sd.trim_hover(s, 1.0)
        assert t.n_frames == len(f) - head - tail
        assert t.n_frames >= 8 * (2 * len(word) + 1)
        assert 50 <= t.n_frames <= 1200
        assert np.all((f >= 0) & (f <= 10))


def test_synth_dataset_counts_and_balance():
    ds = sg.synth_dataset(sg.MAIN_VOCAB, 3, 40, seed=1)
    assert len(ds) == 120
    assert ds.writers == ["w000", "w001", "w002"]
    per_writer = [s.label for s in ds if s.writer_id == "w001"]
    counts = {w: per_writer.count(w) for w in sg.MAIN_VOCAB}
    assert max(counts.values()) - min(counts.values()) <= 1
    assert set("".join(s.label for s in ds)) == set(LATIN.characters)


def test_synth_dataset_seed_changes_noise_not_vocab():
    a = sg.synth_dataset(sg.MAIN_VOCAB[:5], 1, 5, seed=1)
    b = sg.synth_dataset(sg.MAIN_VOCAB[:5], 1, 5, seed=2)
    assert {s.label for s in a} == {s.label for s in b} == set(sg.MAIN_VOCAB[:5])
    assert all(x.frames.shape != y.frames.shape or not np.array_equal(x.frames, y.frames) for x, y in zip(a, b))


def test_full_default_size():
    assert len(sg.synth_dataset(sg.MAIN_VOCAB, 8, 400, seed=0)) == 3200


def test_unseen_dataset():
    ds = sg.synth_unseen_dataset(samples_per_writer=10)
    assert len(ds) == 20
    assert {s.label for s in ds} <= set(sg.UNSEEN_VOCAB)
    assert all(s.writer_id.startswith("u") for s in ds)
    with pytest.raises(ValueError):
        sg.synth_unseen_dataset(unseen_vocab=("Haze",))


def test_jsonl_roundtrip(tmp_path):
    ds = sg.synth_dataset(sg.MAIN_VOCAB[:3], 2, 3, seed=0)
    sd.write_dataset(ds, tmp_path / "s.jsonl")
    back = sd.parse_dataset(tmp_path / "s.jsonl")
    assert len(back) == 6
    np.testing.assert_array_equal(back[4].frames, ds[4].frames)
