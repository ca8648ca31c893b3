import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imupen import ctc
from imupen.ctc import LATIN, Alphabet
from oracles import finite_difference, max_relative_error


def random_log_probs(rng, frames, classes):
    return ctc.log_softmax(rng.normal(size=(frames, classes)) * 2.0)


def test_alphabet_layout():
    assert LATIN.num_classes == 53
    assert LATIN.blank_index == 52
    assert LATIN.characters[:3] == "ABC" and LATIN.characters[26:29] == "abc"
    assert LATIN.decode(LATIN.encode("Stabilo")) == "Stabilo"
    with pytest.raises(ValueError):
        LATIN.encode("a1")
    with pytest.raises(ValueError):
        Alphabet("aa")


@pytest.mark.parametrize("label, expected", [
    ([0, 1], [9, 0, 9, 1, 9]),
    ([0], [9, 0, 9]),
    ([0, 0], [9, 0, 9, 0, 9]),
])
def test_extend_labels(label, expected):
    assert ctc.extend_labels(label, blank=9).tolist() == expected


def test_extend_labels_rejects_empty():
    with pytest.raises(ValueError):
        ctc.extend_labels([], blank=3)


def test_single_frame_loss_is_neg_log_prob(rng):
    lp = random_log_probs(rng, 1, 53)
    a = LATIN.encode("a")
    loss, _ = ctc.ctc_loss(lp, a)
    assert loss == pytest.approx(-lp[0, a[0]], abs=1e-12)


def test_uniform_two_frames_is_ln3():
    # paths over {a, b, -}: aa, a-, -a collapse to "a"; 3 of 9 equiprobable paths
    lp = np.log(np.full((2, 3), 1 / 3))
    loss, _ = ctc.ctc_loss(lp, [0])
    assert loss == pytest.approx(math.log(3), abs=1e-12)
    assert ctc.brute_force_loss(lp, [0]) == pytest.approx(math.log(3), abs=1e-12)


def test_too_short_input_is_unalignable(rng):
    lp = random_log_probs(rng, 1, 53)
    with pytest.raises(ctc.UnalignableLabelError):
        ctc.ctc_loss(lp, LATIN.encode("ab"))
    # a repeated letter needs a blank between its copies
    with pytest.raises(ctc.UnalignableLabelError):
        ctc.ctc_loss(random_log_probs(rng, 2, 53), LATIN.encode("aa"))
    ctc.ctc_loss(random_log_probs(rng, 3, 53), LATIN.encode("aa"))


def test_brute_force_unproducible_label_is_inf(rng):
    assert ctc.brute_force_loss(random_log_probs(rng, 2, 3), [0, 0]) == math.inf


def test_brute_force_rejects_large_instances(rng):
    with pytest.raises(ValueError):
        ctc.brute_force_loss(random_log_probs(rng, 9, 3), [0])
    with pytest.raises(ValueError):
        ctc.brute_force_loss(random_log_probs(rng, 3, 6), [0])


def test_matches_brute_force_small_instances(rng):
    for _ in range(200):
        classes = int(rng.integers(2, 6))
        frames = int(rng.integers(1, 9))
        length = int(rng.integers(1, 4))
        label = rng.integers(0, classes - 1, size=length)
        lp = random_log_probs(rng, frames, classes)
        ref = ctc.brute_force_loss(lp, label)
        if math.isinf(ref):
            with pytest.raises(ctc.UnalignableLabelError):
                ctc.ctc_loss(lp, label)
            continue
        assert abs(ctc.ctc_loss(lp, label)[0] - ref) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 40), st.lists(st.integers(0, 51), min_size=1, max_size=6), st.integers(0, 2**32 - 1))
def test_forward_backward_consistency(frames, label, seed):
    if frames < ctc.min_frames_required(label):
        return
    lp = random_log_probs(np.random.default_rng(seed), frames, 53)
    table = ctc.ctc_tables(lp, label)
    ext = ctc.extend_labels(label, 52)
    per_t = np.logaddexp.reduce(table.log_alpha + table.log_beta - lp[:, ext], axis=1)
    np.testing.assert_allclose(per_t, table.log_likelihood, atol=1e-8)
    assert table.log_likelihood == pytest.approx(np.logaddexp(table.log_alpha[-1, -1], table.log_alpha[-1, -2]))
    assert np.all(table.log_alpha <= 1e-12) and np.all(table.log_beta <= 1e-12)


def test_grad_single_frame_closed_form(rng):
    logits = rng.normal(size=(1, 53))
    a = LATIN.encode("a")
    _, g = ctc.ctc_grad(logits, a)
    expected = np.exp(ctc.log_softmax(logits))
    expected[0, a[0]] -= 1.0
    np.testing.assert_allclose(g, expected, atol=1e-12)


def test_grad_rows_sum_to_zero(rng):
    for _ in range(20):
        logits = rng.normal(size=(int(rng.integers(6, 20)), 53))
        label = rng.integers(0, 52, size=int(rng.integers(1, 4)))
        _, g = ctc.ctc_grad(logits, label)
        assert np.max(np.abs(g.sum(axis=1))) < 1e-8


def test_grad_matches_finite_differences(rng):
    for length in (1, 2):
        logits = rng.normal(size=(4, 53))
        label = rng.integers(0, 52, size=length)
        _, g = ctc.ctc_grad(logits, label)
        fd = finite_difference(lambda: ctc.ctc_grad(logits, label)[0], logits, step=1e-5)
        assert max_relative_error(g, fd) < 1e-4


@pytest.mark.parametrize("path, word", [
    ("aa-ab", "aab"),
    ("-ss-unn", "sun"),
    ("---", ""),
])
def test_greedy_decode_paths(path, word):
    idx = [LATIN.blank_index if ch == "-" else LATIN.characters.index(ch) for ch in path]
    lp = np.full((len(idx), 53), -10.0)
    lp[np.arange(len(idx)), idx] = -0.01
    assert ctc.greedy_decode(lp, LATIN) == word


def test_greedy_tie_goes_to_lowest_index():
    lp = np.log(np.full((1, 53), 1 / 53))
    assert ctc.greedy_decode(lp, LATIN) == "A"


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 52), min_size=1, max_size=30))
def test_greedy_output_is_fixed_point(path):
    lp = np.full((len(path), 53), -5.0)
    lp[np.arange(len(path)), path] = 0.0
    word = ctc.greedy_decode(lp, LATIN)
    assert all(c in LATIN.characters for c in word)
    # re-encode the decoded word as a blank-separated path; decoding must return it unchanged
    again = []
    for k in LATIN.encode(word):
        again += [int(k), LATIN.blank_index]
    if again:
        lp2 = np.full((len(again), 53), -5.0)
        lp2[np.arange(len(again)), again] = 0.0
        assert ctc.greedy_decode(lp2, LATIN) == word
