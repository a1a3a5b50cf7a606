"""Backoff LM tests: hand-computed probabilities, parse errors, round trips."""

import math

import numpy as np
import pytest

from asrkit.errors import ArpaError, OovError
from asrkit.lm import load_arpa, log10_to_ln, write_arpa
from conftest import HAND_ARPA


def _score_word(lm, state, word):
    return lm.score(state, lm.word_id(word))


# --- hand-computed values on the five-unigram model --------------------------------

def test_stored_bigrams(hand_arpa):
    lm = load_arpa(hand_arpa)
    s = lm.start_state()
    s, p = _score_word(lm, s, "the")
    assert p == pytest.approx(-0.3, abs=1e-12)
    s, p = _score_word(lm, s, "cat")
    assert p == pytest.approx(-0.5, abs=1e-12)
    s, p = _score_word(lm, s, "sat")
    assert p == pytest.approx(-0.6, abs=1e-12)
    assert lm.finish(s) == pytest.approx(-0.4, abs=1e-12)


def test_backoff_with_weight(hand_arpa):
    # no "<s> cat" bigram: backoff(<s>) + P(cat) = -0.5 + -1.2
    lm = load_arpa(hand_arpa)
    _, p = _score_word(lm, lm.start_state(), "cat")
    assert p == pytest.approx(-1.7, abs=1e-12)


def test_backoff_with_omitted_weight_is_zero(hand_arpa):
    # "sat" has no backoff field: 0.0 + P(the) = -0.7
    lm = load_arpa(hand_arpa)
    s, _ = _score_word(lm, lm.start_state(), "the")  # state: (the,)
    s, _ = _score_word(lm, s, "cat")
    s, _ = _score_word(lm, s, "sat")
    _, p = _score_word(lm, s, "the")
    assert p == pytest.approx(-0.7, abs=1e-12)


def test_backoff_to_end_of_sentence(hand_arpa):
    # no "the </s>" bigram: backoff(the) + P(</s>) = -0.4 + -0.9
    lm = load_arpa(hand_arpa)
    s, _ = _score_word(lm, lm.start_state(), "the")
    assert lm.finish(s) == pytest.approx(-1.3, abs=1e-12)


def test_sentence_score(hand_arpa):
    lm = load_arpa(hand_arpa)
    assert lm.sentence_score(["the", "cat", "sat"]) == pytest.approx(-1.8, abs=1e-12)


def test_oov_without_unk_raises(hand_arpa):
    lm = load_arpa(hand_arpa)
    with pytest.raises(OovError):
        lm.word_id("dog")


def test_unk_fallback(tmp_path):
    text = HAND_ARPA.replace("ngram 1=5", "ngram 1=6").replace(
        "-0.9\t</s>", "-0.9\t</s>\n-2.0\t<unk>"
    )
    path = tmp_path / "unk.arpa"
    path.write_text(text)
    lm = load_arpa(str(path))
    wid = lm.word_id("dog")  # falls back to <unk>
    assert wid == lm.word_id("<unk>")
    _, p = lm.score((), wid)
    assert p == pytest.approx(-2.0, abs=1e-12)


def test_sum_to_one_invariant(hand_arpa):
    lm = load_arpa(hand_arpa)
    states = [(), lm.start_state()]
    for w in ("the", "cat", "sat"):
        s, _ = _score_word(lm, (), w)
        states.append(s)
    for state in states:
        total = sum(
            10.0 ** lm.score(state, lm.word_id(w))[1]
            for w in ("<s>", "the", "cat", "sat", "</s>")
        )
        assert total <= 1.0 + 1e-3, state


def test_state_canonicalization(hand_arpa):
    lm = load_arpa(hand_arpa)
    s1, _ = _score_word(lm, lm.start_state(), "the")
    # reaching "the" from a backoff context gives the same canonical state
    s_b, _ = _score_word(lm, (), "the")
    assert s1 == s_b
    # histories are capped at order-1 words
    assert len(s1) <= lm.order - 1


def test_trigram_state_identity(tmp_path):
    text = """\
\\data\\
ngram 1=4
ngram 2=3
ngram 3=1

\\1-grams:
-0.8\t<s>\t-0.2
-0.6\ta\t-0.3
-0.7\tb\t-0.1
-0.9\t</s>

\\2-grams:
-0.2\t<s> a\t-0.15
-0.4\ta b\t-0.25
-0.5\tb a

\\3-grams:
-0.1\t<s> a b

\\end\\
"""
    path = tmp_path / "tri.arpa"
    path.write_text(text)
    lm = load_arpa(str(path))
    s = lm.start_state()
    s, p1 = _score_word(lm, s, "a")
    s, p2 = _score_word(lm, s, "b")
    assert p2 == pytest.approx(-0.1, abs=1e-12)  # stored trigram <s> a b
    assert s == lm.canonical((lm.word_id("a"), lm.word_id("b")))
    # "b a" then "a b" lands on the same canonical (a, b) state
    s2, _ = _score_word(lm, (), "b")
    s2, _ = _score_word(lm, s2, "a")
    s2, _ = _score_word(lm, s2, "b")
    assert s2 == s
    # scoring from equal states is equal
    assert lm.finish(s2) == lm.finish(s)


def test_round_trip_through_writer(hand_arpa, tmp_path):
    lm = load_arpa(hand_arpa)
    out = tmp_path / "rt.arpa"
    write_arpa(lm, str(out))
    back = load_arpa(str(out))
    probes = [
        [], ["the"], ["the", "cat"], ["the", "cat", "sat"],
        ["cat"], ["sat", "the"],
    ]
    for words in probes:
        assert back.sentence_score(words) == pytest.approx(
            lm.sentence_score(words), abs=1e-9
        )


def test_log10_to_ln():
    assert log10_to_ln(-1.0) == pytest.approx(-math.log(10.0), rel=1e-15)
    assert log10_to_ln(0.0) == 0.0


# --- parse errors with line numbers --------------------------------------------------

def _expect_error(tmp_path, text, fragment):
    path = tmp_path / "bad.arpa"
    path.write_text(text)
    with pytest.raises(ArpaError) as exc:
        load_arpa(str(path))
    assert fragment in str(exc.value).lower()
    assert "line" in str(exc.value)


def test_missing_data_header(tmp_path):
    _expect_error(tmp_path, "\\1-grams:\n-0.5\ta\n\\end\\\n", "data")


def test_count_mismatch(tmp_path):
    text = HAND_ARPA.replace("ngram 1=5", "ngram 1=6")
    _expect_error(tmp_path, text, "declares 6")


def test_positive_probability_rejected(tmp_path):
    text = HAND_ARPA.replace("-0.7\tthe", "0.7\tthe")
    _expect_error(tmp_path, text, "positive")


def test_backoff_on_highest_order_rejected(tmp_path):
    text = HAND_ARPA.replace("-0.3\t<s> the", "-0.3\t<s> the\t-0.1")
    _expect_error(tmp_path, text, "backoff")


def test_duplicate_unigram_rejected(tmp_path):
    text = HAND_ARPA.replace("-1.5\tsat", "-1.5\tsat\n-1.5\tsat")
    path = tmp_path / "dup.arpa"
    path.write_text(text)
    with pytest.raises(ArpaError):
        load_arpa(str(path))


def test_bigram_word_needs_unigram(tmp_path):
    text = HAND_ARPA.replace("-0.5\tthe cat", "-0.5\tthe dog")
    _expect_error(tmp_path, text, "unigram")


def test_missing_end_marker(tmp_path):
    text = HAND_ARPA.replace("\\end\\\n", "")
    path = tmp_path / "noend.arpa"
    path.write_text(text)
    with pytest.raises(ArpaError):
        load_arpa(str(path))


def test_bad_field_count(tmp_path):
    text = HAND_ARPA.replace("-0.3\t<s> the", "-0.3\t<s> the extra junk here")
    path = tmp_path / "fields.arpa"
    path.write_text(text)
    with pytest.raises(ArpaError):
        load_arpa(str(path))


def test_every_vocab_word_scorable_from_any_state(hand_arpa):
    # unigram coverage is validated at load; scoring must never raise for vocab words
    lm = load_arpa(hand_arpa)
    rng = np.random.default_rng(0)
    words = ["the", "cat", "sat", "</s>", "<s>"]
    state = lm.start_state()
    for _ in range(30):
        w = words[rng.integers(0, len(words))]
        state, p = lm.score(state, lm.word_id(w))
        assert np.isfinite(p) and p <= 0.0
