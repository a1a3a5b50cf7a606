"""Token table, lexicon parsing, and repetition-encoding tests."""

import numpy as np
import pytest

from asrkit.errors import LexiconError, TokenError
from asrkit.lexicon import (
    TokenTable,
    decode_repetitions,
    encode_repetitions,
    ids_to_text,
    load_lexicon,
    load_tokens,
    spell_word,
    split_on_silence,
    targets_to_array,
    tokenize_transcript,
)


@pytest.fixture
def table():
    return TokenTable(["a", "b", "c", "|", "<2>"])


def test_load_tokens_line_is_id(tmp_path):
    p = tmp_path / "tok.txt"
    p.write_text("a\nb\n|\n")
    t = load_tokens(str(p))
    assert len(t) == 3
    assert t.id("a") == 0
    assert t.id("|") == 2
    assert t.symbol(1) == "b"
    assert t.silence_id == 2
    assert t.rep_id is None


def test_token_table_rejects_duplicates_and_empty():
    with pytest.raises(TokenError):
        TokenTable(["a", "a"])
    with pytest.raises(TokenError):
        TokenTable([])


def test_load_lexicon_and_errors(tmp_path, table):
    good = tmp_path / "lex.txt"
    good.write_text("ab\ta b\nab\ta b |\ncab\tc a b\n")
    lex = load_lexicon(str(good), table)
    assert lex["ab"] == [[0, 1], [0, 1, 3]]
    assert lex["cab"] == [[2, 0, 1]]

    bad = tmp_path / "bad.txt"
    bad.write_text("ab\ta b\nxy\tx y\n")
    with pytest.raises(LexiconError) as exc:
        load_lexicon(str(bad), table)
    msg = str(exc.value)
    assert "xy" in msg and "x" in msg and "2" in msg  # word, token, line number

    nofield = tmp_path / "nofield.txt"
    nofield.write_text("justoneword\n")
    with pytest.raises(LexiconError):
        load_lexicon(str(nofield), table)


def test_spell_word_prefers_lexicon(table):
    lex = {"ab": [[1, 0]]}  # deliberately not the graphemes
    assert spell_word("ab", table, lex) == [1, 0]
    assert spell_word("ab", table, None) == [0, 1]
    with pytest.raises(TokenError):
        spell_word("ax", table)


def test_tokenize_inserts_silence_between_words(table):
    assert tokenize_transcript("ab ba", table) == [0, 1, 3, 1, 0]
    assert tokenize_transcript("ab", table) == [0, 1]
    no_sil = TokenTable(["a", "b"])
    assert tokenize_transcript("ab ba", no_sil) == [0, 1, 1, 0]


def test_encode_repetitions_examples(table):
    a, rep = 0, table.rep_id
    assert encode_repetitions([a, a, a], table) == [a, rep, a]
    assert encode_repetitions([a, a], table) == [a, rep]
    assert encode_repetitions([a], table) == [a]
    assert encode_repetitions([a, a, a, a], table) == [a, rep, a, rep]
    assert encode_repetitions([0, 0, 1, 1, 0], table) == [0, rep, 1, rep, 0]


def test_repetition_round_trip(table):
    rng = np.random.default_rng(0)
    for _ in range(50):
        seq = list(rng.integers(0, 3, size=rng.integers(1, 10)))
        enc = encode_repetitions(seq, table)
        # encoded form never holds two equal tokens in a row
        assert all(x != y for x, y in zip(enc, enc[1:]))
        assert decode_repetitions(enc, table) == seq


def test_decode_repetitions_rejects_leading_marker(table):
    with pytest.raises(TokenError):
        decode_repetitions([table.rep_id, 0], table)


def test_encode_needs_rep_symbol():
    with pytest.raises(TokenError):
        encode_repetitions([0, 0], TokenTable(["a", "b"]))


def test_ids_to_text_and_silence_split(table):
    assert ids_to_text([0, 1, 3, 1], table) == "ab b"
    assert split_on_silence([0, 1, 3, 1, 3, 3, 2], 3) == [[0, 1], [1], [2]]
    assert split_on_silence([3, 3], 3) == []


def test_targets_to_array_dtype():
    arr = targets_to_array([1, 2, 3])
    assert arr.dtype == np.int64
    assert arr.tolist() == [1, 2, 3]
