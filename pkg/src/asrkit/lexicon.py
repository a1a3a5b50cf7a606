"""Token inventories and word-to-spelling lexicons.

A token file lists one symbol per line; the line number (0-based) is the
token id. A lexicon file maps words to token spellings, one entry per line:

    word<TAB>tok1 tok2 tok3

A word may appear on several lines to give alternative spellings.
"""

from __future__ import annotations

import numpy as np

from .errors import LexiconError, TokenError

REPETITION_SYMBOL = "<2>"


class TokenTable:
    """Bidirectional token-symbol/id map."""

    def __init__(self, symbols):
        self.symbols = list(symbols)
        if not self.symbols:
            raise TokenError("token table is empty")
        self.ids = {}
        for i, sym in enumerate(self.symbols):
            if not sym:
                raise TokenError(f"empty token symbol at id {i}")
            if sym in self.ids:
                raise TokenError(f"duplicate token symbol {sym!r}")
            self.ids[sym] = i

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, symbol):
        return symbol in self.ids

    def id(self, symbol: str) -> int:
        if symbol not in self.ids:
            raise TokenError(f"unknown token symbol {symbol!r}")
        return self.ids[symbol]

    def symbol(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.symbols):
            raise TokenError(f"token id {token_id} out of range 0..{len(self.symbols) - 1}")
        return self.symbols[token_id]

    @property
    def rep_id(self):
        """Id of the repetition token, or None if the table has none."""
        return self.ids.get(REPETITION_SYMBOL)

    @property
    def silence_id(self):
        """Id of the word-separator token '|', or None if the table has none."""
        return self.ids.get("|")


def load_tokens(path) -> TokenTable:
    with open(path, "r", encoding="utf-8") as f:
        symbols = [line.rstrip("\n") for line in f]
    while symbols and symbols[-1] == "":
        symbols.pop()
    return TokenTable(symbols)


def load_lexicon(path, table: TokenTable) -> dict:
    """Read word-to-spellings mappings; every token must be in the table.

    Returns {word: [spelling, ...]} with each spelling a list of token ids,
    preserving file order within a word.
    """
    lexicon: dict = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise LexiconError(f"line {lineno}: expected word<TAB>spelling, got {line!r}")
            word, spelling_text = line.split("\t", 1)
            word = word.strip()
            pieces = spelling_text.split()
            if not word or not pieces:
                raise LexiconError(f"line {lineno}: empty word or spelling")
            spelling = []
            for sym in pieces:
                if sym not in table:
                    raise LexiconError(
                        f"line {lineno}: word {word!r} uses unknown token {sym!r}"
                    )
                spelling.append(table.id(sym))
            lexicon.setdefault(word, []).append(spelling)
    if not lexicon:
        raise LexiconError("lexicon file holds no entries")
    return lexicon


def spell_word(word: str, table: TokenTable, lexicon=None):
    """Token ids for one word: first lexicon spelling if available, else graphemes."""
    if lexicon and word in lexicon:
        return list(lexicon[word][0])
    spelling = []
    for ch in word:
        if ch not in table:
            raise TokenError(f"cannot spell {word!r}: no token for character {ch!r}")
        spelling.append(table.id(ch))
    return spelling


def tokenize_transcript(transcript: str, table: TokenTable, lexicon=None):
    """Token ids for a whitespace-separated transcript.

    When the table defines the '|' separator, it is inserted between words
    (not at the edges), so word boundaries survive in the token stream.
    """
    words = transcript.split()
    sil = table.silence_id
    out = []
    for i, word in enumerate(words):
        if i and sil is not None:
            out.append(sil)
        out.extend(spell_word(word, table, lexicon))
    return out


def encode_repetitions(token_ids, table: TokenTable, max_reps: int = 2):
    """Rewrite runs of equal tokens using the repetition token.

    With the default max_reps=2, "a a" becomes "a <2>" and "a a a" becomes
    "a <2> a". Requires the table to define <2>; longer runs alternate.
    """
    rep = table.rep_id
    if rep is None:
        raise TokenError(f"token table has no {REPETITION_SYMBOL!r} symbol")
    out = []
    i = 0
    ids = list(token_ids)
    while i < len(ids):
        j = i
        while j < len(ids) and ids[j] == ids[i]:
            j += 1
        run = j - i
        while run > 0:
            out.append(ids[i])
            take = min(max_reps, run)
            if take == 2:
                out.append(rep)
            run -= take
        i = j
    return out


def decode_repetitions(token_ids, table: TokenTable):
    """Inverse of encode_repetitions: expand <2> back into doubled tokens."""
    rep = table.rep_id
    if rep is None:
        return list(token_ids)
    out = []
    for tid in token_ids:
        if tid == rep:
            if not out:
                raise TokenError("repetition token with no preceding token")
            out.append(out[-1])
        else:
            out.append(tid)
    return out


def ids_to_text(token_ids, table: TokenTable) -> str:
    """Join token symbols, rendering '|' as a space. For logs and greedy eval."""
    parts = []
    for tid in token_ids:
        sym = table.symbol(int(tid))
        parts.append(" " if sym == "|" else sym)
    return "".join(parts).strip()


def split_on_silence(token_ids, silence_id):
    """Split a token stream into silence-free groups; drops empty groups."""
    groups = []
    cur = []
    for tid in token_ids:
        if tid == silence_id:
            if cur:
                groups.append(cur)
            cur = []
        else:
            cur.append(int(tid))
    if cur:
        groups.append(cur)
    return groups


def targets_to_array(token_ids) -> np.ndarray:
    return np.asarray(list(token_ids), dtype=np.int64)
