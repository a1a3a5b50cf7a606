"""ARPA backoff n-gram language model with an explicit-state query interface.

Scores are log base 10 throughout, per the ARPA convention; the decoder
multiplies by ln(10) once at its boundary. The model is immutable after
load, so concurrent queries from any number of threads are safe. States are
plain tuples of word ids, canonicalized to the longest history the model
actually stores, and compare equal by value (the decoder merges beam
hypotheses on them).
"""

from __future__ import annotations

import math

from .errors import ArpaError, OovError

SENTENCE_START = "<s>"
SENTENCE_END = "</s>"
UNKNOWN_WORD = "<unk>"


class NGramModel:
    def __init__(self, order, tables, vocab):
        self.order = order
        # tables[n] maps n-tuples of word ids to (log10_prob, log10_backoff)
        self.tables = tables
        self.vocab = dict(vocab)
        self.words = [None] * len(self.vocab)
        for w, i in self.vocab.items():
            self.words[i] = w
        self.unk_id = self.vocab.get(UNKNOWN_WORD)

    def __contains__(self, word: str) -> bool:
        return word in self.vocab

    def word_id(self, word: str) -> int:
        """Vocabulary id of word, falling back to <unk> when the model has one."""
        wid = self.vocab.get(word)
        if wid is not None:
            return wid
        if self.unk_id is not None:
            return self.unk_id
        raise OovError(f"word {word!r} not in LM vocabulary and no {UNKNOWN_WORD} entry")

    def canonical(self, state) -> tuple:
        """Longest suffix of state stored in the model, at most order-1 long."""
        state = tuple(state)
        for k in range(min(self.order - 1, len(state)), 0, -1):
            if state[-k:] in self.tables[k]:
                return state[-k:]
        return ()

    def start_state(self) -> tuple:
        if SENTENCE_START in self.vocab:
            return self.canonical((self.vocab[SENTENCE_START],))
        return ()

    def _prob(self, history: tuple, wid: int) -> float:
        if len(history) + 1 <= self.order:
            entry = self.tables[len(history) + 1].get(history + (wid,))
            if entry is not None:
                return entry[0]
        if not history:
            # every vocabulary word has a unigram entry (validated at load)
            return self.tables[1][(wid,)][0]
        back = self.tables[len(history)].get(history)
        backoff = back[1] if back is not None else 0.0
        return backoff + self._prob(history[1:], wid)

    def score(self, state, word_id: int) -> tuple:
        """Backoff probability of word_id after state.

        Returns (new_state, log10_prob) with new_state the canonical suffix
        of (state, word_id). Pure: identical inputs give identical outputs.
        """
        if not 0 <= word_id < len(self.words):
            raise OovError(f"word id {word_id} outside vocabulary of size {len(self.words)}")
        history = self.canonical(state)
        prob = self._prob(history, word_id)
        return self.canonical(history + (word_id,)), prob

    def finish(self, state) -> float:
        """log10 probability of the sentence end after state."""
        if SENTENCE_END not in self.vocab:
            raise OovError(f"model has no {SENTENCE_END} entry")
        _, prob = self.score(state, self.vocab[SENTENCE_END])
        return prob

    def unigram_score(self, word: str) -> float:
        """log10 unigram probability, used for trie score smearing."""
        return self.tables[1][(self.word_id(word),)][0]

    def sentence_score(self, words) -> float:
        """Total log10 probability of words framed by <s> ... </s>."""
        state = self.start_state()
        total = 0.0
        for w in words:
            state, p = self.score(state, self.word_id(w))
            total += p
        return total + self.finish(state)


def load_arpa(path) -> NGramModel:
    """Parse a standard ARPA file; errors carry 1-based line numbers."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()

    i = 0
    while i < len(lines) and lines[i].strip() != "\\data\\":
        if lines[i].strip():
            raise ArpaError("expected \\data\\ header", line=i + 1)
        i += 1
    if i == len(lines):
        raise ArpaError("missing \\data\\ section", line=len(lines))
    i += 1

    declared = {}
    while i < len(lines) and lines[i].strip():
        text = lines[i].strip()
        if not text.startswith("ngram "):
            raise ArpaError(f"bad count line {text!r}", line=i + 1)
        try:
            n_text, count_text = text[len("ngram "):].split("=")
            n, count = int(n_text), int(count_text)
        except ValueError:
            raise ArpaError(f"bad count line {text!r}", line=i + 1) from None
        if n < 1 or count < 0 or n in declared:
            raise ArpaError(f"bad count line {text!r}", line=i + 1)
        declared[n] = count
        i += 1
    if not declared or sorted(declared) != list(range(1, max(declared) + 1)):
        raise ArpaError("count declarations must cover 1..order", line=i)
    order = max(declared)

    vocab: dict = {}
    tables = [None] + [dict() for _ in range(order)]
    for n in range(1, order + 1):
        header = f"\\{n}-grams:"
        while i < len(lines) and not lines[i].strip():
            i += 1
        if i == len(lines) or lines[i].strip() != header:
            raise ArpaError(f"expected {header}", line=i + 1 if i < len(lines) else len(lines))
        i += 1
        seen = 0
        while i < len(lines):
            text = lines[i].strip()
            if not text or text.startswith("\\"):
                break
            fields = text.split()
            if len(fields) == n + 1:
                backoff = 0.0
            elif len(fields) == n + 2 and n < order:
                try:
                    backoff = float(fields[-1])
                except ValueError:
                    raise ArpaError(f"bad backoff weight {fields[-1]!r}", line=i + 1) from None
            elif len(fields) == n + 2:
                raise ArpaError(
                    "backoff weight not allowed on highest-order n-grams", line=i + 1
                )
            else:
                raise ArpaError(
                    f"expected {n + 1} or {n + 2} fields for a {n}-gram, got {len(fields)}",
                    line=i + 1,
                )
            try:
                prob = float(fields[0])
            except ValueError:
                raise ArpaError(f"bad probability {fields[0]!r}", line=i + 1) from None
            if prob > 0:
                raise ArpaError(f"log10 probability {prob} is positive", line=i + 1)
            words = fields[1 : n + 1]
            if n == 1:
                word = words[0]
                if word in vocab:
                    raise ArpaError(f"duplicate unigram {word!r}", line=i + 1)
                vocab[word] = len(vocab)
                key = (vocab[word],)
            else:
                try:
                    key = tuple(vocab[w] for w in words)
                except KeyError as exc:
                    raise ArpaError(
                        f"word {exc.args[0]!r} has no unigram entry", line=i + 1
                    ) from None
                if key[:-1] not in tables[n - 1]:
                    raise ArpaError(
                        f"history of {' '.join(words)!r} is not a stored {n - 1}-gram",
                        line=i + 1,
                    )
                if key in tables[n]:
                    raise ArpaError(f"duplicate {n}-gram {' '.join(words)!r}", line=i + 1)
            tables[n][key] = (prob, backoff)
            seen += 1
            i += 1
        if seen != declared[n]:
            raise ArpaError(
                f"\\data\\ declares {declared[n]} {n}-grams but section lists {seen}",
                line=i,
            )

    while i < len(lines) and not lines[i].strip():
        i += 1
    if i == len(lines) or lines[i].strip() != "\\end\\":
        raise ArpaError("missing \\end\\", line=min(i + 1, len(lines)))
    return NGramModel(order=order, tables=tables, vocab=vocab)


def write_arpa(model: NGramModel, path):
    """Emit the model back to ARPA text; load_arpa on the result round-trips."""
    out = ["\\data\\"]
    for n in range(1, model.order + 1):
        out.append(f"ngram {n}={len(model.tables[n])}")
    for n in range(1, model.order + 1):
        out.append("")
        out.append(f"\\{n}-grams:")
        for key in sorted(model.tables[n]):
            prob, backoff = model.tables[n][key]
            text = " ".join(model.words[w] for w in key)
            line = f"{prob}\t{text}"
            if backoff != 0.0:
                line += f"\t{backoff}"
            out.append(line)
    out.append("")
    out.append("\\end\\")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(out) + "\n")


def log10_to_ln(x: float) -> float:
    """Base conversion applied once at the decoder boundary."""
    return x * math.log(10.0)
