"""Shared fixtures: a hand-scored backoff LM and synthetic tone corpora."""

import numpy as np
import pytest

from asrkit import features as feat
from asrkit.lexicon import load_tokens

# Five unigrams, four bigrams. Every backoff case is reachable by hand:
# stored bigram, backoff with weight, backoff with omitted (=0) weight,
# end-of-sentence, and OOV (no <unk>, so OovError).
HAND_ARPA = """\
\\data\\
ngram 1=5
ngram 2=4

\\1-grams:
-1.0\t<s>\t-0.5
-0.7\tthe\t-0.4
-1.2\tcat\t-0.3
-1.5\tsat
-0.9\t</s>

\\2-grams:
-0.3\t<s> the
-0.5\tthe cat
-0.6\tcat sat
-0.4\tsat </s>

\\end\\
"""


@pytest.fixture
def hand_arpa(tmp_path):
    path = tmp_path / "hand.arpa"
    path.write_text(HAND_ARPA)
    return str(path)


# --- synthetic tone corpus ---------------------------------------------------------
# Each token is a pure tone; silence is near-silence noise. A small conv net
# separates these trivially, which keeps end-to-end training tests fast.

TONE_HZ = {"a": 400.0, "b": 1300.0, "c": 2600.0}
SAMPLE_RATE = 16000


def tone_for(symbol, seconds, rng, sr=SAMPLE_RATE):
    n = int(seconds * sr)
    t = np.arange(n) / sr
    if symbol == "|":
        return (0.003 * rng.standard_normal(n)).astype(np.float32)
    wave = 0.4 * np.sin(2.0 * np.pi * TONE_HZ[symbol] * t)
    wave += 0.003 * rng.standard_normal(n)
    return wave.astype(np.float32)


def synth_utterance(transcript, rng, seconds_per_token=0.15, sr=SAMPLE_RATE):
    """Audio whose token sequence is the transcript's graphemes with '|' between words."""
    symbols = []
    for w, word in enumerate(transcript.split()):
        if w:
            symbols.append("|")
        symbols.extend(word)
    chunks = [tone_for(s, seconds_per_token, rng, sr) for s in symbols]
    return np.concatenate(chunks) if chunks else np.zeros(sr // 10, np.float32)


def write_tone_corpus(root, transcripts, seed=0, sr=SAMPLE_RATE):
    """Build wavs + manifest + tokens under root; returns paths and the table."""
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i, text in enumerate(transcripts):
        samples = synth_utterance(text, rng, sr=sr)
        wav = root / f"utt{i:03d}.wav"
        feat.write_wav(str(wav), feat.AudioBuffer(samples, sr))
        dur = int(round(1000.0 * len(samples) / sr))
        rows.append(f"utt{i:03d}\t{wav}\t{dur}\t{text}")
    manifest = root / "manifest.tsv"
    manifest.write_text("\n".join(rows) + "\n")
    tokens = root / "tokens.txt"
    tokens.write_text("a\nb\nc\n|\n")
    return {
        "manifest": str(manifest),
        "tokens": str(tokens),
        "table": load_tokens(str(tokens)),
    }


@pytest.fixture
def tone_corpus(tmp_path):
    transcripts = ["ab", "ba", "a b", "b a", "ab a", "b", "a", "ba b", "a ab", "b ba"]
    return write_tone_corpus(tmp_path / "corpus", transcripts, seed=7)


def toy_feature_config(n_mels=8):
    return feat.FeatureConfig(feature_kind="mfsc", num_mel_filters=n_mels,
                              num_cepstra=min(8, n_mels))
