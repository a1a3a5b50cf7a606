"""Independent reference implementations used to verify the package.

Everything here is deliberately naive: O(n^2) DFT, exhaustive path
enumeration over all N^T framewise paths, brute-force alignment sums.
Correct by inspection, usable only at toy sizes.
"""

import itertools
import math

import numpy as np

LN10 = math.log(10.0)


# --- numerics ---------------------------------------------------------------------

def naive_dft(x):
    """O(n^2) discrete Fourier transform straight from the definition."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[0]
    k = np.arange(n)
    twiddle = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return twiddle @ x


def finite_difference(f, x, eps=1e-3):
    """Central-difference gradient of scalar f at x, one probe per element."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + eps
        hi = f(x)
        xf[i] = orig - eps
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_err(approx, exact):
    """Norm-based relative error with an absolute floor for tiny exact values."""
    approx = np.asarray(approx)
    exact = np.asarray(exact)
    denom = max(np.linalg.norm(exact), 1e-8)
    return np.linalg.norm(approx - exact) / denom


# --- float64 forward references for autodiff ops ---------------------------------

def conv1d_ref(x, kernel, stride=1, padding=0):
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    kw, cin, cout = k.shape
    if padding:
        x = np.pad(x, ((padding, padding), (0, 0)))
    t_out = (x.shape[0] - kw) // stride + 1
    out = np.zeros((t_out, cout))
    for t in range(t_out):
        window = x[t * stride : t * stride + kw]
        for c in range(cout):
            out[t, c] = np.sum(window * k[:, :, c])
    return out


def log_softmax_ref(x):
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    z = np.log(np.exp(x - m).sum(axis=-1, keepdims=True)) + m
    return x - z


# --- criterion enumeration --------------------------------------------------------

def collapse_ctc(path, blank_id):
    dedup = [k for i, k in enumerate(path) if i == 0 or k != path[i - 1]]
    return [k for k in dedup if k != blank_id]


def collapse_asg(path):
    return [k for i, k in enumerate(path) if i == 0 or k != path[i - 1]]


def ctc_enum_loss(emissions, target, blank_id):
    """-log sum over all framewise paths that collapse to the target."""
    e = np.asarray(emissions, dtype=np.float64)
    t_frames, n = e.shape
    tgt = list(target)
    total = -np.inf
    for path in itertools.product(range(n), repeat=t_frames):
        if collapse_ctc(path, blank_id) != tgt:
            continue
        score = sum(e[t][path[t]] for t in range(t_frames))
        total = np.logaddexp(total, score)
    return -total


def _path_score(e, a, path):
    score = sum(e[t][path[t]] for t in range(len(path)))
    score += sum(a[path[t]][path[t - 1]] for t in range(1, len(path)))
    return score


def asg_enum_loss(emissions, target, transitions):
    """Full-graph logadd minus constrained-graph logadd, both by enumeration."""
    e = np.asarray(emissions, dtype=np.float64)
    a = np.asarray(transitions, dtype=np.float64)
    t_frames, n = e.shape
    y = list(target)
    length = len(y)

    fal = -np.inf
    for path in itertools.product(range(n), repeat=t_frames):
        fal = np.logaddexp(fal, _path_score(e, a, path))

    fcc = -np.inf
    for align in itertools.product(range(length), repeat=t_frames):
        if align[0] != 0 or align[-1] != length - 1:
            continue
        if any(align[t] - align[t - 1] not in (0, 1) for t in range(1, t_frames)):
            continue
        path = [y[i] for i in align]
        fcc = np.logaddexp(fcc, _path_score(e, a, path))
    return fal - fcc


def viterbi_enum(emissions, transitions=None):
    """Best framewise path score and the set of paths achieving it."""
    e = np.asarray(emissions, dtype=np.float64)
    t_frames, n = e.shape
    a = np.zeros((n, n)) if transitions is None else np.asarray(transitions, np.float64)
    best = -np.inf
    argmax = []
    for path in itertools.product(range(n), repeat=t_frames):
        score = _path_score(e, a, path)
        if score > best + 1e-12:
            best = score
            argmax = [list(path)]
        elif score >= best - 1e-12:
            argmax.append(list(path))
    return best, argmax


# --- decoder enumeration ----------------------------------------------------------

def _parses(collapsed, spell_words, silence_id, min_inner_sil):
    """All word sequences the collapsed token string can spell.

    Words separated by >= min_inner_sil silence tokens; leading and trailing
    silence is free. Yields lists of words (ambiguity preserved).
    """
    out = []

    def rec(i, words, sils_since_word):
        if i == len(collapsed):
            out.append(list(words))
            return
        if silence_id is not None and collapsed[i] == silence_id:
            nxt = None if sils_since_word is None else sils_since_word + 1
            rec(i + 1, words, nxt)
            return
        if sils_since_word is not None and sils_since_word < min_inner_sil:
            return
        for spelling, cands in spell_words.items():
            width = len(spelling)
            if tuple(collapsed[i : i + width]) == spelling:
                for word in cands:
                    words.append(word)
                    rec(i + width, words, 0)
                    words.pop()

    rec(0, [], None)
    return out


def lm_sequence_ln(lm, words):
    """ln P of the word sequence including the end-of-sentence transition."""
    if lm is None:
        return 0.0
    state = lm.start_state()
    total = 0.0
    for word in words:
        state, p10 = lm.score(state, lm.word_id(word))
        total += p10
    total += lm.finish(state)
    return total * LN10


def decode_enum(emissions, lexicon, *, lm=None, lm_weight=0.0, word_score=0.0,
                criterion_kind="ctc", silence_id=None, blank_id=None,
                transitions=None, word_boundary=None):
    """Exhaustive best (score, {word tuples}) over all framewise paths.

    A path is valid for a word sequence when its collapsed form (consecutive
    duplicates merged, blanks dropped for CTC) is the concatenation of the
    words' spellings with silence separators: at least one inner silence in
    silence-boundary mode, none required in terminal mode.
    """
    e = np.asarray(emissions, dtype=np.float64)
    t_frames, n = e.shape
    is_asg = criterion_kind == "asg"
    if word_boundary is None:
        word_boundary = "silence" if is_asg else "terminal"
    if not is_asg and blank_id is None:
        blank_id = n - 1
    a = None
    if is_asg:
        a = np.asarray(transitions, dtype=np.float64)
    min_inner = 1 if word_boundary == "silence" else 0

    spell_words = {}
    for word, spellings in lexicon.items():
        for s in spellings:
            spell_words.setdefault(tuple(s), []).append(word)

    lm_cache = {}

    def seq_ln(words):
        key = tuple(words)
        if key not in lm_cache:
            lm_cache[key] = lm_sequence_ln(lm, words)
        return lm_cache[key]

    best = -np.inf
    best_words = set()
    for path in itertools.product(range(n), repeat=t_frames):
        if is_asg:
            am = _path_score(e, a, path)
            collapsed = collapse_asg(path)
        else:
            am = sum(e[t][path[t]] for t in range(t_frames))
            collapsed = collapse_ctc(path, blank_id)
        for words in _parses(collapsed, spell_words, silence_id, min_inner):
            total = am + lm_weight * seq_ln(words) + word_score * len(words)
            if total > best + 1e-9:
                best = total
                best_words = {tuple(words)}
            elif total >= best - 1e-9:
                best = max(best, total)
                best_words.add(tuple(words))
    return best, best_words
