"""Lexicon-constrained one-pass beam search over acoustic emissions.

The search walks a trie of word spellings frame by frame, keeping at most
beam_size hypotheses keyed by (trie node, LM state, last token). Word
boundaries follow the criterion: CTC commits a word the moment a spelling
completes (blank separates repeated letters), ASG commits by consuming the
silence token after a complete spelling. Scores combine acoustic emissions
(plus ASG transitions), alpha times the LM log probability in natural log,
and a word insertion term beta per word. Trie nodes may carry a smeared
score, the best descendant unigram LM score, used as an in-word lookahead
and replaced by the true contextual LM score when the word commits.

One decode call is strictly sequential; Trie, NGramModel, and emission
matrices are immutable, so utterances may be decoded from many threads.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DecodeError,
    EmissionsFormatError,
    LexiconError,
    OovError,
)
from .lexicon import TokenTable

LN10 = math.log(10.0)
logger = logging.getLogger(__name__)


# --- trie -------------------------------------------------------------------

class TrieNode:
    __slots__ = ("children", "terminals", "smeared")

    def __init__(self):
        self.children = {}
        self.terminals = []
        self.smeared = -np.inf


class Trie:
    """Prefix tree over token spellings; decoder states live on its nodes."""

    def __init__(self):
        self.root = TrieNode()
        self.num_nodes = 1
        self.max_token = -1
        self._csr = None

    def insert(self, spelling, word: str):
        if not spelling:
            raise LexiconError(f"word {word!r} has an empty spelling")
        node = self.root
        for tok in spelling:
            tok = int(tok)
            if tok < 0:
                raise LexiconError(f"word {word!r} has a negative token id")
            self.max_token = max(self.max_token, tok)
            child = node.children.get(tok)
            if child is None:
                child = TrieNode()
                node.children[tok] = child
                self.num_nodes += 1
            node = child
        if word not in node.terminals:
            node.terminals.append(word)
        self._csr = None

    def smear(self, unigram_ln):
        """Fill smeared_score bottom-up: max of own terminals and children.

        unigram_ln maps a word to its unigram LM score (log10); any word it
        cannot score contributes -inf.
        """
        def visit(node):
            best = -np.inf
            for w in node.terminals:
                best = max(best, unigram_ln(w))
            for child in node.children.values():
                best = max(best, visit(child))
            node.smeared = best
            return best

        visit(self.root)
        self._csr = None

    def compile(self) -> "_CompiledTrie":
        if self._csr is None:
            self._csr = _CompiledTrie(self)
        return self._csr


class _CompiledTrie:
    """Flat array view of a Trie for the vectorized search inner loop."""

    def __init__(self, trie: Trie):
        order = []
        stack = [trie.root]
        while stack:
            node = stack.pop()
            order.append(node)
            for tok in sorted(node.children, reverse=True):
                stack.append(node.children[tok])
        index = {id(node): i for i, node in enumerate(order)}
        n = len(order)
        self.num_nodes = n
        self.max_token = trie.max_token
        self.child_start = np.zeros(n, dtype=np.int64)
        self.child_count = np.zeros(n, dtype=np.int64)
        tokens, child_ids = [], []
        for i, node in enumerate(order):
            self.child_start[i] = len(tokens)
            self.child_count[i] = len(node.children)
            for tok in sorted(node.children):
                tokens.append(tok)
                child_ids.append(index[id(node.children[tok])])
        self.child_tokens = np.asarray(tokens, dtype=np.int64)
        self.child_nodes = np.asarray(child_ids, dtype=np.int64)
        self.terminals = [list(node.terminals) for node in order]
        self.is_terminal = np.asarray([bool(t) for t in self.terminals])
        # flat word table so the search can expand all pending commits at once
        self.term_start = np.zeros(n, dtype=np.int64)
        self.term_count = np.zeros(n, dtype=np.int64)
        self.term_words: list = []
        for i, words in enumerate(self.terminals):
            self.term_start[i] = len(self.term_words)
            self.term_count[i] = len(words)
            self.term_words.extend(words)
        # smeared scores are log10; the search works in natural log. The
        # root's lookahead is pinned to zero: no partial word is pending.
        smear = np.asarray([node.smeared for node in order], dtype=np.float64)
        smear = np.where(np.isfinite(smear), smear * LN10, 0.0)
        smear[0] = 0.0
        self.smear_ln = smear


def build_trie(lexicon: dict, table: TokenTable, lm=None, smear: bool = True) -> Trie:
    """Trie over all lexicon spellings; token ids validated against table.

    Words the LM cannot score (OOV without <unk>) are dropped with a
    warning. With smear on and an LM given, nodes carry max descendant
    unigram scores; otherwise smeared scores stay at zero effect.
    """
    trie = Trie()
    for word, spellings in lexicon.items():
        if lm is not None:
            try:
                lm.word_id(word)
            except OovError:
                logger.warning("dropping word %r: not in LM vocabulary", word)
                continue
        for spelling in spellings:
            for tok in spelling:
                if not 0 <= int(tok) < len(table):
                    raise LexiconError(
                        f"word {word!r} spelling uses token id {tok} outside the table"
                    )
            trie.insert(spelling, word)
    if trie.num_nodes == 1:
        raise LexiconError("no lexicon word survived trie construction")
    if smear and lm is not None:
        def unigram(word):
            try:
                return lm.unigram_score(word)
            except OovError:
                return -np.inf

        trie.smear(unigram)
    else:
        def zero(_):
            return 0.0

        trie.smear(zero)
    return trie


# --- options and results ------------------------------------------------------

@dataclass
class DecodeOptions:
    lm_weight: float = 0.0          # alpha
    word_score: float = 0.0         # beta
    beam_size: int = 50
    beam_threshold: float = math.inf
    silence_id: Optional[int] = None
    criterion_kind: str = "ctc"
    blank_id: Optional[int] = None  # default: last emission column
    merge_mode: str = "max"
    word_boundary: Optional[str] = None  # default: terminal for ctc, silence for asg
    nbest: int = 10

    def __post_init__(self):
        if self.lm_weight < 0:
            raise ConfigError(f"lm_weight must be >= 0, got {self.lm_weight}")
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if not self.beam_threshold > 0:
            raise ConfigError(f"beam_threshold must be > 0, got {self.beam_threshold}")
        if self.criterion_kind not in ("ctc", "asg"):
            raise ConfigError(f"unknown criterion kind {self.criterion_kind!r}")
        if self.merge_mode not in ("max", "logadd"):
            raise ConfigError(f"unknown merge mode {self.merge_mode!r}")
        if self.word_boundary not in (None, "terminal", "silence"):
            raise ConfigError(f"unknown word boundary rule {self.word_boundary!r}")
        if self.nbest < 1:
            raise ConfigError(f"nbest must be >= 1, got {self.nbest}")

    @property
    def boundary(self) -> str:
        if self.word_boundary is not None:
            return self.word_boundary
        return "terminal" if self.criterion_kind == "ctc" else "silence"


@dataclass
class Hypothesis:
    words: list
    tokens: list
    score: float
    am_score: float
    lm_score: float
    words_emitted: int


@dataclass
class DecodeResult:
    words: list
    tokens: list
    score: float
    am_score: float
    lm_score: float
    nbest: list = field(default_factory=list)


# --- search -------------------------------------------------------------------

def _expand(nodes, starts, counts):
    """Flatten a ragged gather: expand each node's CSR slot range.

    Returns (rep, slot): rep[i] indexes into nodes, slot[i] into the flat table.
    """
    c = counts[nodes]
    total = int(c.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    rep = np.repeat(np.arange(nodes.size), c)
    offsets = np.cumsum(c) - c
    within = np.arange(total) - np.repeat(offsets, c)
    return rep, starts[nodes][rep] + within


def decode(emissions, trie: Trie, lm, options: DecodeOptions, transitions=None) -> DecodeResult:
    """Best word sequence under sum(am) + alpha*ln P_LM + beta*|words|.

    With merge_mode "max" the returned score is the exact maximum over all
    framewise paths realizing the winning transcription (given a wide enough
    beam). With "logadd" merged totals sum path masses, so the total may
    exceed am + alpha*lm + beta*|words| of the winning path.
    """
    e = np.asarray(emissions, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 1:
        raise ContractError(f"emissions must be T-by-N with T >= 1, got shape {e.shape}")
    if not np.isfinite(e).all():
        raise ContractError("emissions contain non-finite values")
    t_frames, n = e.shape

    csr = trie.compile()
    if csr.num_nodes <= 1:
        raise ContractError("empty trie")
    if csr.max_token >= n:
        raise DecodeError(
            f"trie token ids need {csr.max_token + 1} emission columns, "
            f"emissions have {n}"
        )

    is_asg = options.criterion_kind == "asg"
    if is_asg and transitions is None:
        raise ContractError("ASG decoding needs a transition matrix")
    if not is_asg and transitions is not None:
        raise ContractError("CTC decoding takes no transition matrix")
    a = None
    if is_asg:
        a = np.asarray(transitions, dtype=np.float64)
        if a.shape != (n, n):
            raise ContractError(f"transitions must be {n}x{n}, got {a.shape}")

    blank = None
    if not is_asg:
        blank = options.blank_id if options.blank_id is not None else n - 1
        if not 0 <= blank < n:
            raise ConfigError(f"blank id {blank} outside [0, {n})")
    sil = options.silence_id
    if sil is not None and not 0 <= sil < n:
        raise ConfigError(f"silence id {sil} outside [0, {n})")
    boundary = options.boundary
    if boundary == "silence" and sil is None:
        raise ConfigError("silence word boundary needs a silence token id")

    alpha = options.lm_weight
    beta = options.word_score

    lm_states = [lm.start_state() if lm is not None else ()]
    lm_index = {lm_states[0]: 0}
    commit_cache: dict = {}
    finish_cache: dict = {}

    def lm_commit(state_idx: int, word: str):
        key = (state_idx, word)
        hit = commit_cache.get(key)
        if hit is not None:
            return hit
        if lm is None:
            out = (state_idx, 0.0)
        else:
            try:
                wid = lm.word_id(word)
            except OovError:
                commit_cache[key] = None
                return None
            new_state, p10 = lm.score(lm_states[state_idx], wid)
            idx = lm_index.get(new_state)
            if idx is None:
                idx = len(lm_states)
                lm_states.append(new_state)
                lm_index[new_state] = idx
            out = (idx, p10 * LN10)
        commit_cache[key] = out
        return out

    def lm_finish(state_idx: int) -> float:
        hit = finish_cache.get(state_idx)
        if hit is None:
            hit = 0.0 if lm is None else lm.finish(lm_states[state_idx]) * LN10
            finish_cache[state_idx] = hit
        return hit

    # survivors: parallel arrays, one row per live hypothesis
    s_node = np.zeros(1, dtype=np.int64)
    s_lm = np.zeros(1, dtype=np.int64)
    s_last = np.full(1, -1, dtype=np.int64)
    s_tot = np.zeros(1)
    s_am = np.zeros(1)
    s_lmc = np.zeros(1)
    s_words = np.zeros(1, dtype=np.int64)
    frames = []  # per frame: (parent, token, word_idx, committed word list)

    # dense (lm state, word slot) memo so repeat commits cost one gather;
    # -2 marks a pair not scored yet, -1 a word the LM cannot score
    n_slots = len(csr.term_words)
    memo_state = np.empty((0, n_slots), dtype=np.int64)
    memo_lnp = np.empty((0, n_slots))

    def memo_rows(rows_needed: int):
        nonlocal memo_state, memo_lnp
        have = memo_state.shape[0]
        if rows_needed <= have:
            return
        add = max(rows_needed, 2 * have, 8) - have
        memo_state = np.vstack([memo_state, np.full((add, n_slots), -2, dtype=np.int64)])
        memo_lnp = np.vstack([memo_lnp, np.zeros((add, n_slots))])

    def commit_bulk(nodes, lm_rows, frame_words):
        """Expand every pending word at the given terminal nodes through the LM.

        Returns (sel, new_lm, d_lm, word_idx): sel indexes back into nodes,
        one entry per scorable (hypothesis, word) pair, in hypothesis-then-word
        order so downstream tie-breaking is stable.
        """
        trep, slots = _expand(nodes, csr.term_start, csr.term_count)
        empty = np.empty(0, dtype=np.int64)
        if trep.size == 0:
            return empty, empty, np.empty(0), empty
        lm_ids = lm_rows[trep]
        memo_rows(len(lm_states))
        st = memo_state[lm_ids, slots]
        unseen = np.nonzero(st == -2)[0]
        if unseen.size:
            for j in unseen.tolist():
                sidx, slot = int(lm_ids[j]), int(slots[j])
                res = lm_commit(sidx, csr.term_words[slot])
                if res is None:
                    memo_state[sidx, slot] = -1
                else:
                    memo_state[sidx, slot] = res[0]
                    memo_lnp[sidx, slot] = res[1]
            st = memo_state[lm_ids, slots]
        ok = st >= 0
        sel = trep[ok]
        if sel.size == 0:
            return empty, empty, np.empty(0), empty
        lnp = memo_lnp[lm_ids[ok], slots[ok]]
        d_lm = lnp - csr.smear_ln[nodes[sel]]
        base = len(frame_words)
        frame_words.extend(csr.term_words[s] for s in slots[ok].tolist())
        widx = np.arange(base, base + sel.size, dtype=np.int64)
        return sel, st[ok], d_lm, widx

    for t in range(t_frames):
        row = e[t]
        frags = []  # (parent, node, lm, last, tot, am, lmc, words, word_idx)
        frame_words: list = []
        count = len(s_node)
        neg_one = np.full(count, -1, dtype=np.int64)

        # stay on the last token
        mask = s_last >= 0
        if mask.any():
            idx = np.nonzero(mask)[0]
            tok = s_last[idx]
            am_add = row[tok]
            if is_asg:
                am_add = am_add + a[tok, tok]
            frags.append((idx, s_node[idx], s_lm[idx], tok, s_tot[idx] + am_add,
                          s_am[idx] + am_add, s_lmc[idx], s_words[idx],
                          neg_one[: idx.size]))

        # blank (CTC only); a blank after a blank is already the stay case
        if blank is not None:
            mask = s_last != blank
            if mask.any():
                idx = np.nonzero(mask)[0]
                am_add = row[blank]
                frags.append((idx, s_node[idx], s_lm[idx],
                              np.full(idx.size, blank, dtype=np.int64),
                              s_tot[idx] + am_add, s_am[idx] + am_add,
                              s_lmc[idx], s_words[idx], neg_one[: idx.size]))

        # silence at the root (leading / between-word silence frames)
        if sil is not None:
            mask = (s_node == 0) & (s_last != sil)
            if mask.any():
                idx = np.nonzero(mask)[0]
                am_add = np.full(idx.size, row[sil])
                if is_asg:
                    prev = s_last[idx]
                    am_add = am_add + np.where(prev >= 0, a[sil, np.maximum(prev, 0)], 0.0)
                frags.append((idx, s_node[idx], s_lm[idx],
                              np.full(idx.size, sil, dtype=np.int64),
                              s_tot[idx] + am_add, s_am[idx] + am_add,
                              s_lmc[idx], s_words[idx], neg_one[: idx.size]))

        # advance one trie edge
        rep, slot = _expand(s_node, csr.child_start, csr.child_count)
        if rep.size:
            tok = csr.child_tokens[slot]
            child = csr.child_nodes[slot]
            keep = tok != s_last[rep]
            rep, tok, child = rep[keep], tok[keep], child[keep]
        if rep.size:
            am_add = row[tok]
            if is_asg:
                prev = s_last[rep]
                am_add = am_add + np.where(prev >= 0, a[tok, np.maximum(prev, 0)], 0.0)
            d_smear = csr.smear_ln[child] - csr.smear_ln[s_node[rep]]
            adv_tot = s_tot[rep] + am_add + alpha * d_smear
            adv_am = s_am[rep] + am_add
            adv_lmc = s_lmc[rep] + d_smear
            frags.append((rep, child, s_lm[rep], tok, adv_tot, adv_am, adv_lmc,
                          s_words[rep], np.full(rep.size, -1, dtype=np.int64)))

            if boundary == "terminal":
                # a completed spelling commits in the same frame
                ti = np.nonzero(csr.is_terminal[child])[0]
                if ti.size:
                    sel, new_lm, d_lm, widx = commit_bulk(
                        child[ti], s_lm[rep[ti]], frame_words)
                    if sel.size:
                        src = ti[sel]
                        frags.append((rep[src], np.zeros(sel.size, dtype=np.int64),
                                      new_lm, tok[src],
                                      adv_tot[src] + alpha * d_lm + beta,
                                      adv_am[src], adv_lmc[src] + d_lm,
                                      s_words[rep[src]] + 1, widx))

        # consume silence at a terminal node: commits the pending word
        if boundary == "silence":
            hi = np.nonzero(csr.is_terminal[s_node])[0]
            if hi.size:
                sel, new_lm, d_lm, widx = commit_bulk(
                    s_node[hi], s_lm[hi], frame_words)
                if sel.size:
                    src = hi[sel]
                    am_add = np.full(sel.size, row[sil])
                    if is_asg:
                        prev = s_last[src]
                        am_add = am_add + np.where(prev >= 0, a[sil, np.maximum(prev, 0)], 0.0)
                    frags.append((src, np.zeros(sel.size, dtype=np.int64),
                                  new_lm, np.full(sel.size, sil, dtype=np.int64),
                                  s_tot[src] + am_add + alpha * d_lm + beta,
                                  s_am[src] + am_add, s_lmc[src] + d_lm,
                                  s_words[src] + 1, widx))

        if not frags:
            raise DecodeError(f"search dead-ended at frame {t}")
        c_parent = np.concatenate([f[0] for f in frags])
        c_node = np.concatenate([f[1] for f in frags])
        c_lm = np.concatenate([f[2] for f in frags])
        c_last = np.concatenate([f[3] for f in frags])
        c_tot = np.concatenate([f[4] for f in frags])
        c_am = np.concatenate([f[5] for f in frags])
        c_lmc = np.concatenate([f[6] for f in frags])
        c_words = np.concatenate([f[7] for f in frags])
        c_word = np.concatenate([f[8] for f in frags])

        # merge hypotheses sharing (node, lm state, last token); the stable
        # key sort keeps emission order inside each group, so the earliest
        # candidate attaining the group max is the deterministic survivor
        n_lm = len(lm_states)
        key = (c_node * n_lm + c_lm) * (n + 2) + (c_last + 1)
        order = np.argsort(key, kind="stable")
        k_sorted = key[order]
        boundary_mask = np.empty(k_sorted.size, dtype=bool)
        boundary_mask[0] = True
        np.not_equal(k_sorted[1:], k_sorted[:-1], out=boundary_mask[1:])
        first = np.nonzero(boundary_mask)[0]
        group_counts = np.diff(np.append(first, k_sorted.size))
        sorted_tot = c_tot[order]
        gmax = np.maximum.reduceat(sorted_tot, first)
        hit = np.nonzero(sorted_tot == np.repeat(gmax, group_counts))[0]
        group_of = np.repeat(np.arange(first.size), group_counts)[hit]
        lead = np.empty(first.size, dtype=np.int64)
        lead[group_of[::-1]] = hit[::-1]  # reversed write: first hit per group wins
        rep_idx = order[lead]
        if options.merge_mode == "max":
            tot_m = gmax
        else:
            sums = np.add.reduceat(np.exp(sorted_tot - np.repeat(gmax, group_counts)), first)
            tot_m = gmax + np.log(sums)

        keep = tot_m >= tot_m.max() - options.beam_threshold
        rep_idx, tot_m = rep_idx[keep], tot_m[keep]
        if rep_idx.size > options.beam_size:
            sel = np.argpartition(-tot_m, options.beam_size - 1)[: options.beam_size]
            sel.sort()  # survivors stay in merge-key order
            rep_idx, tot_m = rep_idx[sel], tot_m[sel]

        s_node = c_node[rep_idx]
        s_lm = c_lm[rep_idx]
        s_last = c_last[rep_idx]
        s_tot = tot_m
        s_am = c_am[rep_idx]
        s_lmc = c_lmc[rep_idx]
        s_words = c_words[rep_idx]
        frames.append((c_parent[rep_idx], c_last[rep_idx], c_word[rep_idx], frame_words))

    # finalization: root hypotheses end the sentence; terminal-node
    # hypotheses first commit their pending word
    finals = []
    for i in range(len(s_node)):
        node_i = int(s_node[i])
        if node_i == 0:
            fin = lm_finish(int(s_lm[i]))
            finals.append((s_tot[i] + alpha * fin, s_am[i], s_lmc[i] + fin,
                           int(s_words[i]), i, None))
        if csr.is_terminal[node_i]:
            for word in csr.terminals[node_i]:
                res = lm_commit(int(s_lm[i]), word)
                if res is None:
                    continue
                new_lm, lnp = res
                d_lm = lnp - csr.smear_ln[node_i]
                fin = lm_finish(new_lm)
                finals.append((s_tot[i] + alpha * (d_lm + fin) + beta,
                               s_am[i], s_lmc[i] + d_lm + fin,
                               int(s_words[i]) + 1, i, word))
    if not finals:
        raise DecodeError("no complete hypothesis reached the final frame")
    finals.sort(key=lambda f: (-f[0], f[4]))

    def materialize(entry) -> Hypothesis:
        tot, am, lmc, wcount, idx, extra = entry
        toks = []
        words_rev = []
        for parent, token, word_idx, wlist in reversed(frames):
            toks.append(int(token[idx]))
            w = int(word_idx[idx])
            if w >= 0:
                words_rev.append(wlist[w])
            idx = int(parent[idx])
        toks.reverse()
        words = words_rev[::-1]
        if extra is not None:
            words.append(extra)
        return Hypothesis(words=words, tokens=toks, score=float(tot),
                          am_score=float(am), lm_score=float(lmc),
                          words_emitted=wcount)

    nbest: list = []
    seen = set()
    limit = min(options.nbest, options.beam_size)
    for entry in finals:
        hyp = materialize(entry)
        key = tuple(hyp.words)
        if key in seen:
            continue
        seen.add(key)
        nbest.append(hyp)
        if len(nbest) >= limit:
            break
    best = nbest[0]
    return DecodeResult(words=best.words, tokens=best.tokens, score=best.score,
                        am_score=best.am_score, lm_score=best.lm_score, nbest=nbest)


# --- emissions serialization ---------------------------------------------------

EMISSIONS_MAGIC = b"W2LE"
EMISSIONS_VERSION = 1


def dump_emissions(emissions, path):
    """Write a T-by-N float32 score matrix in the portable binary layout."""
    e = np.ascontiguousarray(np.asarray(emissions), dtype="<f4")
    if e.ndim != 2:
        raise ContractError(f"emissions must be 2-D, got shape {e.shape}")
    t_frames, n = e.shape
    if t_frames < 1 or n < 1:
        raise ContractError(f"refusing to write empty emissions of shape {e.shape}")
    with open(path, "wb") as f:
        f.write(EMISSIONS_MAGIC)
        f.write(struct.pack("<III", EMISSIONS_VERSION, t_frames, n))
        f.write(e.tobytes())


def load_emissions(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise EmissionsFormatError(f"file too short ({len(raw)} bytes) for a header")
    if raw[:4] != EMISSIONS_MAGIC:
        raise EmissionsFormatError(f"bad magic {raw[:4]!r}, expected {EMISSIONS_MAGIC!r}")
    version, t_frames, n = struct.unpack_from("<III", raw, 4)
    if version != EMISSIONS_VERSION:
        raise EmissionsFormatError(f"unsupported version {version}")
    expected = 16 + 4 * t_frames * n
    if len(raw) != expected:
        raise EmissionsFormatError(
            f"payload size mismatch: header implies {expected} bytes, file has {len(raw)}"
        )
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(t_frames, n).copy()
