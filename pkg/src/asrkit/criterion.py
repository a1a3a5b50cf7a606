"""Sequence criteria: CTC, ASG with learnable transitions, Viterbi decoding.

All dynamic programs run in log space on float64 internals and hand back
float32 gradients, so losses stay finite for emissions scaled by a few
thousand either way. Losses are per-utterance sums; batch averaging is the
trainer's job.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Variable
from .errors import ContractError, InfeasibleTargetError, NumericError, TargetError
from .lexicon import REPETITION_SYMBOL, TokenTable

NEG_INF = -np.inf


def _check_emissions(emissions) -> np.ndarray:
    e = np.asarray(emissions, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 1 or e.shape[1] < 1:
        raise ContractError(f"emissions must be T-by-N with T,N >= 1, got shape {e.shape}")
    if not np.isfinite(e).all():
        raise NumericError("emissions contain non-finite values")
    return e


def _check_target(target, n_tokens: int) -> np.ndarray:
    y = np.asarray(list(target), dtype=np.int64)
    if y.ndim != 1:
        raise TargetError("target must be a flat sequence of token ids")
    if y.size and (y.min() < 0 or y.max() >= n_tokens):
        raise TargetError(
            f"target ids must lie in [0, {n_tokens}), got range "
            f"[{y.min()}, {y.max()}]"
        )
    return y


@dataclass
class LossOutput:
    loss: float
    grad_emissions: np.ndarray
    grad_transitions: Optional[np.ndarray] = None


def validate_target(tokens, criterion_kind: str, table: TokenTable):
    """Canonicalize a target token sequence for the given criterion.

    CTC targets pass through unchanged (the blank id lives outside the
    table, so it can never appear). ASG targets get the second of each
    consecutive duplicate pair replaced by the repetition token, applied
    left to right, so "a a a" becomes "a <2> a".
    """
    ids = [int(t) for t in tokens]
    for t in ids:
        if not 0 <= t < len(table):
            raise TargetError(f"target id {t} outside token table of size {len(table)}")
    if criterion_kind == "ctc":
        return ids
    if criterion_kind != "asg":
        raise ContractError(f"unknown criterion kind {criterion_kind!r}")
    rep = table.rep_id
    out = []
    for t in ids:
        if out and out[-1] == t:
            if rep is None:
                raise TargetError(
                    f"ASG target repeats {table.symbol(t)!r} but the token table "
                    f"has no {REPETITION_SYMBOL!r} symbol"
                )
            out.append(rep)
        else:
            out.append(t)
    return out


# --- CTC --------------------------------------------------------------------

def ctc_loss_grad(emissions, target, blank_id: int) -> LossOutput:
    """Negative log marginal over all blank-augmented alignments of target.

    Emissions rows must be log-normalized; the check is loose (|logsumexp|
    <= 1e-2 per row) so small probes around a normalized point stay legal.
    Gradients come from the forward-backward posteriors over the 2L+1-state
    lattice: d loss / d e[t][k] = -sum of state posteriors labeled k at t.
    """
    e = _check_emissions(emissions)
    t_frames, n = e.shape
    if not 0 <= blank_id < n:
        raise ContractError(f"blank id {blank_id} outside [0, {n})")
    row_lse = _logsumexp(e, axis=1)
    if np.abs(row_lse).max() > 1e-2:
        raise ContractError(
            "CTC emissions rows must be log-normalized "
            f"(worst row logsumexp = {row_lse[np.abs(row_lse).argmax()]:.4f})"
        )
    y = _check_target(target, n)
    if np.any(y == blank_id):
        raise TargetError(f"CTC target contains the blank id {blank_id}")
    length = y.size
    repeats = int(np.sum(y[1:] == y[:-1])) if length > 1 else 0
    if t_frames < length + repeats:
        raise InfeasibleTargetError(
            f"target of length {length} with {repeats} consecutive repeats "
            f"needs at least {length + repeats} frames, got {t_frames}"
        )

    s = 2 * length + 1
    lab = np.full(s, blank_id, dtype=np.int64)
    lab[1::2] = y
    # alpha[s] may arrive from s, s-1, and (if the label differs from s-2's
    # and is not blank) s-2
    skip_ok = np.zeros(s, dtype=bool)
    if length > 1:
        skip_ok[3::2] = y[1:] != y[:-1]

    alpha = np.full((t_frames, s), NEG_INF)
    alpha[0, 0] = e[0, blank_id]
    if s > 1:
        alpha[0, 1] = e[0, lab[1]]
    for t in range(1, t_frames):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        if s > 2:
            acc[2:] = np.where(
                skip_ok[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:]
            )
        alpha[t] = e[t, lab] + acc

    if s > 1:
        log_z = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        log_z = alpha[-1, -1]
    if not np.isfinite(log_z):
        raise InfeasibleTargetError("no feasible alignment (forward score is -inf)")

    beta = np.full((t_frames, s), NEG_INF)
    beta[-1, -1] = e[-1, lab[-1]]
    if s > 1:
        beta[-1, -2] = e[-1, lab[-2]]
    for t in range(t_frames - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        if s > 2:
            acc[:-2] = np.where(
                skip_ok[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2]
            )
        beta[t] = e[t, lab] + acc

    # alpha and beta both include e[t][lab], so subtract one copy
    posterior = np.exp(alpha + beta - e[:, lab] - log_z)
    grad = np.zeros((t_frames, n))
    for t in range(t_frames):
        np.add.at(grad[t], lab, -posterior[t])
    return LossOutput(loss=float(-log_z), grad_emissions=grad.astype(np.float32))


# --- ASG --------------------------------------------------------------------

def asg_loss_grad(emissions, target, transitions) -> LossOutput:
    """Fully-connected path score minus forced-alignment score.

    transitions[i][j] scores moving from token j at frame t-1 to token i at
    frame t. Gradients for both emissions and transitions are differences of
    posterior marginals between the full graph and the constrained graph.
    """
    e = _check_emissions(emissions)
    t_frames, n = e.shape
    a = np.asarray(transitions, dtype=np.float64)
    if a.shape != (n, n):
        raise ContractError(f"transitions must be {n}x{n}, got {a.shape}")
    if not np.isfinite(a).all():
        raise NumericError("transitions contain non-finite values")
    y = _check_target(target, n)
    length = y.size
    if length == 0:
        raise TargetError("ASG target must be non-empty")
    if length > 1 and np.any(y[1:] == y[:-1]):
        raise ContractError("ASG target has consecutive duplicates; canonicalize first")
    if t_frames < length:
        raise InfeasibleTargetError(
            f"target of length {length} needs at least {length} frames, got {t_frames}"
        )

    # constrained graph (forced alignment to the target)
    fa = np.full((t_frames, length), NEG_INF)
    fa[0, 0] = e[0, y[0]]
    stay = a[y, y]
    step = a[y[1:], y[:-1]] if length > 1 else np.zeros(0)
    for t in range(1, t_frames):
        prev = fa[t - 1]
        acc = prev + stay
        if length > 1:
            acc[1:] = np.logaddexp(acc[1:], prev[:-1] + step)
        fa[t] = e[t, y] + acc
    fcc = fa[-1, -1]

    fb = np.full((t_frames, length), NEG_INF)
    fb[-1, -1] = e[-1, y[-1]]
    for t in range(t_frames - 2, -1, -1):
        nxt = fb[t + 1]
        acc = nxt + stay
        if length > 1:
            acc[:-1] = np.logaddexp(acc[:-1], nxt[1:] + step)
        fb[t] = e[t, y] + acc

    con_node = np.exp(fa + fb - e[:, y] - fcc)
    con_grad_e = np.zeros((t_frames, n))
    for t in range(t_frames):
        np.add.at(con_grad_e[t], y, con_node[t])
    con_grad_a = np.zeros((n, n))
    for t in range(1, t_frames):
        stay_post = np.exp(fa[t - 1] + stay + fb[t] - fcc)
        np.add.at(con_grad_a, (y, y), stay_post)
        if length > 1:
            step_post = np.exp(fa[t - 1, :-1] + step + fb[t, 1:] - fcc)
            np.add.at(con_grad_a, (y[1:], y[:-1]), step_post)

    # full graph (normalizer over every token path)
    ga = np.empty((t_frames, n))
    ga[0] = e[0]
    for t in range(1, t_frames):
        ga[t] = e[t] + _logsumexp(ga[t - 1][None, :] + a, axis=1)
    fal = _logsumexp(ga[-1])

    gb = np.empty((t_frames, n))
    gb[-1] = e[-1]
    for t in range(t_frames - 2, -1, -1):
        gb[t] = e[t] + _logsumexp(gb[t + 1][:, None] + a, axis=0)

    full_grad_e = np.exp(ga + gb - e - fal)
    full_grad_a = np.zeros((n, n))
    for t in range(1, t_frames):
        full_grad_a += np.exp(ga[t - 1][None, :] + a + gb[t][:, None] - fal)

    return LossOutput(
        loss=float(fal - fcc),
        grad_emissions=(full_grad_e - con_grad_e).astype(np.float32),
        grad_transitions=(full_grad_a - con_grad_a).astype(np.float32),
    )


def _logsumexp(x, axis=None):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out if axis is not None else float(out)


# --- best path and collapse --------------------------------------------------

def viterbi(emissions, transitions=None):
    """Highest-scoring framewise path under e_t(i) + A[i][j].

    Returns (path ids as an int array of length T, score). Ties break toward
    the lower token id.
    """
    e = _check_emissions(emissions)
    t_frames, n = e.shape
    if transitions is None:
        a = np.zeros((n, n))
    else:
        a = np.asarray(transitions, dtype=np.float64)
        if a.shape != (n, n):
            raise ContractError(f"transitions must be {n}x{n}, got {a.shape}")
    dp = e[0].copy()
    back = np.zeros((t_frames, n), dtype=np.int64)
    for t in range(1, t_frames):
        cand = dp[None, :] + a  # cand[i][j]: arrive at i from j
        back[t] = np.argmax(cand, axis=1)
        dp = e[t] + cand[np.arange(n), back[t]]
    best = int(np.argmax(dp))
    path = np.empty(t_frames, dtype=np.int64)
    path[-1] = best
    for t in range(t_frames - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, float(dp[best])


def collapse_path(path, criterion_kind: str, blank_id=None, rep_id=None):
    """Map a framewise path to an output token sequence.

    CTC: drop consecutive repeats, then drop blanks. ASG: drop consecutive
    repeats, then expand the repetition token into a copy of its
    predecessor.
    """
    ids = [int(t) for t in path]
    deduped = [t for i, t in enumerate(ids) if i == 0 or t != ids[i - 1]]
    if criterion_kind == "ctc":
        if blank_id is None:
            raise ContractError("CTC collapse needs blank_id")
        return [t for t in deduped if t != blank_id]
    if criterion_kind != "asg":
        raise ContractError(f"unknown criterion kind {criterion_kind!r}")
    out = []
    for t in deduped:
        if rep_id is not None and t == rep_id:
            if not out:
                raise ContractError("repetition token with no preceding token")
            out.append(out[-1])
        else:
            out.append(t)
    return out


# --- trainer-facing adapters --------------------------------------------------

class CtcCriterion:
    """CTC over a token table, with the blank appended as the last output row."""

    kind = "ctc"

    def __init__(self, table: TokenTable):
        self.table = table
        self.blank_id = len(table)
        self.n_outputs = len(table) + 1

    def prepare_target(self, token_ids):
        return validate_target(token_ids, "ctc", self.table)

    def loss_grad(self, emissions, target) -> LossOutput:
        return ctc_loss_grad(emissions, target, self.blank_id)

    def params(self) -> dict:
        return {}

    def viterbi_path(self, emissions):
        path, _ = viterbi(emissions)
        return path

    def collapse(self, path):
        return collapse_path(path, "ctc", blank_id=self.blank_id)


class AsgCriterion:
    """ASG over a token table with a learnable transition matrix."""

    kind = "asg"

    def __init__(self, table: TokenTable):
        self.table = table
        self.n_outputs = len(table)
        self.transitions = Variable(
            np.zeros((self.n_outputs, self.n_outputs), dtype=np.float32),
            requires_grad=True,
        )

    def prepare_target(self, token_ids):
        return validate_target(token_ids, "asg", self.table)

    def loss_grad(self, emissions, target) -> LossOutput:
        return asg_loss_grad(emissions, target, self.transitions.value.data)

    def params(self) -> dict:
        return {"criterion.transitions": self.transitions}

    def viterbi_path(self, emissions):
        path, _ = viterbi(emissions, self.transitions.value.data)
        return path

    def collapse(self, path):
        return collapse_path(path, "asg", rep_id=self.table.rep_id)


def make_criterion(kind: str, table: TokenTable):
    if kind == "ctc":
        return CtcCriterion(table)
    if kind == "asg":
        return AsgCriterion(table)
    raise ContractError(f"unknown criterion kind {kind!r}")
