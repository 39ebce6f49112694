"""Transducer and CTC losses with analytic gradients, plus lattice memory math.

All dynamic programming runs in log space with max-subtracted logsumexp.
The brute-force path enumerator exists purely to cross-check the
forward-backward recursions on tiny instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor, log_softmax, make_node
from .tokenizer import TokenSeq
from .alignment import FrameLabels

NEG_INF = -np.inf


class LossError(ValueError):
    pass


@dataclass
class LogitLattice:
    """T x (U+1) x (V+1) joint outputs; blank lives at output index 0."""

    logits: np.ndarray
    tensor: Tensor | None = None  # set when produced by a differentiable forward

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 3:
            raise LossError("lattice must be 3-d")
        if not np.isfinite(self.logits).all():
            raise LossError("non-finite lattice logits")

    @property
    def T(self) -> int:
        return self.logits.shape[0]

    @property
    def U(self) -> int:
        return self.logits.shape[1] - 1

    @property
    def V(self) -> int:
        return self.logits.shape[2] - 1


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray


def lattice_memory_bytes(frames: int, labels: int, vocab: int, bytes_per: int) -> int:
    """Bytes one dense T x (U+1) x (V+1) activation tensor costs."""
    if min(frames, vocab, bytes_per) < 1 or labels < 0:
        raise LossError("all extents must be positive (labels may be zero)")
    return frames * (labels + 1) * (vocab + 1) * bytes_per


def _check_labels(lat: LogitLattice, labels: TokenSeq) -> None:
    if len(labels) != lat.U:
        raise LossError(f"label count {len(labels)} does not match lattice U {lat.U}")
    if any(not 1 <= i <= lat.V for i in labels.ids):
        raise LossError("label id outside lattice vocabulary")


# ---------------------------------------------------------------------------
# Transducer loss
# ---------------------------------------------------------------------------

def rnnt_alpha_beta(lp: np.ndarray, ids: tuple[int, ...]):
    """Forward/backward tables over the (T, U+1) node grid.

    alpha[t,u]: log mass of partial paths positioned at (t,u);
    beta[t,u]: log mass of completions from (t,u), including the final blank.
    """
    T, U1, _ = lp.shape
    U = U1 - 1
    alpha = np.full((T, U1), NEG_INF)
    alpha[0, 0] = 0.0
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                continue
            from_blank = alpha[t - 1, u] + lp[t - 1, u, 0] if t > 0 else NEG_INF
            from_label = alpha[t, u - 1] + lp[t, u - 1, ids[u - 1]] if u > 0 else NEG_INF
            alpha[t, u] = np.logaddexp(from_blank, from_label)
    beta = np.full((T, U1), NEG_INF)
    beta[T - 1, U] = lp[T - 1, U, 0]
    for t in range(T - 1, -1, -1):
        for u in range(U, -1, -1):
            if t == T - 1 and u == U:
                continue
            via_blank = lp[t, u, 0] + beta[t + 1, u] if t < T - 1 else NEG_INF
            via_label = lp[t, u, ids[u]] + beta[t, u + 1] if u < U else NEG_INF
            beta[t, u] = np.logaddexp(via_blank, via_label)
    return alpha, beta


def rnnt_loss_grad(lat: LogitLattice, labels: TokenSeq) -> LossResult:
    """Negative log marginal over all alignments, gradient via edge posteriors."""
    _check_labels(lat, labels)
    ids = labels.ids
    T, U = lat.T, lat.U
    lp = log_softmax(lat.logits)
    alpha, beta = rnnt_alpha_beta(lp, ids)
    ll = alpha[T - 1, U] + lp[T - 1, U, 0]
    probs = np.exp(lp)
    grad = np.zeros_like(lp)
    for t in range(T):
        for u in range(U + 1):
            # blank edge: toward (t+1, u), or termination from the last node
            if t < T - 1:
                blank_out = beta[t + 1, u]
            else:
                blank_out = 0.0 if u == U else NEG_INF
            e_blank = math.exp(alpha[t, u] + lp[t, u, 0] + blank_out - ll)
            occupancy = e_blank
            if u < U:
                e_label = math.exp(alpha[t, u] + lp[t, u, ids[u]] + beta[t, u + 1] - ll)
                occupancy += e_label
                grad[t, u, ids[u]] -= e_label
            grad[t, u, 0] -= e_blank
            grad[t, u] += probs[t, u] * occupancy
    return LossResult(loss=float(-ll), grad=grad)


def rnnt_loss_bruteforce(lat: LogitLattice, labels: TokenSeq) -> float:
    """Enumerate every alignment that emits the labels plus T blanks.

    Guarded to T + U <= 16; each path walks the node grid from (0,0) and
    must spend its final blank at (T-1, U).
    """
    _check_labels(lat, labels)
    T, U = lat.T, lat.U
    if T + U > 16:
        raise LossError("brute force guard: T + U must be <= 16")
    ids = labels.ids
    lp = log_softmax(lat.logits)
    paths: list[float] = []
    stack = [(0, 0, 0.0)]
    while stack:
        t, u, acc = stack.pop()
        if u < U:
            stack.append((t, u + 1, acc + lp[t, u, ids[u]]))
        if t < T - 1:
            stack.append((t + 1, u, acc + lp[t, u, 0]))
        elif u == U:
            paths.append(acc + lp[t, u, 0])
    return float(-nm.logsumexp(np.array(paths)))


def rnnt_path_count(frames: int, labels: int) -> int:
    """Number of complete alignments: choose label positions among T+U-1 moves."""
    return math.comb(frames + labels - 1, labels)


# ---------------------------------------------------------------------------
# CTC loss
# ---------------------------------------------------------------------------

def ctc_min_frames(labels: TokenSeq) -> int:
    repeats = sum(1 for a, b in zip(labels.ids, labels.ids[1:]) if a == b)
    return len(labels) + repeats


def ctc_loss_grad(logit_seq: np.ndarray, labels: TokenSeq) -> LossResult:
    """Blank-expanded forward/backward over (T, 2U+1); analytic gradient."""
    logit_seq = np.asarray(logit_seq, dtype=np.float64)
    if logit_seq.ndim != 2:
        raise LossError("CTC logits must be (T, V+1)")
    T, C = logit_seq.shape
    if any(not 1 <= i < C for i in labels.ids):
        raise LossError("label id outside logit vocabulary")
    need = ctc_min_frames(labels)
    if T < need:
        raise LossError(f"T={T} too short: needs at least {need} frames")
    ext = [0]
    for i in labels.ids:
        ext.extend((i, 0))
    S = len(ext)
    lp = log_softmax(logit_seq)

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, 0]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            best = alpha[t - 1, s]
            if s > 0:
                best = np.logaddexp(best, alpha[t - 1, s - 1])
            if s > 1 and ext[s] != 0 and ext[s] != ext[s - 2]:
                best = np.logaddexp(best, alpha[t - 1, s - 2])
            alpha[t, s] = best + lp[t, ext[s]]
    tail = [alpha[T - 1, S - 1]]
    if S > 1:
        tail.append(alpha[T - 1, S - 2])
    ll = nm.logsumexp(np.array(tail))

    # beta excludes the emission at (t, s) itself, so alpha + beta single-counts.
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            best = beta[t + 1, s] + lp[t + 1, ext[s]]
            if s + 1 < S:
                best = np.logaddexp(best, beta[t + 1, s + 1] + lp[t + 1, ext[s + 1]])
            if s + 2 < S and ext[s + 2] != 0 and ext[s + 2] != ext[s]:
                best = np.logaddexp(best, beta[t + 1, s + 2] + lp[t + 1, ext[s + 2]])
            beta[t, s] = best

    grad = np.exp(lp)
    for t in range(T):
        for s in range(S):
            post = alpha[t, s] + beta[t, s] - ll
            if post > -700.0:
                grad[t, ext[s]] -= math.exp(post)
    return LossResult(loss=float(-ll), grad=grad)


# ---------------------------------------------------------------------------
# Frame cross entropy
# ---------------------------------------------------------------------------

def ce_frame_loss(logit_seq: np.ndarray, fl: FrameLabels) -> LossResult:
    """Mean per-frame cross entropy against hard frame labels."""
    logit_seq = np.asarray(logit_seq, dtype=np.float64)
    if logit_seq.ndim != 2:
        raise LossError("CE logits must be (T, C)")
    T, C = logit_seq.shape
    if fl.T != T:
        raise LossError(f"frame label count {fl.T} does not match T={T}")
    ids = np.asarray(fl.labels, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= C):
        raise LossError(f"frame label id out of range for {C} classes")
    lp = log_softmax(logit_seq)
    loss = float(-lp[np.arange(T), ids].mean())
    grad = np.exp(lp)
    grad[np.arange(T), ids] -= 1.0
    grad /= T
    return LossResult(loss=loss, grad=grad)


# ---------------------------------------------------------------------------
# Differentiable wrappers: DP losses as single tape nodes
# ---------------------------------------------------------------------------

def rnnt_nll(lattice: LogitLattice, labels: TokenSeq) -> Tensor:
    if lattice.tensor is None:
        raise LossError("lattice was not produced by a differentiable forward")
    res = rnnt_loss_grad(lattice, labels)
    return make_node(np.float64(res.loss), (lattice.tensor,),
                     lambda g: (g * res.grad,))


def ctc_nll(logits: Tensor, labels: TokenSeq) -> Tensor:
    res = ctc_loss_grad(logits.data, labels)
    return make_node(np.float64(res.loss), (logits,), lambda g: (g * res.grad,))


def ce_nll(logits: Tensor, fl: FrameLabels) -> Tensor:
    res = ce_frame_loss(logits.data, fl)
    return make_node(np.float64(res.loss), (logits,), lambda g: (g * res.grad,))
