"""Greedy, beam, and exhaustive decoding with per-token emission frames.

Beam search scores a label prefix by its marginal over alignments: duplicate
prefixes reached by different alignments merge via logsumexp, which is the
same criterion the exhaustive enumerator uses, so a saturating beam must
reproduce it exactly. Emission frames are tracked along the strongest single
entry into each prefix.

Labels per utterance are capped at 2*T so decoding always terminates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import network as net
from . import transducer_loss as tl
from .numerics import log_softmax, no_grad
from .tokenizer import TokenSeq


class DecodeError(ValueError):
    pass


@dataclass
class Hypothesis:
    tokens: TokenSeq
    score: float
    emit_frames: tuple[int, ...]

    def __post_init__(self):
        if len(self.emit_frames) != len(self.tokens):
            raise DecodeError("one emission frame per token required")
        if any(b < a for a, b in zip(self.emit_frames, self.emit_frames[1:])):
            raise DecodeError("emission frames must be non-decreasing")


@dataclass
class NBest:
    hyps: list[Hypothesis]

    def __post_init__(self):
        keys = [(-h.score, h.tokens.ids) for h in self.hyps]
        if keys != sorted(keys):
            raise DecodeError("n-best must be ordered by score desc, tokens asc")
        if len({h.tokens.ids for h in self.hyps}) != len(self.hyps):
            raise DecodeError("duplicate token sequences in n-best")

    @property
    def N(self) -> int:
        return len(self.hyps)

    def best(self) -> Hypothesis:
        return self.hyps[0]


# ---------------------------------------------------------------------------
# Inference-side model evaluation (plain arrays, no tape)
# ---------------------------------------------------------------------------

class _Scorer:
    """Caches encoder outputs and prediction states per label prefix."""

    def __init__(self, params: net.ModelParams, feat):
        self.params = params
        with no_grad():
            self.enc = net.encoder_forward(params, feat).data
        self._pred: dict[tuple[int, ...], tuple[np.ndarray, list]] = {}

    @property
    def frames(self) -> int:
        return self.enc.shape[0]

    def pred_out(self, prefix: tuple[int, ...]) -> np.ndarray:
        return self._pred_entry(prefix)[0]

    def _pred_entry(self, prefix):
        entry = self._pred.get(prefix)
        if entry is not None:
            return entry
        if prefix:
            _, states = self._pred_entry(prefix[:-1])
            token = prefix[-1]
        else:
            states = [layer.zero_state() for layer in self.params.prediction]
            token = 0
        x = self.params.pred_embed.data[token]
        new_states = []
        for layer, state in zip(self.params.prediction, states):
            x, new_state = net.lstm_p_step(layer, x, state)
            new_states.append(new_state)
        entry = (x, new_states)
        self._pred[prefix] = entry
        return entry

    def joint_logp(self, t: int, prefix: tuple[int, ...]) -> np.ndarray:
        j = self.params.joint
        h = np.tanh(self.enc[t] @ j.w_enc.data + self.pred_out(prefix) @ j.w_pre.data
                    + j.bias.data)
        return log_softmax(h @ j.w_out.data)


def _label_cap(frames: int, u_max: int | None) -> int:
    return 2 * frames if u_max is None else u_max


# ---------------------------------------------------------------------------
# Greedy
# ---------------------------------------------------------------------------

def greedy_decode(params: net.ModelParams, feat, u_max: int | None = None) -> Hypothesis:
    """Argmax walk: blank advances time, a label is emitted and recorded at t."""
    scorer = _Scorer(params, feat)
    cap = _label_cap(scorer.frames, u_max)
    tokens: list[int] = []
    frames: list[int] = []
    score = 0.0
    t = 0
    while t < scorer.frames:
        logp = scorer.joint_logp(t, tuple(tokens))
        k = int(np.argmax(logp))
        if k == 0 or len(tokens) >= cap:
            score += float(logp[0])
            t += 1
        else:
            score += float(logp[k])
            tokens.append(k)
            frames.append(t)
    return Hypothesis(tokens=TokenSeq(tuple(tokens)), score=score,
                      emit_frames=tuple(frames))


# ---------------------------------------------------------------------------
# Beam with duplicate-prefix merging
# ---------------------------------------------------------------------------

@dataclass
class _Beam:
    mass: float
    emit_frames: tuple[int, ...]
    best_entry: float = -math.inf


def beam_decode(params: net.ModelParams, feat, beam: int = 5,
                u_max: int | None = None) -> NBest:
    if beam < 1:
        raise DecodeError("beam must be >= 1")
    scorer = _Scorer(params, feat)
    cap = _label_cap(scorer.frames, u_max)
    alive: dict[tuple[int, ...], _Beam] = {(): _Beam(mass=0.0, emit_frames=())}
    n_labels = params.n_labels
    for t in range(scorer.frames):
        frame_logp: dict[tuple[int, ...], np.ndarray] = {}
        # expand label chains shortest prefixes first so merged mass flows up
        length = min(len(p) for p in alive)
        while length <= cap:
            layer = [(p, e) for p, e in alive.items() if len(p) == length]
            if not layer:
                break
            layer.sort(key=lambda pe: (-pe[1].mass, pe[0]))
            for p, _ in layer[beam:]:
                del alive[p]
            for p, entry in layer[:beam]:
                logp = scorer.joint_logp(t, p)
                frame_logp[p] = logp
                if length == cap:
                    continue
                for k in range(1, n_labels + 1):
                    contrib = entry.mass + float(logp[k])
                    child = p + (k,)
                    existing = alive.get(child)
                    if existing is None:
                        alive[child] = _Beam(mass=contrib,
                                             emit_frames=entry.emit_frames + (t,),
                                             best_entry=contrib)
                    else:
                        existing.mass = float(np.logaddexp(existing.mass, contrib))
                        if contrib > existing.best_entry:
                            existing.best_entry = contrib
                            existing.emit_frames = entry.emit_frames + (t,)
            length += 1
        # every surviving prefix consumes the frame with a blank
        for p, entry in alive.items():
            entry.mass += float(frame_logp[p][0])
        survivors = sorted(alive.items(), key=lambda pe: (-pe[1].mass, pe[0]))[:beam]
        alive = dict(survivors)
    ranked = sorted(alive.items(), key=lambda pe: (-pe[1].mass, pe[0]))
    hyps = [Hypothesis(tokens=TokenSeq(p), score=e.mass, emit_frames=e.emit_frames)
            for p, e in ranked[:beam]]
    return NBest(hyps)


# ---------------------------------------------------------------------------
# Exhaustive oracle
# ---------------------------------------------------------------------------

def exhaustive_decode(params: net.ModelParams, feat, u_max: int) -> Hypothesis:
    """Score every label sequence up to u_max by full path enumeration.

    Guarded to T + u_max <= 12. Ties break toward the lexicographically
    smaller token sequence; emission frames come from the strongest single
    alignment of the winning sequence.
    """
    scorer = _Scorer(params, feat)
    T = scorer.frames
    if T + u_max > 12:
        raise DecodeError("exhaustive guard: T + u_max must be <= 12")
    n_labels = params.n_labels
    best: tuple[float, tuple[int, ...], tuple[int, ...]] | None = None

    def consider(seq: tuple[int, ...]):
        nonlocal best
        marginal, emit = _sequence_paths(scorer, seq)
        if best is None or marginal > best[0] + 1e-12 or \
                (abs(marginal - best[0]) <= 1e-12 and seq < best[1]):
            best = (marginal, seq, emit)

    stack: list[tuple[int, ...]] = [()]
    while stack:
        seq = stack.pop()
        consider(seq)
        if len(seq) < u_max:
            for k in range(n_labels, 0, -1):
                stack.append(seq + (k,))
    assert best is not None
    return Hypothesis(tokens=TokenSeq(best[1]), score=best[0], emit_frames=best[2])


def _sequence_paths(scorer: _Scorer, seq: tuple[int, ...]):
    """Marginal log score of a sequence plus the best path's emission frames."""
    T, U = scorer.frames, len(seq)
    lp = np.stack([np.stack([scorer.joint_logp(t, seq[:u]) for u in range(U + 1)])
                   for t in range(T)])
    total = -math.inf
    best_path = (-math.inf, ())
    stack = [(0, 0, 0.0, ())]
    while stack:
        t, u, acc, emits = stack.pop()
        if u < U:
            stack.append((t, u + 1, acc + lp[t, u, seq[u]], emits + (t,)))
        if t < T - 1:
            stack.append((t + 1, u, acc + lp[t, u, 0], emits))
        elif u == U:
            final = acc + lp[t, u, 0]
            total = np.logaddexp(total, final)
            if final > best_path[0]:
                best_path = (final, emits)
    return float(total), best_path[1]


# ---------------------------------------------------------------------------
# N-best CSV: utt_id,rank,score,emit_frames(semicolon-joined),text
# ---------------------------------------------------------------------------

def write_nbest_csv(path: str | Path, rows: list[tuple[str, NBest, list[str]]]) -> None:
    """rows: (utt_id, nbest, decoded texts aligned with the hypotheses)."""
    lines = ["utt_id,rank,score,emit_frames,text"]
    for utt_id, nbest, texts in rows:
        for rank, (hyp, text) in enumerate(zip(nbest.hyps, texts), start=1):
            frames = ";".join(str(f) for f in hyp.emit_frames)
            lines.append(f"{utt_id},{rank},{hyp.score:.9f},{frames},{text}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
