"""Word-piece LSTM language model and log-linear n-best rescoring.

The LM shares the transducer's word-piece vocabulary. Output class 0 is the
sentence-end marker, classes 1..V are the pieces; the embedding table keeps a
sentence-begin row at index 0 and a spare end row at index V+1, so scoring a
k-piece sentence evaluates k+1 softmax decisions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import network as net
from . import numerics as nm
from . import tokenizer as tok
from . import transducer_loss as tl
from .alignment import FrameLabels
from .decoder import Hypothesis, NBest
from .network import LstmPLayer
from .numerics import Tensor, log_softmax, no_grad
from .tokenizer import TokenSeq, Vocabulary
from .trainer import Adam, TrainConfig, clip_global_norm

log = logging.getLogger(__name__)

END_CLASS = 0  # output index of the sentence-end event


class LmError(ValueError):
    pass


@dataclass
class LmParams:
    n_labels: int            # V: pieces scorable, blank excluded
    embed: Tensor            # (V+2, E): begin row 0, pieces 1..V, spare end row
    layers: list[LstmPLayer]
    w_out: Tensor            # (N, V+1): end at 0, pieces 1..V
    b_out: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"lm.embed": self.embed}
        for i, layer in enumerate(self.layers):
            for key, t in layer.tensors().items():
                out[f"lm.{i}.{key}"] = t
        out["lm.w_out"] = self.w_out
        out["lm.b_out"] = self.b_out
        return out


def init_lm(n_labels: int, seed: int, cells: int = 512, proj: int = 512,
            layers: int = 1) -> LmParams:
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    embed = nm.parameter(uniform((n_labels + 2, proj), n_labels + 2, proj))
    stack = []
    in_dim = proj
    for _ in range(layers):
        stack.append(LstmPLayer(
            wx=nm.parameter(uniform((in_dim, 4 * cells), in_dim, 4 * cells)),
            wh=nm.parameter(uniform((proj, 4 * cells), proj, 4 * cells)),
            gain=nm.parameter(np.ones(4 * cells)),
            bias=nm.parameter(np.zeros(4 * cells)),
            wp=nm.parameter(uniform((cells, proj), cells, proj))))
        in_dim = proj
    w_out = nm.parameter(uniform((proj, n_labels + 1), proj, n_labels + 1))
    b_out = nm.parameter(np.zeros(n_labels + 1))
    return LmParams(n_labels=n_labels, embed=embed, layers=stack,
                    w_out=w_out, b_out=b_out)


def _lm_logits(lm: LmParams, seq: TokenSeq) -> Tensor:
    """(k+1, V+1) next-piece logits for begin + the k sequence pieces."""
    if any(i > lm.n_labels for i in seq.ids):
        raise LmError("token id outside the language model vocabulary")
    ids = [0] + list(seq.ids)
    hs = nm.gather_rows(lm.embed, ids)
    for layer in lm.layers:
        hs, _ = net.lstm_p_forward(layer, hs)
    return hs @ lm.w_out + lm.b_out


def lm_score(lm: LmParams, seq: TokenSeq) -> float:
    """Sum of stepwise log P(piece | prefix) plus log P(end | sequence)."""
    with no_grad():
        logits = _lm_logits(lm, seq)
    lp = log_softmax(logits.data)
    targets = list(seq.ids) + [END_CLASS]
    return float(sum(lp[i, t] for i, t in enumerate(targets)))


def train_lm(text: list[str], cfg: TrainConfig, vocab: Vocabulary,
             cells: int = 512, proj: int = 512, layers: int = 1) -> LmParams:
    """Next-piece cross entropy over encoded transcripts; seeded and abortable."""
    if not text:
        raise LmError("empty text corpus")
    lm = init_lm(vocab.n_labels, cfg.seed, cells=cells, proj=proj, layers=layers)
    sequences = [tok.encode(line, vocab) for line in text]
    tensors = lm.named_tensors()
    opt = Adam(tensors, lr=cfg.lr)
    rng = np.random.default_rng((cfg.seed, 4))
    snapshot = {k: t.data.copy() for k, t in tensors.items()}
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(sequences))
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            opt.zero_grad()
            total = None
            for i in chunk:
                seq = sequences[i]
                logits = _lm_logits(lm, seq)
                targets = FrameLabels(tuple(seq.ids) + (END_CLASS,))
                loss = tl.ce_nll(logits, targets)
                total = loss if total is None else total + loss
            mean = total * (1.0 / len(chunk))
            if not np.isfinite(mean.data):
                log.warning("non-finite LM loss at epoch %d; restoring checkpoint", epoch)
                for k, t in tensors.items():
                    t.data[...] = snapshot[k]
                return lm
            mean.backward()
            clip_global_norm(tensors, cfg.clip)
            opt.step(cfg.lr_at(epoch))
        snapshot = {k: t.data.copy() for k, t in tensors.items()}
    return lm


def perplexity(lm: LmParams, text: list[str], vocab: Vocabulary) -> float:
    """exp of mean per-decision negative log likelihood over a text set."""
    total = 0.0
    events = 0
    for line in text:
        seq = tok.encode(line, vocab)
        total += lm_score(lm, seq)
        events += len(seq) + 1
    return math.exp(-total / max(events, 1))


def rescore(nbest: NBest, lm: LmParams, lam: float) -> Hypothesis:
    """argmax over hypotheses of transducer score + lam * LM score."""
    if not nbest.hyps:
        raise LmError("empty n-best list")
    if lam < 0:
        raise LmError("lambda must be >= 0")
    best = None
    for hyp in nbest.hyps:
        combined = hyp.score + lam * lm_score(lm, hyp.tokens) if lam else hyp.score
        key = (-combined, hyp.tokens.ids)
        if best is None or key < best[0]:
            best = (key, hyp)
    return best[1]


# ---------------------------------------------------------------------------
# Checkpoints share the transducer container with their own header tag.
# ---------------------------------------------------------------------------

def save_lm(path: str | Path, lm: LmParams) -> None:
    layer = lm.layers[0]
    header = [lm.n_labels, lm.embed.data.shape[1], layer.cells, layer.out_dim,
              len(lm.layers)]
    with open(path, "wb") as fh:
        net.write_container(fh, net.KIND_LM, header, lm.named_tensors())


def load_lm(path: str | Path) -> LmParams:
    with open(path, "rb") as fh:
        kind, header, tensors = net.read_container(fh)
    if kind != net.KIND_LM:
        raise LmError(f"checkpoint kind {kind} is not a language model")
    n_labels, _emb, cells, proj, layers = header
    lm = init_lm(n_labels, seed=0, cells=cells, proj=proj, layers=layers)
    named = lm.named_tensors()
    if set(named) != set(tensors):
        raise LmError("checkpoint tensors do not match the LM layout")
    for name, t in named.items():
        t.data[...] = tensors[name]
    return lm
