"""Optimization loops: encoder pretraining, transducer training, adaptation.

Training is plain minibatch descent with an adaptive per-parameter
first/second moment optimizer (bias corrected) and global-norm gradient
clipping. Minibatches are bucketed by stacked length so no batch blows past
the configured lattice-memory budget. A stable 10% dev split comes from a
seeded hash of utterance ids.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import network as net
from . import transducer_loss as tl
from . import tokenizer as tok
from .alignment import FrameLabels, frame_labels
from .datasets import Utterance
from .decoder import greedy_decode
from .evaluation import wer
from .network import ArchSpec, EncoderLayer, ModelParams
from .numerics import Tensor, no_grad
from .tokenizer import TokenSeq, Vocabulary

log = logging.getLogger(__name__)


class TrainerError(ValueError):
    pass


class FreezeScope(Enum):
    ALL = "all"
    PREDICTION_AND_JOINT = "prediction_and_joint"


@dataclass
class TrainConfig:
    arch: ArchSpec
    init: str = "random"            # random | ctc | ce
    lr: float = 1e-3
    lr_decay: float = 1.0
    lr_decay_every: int = 0         # epochs between decays; 0 disables
    epochs: int = 5
    batch_size: int = 8
    clip: float = 5.0
    seed: int = 0
    pretrain_epochs: int = 4
    max_lattice_mb: float = 64.0
    eval_dev_wer: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.lr_decay <= 0 or self.clip <= 0:
            raise TrainerError("rates and clip threshold must be positive")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise TrainerError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise TrainerError("batch size must be >= 1")
        if self.init not in ("random", "ctc", "ce"):
            raise TrainerError(f"unknown init {self.init!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_every <= 0:
            return self.lr
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    wer: float | None = None


def write_metrics_csv(path: str | Path, rows: list[MetricsRow]) -> None:
    lines = ["epoch,split,loss,wer"]
    for r in rows:
        wer_cell = "" if r.wer is None else f"{r.wer:.4f}"
        lines.append(f"{r.epoch},{r.split},{r.loss:.6f},{wer_cell}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Per-parameter moment estimates with bias correction."""

    def __init__(self, tensors: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.tensors = tensors
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in tensors.items()}
        self.steps = 0

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.steps += 1
        c1 = 1.0 - self.beta1 ** self.steps
        c2 = 1.0 - self.beta2 ** self.steps
        for k, t in self.tensors.items():
            g = t.grad
            if g is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            t.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_global_norm(tensors: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for t in tensors.values():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for t in tensors.values():
            if t.grad is not None:
                t.grad *= scale
        return max_norm
    return norm


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------

def is_dev(utt_id: str, seed: int) -> bool:
    digest = hashlib.sha1(f"{seed}:{utt_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") % 10 == 0


def split_corpus(corpus: list[Utterance], seed: int):
    train = [u for u in corpus if not is_dev(u.utt_id, seed)]
    dev = [u for u in corpus if is_dev(u.utt_id, seed)]
    return train, dev


@dataclass
class _Prepared:
    utt: Utterance
    stacked: np.ndarray
    labels: TokenSeq


def _prepare(corpus: list[Utterance], vocab: Vocabulary, arch: ArchSpec) -> list[_Prepared]:
    out = []
    for utt in corpus:
        stacked = net.stack_frames(utt.features, arch.stack_factor)
        out.append(_Prepared(utt=utt, stacked=stacked.values,
                             labels=tok.encode(utt.transcript, vocab)))
    return out


def _batches(items: list[_Prepared], cfg: TrainConfig, vocab: Vocabulary,
             rng: np.random.Generator):
    """Shuffle, bucket by stacked length, and cap batches by lattice bytes."""
    order = list(rng.permutation(len(items)))
    order.sort(key=lambda i: items[i].stacked.shape[0] // 4)
    budget = cfg.max_lattice_mb * 1024 * 1024
    batch: list[_Prepared] = []
    used = 0.0
    for i in order:
        item = items[i]
        cost = tl.lattice_memory_bytes(max(item.stacked.shape[0], 1),
                                       len(item.labels), vocab.n_labels, 8)
        if batch and (len(batch) >= cfg.batch_size or used + cost > budget):
            yield batch
            batch, used = [], 0.0
        batch.append(item)
        used += cost
    if batch:
        yield batch


def _stack_labels(fl: FrameLabels, factor: int, stacked_t: int) -> FrameLabels:
    """Frame labels at the stacked rate: label of each window's first frame."""
    return FrameLabels(tuple(fl.labels[i * factor] for i in range(stacked_t)))


# ---------------------------------------------------------------------------
# Encoder pretraining
# ---------------------------------------------------------------------------

def _pretrain(cfg: TrainConfig, data: list[Utterance], vocab: Vocabulary,
              head_classes: int, loss_for):
    """Shared loop for the CE and CTC encoder warmups; the head is discarded."""
    rng = np.random.default_rng(cfg.seed)
    encoder = net.init_encoder_stack(rng, cfg.arch)
    from .numerics import parameter
    head_w = parameter(rng.uniform(
        -math.sqrt(6.0 / (cfg.arch.proj + head_classes)),
        math.sqrt(6.0 / (cfg.arch.proj + head_classes)),
        size=(cfg.arch.proj, head_classes)))
    head_b = parameter(np.zeros(head_classes))
    tensors = {}
    for l, layer in enumerate(encoder):
        for key, t in layer.lstm.tensors().items():
            tensors[f"enc.{l}.{key}"] = t
        if layer.context is not None:
            tensors[f"enc.{l}.ctx"] = layer.context
    tensors["head.w"] = head_w
    tensors["head.b"] = head_b

    items = _prepare(data, vocab, cfg.arch)
    targets = []
    skipped = 0
    for item in items:
        target = loss_for(item)
        if target is None:
            skipped += 1
        targets.append(target)
    if skipped:
        log.warning("pretraining skipped %d utterances", skipped)
    opt = Adam(tensors, lr=cfg.lr)
    shuffle_rng = np.random.default_rng((cfg.seed, 1))
    usable = [i for i, t in enumerate(targets) if t is not None]
    for epoch in range(cfg.pretrain_epochs):
        order = shuffle_rng.permutation(usable)
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            opt.zero_grad()
            total = None
            for i in chunk:
                item = items[i]
                enc = net.encoder_layers_forward(encoder, item.stacked)
                logits = enc @ head_w + head_b
                loss = targets[i](logits)
                total = loss if total is None else total + loss
            (total * (1.0 / len(chunk))).backward()
            clip_global_norm(tensors, cfg.clip)
            opt.step(cfg.lr_at(epoch))
    return encoder, (head_w, head_b)


def _ce_target_maker(cfg: TrainConfig, vocab: Vocabulary):
    factor = cfg.arch.stack_factor

    def loss_for(item: _Prepared):
        utt = item.utt
        if utt.transcript.split() and not utt.words:
            raise TrainerError(f"missing timing for utterance {utt.utt_id}")
        fl = frame_labels(utt.words, vocab, utt.features.T)
        stacked_fl = _stack_labels(fl, factor, item.stacked.shape[0])
        return lambda logits: tl.ce_nll(logits, stacked_fl)

    return loss_for


def pretrain_encoder_ce(cfg: TrainConfig, data: list[Utterance], vocab: Vocabulary,
                        keep_head: bool = False):
    """Frame-classifier warmup on even-split alignments; silence class added.

    The softmax head is discarded unless ``keep_head`` asks for it back (used
    by diagnostics that probe frame accuracy).
    """
    from .alignment import silence_id

    head_classes = silence_id(vocab) + 1
    encoder, head = _pretrain(cfg, data, vocab, head_classes,
                              _ce_target_maker(cfg, vocab))
    return (encoder, head) if keep_head else encoder


def pretrain_encoder_ctc(cfg: TrainConfig, data: list[Utterance], vocab: Vocabulary,
                         keep_head: bool = False):
    """Alignment-free warmup; utterances too short for their labels are skipped."""
    head_classes = vocab.n_labels + 1

    def loss_for(item: _Prepared):
        if item.stacked.shape[0] < tl.ctc_min_frames(item.labels):
            return None
        labels = item.labels
        return lambda logits: tl.ctc_nll(logits, labels)

    encoder, head = _pretrain(cfg, data, vocab, head_classes, loss_for)
    return (encoder, head) if keep_head else encoder


def frame_accuracy(encoder: list[EncoderLayer], head, cfg: TrainConfig,
                   utt: Utterance, vocab: Vocabulary) -> float:
    """Argmax agreement between the frame classifier and the even-split labels."""
    head_w, head_b = head
    stacked = net.stack_frames(utt.features, cfg.arch.stack_factor)
    fl = frame_labels(utt.words, vocab, utt.features.T)
    stacked_fl = _stack_labels(fl, cfg.arch.stack_factor, stacked.T)
    with no_grad():
        enc = net.encoder_layers_forward(encoder, stacked.values)
        logits = enc.data @ head_w.data + head_b.data
    pred = logits.argmax(axis=1)
    return float((pred == np.asarray(stacked_fl.labels)).mean())


# ---------------------------------------------------------------------------
# Transducer training
# ---------------------------------------------------------------------------

def transfer_encoder(model: ModelParams, encoder: list[EncoderLayer]) -> None:
    """Copy pretrained encoder tensors into a model, shape-checked."""
    if len(encoder) != len(model.encoder):
        raise TrainerError("encoder layer count mismatch")
    for mine, theirs in zip(model.encoder, encoder):
        for key, t in mine.lstm.tensors().items():
            src = theirs.lstm.tensors()[key]
            if t.data.shape != src.data.shape:
                raise TrainerError(f"encoder tensor {key} shape mismatch")
            t.data[...] = src.data
        if (mine.context is None) != (theirs.context is None):
            raise TrainerError("context vector presence mismatch")
        if mine.context is not None:
            mine.context.data[...] = theirs.context.data


def _utterance_nll(model: ModelParams, item: _Prepared):
    lat = net.rnnt_forward(model, item.stacked, item.labels)
    return tl.rnnt_nll(lat, item.labels)


def _mean_loss(model: ModelParams, items: list[_Prepared]) -> float:
    with no_grad():
        total = 0.0
        for item in items:
            lat = net.rnnt_forward(model, item.stacked, item.labels)
            total += tl.rnnt_loss_grad(lat, item.labels).loss
    return total / max(len(items), 1)


def _greedy_wer(model: ModelParams, items: list[_Prepared], vocab: Vocabulary) -> float:
    refs, hyps = [], []
    for item in items:
        hyp = greedy_decode(model, item.stacked)
        refs.append(item.utt.transcript)
        hyps.append(tok.decode(hyp.tokens, vocab))
    return wer(refs, hyps).wer


def _fit(model: ModelParams, tensors: dict[str, Tensor], cfg: TrainConfig,
         train_items: list[_Prepared], dev_items: list[_Prepared],
         vocab: Vocabulary, epochs: int) -> list[MetricsRow]:
    opt = Adam(tensors, lr=cfg.lr)
    rng = np.random.default_rng((cfg.seed, 2))
    history: list[MetricsRow] = []
    snapshot = net.save_state(model)
    for epoch in range(epochs):
        epoch_loss = 0.0
        n_batches = 0
        diverged = False
        for batch in _batches(train_items, cfg, vocab, rng):
            opt.zero_grad()
            total = None
            for item in batch:
                loss = _utterance_nll(model, item)
                total = loss if total is None else total + loss
            mean = total * (1.0 / len(batch))
            if not np.isfinite(mean.data):
                diverged = True
                break
            mean.backward()
            clip_global_norm(tensors, cfg.clip)
            opt.step(cfg.lr_at(epoch))
            epoch_loss += float(mean.data)
            n_batches += 1
        if diverged:
            log.warning("non-finite loss at epoch %d; restoring last checkpoint", epoch)
            restored = net.load_state(snapshot)
            transfer_all(model, restored)
            history.append(MetricsRow(epoch=epoch, split="aborted",
                                      loss=float("nan")))
            break
        snapshot = net.save_state(model)
        history.append(MetricsRow(epoch=epoch, split="train",
                                  loss=epoch_loss / max(n_batches, 1)))
        if dev_items:
            dev_wer = _greedy_wer(model, dev_items, vocab) if cfg.eval_dev_wer else None
            history.append(MetricsRow(epoch=epoch, split="dev",
                                      loss=_mean_loss(model, dev_items),
                                      wer=dev_wer))
    return history


def transfer_all(model: ModelParams, source: ModelParams) -> None:
    for name, t in model.named_tensors().items():
        t.data[...] = source.named_tensors()[name].data


def train_rnnt(cfg: TrainConfig, data: list[Utterance], vocab: Vocabulary,
               init: list[EncoderLayer] | None = None
               ) -> tuple[ModelParams, list[MetricsRow]]:
    """Train a transducer; encoder optionally transferred from pretraining,
    prediction and joint always start random from the config seed."""
    model = net.init_model(cfg.arch, vocab.n_labels, cfg.seed)
    if init is not None:
        transfer_encoder(model, init)
    train_utts, dev_utts = split_corpus(data, cfg.seed)
    train_items = _prepare(train_utts, vocab, cfg.arch)
    dev_items = _prepare(dev_utts, vocab, cfg.arch)
    history = _fit(model, model.named_tensors(), cfg, train_items, dev_items,
                   vocab, cfg.epochs)
    return model, history


def adapt(params: ModelParams, cfg: TrainConfig, data: list[Utterance],
          vocab: Vocabulary, scope: FreezeScope,
          mix: tuple[list[Utterance], float] | None = None) -> ModelParams:
    """Fine-tune inside the freeze scope only; frozen tensors stay byte-equal.

    With ``mix = (corpus, ratio)`` each minibatch draws round(ratio * size)
    utterances from the mixed-in corpus and the rest from ``data``.
    """
    if not data:
        raise TrainerError("adaptation corpus is empty")
    model = params.copy()
    named = model.named_tensors()
    if scope is FreezeScope.ALL:
        tensors = named
    else:
        tensors = {k: v for k, v in named.items()
                   if k.startswith("pred.") or k.startswith("joint.")}
    items = _prepare(data, vocab, cfg.arch)
    mix_items: list[_Prepared] = []
    mix_ratio = 0.0
    if mix is not None:
        mix_corpus, mix_ratio = mix
        if not 0.0 < mix_ratio <= 1.0:
            raise TrainerError("mix ratio must be in (0, 1]")
        mix_items = _prepare(mix_corpus, vocab, cfg.arch)

    opt = Adam(tensors, lr=cfg.lr)
    rng = np.random.default_rng((cfg.seed, 3))
    for epoch in range(cfg.epochs):
        order = list(rng.permutation(len(items)))
        mix_order = list(rng.permutation(len(mix_items))) if mix_items else []
        mix_pos = 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [items[i] for i in order[start:start + cfg.batch_size]]
            if mix_items:
                n_mix = round(mix_ratio * len(chunk))
                chunk = chunk[:len(chunk) - n_mix]
                for _ in range(n_mix):
                    chunk.append(mix_items[mix_order[mix_pos % len(mix_order)]])
                    mix_pos += 1
            opt.zero_grad()
            total = None
            for item in chunk:
                loss = _utterance_nll(model, item)
                total = loss if total is None else total + loss
            mean = total * (1.0 / len(chunk))
            if not np.isfinite(mean.data):
                log.warning("non-finite adaptation loss; stopping")
                return model
            mean.backward()
            clip_global_norm(tensors, cfg.clip)
            opt.step(cfg.lr_at(epoch))
    return model


# ---------------------------------------------------------------------------
# Train config files: UTF-8 "key = value" lines
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {
    "arch", "feature_dim", "stack_factor", "init", "lr", "lr_decay",
    "lr_decay_every", "epochs", "batch_size", "clip", "seed",
    "pretrain_epochs", "max_lattice_mb", "eval_dev_wer",
}


def parse_config_lines(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise TrainerError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_train_config(path: str | Path) -> TrainConfig:
    pairs = parse_config_lines(Path(path).read_text(encoding="utf-8"))
    unknown = set(pairs) - _CONFIG_KEYS
    if unknown:
        raise TrainerError(f"unknown config keys: {sorted(unknown)}")
    if "arch" not in pairs:
        raise TrainerError("config needs an arch entry")
    arch = net.parse_arch_spec(
        pairs["arch"],
        feature_dim=int(pairs.get("feature_dim", 8)),
        stack_factor=int(pairs.get("stack_factor", 3)))
    kwargs = {}
    for key, cast in (("init", str), ("lr", float), ("lr_decay", float),
                      ("lr_decay_every", int), ("epochs", int),
                      ("batch_size", int), ("clip", float), ("seed", int),
                      ("pretrain_epochs", int), ("max_lattice_mb", float)):
        if key in pairs:
            kwargs[key] = cast(pairs[key])
    if "eval_dev_wer" in pairs:
        kwargs["eval_dev_wer"] = pairs["eval_dev_wer"].lower() in ("1", "true", "yes")
    return TrainConfig(arch=arch, **kwargs)
