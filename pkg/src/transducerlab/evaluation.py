"""Word error rate and emission-delay analysis.

WER is word-level Levenshtein with unit costs, aggregated across a test set.
Emission delay compares each reference word's start frame with the frame at
which the decoder committed to the word's first piece; only utterances whose
hypothesis has the same word count are measured, the rest are counted as
skipped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from .alignment import WordTiming
from .decoder import Hypothesis
from .tokenizer import MARKER, Vocabulary


class EvalError(ValueError):
    pass


@dataclass
class WerBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return 100.0 * self.errors / self.ref_words


def _edit_counts(ref: list[str], hyp: list[str]) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions) from one Levenshtein table."""
    R, H = len(ref), len(hyp)
    dist = [[0] * (H + 1) for _ in range(R + 1)]
    for i in range(R + 1):
        dist[i][0] = i
    for j in range(H + 1):
        dist[0][j] = j
    for i in range(1, R + 1):
        for j in range(1, H + 1):
            same = ref[i - 1] == hyp[j - 1]
            dist[i][j] = min(dist[i - 1][j - 1] + (0 if same else 1),
                             dist[i - 1][j] + 1,
                             dist[i][j - 1] + 1)
    subs = dels = ins = 0
    i, j = R, H
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + \
                (0 if ref[i - 1] == hyp[j - 1] else 1):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return subs, dels, ins


def wer(refs: list[str], hyps: list[str]) -> WerBreakdown:
    """Aggregate word-level edit counts over paired transcript lists."""
    if len(refs) != len(hyps):
        raise EvalError("reference and hypothesis lists differ in length")
    if not refs:
        raise EvalError("empty reference set")
    total = WerBreakdown(0, 0, 0, 0)
    for ref, hyp in zip(refs, hyps):
        r, h = ref.split(), hyp.split()
        s, d, i = _edit_counts(r, h)
        total.substitutions += s
        total.deletions += d
        total.insertions += i
        total.ref_words += len(r)
    if total.ref_words == 0:
        raise EvalError("reference set has no words")
    return total


# ---------------------------------------------------------------------------
# Emission delay
# ---------------------------------------------------------------------------

@dataclass
class DelayStats:
    """Signed gaps in pre-stack frames between emission and word start."""

    gaps: list[int] = field(default_factory=list)
    skipped: int = 0
    bucket_frames: int = 1

    @property
    def mean_gap(self) -> float:
        return sum(self.gaps) / len(self.gaps) if self.gaps else math.nan

    @property
    def histogram(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for g in self.gaps:
            bucket = (g // self.bucket_frames) * self.bucket_frames
            out[bucket] = out.get(bucket, 0) + 1
        return dict(sorted(out.items()))


def word_start_frames(hyp: Hypothesis, vocab: Vocabulary) -> list[int]:
    """Encoder frame of each word's first token; markers begin words."""
    starts: list[int] = []
    for token_id, frame in zip(hyp.tokens.ids, hyp.emit_frames):
        piece = vocab.piece_of(token_id)
        if piece.startswith(MARKER) or not starts:
            starts.append(frame)
    return starts


def emission_delay(ref_words: list[WordTiming], hyp: Hypothesis,
                   vocab: Vocabulary, stack_factor: int = 3) -> DelayStats:
    """Per-word gap = emission frame * stack_factor - reference start frame.

    Word counts must match between hypothesis and reference; otherwise the
    utterance is recorded as skipped and contributes no gaps.
    """
    starts = word_start_frames(hyp, vocab)
    if len(starts) != len(ref_words):
        return DelayStats(gaps=[], skipped=1)
    gaps = [frame * stack_factor - ref.start
            for frame, ref in zip(starts, sorted(ref_words, key=lambda w: w.start))]
    return DelayStats(gaps=gaps)


def merge_delay_stats(parts: list[DelayStats]) -> DelayStats:
    merged = DelayStats()
    for p in parts:
        merged.gaps.extend(p.gaps)
        merged.skipped += p.skipped
    return merged


def latency_ms(mean_gap: float, lookahead_frames: int, frame_ms: float) -> float:
    """User-visible latency: (emission gap + lookahead) * frame duration."""
    if frame_ms <= 0:
        raise EvalError("frame_ms must be positive")
    return (mean_gap + lookahead_frames) * frame_ms


# ---------------------------------------------------------------------------
# Report CSVs
# ---------------------------------------------------------------------------

@dataclass
class ReportRow:
    model: str
    test_set: str
    wer: WerBreakdown
    mean_gap_frames: float
    latency_ms: float


def write_report_csv(path: str | Path, rows: list[ReportRow]) -> None:
    lines = ["model,test_set,wer,sub,del,ins,mean_gap_frames,latency_ms"]
    for r in rows:
        lines.append(
            f"{r.model},{r.test_set},{r.wer.wer:.4f},{r.wer.substitutions},"
            f"{r.wer.deletions},{r.wer.insertions},{r.mean_gap_frames:.4f},"
            f"{r.latency_ms:.4f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_histogram_csv(path: str | Path, stats: DelayStats) -> None:
    lines = ["bucket_frames,count"]
    for bucket, count in stats.histogram.items():
        lines.append(f"{bucket},{count}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
