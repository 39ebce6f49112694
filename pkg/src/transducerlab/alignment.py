"""Even-split word-piece time alignments for frame-classifier encoder pretraining.

Word-level timings are assumed accurate; each word's span is cut into equal
real-valued intervals, one per word piece, and floored to frame boundaries so
the pieces exactly partition the word.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .tokenizer import Vocabulary, encode_word


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class WordTiming:
    word: str
    start: int
    end: int  # exclusive

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise AlignmentError(f"bad span [{self.start},{self.end}) for {self.word!r}")


@dataclass(frozen=True)
class FrameLabels:
    """Per-frame class ids: vocabulary pieces plus one trailing silence class."""

    labels: tuple[int, ...]

    @property
    def T(self) -> int:
        return len(self.labels)


def silence_id(vocab: Vocabulary) -> int:
    """The frame-classifier silence class sits after every vocabulary id."""
    return len(vocab)


def even_split(timing: WordTiming, pieces: int) -> list[tuple[int, int]]:
    """Cut [start, end) into ``pieces`` contiguous segments of near-equal length.

    Segment k (1-based) is [floor(S + (k-1)(E-S)/K), floor(S + k(E-S)/K));
    the segments partition the span exactly and are non-empty whenever the
    span has at least ``pieces`` frames.
    """
    if pieces < 1:
        raise AlignmentError("piece count must be >= 1")
    span = timing.end - timing.start
    if span < pieces:
        raise AlignmentError(
            f"more pieces than frames: {pieces} pieces for span [{timing.start},{timing.end})")
    bounds = [timing.start + (k * span) // pieces for k in range(pieces + 1)]
    return [(bounds[k], bounds[k + 1]) for k in range(pieces)]


def frame_labels(words: list[WordTiming], vocab: Vocabulary, total_frames: int) -> FrameLabels:
    """Label every frame with a piece id via even_split, or silence when uncovered."""
    spans = sorted(words, key=lambda w: w.start)
    for a, b in zip(spans, spans[1:]):
        if b.start < a.end:
            raise AlignmentError(
                f"overlapping words: {a.word!r} [{a.start},{a.end}) and {b.word!r} [{b.start},{b.end})")
    if spans and spans[-1].end > total_frames:
        raise AlignmentError(f"word {spans[-1].word!r} ends past frame count {total_frames}")
    labels = [silence_id(vocab)] * total_frames
    for w in spans:
        piece_ids = encode_word(w.word, vocab).ids
        for token_id, (s, e) in zip(piece_ids, even_split(w, len(piece_ids))):
            for t in range(s, e):
                labels[t] = token_id
    return FrameLabels(tuple(labels))


# ---------------------------------------------------------------------------
# Timing file: one line per utterance, "utt_id<TAB>word:S:E word:S:E ..."
# S and E are 10 ms frame indices, pre-stacking.
# ---------------------------------------------------------------------------

def write_timings(path: str | Path, timings: dict[str, list[WordTiming]]) -> None:
    lines = []
    for utt_id, words in timings.items():
        cells = " ".join(f"{w.word}:{w.start}:{w.end}" for w in words)
        lines.append(f"{utt_id}\t{cells}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_timings(path: str | Path) -> dict[str, list[WordTiming]]:
    out: dict[str, list[WordTiming]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        utt_id, _, rest = line.partition("\t")
        words = []
        for cell in rest.split():
            word, s, e = cell.rsplit(":", 2)
            words.append(WordTiming(word, int(s), int(e)))
        out[utt_id] = words
    return out
