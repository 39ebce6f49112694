"""Seeded synthetic corpora and the binary feature file formats.

Utterances are rendered from per-character prototype feature vectors: each
character of a word holds its prototype for a few frames, every frame gets a
per-utterance speaker offset plus white noise, and silence separates words.
Sentences come from an order-2 n-gram over a fixed word list, so the text
side carries learnable structure; a domain shift swaps the n-gram table while
the acoustic tables stay byte-identical.

All randomness flows through numpy's seeded PCG64 generators, so corpora are
reproducible across platforms.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import WordTiming
from .network import FrameMatrix


class DatasetError(ValueError):
    pass


@dataclass
class Utterance:
    utt_id: str
    features: FrameMatrix  # 10 ms frames, pre-stacking
    transcript: str
    words: list[WordTiming]

    def __post_init__(self):
        spoken = [w.word for w in self.words]
        if spoken != self.transcript.split():
            raise DatasetError(f"{self.utt_id}: timing words do not match transcript")
        if self.words and self.words[-1].end > self.features.T:
            raise DatasetError(f"{self.utt_id}: timings exceed frame count")


@dataclass
class SynthSpec:
    domain: str
    words: tuple[str, ...]
    char_index: dict[str, int]
    prototypes: np.ndarray      # (n_chars, feature_dim)
    initial: np.ndarray         # (n_words,)
    transitions: np.ndarray     # (n_words, n_words)
    sentence_len: tuple[int, int] = (2, 5)
    frames_per_unit: tuple[int, int] = (3, 7)
    silence_frames: tuple[int, int] = (0, 3)
    noise_sigma: float = 0.3
    speaker_scale: float = 0.5
    n_speakers: int | None = None

    def __post_init__(self):
        if not self.words:
            raise DatasetError("empty word list")
        if self.noise_sigma < 0:
            raise DatasetError("noise sigma must be >= 0")

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]


_CONSONANTS = "bdgkmn"
_VOWELS = "aoe"


def _word_list(rng: np.random.Generator, n_words: int) -> tuple[str, ...]:
    """2-3 syllable CV words over a small alphabet; first syllables come from
    an even smaller pool, so words share onsets and substrings and cannot be
    identified from their first frames."""
    onsets = ["".join((c, v)) for c in _CONSONANTS[:4] for v in _VOWELS[:2]]
    tails = ["".join((c, v)) for c in _CONSONANTS for v in _VOWELS]
    words: list[str] = []
    seen = set()
    while len(words) < n_words:
        parts = [onsets[rng.integers(len(onsets))]]
        for _ in range(int(rng.integers(1, 3))):
            parts.append(tails[rng.integers(len(tails))])
        word = "".join(parts)
        if word not in seen:
            seen.add(word)
            words.append(word)
    return tuple(words)


def _ngram_tables(rng: np.random.Generator, n_words: int):
    """Sparse-ish bigram: each word favors a handful of successors."""
    initial = rng.dirichlet(np.full(n_words, 0.3))
    transitions = np.full((n_words, n_words), 0.02)
    for i in range(n_words):
        successors = rng.choice(n_words, size=5, replace=False)
        transitions[i, successors] += rng.dirichlet(np.full(5, 0.8)) * 5.0
    transitions /= transitions.sum(axis=1, keepdims=True)
    return initial, transitions


def make_spec(domain: str = "base", *, text_seed: int | None = None,
              acoustic_seed: int = 11, n_words: int = 50, feature_dim: int = 8,
              noise_sigma: float = 0.3, speaker_scale: float = 0.5,
              n_speakers: int | None = None,
              sentence_len: tuple[int, int] = (2, 5),
              frames_per_unit: tuple[int, int] = (3, 7),
              silence_frames: tuple[int, int] = (0, 3)) -> SynthSpec:
    """Build a corpus spec; text tables depend only on the text seed, acoustic
    tables only on the acoustic seed, so domains can share one and vary the
    other."""
    if text_seed is None:
        text_seed = zlib.crc32(domain.encode("utf-8"))
    a_rng = np.random.default_rng(acoustic_seed)
    words = _word_list(a_rng, n_words)
    chars = sorted({c for w in words for c in w})
    prototypes = a_rng.normal(size=(len(chars), feature_dim))
    t_rng = np.random.default_rng(text_seed)
    initial, transitions = _ngram_tables(t_rng, n_words)
    return SynthSpec(domain=domain, words=words,
                     char_index={c: i for i, c in enumerate(chars)},
                     prototypes=prototypes, initial=initial,
                     transitions=transitions, sentence_len=sentence_len,
                     frames_per_unit=frames_per_unit,
                     silence_frames=silence_frames, noise_sigma=noise_sigma,
                     speaker_scale=speaker_scale, n_speakers=n_speakers)


def sample_sentence(spec: SynthSpec, rng: np.random.Generator) -> list[str]:
    length = int(rng.integers(spec.sentence_len[0], spec.sentence_len[1] + 1))
    idx = int(rng.choice(len(spec.words), p=spec.initial))
    sentence = [spec.words[idx]]
    for _ in range(length - 1):
        idx = int(rng.choice(len(spec.words), p=spec.transitions[idx]))
        sentence.append(spec.words[idx])
    return sentence


def synth_corpus(spec: SynthSpec, n_utts: int, seed: int) -> list[Utterance]:
    """Render ``n_utts`` utterances with exact ground-truth word timings."""
    if n_utts < 1:
        raise DatasetError("need at least one utterance")
    rng = np.random.default_rng(seed)
    pool = None
    if spec.n_speakers:
        pool = np.random.default_rng((seed, 47)).standard_normal(
            (spec.n_speakers, spec.feature_dim))
    sil_lo, sil_hi = spec.silence_frames
    fpu_lo, fpu_hi = spec.frames_per_unit
    corpus: list[Utterance] = []
    for i in range(n_utts):
        if pool is not None:
            offset = spec.speaker_scale * pool[int(rng.integers(len(pool)))]
        else:
            offset = spec.speaker_scale * rng.standard_normal(spec.feature_dim)
        sentence = sample_sentence(spec, rng)
        rows: list[np.ndarray] = []
        timings: list[WordTiming] = []
        for word in sentence:
            gap = int(rng.integers(sil_lo, sil_hi + 1))
            rows.extend([np.zeros(spec.feature_dim)] * gap)
            start = len(rows)
            for ch in word:
                proto = spec.prototypes[spec.char_index[ch]]
                frames = int(rng.integers(fpu_lo, fpu_hi + 1))
                rows.extend([proto] * frames)
            timings.append(WordTiming(word, start, len(rows)))
        rows.extend([np.zeros(spec.feature_dim)] * int(rng.integers(sil_lo, sil_hi + 1)))
        feats = np.stack(rows) + offset
        feats += spec.noise_sigma * rng.standard_normal(feats.shape)
        corpus.append(Utterance(
            utt_id=f"{spec.domain}-s{seed}-u{i:05d}",
            features=FrameMatrix(feats),
            transcript=" ".join(sentence),
            words=timings))
    return corpus


def frame_coverage(utt: Utterance) -> list[str]:
    """Per-frame tag "word" or "sil"; words and silence must tile the signal."""
    tags = ["sil"] * utt.features.T
    for w in utt.words:
        for t in range(w.start, w.end):
            if tags[t] != "sil":
                raise DatasetError(f"{utt.utt_id}: frame {t} claimed twice")
            tags[t] = "word"
    return tags


def transcripts(corpus: list[Utterance]) -> list[str]:
    return [u.transcript for u in corpus]


# ---------------------------------------------------------------------------
# On-disk corpus: RNTF feature files plus UTF-8 index/transcript/timing lines
# ---------------------------------------------------------------------------

FEATURE_MAGIC = b"RNTF"


def write_feature_file(path: str | Path, feat: FrameMatrix) -> None:
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", feat.T, feat.D))
        fh.write(feat.values.astype("<f4").tobytes())


def read_feature_file(path: str | Path) -> FrameMatrix:
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise DatasetError(f"{path}: bad magic at byte 0: {blob[:4]!r}")
    if len(blob) < 12:
        raise DatasetError(f"{path}: truncated header at byte {len(blob)}")
    t, d = struct.unpack("<II", blob[4:12])
    need = 12 + 4 * t * d
    if len(blob) < need:
        raise DatasetError(f"{path}: truncated payload at byte {len(blob)}, need {need}")
    values = np.frombuffer(blob[12:need], dtype="<f4").astype(np.float64)
    return FrameMatrix(values.reshape(t, d))


def write_corpus(corpus: list[Utterance], root: str | Path) -> None:
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    index, trans, times = ["utt_id\tpath"], [], []
    for utt in corpus:
        rel = f"features/{utt.utt_id}.rntf"
        write_feature_file(root / rel, utt.features)
        index.append(f"{utt.utt_id}\t{rel}")
        trans.append(f"{utt.utt_id}\t{utt.transcript}")
        cells = " ".join(f"{w.word}:{w.start}:{w.end}" for w in utt.words)
        times.append(f"{utt.utt_id}\t{cells}")
    (root / "index.tsv").write_text("\n".join(index) + "\n", encoding="utf-8")
    (root / "transcripts.tsv").write_text("\n".join(trans) + "\n", encoding="utf-8")
    (root / "timings.tsv").write_text("\n".join(times) + "\n", encoding="utf-8")


def read_corpus(root: str | Path) -> list[Utterance]:
    root = Path(root)
    lines = [l for l in
             (root / "index.tsv").read_text(encoding="utf-8").splitlines()[1:] if l]
    trans = dict(line.split("\t", 1) for line in
                 (root / "transcripts.tsv").read_text(encoding="utf-8").splitlines()
                 if line)
    times: dict[str, list[WordTiming]] = {}
    for line in (root / "timings.tsv").read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        utt_id, _, rest = line.partition("\t")
        words = []
        for cell in rest.split():
            word, s, e = cell.rsplit(":", 2)
            words.append(WordTiming(word, int(s), int(e)))
        times[utt_id] = words
    corpus = []
    for line in lines:
        utt_id, rel = line.split("\t")
        corpus.append(Utterance(
            utt_id=utt_id,
            features=read_feature_file(root / rel),
            transcript=trans[utt_id],
            words=times.get(utt_id, [])))
    return corpus
