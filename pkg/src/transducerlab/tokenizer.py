"""Word-piece vocabulary construction and marker-based tokenization.

Word-initial pieces carry a leading ``_`` instead of a separate space token,
so a transcript costs exactly one token per piece. The delimiter-scheme
counter quantifies how many tokens the older space-as-token layout would
have spent on the same text.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

BLANK = "<blank>"
UNK = "<unk>"
BLANK_ID = 0
UNK_ID = 1
MARKER = "_"


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Ordered piece inventory; id 0 is <blank>, id 1 is <unk>."""

    pieces: tuple[str, ...]
    _ids: dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.pieces[:2] != (BLANK, UNK):
            raise TokenizerError("ids 0 and 1 must be <blank> and <unk>")
        if len(set(self.pieces)) != len(self.pieces):
            raise TokenizerError("duplicate pieces")
        object.__setattr__(self, "_ids", {p: i for i, p in enumerate(self.pieces)})

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def n_labels(self) -> int:
        """Number of emittable ids (everything except <blank>)."""
        return len(self.pieces) - 1

    def id_of(self, piece: str) -> int | None:
        return self._ids.get(piece)

    def piece_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.pieces):
            raise TokenizerError(f"token id {token_id} out of range")
        return self.pieces[token_id]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.pieces) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(lines))


@dataclass(frozen=True)
class TokenSeq:
    """Label id sequence; never contains <blank>."""

    ids: tuple[int, ...]

    def __post_init__(self):
        if any(i == BLANK_ID for i in self.ids):
            raise TokenizerError("blank id not allowed in a token sequence")
        if any(i < 0 for i in self.ids):
            raise TokenizerError("negative token id")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def U(self) -> int:
        return len(self.ids)


def normalize(text: str) -> str:
    """Lowercase and collapse runs of whitespace to single spaces."""
    return " ".join(text.lower().split())


def _coverage_pieces(corpus: list[str]) -> set[str]:
    """Single-character pieces needed to segment every corpus word."""
    needed: set[str] = set()
    for line in corpus:
        for word in normalize(line).split():
            needed.add(MARKER + word[0])
            needed.update(word[1:])
    return needed


def build_vocab(corpus: list[str], target_size: int) -> Vocabulary:
    """Greedy pair-merge vocabulary over marker-prefixed corpus words.

    Pairs are merged by descending count, ties broken by the lexicographic
    order of the merged string, until the inventory reaches ``target_size``
    or no pair occurs twice. Deterministic for identical inputs.
    """
    if not corpus:
        raise TokenizerError("empty corpus")
    coverage = _coverage_pieces(corpus)
    floor = 2 + len(coverage)
    if target_size < floor:
        raise TokenizerError(
            f"target_size {target_size} below coverage floor {floor}")

    word_counts = Counter()
    for line in corpus:
        for word in normalize(line).split():
            word_counts[word] += 1
    # Each word starts as a marker-prefixed first character plus bare tails.
    segmentations = {
        w: [MARKER + w[0]] + list(w[1:]) for w in word_counts
    }
    inventory = set(coverage)
    while len(inventory) + 2 < target_size:
        pair_counts: Counter[tuple[str, str]] = Counter()
        for word, seg in segmentations.items():
            c = word_counts[word]
            for a, b in zip(seg, seg[1:]):
                pair_counts[(a, b)] += c
        if not pair_counts:
            break
        (left, right), count = min(
            pair_counts.items(),
            key=lambda kv: (-kv[1], kv[0][0] + kv[0][1], kv[0][0]))
        if count < 2:
            break
        merged = left + right
        inventory.add(merged)
        for word, seg in segmentations.items():
            out = []
            i = 0
            while i < len(seg):
                if i + 1 < len(seg) and seg[i] == left and seg[i + 1] == right:
                    out.append(merged)
                    i += 2
                else:
                    out.append(seg[i])
                    i += 1
            segmentations[word] = out
    ordered = sorted(inventory)
    return Vocabulary((BLANK, UNK, *ordered))


def encode(text: str, vocab: Vocabulary) -> TokenSeq:
    """Greedy longest-match segmentation; first piece of a word is marker-prefixed."""
    ids: list[int] = []
    for word in normalize(text).split():
        ids.extend(_encode_word(word, vocab))
    return TokenSeq(tuple(ids))


def encode_word(word: str, vocab: Vocabulary) -> TokenSeq:
    return TokenSeq(tuple(_encode_word(normalize(word), vocab)))


def _encode_word(word: str, vocab: Vocabulary) -> list[int]:
    ids: list[int] = []
    pos = 0
    initial = True
    while pos < len(word):
        prefix = MARKER + word[pos:] if initial else word[pos:]
        match_id = None
        match_len = 0
        # longest match first
        for end in range(len(prefix), 0, -1):
            if initial and end == 1:
                break  # bare "_" is not a piece
            candidate = vocab.id_of(prefix[:end])
            if candidate is not None:
                match_id = candidate
                match_len = end - 1 if initial else end
                break
        if match_id is None:
            ids.append(UNK_ID)
            pos += 1
        else:
            ids.append(match_id)
            pos += match_len
        initial = False
    return ids


def decode(seq: TokenSeq, vocab: Vocabulary) -> str:
    """Concatenate pieces; a marker starts a new space-separated word."""
    out: list[str] = []
    for token_id in seq.ids:
        piece = vocab.piece_of(token_id)
        if piece.startswith(MARKER):
            out.append(" ")
            out.append(piece[len(MARKER):])
        else:
            out.append(piece)
    return "".join(out).lstrip(" ")


def scheme_token_counts(text: str, vocab: Vocabulary) -> tuple[int, int]:
    """(marker_count, delimiter_count) for the same transcript.

    The delimiter scheme spends one space token between and around words, so
    it always costs word_count + 1 extra tokens.
    """
    text = normalize(text)
    marker = len(encode(text, vocab))
    words = len(text.split())
    return marker, marker + words + 1
