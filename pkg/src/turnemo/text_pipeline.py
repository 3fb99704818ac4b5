"""Tokenization with case/repetition markers, vocabulary, numericalization."""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import regex

from turnemo import LABELS
from turnemo.corpus_io import ConversationRecord

PAD, UNK, BOS, MAJ, UP, REP = "<pad>", "<unk>", "<bos>", "<maj>", "<up>", "<rep>"
RESERVED = (PAD, UNK, BOS, MAJ, UP, REP)
VOCAB_HEADER = "#turnemo-vocab v1"

_WS = regex.compile(r"\s+")
# word runs, otherwise one grapheme cluster (keeps emoji with modifiers whole)
_PIECE = regex.compile(r"\w+|\X")
_REPEAT = regex.compile(r"(.)\1{2,}")


def normalize(text: str) -> str:
    return _WS.sub(" ", unicodedata.normalize("NFC", text)).strip()


def _word_tokens(word: str) -> list[str]:
    out = []
    for m in _REPEAT.finditer(word):
        out += [REP, str(len(m.group(0)))]
    word = _REPEAT.sub(r"\1", word)
    if len(word) >= 2 and word.isupper():
        out.append(UP)
    elif word[0].isupper():
        out.append(MAJ)
    out.append(word.lower())
    return out


def tokenize(text: str) -> list[str]:
    """Split text into lowercased words, punctuation and emoji with marker tokens.

    ``<up>`` precedes an all-caps word of two or more letters, ``<maj>`` a
    capitalized one, and ``<rep> n`` a word in which some character ran
    ``n >= 3`` times (the run is collapsed to one character).
    """
    tokens = []
    for chunk in normalize(text).split(" "):
        for piece in _PIECE.findall(chunk):
            if regex.fullmatch(r"\w+", piece):
                tokens += _word_tokens(piece)
            else:
                tokens.append(piece)
    return tokens


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple[str, ...]
    counts: tuple[int, ...]
    min_count: int = 3
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.id_to_token[: len(RESERVED)] != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        mapping = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    @property
    def pad_id(self):
        return 0

    @property
    def unk_id(self):
        return 1

    @property
    def bos_id(self):
        return 2

    def encode(self, tokens: Iterable[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, 1) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"{VOCAB_HEADER}\tmin_count={self.min_count}\n")
            for tok, n in zip(self.id_to_token, self.counts):
                fh.write(f"{tok}\t{n}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if header[0] != VOCAB_HEADER:
                raise ValueError(f"{path}: not a vocabulary file (header {header[0]!r})")
            min_count = int(header[1].split("=", 1)[1])
            toks, counts = [], []
            for line in fh:
                tok, n = line.rstrip("\n").rsplit("\t", 1)
                toks.append(tok)
                counts.append(int(n))
        return cls(tuple(toks), tuple(counts), min_count)


def build_vocab(token_streams: Iterable[Sequence[str]], min_count: int = 3) -> Vocabulary:
    """Reserved tokens, then every token seen ``min_count`` times or more.

    Ordered by descending frequency, ties broken lexicographically.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    freq = Counter()
    for stream in token_streams:
        freq.update(stream)
    kept = sorted(
        (t for t, n in freq.items() if n >= min_count and t not in RESERVED),
        key=lambda t: (-freq[t], t),
    )
    toks = RESERVED + tuple(kept)
    return Vocabulary(toks, tuple(freq[t] for t in toks), min_count)


@dataclass(frozen=True)
class NumericalizedConversation:
    ids: tuple[int, ...]
    spans: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]
    label_id: int | None = None
    id: str = ""
    tokens: tuple[str, ...] | None = None

    def __len__(self):
        return len(self.ids)

    def turn(self, i: int) -> tuple[int, ...]:
        start, end = self.spans[i]
        return self.ids[start:end]


def numericalize(rec: ConversationRecord, vocab: Vocabulary) -> NumericalizedConversation:
    """Concatenate the three tokenized turns, recording each turn's span.

    An empty turn becomes a single ``<unk>`` so every span is non-empty.
    """
    ids: list[int] = []
    toks: list[str] = []
    spans = []
    for text in rec.turns:
        turn_toks = tokenize(text) or [UNK]
        start = len(ids)
        ids += vocab.encode(turn_toks)
        toks += turn_toks
        spans.append((start, len(ids)))
    label_id = LABELS.index(rec.label) if rec.label is not None else None
    return NumericalizedConversation(tuple(ids), tuple(spans), label_id, rec.id, tuple(toks))


def reverse(ids: Sequence[int]) -> list[int]:
    return list(ids)[::-1]


def reverse_spans(spans, length: int):
    return tuple((length - end, length - start) for start, end in spans)


def reverse_conversation(conv: NumericalizedConversation) -> NumericalizedConversation:
    """Token-reversed copy whose span ``i`` still addresses turn ``i``."""
    n = len(conv.ids)
    return NumericalizedConversation(
        tuple(reverse(conv.ids)),
        reverse_spans(conv.spans, n),
        conv.label_id,
        conv.id,
        None if conv.tokens is None else tuple(reversed(conv.tokens)),
    )
