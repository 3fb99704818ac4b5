"""Readers and writers for conversation TSVs, LM corpora and emotion lexicons."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from turnemo import LABELS, LEXICON_EMOTIONS

CONVERSATION_HEADER = ("id", "turn1", "turn2", "turn3", "label")


class FormatError(ValueError):
    """A data file does not follow its expected layout."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True)
class ConversationRecord:
    id: str
    turns: tuple[str, str, str]
    label: str | None = None

    def __post_init__(self):
        if len(self.turns) != 3:
            raise ValueError(f"a conversation has exactly 3 turns, got {len(self.turns)}")
        if self.label is not None and self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")


@dataclass(frozen=True)
class EmotionLexicon:
    entries: dict[str, frozenset[str]]

    def emotions(self, word: str) -> frozenset[str]:
        return self.entries.get(word.lower(), frozenset())

    def __len__(self):
        return len(self.entries)


def load_conversations(path, has_labels: bool = True) -> list[ConversationRecord]:
    """Read a header-prefixed TSV of ``id, turn1, turn2, turn3[, label]`` rows."""
    expected = 5 if has_labels else 4
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        header = fh.readline()
        if not header:
            return records
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != expected:
                raise FormatError(path, lineno, f"expected {expected} columns, found {len(cols)}")
            label = None
            if has_labels:
                label = cols[4].strip().lower()
                if label not in LABELS:
                    raise FormatError(path, lineno, f"unknown label {cols[4]!r}")
            records.append(ConversationRecord(cols[0], (cols[1], cols[2], cols[3]), label))
    return records


def write_conversations(path, records: Iterable[ConversationRecord], with_labels: bool = True):
    header = CONVERSATION_HEADER if with_labels else CONVERSATION_HEADER[:4]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for rec in records:
            for field in (rec.id, *rec.turns):
                if "\t" in field or "\n" in field:
                    raise ValueError(f"record {rec.id!r}: tabs and newlines are not allowed in fields")
            cols = [rec.id, *rec.turns]
            if with_labels:
                if rec.label is None:
                    raise ValueError(f"record {rec.id!r} has no label")
                cols.append(rec.label)
            fh.write("\t".join(cols) + "\n")


def load_lexicon(path) -> EmotionLexicon:
    """Read ``word<TAB>emotion<TAB>0|1`` triples, keeping flagged joy/sadness/anger rows."""
    merged: dict[str, set[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 3 or cols[2].strip() not in ("0", "1"):
                raise FormatError(path, lineno, f"expected word<TAB>emotion<TAB>0|1, got {line!r}")
            word, emotion, flag = cols[0].strip().lower(), cols[1].strip().lower(), cols[2].strip()
            if not word:
                raise FormatError(path, lineno, "empty word")
            if flag == "1" and emotion in LEXICON_EMOTIONS:
                merged.setdefault(word, set()).add(emotion)
    return EmotionLexicon({w: frozenset(e) for w, e in merged.items()})


def load_corpus(path) -> list[str]:
    """Non-blank lines of a UTF-8 text file, in order."""
    text = Path(path).read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]
