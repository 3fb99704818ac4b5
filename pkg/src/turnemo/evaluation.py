"""Per-class precision/recall/F1, emotion micro-F1, attention-lexicon matching."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from turnemo import EMOTIONS, LABELS, LEXICON_EMOTIONS
from turnemo.corpus_io import EmotionLexicon
from turnemo.text_pipeline import RESERVED

EMOTION_TO_LEXICON = dict(zip(EMOTIONS, LEXICON_EMOTIONS))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: dict[str, int]
    fp: dict[str, int]
    fn: dict[str, int]

    @classmethod
    def from_labels(cls, preds: Sequence[str], gold: Sequence[str]) -> "ConfusionCounts":
        if len(preds) != len(gold):
            raise ValueError(f"{len(preds)} predictions for {len(gold)} gold labels")
        tp = dict.fromkeys(LABELS, 0)
        fp = dict.fromkeys(LABELS, 0)
        fn = dict.fromkeys(LABELS, 0)
        for p, g in zip(preds, gold):
            if p not in tp or g not in tp:
                raise ValueError(f"label outside {LABELS}: {p!r}/{g!r}")
            if p == g:
                tp[p] += 1
            else:
                fp[p] += 1
                fn[g] += 1
        return cls(tp, fp, fn)


def _ratio(num, den):
    return num / den if den else 0.0


def _f1(p, r):
    return 2 * p * r / (p + r) if p + r else 0.0


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def per_class_prf(preds: Sequence[str], gold: Sequence[str]) -> dict[str, PRF]:
    counts = ConfusionCounts.from_labels(preds, gold)
    out = {}
    for c in LABELS:
        p = _ratio(counts.tp[c], counts.tp[c] + counts.fp[c])
        r = _ratio(counts.tp[c], counts.tp[c] + counts.fn[c])
        out[c] = PRF(p, r, _f1(p, r))
    return out


def micro_f1(counts: ConfusionCounts, classes: Iterable[str] = EMOTIONS) -> float:
    """F1 from TP/FP/FN pooled over the emotion classes ("others" excluded)."""
    classes = list(classes)
    tp = sum(counts.tp[c] for c in classes)
    p = _ratio(tp, tp + sum(counts.fp[c] for c in classes))
    r = _ratio(tp, tp + sum(counts.fn[c] for c in classes))
    return _f1(p, r)


@dataclass(frozen=True)
class MetricsReport:
    per_class: dict[str, PRF]
    micro_f1: float
    n: int

    @classmethod
    def from_labels(cls, preds, gold) -> "MetricsReport":
        return cls(per_class_prf(preds, gold), micro_f1(ConfusionCounts.from_labels(preds, gold)), len(gold))

    def to_tsv(self) -> str:
        lines = ["class\tprecision\trecall\tf1"]
        for c in EMOTIONS:
            m = self.per_class[c]
            lines.append(f"{c}\t{m.precision:.4f}\t{m.recall:.4f}\t{m.f1:.4f}")
        lines.append(f"micro\t\t\t{self.micro_f1:.4f}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        """Happy/Sad/Angry P R F1 columns followed by micro-F1, one row."""
        head1 = "".join(f"{c.capitalize():^24}" for c in EMOTIONS) + f"{'Micro':>8}"
        head2 = "".join(f"{'P':>8}{'R':>8}{'F1':>8}" for _ in EMOTIONS) + f"{'F1':>8}"
        row = "".join(f"{self.per_class[c].precision:8.4f}{self.per_class[c].recall:8.4f}{self.per_class[c].f1:8.4f}"
                      for c in EMOTIONS) + f"{self.micro_f1:8.4f}"
        return "\n".join([head1, head2, row]) + "\n"


def _is_special(tok: str) -> bool:
    return tok in RESERVED


def selection_size(n: int, frac: float) -> int:
    if not 0 < frac <= 1:
        raise ValueError("frac must be in (0, 1]")
    # round first so 0.1 * 30 does not become 4
    return math.ceil(round(frac * n, 9))


def top_attention_tokens(tokens: Sequence[str], scores: Sequence[float], frac: float = 0.2) -> list[str]:
    """The ``ceil(frac * n)`` highest-scored non-special tokens, earliest position wins ties.

    Returned in their original order.
    """
    if len(tokens) != len(scores):
        raise ValueError(f"{len(tokens)} tokens but {len(scores)} scores")
    cand = [(i, t, float(s)) for i, (t, s) in enumerate(zip(tokens, scores)) if not _is_special(t)]
    if not cand:
        return []
    k = selection_size(len(cand), frac)
    chosen = sorted(cand, key=lambda c: (-c[2], c[0]))[:k]
    return [t for _, t, _ in sorted(chosen)]


@dataclass(frozen=True)
class AttentionReport:
    cells: dict[str, dict[str, float]]  # emotion -> lexicon emotion -> percent
    totals: dict[str, int]

    def to_tsv(self) -> str:
        lines = ["emotion\t" + "\t".join(LEXICON_EMOTIONS) + "\tn_tokens"]
        for e in EMOTIONS:
            vals = "\t".join(f"{self.cells[e][l]:.2f}" for l in LEXICON_EMOTIONS)
            lines.append(f"{e}\t{vals}\t{self.totals[e]}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        lines = [f"{'':10}" + "".join(f"{l.capitalize():>10}" for l in LEXICON_EMOTIONS)]
        for e in EMOTIONS:
            lines.append(f"{e.capitalize():10}" + "".join(f"{self.cells[e][l]:9.2f}%" for l in LEXICON_EMOTIONS))
        return "\n".join(lines) + "\n"


def lexicon_match(selected: Mapping[str, Sequence[str]], lexicon: EmotionLexicon) -> AttentionReport:
    """Percent of selected tokens per emotion row found under each lexicon emotion."""
    cells, totals = {}, {}
    for e in EMOTIONS:
        toks = [t.lower() for t in selected.get(e, ()) if not _is_special(t)]
        totals[e] = len(toks)
        row = {}
        for lex in LEXICON_EMOTIONS:
            hits = sum(1 for t in toks if lex in lexicon.emotions(t))
            row[lex] = 100.0 * hits / len(toks) if toks else 0.0
        cells[e] = row
    return AttentionReport(cells, totals)
