"""Generated conversations with planted emotion keywords, for smoke runs and tests."""

from __future__ import annotations

import numpy as np

from turnemo import LABELS
from turnemo.corpus_io import ConversationRecord

KEYWORDS = {
    "happy": ("happy", "glad"),
    "sad": ("sad", "cry"),
    "angry": ("angry", "mad"),
}
LEXICON_ROWS = [("happy", "joy"), ("glad", "joy"), ("sad", "sadness"), ("cry", "sadness"),
                ("angry", "anger"), ("mad", "anger")]
FILLER = (
    "the a you i it is was we they this that what how where when today now then really just "
    "going think know said about with from work home time day night phone movie dinner friend "
    "car weather music book game school office coffee tea plan later maybe sure okay yes no"
).split()
DEFAULT_MIX = {"happy": 0.2, "sad": 0.2, "angry": 0.2, "others": 0.4}


def _sentence(rng: np.random.Generator, lo: int, hi: int) -> list[str]:
    return [FILLER[i] for i in rng.integers(0, len(FILLER), size=int(rng.integers(lo, hi + 1)))]


def _style(words: list[str], rng: np.random.Generator) -> str:
    out = []
    for w in words:
        r = rng.random()
        if r < 0.1:
            w = w.capitalize()
        elif r < 0.13:
            w = w.upper()
        out.append(w)
    if rng.random() < 0.3:
        out.append(str(rng.choice(["!", "?", ".", "😂", "🙂"])))
    return " ".join(out)


def make_conversations(n: int, seed: int = 0, mix: dict | None = None,
                       distractor_rate: float = 0.5) -> list[ConversationRecord]:
    """``n`` labeled conversations; the label's keyword sits in turn 3, distractors in turn 2."""
    rng = np.random.default_rng(seed)
    mix = mix or DEFAULT_MIX
    probs = np.array([mix[c] for c in LABELS], dtype=float)
    labels = rng.choice(len(LABELS), size=n, p=probs / probs.sum())
    records = []
    for k, lab in enumerate(labels):
        label = LABELS[lab]
        t1 = _sentence(rng, 3, 7)
        t2 = _sentence(rng, 3, 7)
        if rng.random() < distractor_rate:
            emo = str(rng.choice(list(KEYWORDS)))
            t2.insert(int(rng.integers(0, len(t2) + 1)), str(rng.choice(KEYWORDS[emo])))
        t3 = _sentence(rng, 3, 7)
        if label in KEYWORDS:
            t3.insert(int(rng.integers(0, len(t3) + 1)), str(rng.choice(KEYWORDS[label])))
        records.append(ConversationRecord(str(k), (_style(t1, rng), _style(t2, rng), _style(t3, rng)), label))
    return records


def make_random_corpus(n_tokens: int, seed: int = 0) -> list[str]:
    """Lines of uniformly random filler and keyword words, about ``n_tokens`` words in all."""
    rng = np.random.default_rng(seed)
    vocab = FILLER + [w for ws in KEYWORDS.values() for w in ws]
    lines, count = [], 0
    while count < n_tokens:
        m = int(min(rng.integers(5, 13), n_tokens - count))
        lines.append(" ".join(vocab[i] for i in rng.integers(0, len(vocab), size=m)))
        count += m
    return lines


def lexicon_lines() -> list[str]:
    """Six-word lexicon in word/emotion/flag form, with a few zero-flag rows."""
    rows = [f"{w}\t{e}\t1" for w, e in LEXICON_ROWS]
    rows += [f"{w}\t{e}\t0" for w, e in (("happy", "anger"), ("sad", "joy"), ("mad", "sadness"))]
    return rows

_TEMPLATES = (
    "i {v} the {n} {t} .",
    "we {v} a {a} {n} at {p} .",
    "did you {v} the {n} ?",
    "my {r} said the {n} was {a} .",
    "they will {v} it {t} , {o} .",
    "the {a} {n} is at {p} now .",
    "can we {v} {t} ?",
    "{o} , i {v} my {r} {t} .",
)
_SLOTS = {
    "v": "see call bring find watch cook fix need".split(),
    "n": "movie dinner phone car book game plan song".split(),
    "t": "today tomorrow tonight later".split(),
    "a": "new old big small nice long".split(),
    "p": "home work school the office".split(),
    "r": "friend brother sister mom dad".split(),
    "o": "okay sure yes maybe".split(),
}


def make_text_corpus(n_tokens: int, seed: int = 0) -> list[str]:
    """Template sentences with random slot fillers, about ``n_tokens`` tokens of chat-like text."""
    rng = np.random.default_rng(seed)
    lines, count = [], 0
    while count < n_tokens:
        tpl = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
        fill = {k: v[int(rng.integers(len(v)))] for k, v in _SLOTS.items()}
        line = tpl.format(**fill)
        lines.append(line)
        count += len(line.split()) + 1
    return lines


EMOJI = {"happy": "🙂", "sad": "😢", "angry": "😠"}


def make_general_corpus(n_tokens: int, seed: int = 0) -> list[str]:
    """Chat-like template text in which an emotion word predicts an emoji a few words later.

    Predicting the emoji forces a language model to carry the emotion word
    in its state, which is what the classifier later reuses.
    """
    rng = np.random.default_rng(seed)
    text = make_text_corpus(n_tokens, seed + 1)
    lines, count = [], 0
    for line in text:
        if rng.random() < 0.4:
            emo = str(rng.choice(list(KEYWORDS)))
            word = str(rng.choice(KEYWORDS[emo]))
            tail = _sentence(rng, 0, 4)
            line = " ".join(["i", "am", "so", word, *tail, EMOJI[emo]])
        lines.append(line)
        count += len(line.split())
        if count >= n_tokens:
            break
    return lines
