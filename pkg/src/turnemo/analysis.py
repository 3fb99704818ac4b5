"""Attention extraction from a trained classifier and the attention-lexicon report."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from turnemo import EMOTIONS, LABELS
from turnemo.classifier import TurnAttentionClassifier
from turnemo.corpus_io import ConversationRecord, EmotionLexicon
from turnemo.evaluation import AttentionReport, lexicon_match, top_attention_tokens
from turnemo.text_pipeline import NumericalizedConversation, Vocabulary
from turnemo.training import collate, prepare

ATTENDED_TURNS = (0, 2)


@dataclass(frozen=True)
class TurnAttention:
    conv_id: str
    turn: int  # 1-based
    tokens: tuple[str, ...]
    scores: tuple[float, ...]


@torch.no_grad()
def collect_attention(model: TurnAttentionClassifier, convs: Sequence[NumericalizedConversation],
                      batch_size: int = 128) -> tuple[list[TurnAttention], torch.Tensor]:
    """Turn-1 and turn-3 attention scores per conversation, in reading order, plus class probabilities."""
    if not model.cfg.uses_attention:
        raise ValueError(f"variant {model.cfg.variant} has no attention layer")
    model.eval()
    backward = model.encoder.cfg.direction == "backward"
    out, probs = [], []
    for i in range(0, len(convs), batch_size):
        chunk = convs[i: i + batch_size]
        ids, lengths, spans, _ = collate(chunk)
        logits, att1, att3 = model(ids, lengths, spans, return_attention=True)
        probs.append(torch.softmax(logits, dim=-1))
        for b, conv in enumerate(chunk):
            for k, att in zip(ATTENDED_TURNS, (att1, att3)):
                start, end = conv.spans[k]
                toks = list(conv.tokens[start:end])
                sc = att.scores[b, start:end].tolist()
                if backward:
                    toks, sc = toks[::-1], sc[::-1]
                out.append(TurnAttention(conv.id, k + 1, tuple(toks), tuple(sc)))
    return out, torch.cat(probs) if probs else torch.zeros(0, len(LABELS))


def select_tokens(attn: Sequence[TurnAttention], buckets: dict[str, str], frac: float = 0.2,
                  scope: str = "turn") -> dict[str, list[str]]:
    """Top-``frac`` attended tokens grouped by each conversation's emotion bucket.

    ``scope="turn"`` selects within each attended turn; ``"conversation"``
    ranks turns 1 and 3 jointly.
    """
    if scope not in ("turn", "conversation"):
        raise ValueError("scope must be 'turn' or 'conversation'")
    selected: dict[str, list[str]] = {e: [] for e in EMOTIONS}
    if scope == "turn":
        groups = [[a] for a in attn]
    else:
        by_conv: dict[str, list[TurnAttention]] = {}
        for a in attn:
            by_conv.setdefault(a.conv_id, []).append(a)
        groups = list(by_conv.values())
    for group in groups:
        bucket = buckets.get(group[0].conv_id)
        if bucket not in selected:
            continue
        toks = [t for a in group for t in a.tokens]
        scores = [s for a in group for s in a.scores]
        selected[bucket] += top_attention_tokens(toks, scores, frac)
    return selected


def attention_report(model: TurnAttentionClassifier, records: Sequence[ConversationRecord], vocab: Vocabulary,
                     lexicon: EmotionLexicon, frac: float = 0.2, scope: str = "turn",
                     rows: str = "gold") -> tuple[AttentionReport, list[TurnAttention]]:
    """Attention-lexicon matching percentages; rows bucket conversations by gold or predicted emotion."""
    convs = prepare(records, vocab, model.encoder.cfg.direction)
    attn, probs = collect_attention(model, convs)
    if rows == "gold":
        buckets = {r.id: r.label for r in records}
    elif rows == "pred":
        buckets = {c.id: LABELS[int(p)] for c, p in zip(convs, probs.argmax(dim=-1))}
    else:
        raise ValueError("rows must be 'gold' or 'pred'")
    return lexicon_match(select_tokens(attn, buckets, frac, scope), lexicon), attn


def attention_tsv(attn: Sequence[TurnAttention]) -> str:
    lines = ["id\tturn\ttoken\tscore"]
    for a in attn:
        lines += [f"{a.conv_id}\t{a.turn}\t{t}\t{s:.6f}" for t, s in zip(a.tokens, a.scores)]
    return "\n".join(lines) + "\n"
