"""Per-turn attention, pooling, variant composition and the linear head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch import nn

from turnemo.encoder import Encoder, EncoderOutput
from turnemo.numeric import dropout, masked_mean, masked_softmax

VARIANTS = ("A", "B", "C", "D", "E", "F")
POOLING = ("mean", "sum")


@dataclass(frozen=True)
class ClassifierConfig:
    variant: str = "A"
    hidden_dim: int = 100
    dropout: float = 0.4
    n_classes: int = 4
    pooling: str = "mean"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.pooling not in POOLING:
            raise ValueError(f"pooling must be one of {POOLING}")

    def input_dim(self, d_enc: int) -> int:
        return d_enc if self.variant in ("D", "E") else 2 * d_enc

    @property
    def uses_attention(self) -> bool:
        return self.variant != "B"

    def to_dict(self):
        return asdict(self)


@dataclass
class AttentionResult:
    scores: torch.Tensor  # (..., N)
    scored: torch.Tensor  # (..., N, d)


def turn_attention(T_enc: torch.Tensor, mask: torch.Tensor, W: torch.Tensor) -> AttentionResult:
    """Softmax of ``W . T_j`` over unmasked positions; ``O_j = S_j * T_j``.

    ``T_enc`` is (..., N, d) and ``mask`` (..., N) is true where a position
    belongs to the turn.
    """
    if T_enc.shape[-1] != W.shape[-1]:
        raise ValueError(f"attention vector {tuple(W.shape)} does not match encodings {tuple(T_enc.shape)}")
    S = masked_softmax(T_enc @ W, mask)
    return AttentionResult(S, S.unsqueeze(-1) * T_enc)


def avg_pool(O: torch.Tensor, mask: torch.Tensor, mode: str = "mean") -> torch.Tensor:
    if mode == "mean":
        return masked_mean(O, mask)
    if mode == "sum":
        if not mask.any(dim=-1).all():
            raise ValueError("pooling over a fully masked slice")
        return (O * mask.unsqueeze(-1).to(O.dtype)).sum(dim=-2)
    raise ValueError(f"unknown pooling mode {mode!r}")


def span_masks(spans: torch.Tensor, length: int) -> torch.Tensor:
    """(batch, 3, 2) spans -> (batch, 3, length) boolean membership masks."""
    pos = torch.arange(length).view(1, 1, -1)
    return (pos >= spans[..., :1]) & (pos < spans[..., 1:])


def turn_view(enc: torch.Tensor, mask: torch.Tensor, width: int):
    """Left-aligned (batch, width, d) copy of one contiguous turn plus its validity mask and source index.

    Working on aligned copies makes identical turns go through identical
    float operations wherever they sit in the conversation.
    """
    start = mask.int().argmax(dim=-1)
    n = mask.sum(dim=-1)
    pos = torch.arange(width, device=enc.device)
    valid = pos < n.unsqueeze(-1)
    idx = (start.unsqueeze(-1) + pos).clamp(max=enc.shape[1] - 1)
    view = enc.gather(1, idx.unsqueeze(-1).expand(-1, -1, enc.shape[-1])) * valid.unsqueeze(-1).to(enc.dtype)
    return view, valid, idx


def _scatter_back(att: AttentionResult, idx: torch.Tensor, length: int) -> AttentionResult:
    # padded entries are exact zeros, so scatter_add leaves real positions untouched
    scores = att.scores.new_zeros(idx.shape[0], length).scatter_add(1, idx, att.scores)
    scored = att.scored.new_zeros(idx.shape[0], length, att.scored.shape[-1])
    scored = scored.scatter_add(1, idx.unsqueeze(-1).expand_as(att.scored), att.scored)
    return AttentionResult(scores, scored)


def build_input(enc: torch.Tensor, masks: torch.Tensor, W1: torch.Tensor | None, W3: torch.Tensor | None,
                cfg: ClassifierConfig, return_attention: bool = False):
    """Compose the linear block's input from (batch, L, d) encodings.

    ``masks`` is (batch, 3, L), one contiguous span per turn. Returns ``x_in``
    and, on request, the turn-1 and turn-3 attention results laid out over the
    full length (``None`` for variant B).
    """
    m1, m3 = masks[:, 0], masks[:, 2]
    width = int(torch.maximum(m1.sum(-1), m3.sum(-1)).max())
    T1, v1, idx1 = turn_view(enc, m1, width)
    T3, v3, idx3 = turn_view(enc, m3, width)
    att1 = att3 = None
    if cfg.variant == "B":
        pooled1 = masked_mean(T1, v1)
        pooled3 = masked_mean(T3, v3)
        x_in = torch.cat([pooled1 - pooled3, pooled3], dim=-1)
    else:
        a1 = turn_attention(T1, v1, W1)
        a3 = turn_attention(T3, v3, W3)
        p1 = avg_pool(a1.scored, v1, cfg.pooling)
        p3 = avg_pool(a3.scored, v3, cfg.pooling)
        diff = p1 - p3
        if cfg.variant in ("A", "F"):
            x_in = torch.cat([diff, p3], dim=-1)
        elif cfg.variant == "C":
            whole = masks.any(dim=1)
            x_in = torch.cat([diff, masked_mean(enc, whole)], dim=-1)
        elif cfg.variant == "D":
            x_in = diff
        elif cfg.variant == "E":
            x_in = p3
        else:
            raise ValueError(f"unknown variant {cfg.variant!r}")
        if return_attention:
            L = enc.shape[1]
            att1, att3 = _scatter_back(a1, idx1, L), _scatter_back(a3, idx3, L)
    if return_attention:
        return x_in, att1, att3
    return x_in


def build_input_single(enc: EncoderOutput, W1, W3, cfg: ClassifierConfig) -> torch.Tensor:
    """``build_input`` for one unbatched conversation."""
    spans = torch.tensor([enc.spans])
    masks = span_masks(spans, enc.vectors.shape[0])
    return build_input(enc.vectors.unsqueeze(0), masks, W1, W3, cfg)[0]


def linear_block(x_in, w1, b1, w2, b2, p_drop=0.0, training=False, generator=None):
    """Dense -> relu -> dropout -> dense; returns class logits."""
    if x_in.shape[-1] != w1.shape[1]:
        raise ValueError(f"classifier input {tuple(x_in.shape)} does not match layer {tuple(w1.shape)}")
    h = torch.relu(x_in @ w1.T + b1)
    h = dropout(h, p_drop, generator, training)
    return h @ w2.T + b2


def classify(x_in, weights: Sequence[torch.Tensor], cfg: ClassifierConfig, train: bool = False, generator=None):
    """Class probabilities over (happy, sad, angry, others)."""
    return torch.softmax(linear_block(x_in, *weights, cfg.dropout, train, generator), dim=-1)


def ensemble(p_fwd: torch.Tensor, p_bwd: torch.Tensor) -> torch.Tensor:
    if p_fwd.shape != p_bwd.shape:
        raise ValueError(f"cannot ensemble {tuple(p_fwd.shape)} with {tuple(p_bwd.shape)}")
    p = (p_fwd + p_bwd) / 2
    s = p.sum(dim=-1, keepdim=True)
    # rows already normalized to working precision are left alone; dividing
    # them would only add rounding noise
    tol = 4 * p.shape[-1] * torch.finfo(p.dtype).eps
    return torch.where((s - 1).abs() <= tol, p, p / s)


class TurnAttentionClassifier(nn.Module):
    """Encoder + turn-1/turn-3 attention + two-layer head."""

    def __init__(self, encoder: Encoder, cfg: ClassifierConfig):
        super().__init__()
        self.encoder = encoder
        self.cfg = cfg
        d = encoder.cfg.d_enc
        self.W1 = nn.Parameter(torch.zeros(d))
        self.W3 = nn.Parameter(torch.zeros(d))
        n_in = cfg.input_dim(d)
        self.fc1_w = nn.Parameter(torch.empty(cfg.hidden_dim, n_in))
        self.fc1_b = nn.Parameter(torch.empty(cfg.hidden_dim))
        self.fc2_w = nn.Parameter(torch.empty(cfg.n_classes, cfg.hidden_dim))
        self.fc2_b = nn.Parameter(torch.empty(cfg.n_classes))
        self.generator = None

    def reset_head(self, generator):
        d = self.encoder.cfg.d_enc
        with torch.no_grad():
            for W in (self.W1, self.W3):
                W.copy_(torch.randn(W.shape, generator=generator) / math.sqrt(d))
            for w, b in ((self.fc1_w, self.fc1_b), (self.fc2_w, self.fc2_b)):
                bound = 1.0 / math.sqrt(w.shape[1])
                w.copy_((torch.rand(w.shape, generator=generator) * 2 - 1) * bound)
                b.copy_((torch.rand(b.shape, generator=generator) * 2 - 1) * bound)

    def head_params(self) -> list[nn.Parameter]:
        return [self.W1, self.W3, self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]

    def layer_groups(self) -> list[list[nn.Parameter]]:
        """Encoder groups bottom-up, then attention and linear block as one group."""
        return self.encoder.layer_groups() + [self.head_params()]

    def set_generator(self, generator):
        self.generator = generator
        self.encoder.generator = generator

    def forward(self, ids, lengths, spans, return_attention=False):
        """Class logits for a padded (batch, L) id tensor and (batch, 3, 2) spans."""
        enc, _ = self.encoder(ids, lengths)
        masks = span_masks(spans, ids.shape[1])
        x_in, att1, att3 = build_input(enc, masks, self.W1, self.W3, self.cfg, return_attention=True)
        logits = linear_block(x_in, self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b,
                              self.cfg.dropout, self.training, self.generator)
        if return_attention:
            return logits, att1, att3
        return logits
