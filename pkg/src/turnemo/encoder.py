"""Weight-dropped LSTM encoder with a tied linear decoder for language modeling."""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.func import functional_call

from turnemo.numeric import cross_entropy, dropconnect, locked_dropout
from turnemo.text_pipeline import NumericalizedConversation

DIRECTIONS = ("forward", "backward", "bidirectional")


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    emb_dim: int = 400
    hidden_dim: int = 1150
    n_layers: int = 3
    direction: str = "forward"
    weight_drop: float = 0.2
    embedding_dropout: float = 0.25
    hidden_dropout: float = 0.15
    tie_weights: bool = True
    emb_init: float = 0.1

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")

    @property
    def d_enc(self) -> int:
        return self.emb_dim * (2 if self.direction == "bidirectional" else 1)

    def layer_dims(self) -> list[tuple[int, int]]:
        """(input, hidden) size per layer for a single direction."""
        k = 2 if self.direction == "bidirectional" else 1
        dims = []
        for layer in range(self.n_layers):
            n_in = self.emb_dim if layer == 0 else self.hidden_dim * k
            n_out = self.emb_dim if layer == self.n_layers - 1 else self.hidden_dim
            dims.append((n_in, n_out))
        return dims

    def to_dict(self):
        return asdict(self)


# small embeddings vanish through three layers at emb_dim 64; a wider init avoids a long plateau
DESK_SCALE = {"emb_dim": 64, "hidden_dim": 128, "emb_init": 0.5}


@dataclass
class EncoderOutput:
    vectors: torch.Tensor  # (N, d_enc)
    spans: tuple[tuple[int, int], ...]

    def turn(self, i: int) -> torch.Tensor:
        start, end = self.spans[i]
        return self.vectors[start:end]


def lstm_cell(x, h, c, w_ih, w_hh, bias):
    """Standard LSTM step; gate rows ordered input, forget, cell, output."""
    if w_ih.shape[0] != 4 * h.shape[-1] or w_hh.shape != (4 * h.shape[-1], h.shape[-1]):
        raise ValueError(f"lstm weights {tuple(w_ih.shape)}, {tuple(w_hh.shape)} do not fit hidden {tuple(h.shape)}")
    if x.shape[-1] != w_ih.shape[1]:
        raise ValueError(f"lstm input {tuple(x.shape)} does not fit weights {tuple(w_ih.shape)}")
    gates = x @ w_ih.T + h @ w_hh.T + bias
    i, f, g, o = gates.chunk(4, dim=-1)
    c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_new = torch.sigmoid(o) * torch.tanh(c_new)
    return h_new, c_new


def flip_padded(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Reverse each row of (batch, time, ...) within its own length; padding stays put."""
    T = x.shape[1]
    t = torch.arange(T).unsqueeze(0)
    idx = torch.where(t < lengths.unsqueeze(1), lengths.unsqueeze(1) - 1 - t, t)
    idx = idx.view(*idx.shape, *([1] * (x.dim() - 2))).expand_as(x)
    return x.gather(1, idx)


class WeightDropLSTM(nn.Module):
    """One unidirectional LSTM layer with DropConnect on the hidden-to-hidden matrix."""

    def __init__(self, n_in: int, n_hidden: int, weight_drop: float):
        super().__init__()
        self.n_hidden = n_hidden
        self.weight_drop = weight_drop
        self.w_ih = nn.Parameter(torch.empty(4 * n_hidden, n_in))
        self.w_hh = nn.Parameter(torch.empty(4 * n_hidden, n_hidden))
        self.bias = nn.Parameter(torch.empty(4 * n_hidden))

    def reset_parameters(self, generator):
        bound = 1.0 / math.sqrt(self.n_hidden)
        for p in (self.w_ih, self.w_hh, self.bias):
            with torch.no_grad():
                p.copy_((torch.rand(p.shape, generator=generator) * 2 - 1) * bound)

    def forward(self, x, state=None, generator=None, fused: bool = True):
        B, T, _ = x.shape
        if state is None:
            h = x.new_zeros(B, self.n_hidden)
            c = x.new_zeros(B, self.n_hidden)
        else:
            h, c = state
        w_hh = dropconnect(self.w_hh, self.weight_drop, generator, self.training)
        return lstm_layer(x, self.w_ih, w_hh, self.bias, (h, c), fused)


def lstm_layer(x, w_ih, w_hh, bias, state, fused: bool = True):
    """Run ``lstm_cell`` over (batch, time, features); returns outputs and final (h, c)."""
    h, c = state
    if fused:
        # torch's LSTM kernel evaluates the same cell equations over all steps
        params = {"weight_ih_l0": w_ih, "weight_hh_l0": w_hh,
                  "bias_ih_l0": bias, "bias_hh_l0": torch.zeros_like(bias)}
        kernel = _kernel(x.shape[-1], h.shape[-1])
        out, (h, c) = functional_call(kernel, params, (x, (h.unsqueeze(0), c.unsqueeze(0))))
        return out, (h[0], c[0])
    outs = []
    for t in range(x.shape[1]):
        h, c = lstm_cell(x[:, t], h, c, w_ih, w_hh, bias)
        outs.append(h)
    return torch.stack(outs, dim=1), (h, c)


@functools.lru_cache(maxsize=None)
def _kernel(n_in: int, n_hidden: int) -> nn.LSTM:
    # weights are always supplied through functional_call; these stay unused
    return nn.LSTM(n_in, n_hidden, batch_first=True)


class Encoder(nn.Module):
    """Embedding followed by ``n_layers`` weight-dropped LSTM layers.

    Produces one ``d_enc`` vector per input position. For the bidirectional
    configuration every layer runs a second LSTM over the length-reversed
    rows and concatenates both directions.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Parameter(torch.empty(cfg.vocab_size, cfg.emb_dim))
        self.layers = nn.ModuleList(WeightDropLSTM(i, o, cfg.weight_drop) for i, o in cfg.layer_dims())
        if cfg.direction == "bidirectional":
            self.rev_layers = nn.ModuleList(WeightDropLSTM(i, o, cfg.weight_drop) for i, o in cfg.layer_dims())
        else:
            self.rev_layers = None
        self.generator = None

    def reset_parameters(self, generator):
        with torch.no_grad():
            self.embedding.copy_((torch.rand(self.embedding.shape, generator=generator) * 2 - 1) * self.cfg.emb_init)
        for layer in self.all_layers():
            layer.reset_parameters(generator)

    def all_layers(self):
        yield from self.layers
        if self.rev_layers is not None:
            yield from self.rev_layers

    def layer_groups(self) -> list[list[nn.Parameter]]:
        """Parameter groups bottom-up: embedding, then one group per layer depth."""
        groups = [[self.embedding]]
        for k, layer in enumerate(self.layers):
            g = list(layer.parameters())
            if self.rev_layers is not None:
                g += list(self.rev_layers[k].parameters())
            groups.append(g)
        return groups

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        weight = self.embedding
        p = self.cfg.embedding_dropout
        if self.training and p > 0:
            # drop whole words: one mask entry per vocabulary row
            keep = torch.bernoulli(torch.full((weight.shape[0], 1), 1 - p, dtype=weight.dtype),
                                   generator=self.generator) / (1 - p)
            weight = weight * keep
        return weight[ids]

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor | None = None, state=None):
        """Encode (batch, time) ids. Returns (outputs, new_state)."""
        if ids.numel() == 0 or ids.shape[-1] == 0:
            raise ValueError("cannot encode an empty id sequence")
        if int(ids.max()) >= self.cfg.vocab_size or int(ids.min()) < 0:
            raise ValueError("token id outside the vocabulary")
        x = self.embed(ids)
        new_state = []
        n = len(self.layers)
        for k, layer in enumerate(self.layers):
            layer_state = None if state is None else state[k]
            out, st = layer(x, layer_state, self.generator)
            if self.rev_layers is not None:
                lens = lengths if lengths is not None else torch.full((ids.shape[0],), ids.shape[1])
                rev_out, _ = self.rev_layers[k](flip_padded(x, lens), None, self.generator)
                out = torch.cat([out, flip_padded(rev_out, lens)], dim=-1)
            new_state.append(st)
            if k < n - 1:
                out = locked_dropout(out, self.cfg.hidden_dropout, self.generator, self.training)
            x = out
        return x, new_state


def encode(conv: NumericalizedConversation, encoder: Encoder, train: bool = False) -> EncoderOutput:
    """Per-position encodings of one conversation, spans carried through unchanged."""
    if len(conv.ids) == 0:
        raise ValueError("cannot encode an empty conversation")
    was_training = encoder.training
    encoder.train(train)
    try:
        ids = torch.tensor([conv.ids], dtype=torch.long)
        out, _ = encoder(ids, torch.tensor([len(conv.ids)]))
    finally:
        encoder.train(was_training)
    return EncoderOutput(out[0], tuple(conv.spans))


class LanguageModel(nn.Module):
    """Encoder plus linear decoder; decoder weights tied to the embedding by default."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        if cfg.direction == "bidirectional":
            raise ValueError("a bidirectional encoder sees the next token; train LMs per direction")
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        if cfg.tie_weights:
            self.decoder_weight = None
        else:
            self.decoder_weight = nn.Parameter(torch.zeros(cfg.vocab_size, cfg.d_enc))

    def reset_parameters(self, generator):
        self.encoder.reset_parameters(generator)
        with torch.no_grad():
            self.decoder_bias.zero_()
            if self.decoder_weight is not None:
                self.decoder_weight.zero_()

    @property
    def decoder_w(self):
        return self.encoder.embedding if self.decoder_weight is None else self.decoder_weight

    def forward(self, ids, state=None):
        out, state = self.encoder(ids, state=state)
        return lm_logits(out, self.decoder_w, self.decoder_bias), state


def lm_logits(enc: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Affine map from encoder vectors (..., d_enc) to vocabulary logits (..., V)."""
    if enc.shape[-1] != weight.shape[1]:
        raise ValueError(f"decoder weight {tuple(weight.shape)} does not accept encodings {tuple(enc.shape)}")
    return enc @ weight.T + bias


def lm_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross entropy over all predicted positions."""
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"{tuple(logits.shape[:-1])} logit positions vs {tuple(targets.shape)} targets")
    return cross_entropy(logits, targets)


def next_token_pairs(ids):
    """(inputs, targets) for one text: targets are inputs shifted by one."""
    return ids[:-1], ids[1:]
