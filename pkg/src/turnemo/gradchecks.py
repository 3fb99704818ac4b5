"""Finite-difference checks of every differentiable building block, in float64."""

from __future__ import annotations

import time

import torch

from turnemo.classifier import ClassifierConfig, VARIANTS, avg_pool, build_input, linear_block, span_masks, turn_attention
from turnemo.encoder import lm_logits, lstm_cell, lstm_layer
from turnemo.numeric import cross_entropy, grad_check, masked_softmax

TOLERANCE = 1e-4


def _checks(gen: torch.Generator):
    def r(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    yield "matmul", lambda a, b: a @ b, [r(3, 4), r(4, 2)]
    targets = torch.tensor([0, 2, 1])
    yield "softmax+cross_entropy", lambda z: cross_entropy(z, targets), [r(3, 5)]
    yield "lstm_cell", lambda x, h, c, wi, wh, b: lstm_cell(x, h, c, wi, wh, b), \
        [r(2, 4), r(2, 5), r(2, 5), r(20, 4) * 0.5, r(20, 5) * 0.5, r(20) * 0.5]
    yield "lstm_layer(fused)", lambda x, wi, wh, b: lstm_layer(x, wi, wh, b, (torch.zeros(2, 5, dtype=x.dtype),) * 2)[0], \
        [r(2, 4, 3), r(20, 3) * 0.5, r(20, 5) * 0.5, r(20) * 0.5]
    ids = torch.tensor([[0, 3, 3, 6], [2, 1, 0, 5]])
    yield "embedding_lookup", lambda E: E[ids], [r(7, 3)]
    yield "lm_decoder", lambda h, w, b: cross_entropy(lm_logits(h, w, b), torch.tensor([[1, 4], [0, 2]])), \
        [r(2, 2, 3), r(6, 3), r(6)]
    mask = torch.tensor([[True, True, False, True, False], [False, True, True, True, True]])
    yield "turn_attention+mask", lambda T, W: turn_attention(T, mask, W).scored, [r(2, 5, 3), r(3)]
    yield "masked_softmax", lambda z: masked_softmax(z, mask), [r(2, 5)]
    yield "avg_pool(mean)", lambda O: avg_pool(O, mask, "mean"), [r(2, 5, 3)]
    yield "avg_pool(sum)", lambda O: avg_pool(O, mask, "sum"), [r(2, 5, 3)]
    spans = torch.tensor([[[0, 2], [2, 4], [4, 7]], [[0, 1], [1, 5], [5, 6]]])
    masks = span_masks(spans, 7)
    for v in VARIANTS:
        cfg = ClassifierConfig(variant=v)
        yield f"build_input({v})", (lambda cfg: lambda enc, W1, W3: build_input(enc, masks, W1, W3, cfg))(cfg), \
            [r(2, 7, 3), r(3), r(3)]
    yield "linear_block", lambda x, w1, b1, w2, b2: linear_block(x, w1, b1, w2, b2), \
        [r(3, 6), r(5, 6), r(5) + 0.5, r(4, 5), r(4)]
    yield "attention+linear_block(A)", lambda enc, W1, W3, w1, b1, w2, b2: linear_block(
        build_input(enc, masks, W1, W3, ClassifierConfig()), w1, b1, w2, b2), \
        [r(2, 7, 3), r(3), r(3), r(5, 6), r(5) + 0.5, r(4, 5), r(4)]


def run_all(eps: float = 1e-4, seed: int = 0) -> list[tuple[str, float, float]]:
    """(name, max relative error, seconds) for each check."""
    gen = torch.Generator().manual_seed(seed)
    results = []
    for name, op, inputs in _checks(gen):
        t = time.perf_counter()
        err = grad_check(op, inputs, eps)
        results.append((name, err, time.perf_counter() - t))
    return results
