"""Tensor helpers on top of torch: masked ops, dropout masks, Adam, STLR,
finite-difference gradient checking and parameter blob serialization."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

ADAM_BETAS = (0.8, 0.99)
ADAM_EPS = 1e-8


class RngStreams:
    """Named, independent random streams derived from one seed.

    Each name maps to its own Philox (counter-based) stream, so adding a
    consumer never shifts the draws seen by another.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def _seq(self, name: str) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode("utf-8")),))

    def numpy(self, name: str) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self._seq(name)))

    def torch(self, name: str) -> torch.Generator:
        state = self._seq(name).generate_state(2, dtype=np.uint32)
        return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def _check_finite(t: torch.Tensor, what: str):
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {what}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax over positions where ``mask`` is true; exact zeros elsewhere."""
    if logits.shape != mask.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and mask {tuple(mask.shape)} differ")
    if not mask.any(dim=dim).all():
        raise ValueError("softmax over a fully masked slice")
    scores = torch.softmax(logits.masked_fill(~mask, float("-inf")), dim=dim)
    return scores.masked_fill(~mask, 0.0)


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of ``x[..., j, :]`` over positions ``j`` where ``mask[..., j]``."""
    if x.shape[:-1] != mask.shape:
        raise ValueError(f"values {tuple(x.shape)} and mask {tuple(mask.shape)} differ")
    counts = mask.sum(dim=-1, keepdim=True)
    if (counts == 0).any():
        raise ValueError("pooling over a fully masked slice")
    m = mask.unsqueeze(-1).to(x.dtype)
    return (x * m).sum(dim=-2) / counts.to(x.dtype)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    return torch.nn.functional.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


def bernoulli_keep(shape, p: float, generator: torch.Generator | None, dtype=torch.float32) -> torch.Tensor:
    """Inverted-dropout mask: zeros with probability ``p``, survivors ``1/(1-p)``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1]")
    if p == 1.0:
        return torch.zeros(shape, dtype=dtype)
    keep = torch.bernoulli(torch.full(shape, 1.0 - p, dtype=dtype), generator=generator)
    return keep / (1.0 - p)


def dropconnect(weight: torch.Tensor, p: float, generator=None, training: bool = True) -> torch.Tensor:
    """Zero each weight independently with probability ``p`` (train mode only)."""
    if not training or p == 0.0:
        return weight
    return weight * bernoulli_keep(weight.shape, p, generator, weight.dtype)


def locked_dropout(x: torch.Tensor, p: float, generator=None, training: bool = True) -> torch.Tensor:
    """Dropout on (batch, time, features) sharing one mask across time."""
    if not training or p == 0.0:
        return x
    mask = bernoulli_keep((x.shape[0], 1, x.shape[2]), p, generator, x.dtype)
    return x * mask


def dropout(x: torch.Tensor, p: float, generator=None, training: bool = True) -> torch.Tensor:
    if not training or p == 0.0:
        return x
    return x * bernoulli_keep(x.shape, p, generator, x.dtype)


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0
    beta1: float = ADAM_BETAS[0]
    beta2: float = ADAM_BETAS[1]
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor], **kw) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], **kw)


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], state: AdamState,
              lr: float | Sequence[float]) -> None:
    """One bias-corrected Adam update, in place. ``lr`` may be given per parameter."""
    lrs = [lr] * len(params) if isinstance(lr, (int, float)) else list(lr)
    if any(not l > 0 for l in lrs):
        raise ValueError("learning rate must be positive")
    for g in grads:
        if g is not None:
            _check_finite(g, "gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    for p, g, m, v, lr_i in zip(params, grads, state.m, state.v, lrs):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr_i / bc1)


class Adam:
    """Adam over parameter groups, each group with its own learning-rate multiplier."""

    def __init__(self, groups: Sequence[Sequence[torch.nn.Parameter]], betas=ADAM_BETAS, eps=ADAM_EPS):
        self.groups = [list(g) for g in groups]
        self.params = [p for g in self.groups for p in g]
        self.state = AdamState.zeros_like(self.params, beta1=betas[0], beta2=betas[1], eps=eps)
        self._group_of = [gi for gi, g in enumerate(self.groups) for _ in g]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, group_lrs: Sequence[float]):
        """Update every parameter whose group lr is positive; lr 0 means frozen."""
        idx = [i for i, gi in enumerate(self._group_of) if group_lrs[gi] > 0]
        params = [self.params[i] for i in idx]
        grads = [self.params[i].grad for i in idx]
        lrs = [group_lrs[self._group_of[i]] for i in idx]
        sub = AdamState([self.state.m[i] for i in idx], [self.state.v[i] for i in idx],
                        self.state.step, self.state.beta1, self.state.beta2, self.state.eps)
        adam_step(params, grads, sub, lrs)
        self.state.step = sub.step


@dataclass(frozen=True)
class LRSchedule:
    kind: str = "slanted-triangular"
    lr_max: float = 0.01
    total_steps: int = 1
    cut_frac: float = 0.1
    ratio: float = 32.0

    def __call__(self, t: int) -> float:
        if self.kind == "constant":
            return self.lr_max
        if self.kind == "slanted-triangular":
            return stlr(t, self)
        raise ValueError(f"unknown schedule kind {self.kind!r}")


def stlr(t: int, sched: LRSchedule) -> float:
    """Slanted triangular learning rate: short linear warm-up, long linear decay."""
    T = sched.total_steps
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    cut = math.floor(T * sched.cut_frac)
    if cut == 0:
        raise ValueError(f"cut is zero for total_steps={T}, cut_frac={sched.cut_frac}")
    if t < cut:
        p = t / cut
    else:
        p = 1 - (t - cut) / (cut * (1 / sched.cut_frac - 1))
    return sched.lr_max * (1 + p * (sched.ratio - 1)) / sched.ratio


def grad_check(op: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], eps: float = 1e-4,
               seed: int = 0) -> float:
    """Max relative error between autograd and centered finite differences.

    Non-scalar outputs are reduced with a fixed random projection. Inputs are
    promoted to float64; integer inputs are passed through undifferentiated.
    """
    gen = torch.Generator().manual_seed(seed)
    xs = [x.detach().to(torch.float64).clone() if x.is_floating_point() else x for x in inputs]
    probe = {}

    def scalar(*args):
        out = op(*args)
        outs = out if isinstance(out, (tuple, list)) else (out,)
        total = torch.zeros((), dtype=torch.float64)
        for k, o in enumerate(outs):
            if k not in probe:
                probe[k] = torch.randn(o.shape, generator=gen, dtype=torch.float64)
            total = total + (o.to(torch.float64) * probe[k]).sum()
        return total

    leaves = [x.requires_grad_(True) if x.is_floating_point() else x for x in xs]
    scalar(*leaves).backward()
    worst = 0.0
    with torch.no_grad():
        for x in xs:
            if not x.is_floating_point():
                continue
            analytic = (torch.zeros_like(x) if x.grad is None else x.grad.detach()).reshape(-1).clone()
            flat = x.data.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = scalar(*xs).item()
                flat[i] = orig - eps
                minus = scalar(*xs).item()
                flat[i] = orig
                a, n = analytic[i].item(), (plus - minus) / (2 * eps)
                worst = max(worst, abs(a - n) / max(1.0, abs(a), abs(n)))
    return worst


BLOB_VERSION = 1


def save_params(directory, params: Mapping[str, torch.Tensor]) -> None:
    """Write ``manifest.json`` (name, shape, offset) and little-endian float32 ``params.bin``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest, offset, chunks = [], 0, []
    for name, t in params.items():
        arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.size
    (directory / "params.bin").write_bytes(b"".join(chunks))
    (directory / "manifest.json").write_text(
        json.dumps({"version": BLOB_VERSION, "dtype": "<f4", "tensors": manifest}, indent=1) + "\n")


def load_params(directory) -> dict[str, torch.Tensor]:
    directory = Path(directory)
    meta = json.loads((directory / "manifest.json").read_text())
    if meta.get("version") != BLOB_VERSION:
        raise ValueError(f"{directory}: unsupported parameter blob version {meta.get('version')}")
    flat = np.frombuffer((directory / "params.bin").read_bytes(), dtype="<f4")
    out = {}
    for entry in meta["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        chunk = flat[entry["offset"]: entry["offset"] + n].reshape(entry["shape"])
        out[entry["name"]] = torch.from_numpy(chunk.astype(np.float32))
    return out


def total_norm(tensors: Iterable[torch.Tensor | None]) -> float:
    sq = sum(float((t.detach() ** 2).sum()) for t in tensors if t is not None)
    return math.sqrt(sq)
