"""LM pretraining, LM fine-tuning and classifier training."""

from __future__ import annotations

import copy
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence, TextIO

import numpy as np
import torch

from turnemo import LABELS
from turnemo.classifier import ClassifierConfig, TurnAttentionClassifier
from turnemo.corpus_io import ConversationRecord
from turnemo.encoder import Encoder, EncoderConfig, LanguageModel, lm_loss
from turnemo.evaluation import ConfusionCounts, micro_f1
from turnemo.numeric import Adam, LRSchedule, RngStreams
from turnemo.text_pipeline import (
    NumericalizedConversation,
    RESERVED,
    Vocabulary,
    build_vocab,
    numericalize,
    reverse_conversation,
    tokenize,
)

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune", "classify")
DISCRIMINATIVE_FACTOR = 2.6


@dataclass(frozen=True)
class StageConfig:
    stage: str
    epochs: int
    batch_size: int = 128
    base_lr: float = 0.004
    schedule: str = "slanted-triangular"
    cut_frac: float = 0.1
    ratio: float = 32.0
    seed: int = 0
    bptt: int = 70
    discriminative: bool = True
    gradual_unfreeze: bool = True
    clip: float | None = 0.25

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @classmethod
    def default(cls, stage: str, **overrides) -> "StageConfig":
        base = {
            "pretrain": dict(epochs=14, batch_size=128, base_lr=0.004, discriminative=False, gradual_unfreeze=False),
            "finetune": dict(epochs=14, batch_size=128, base_lr=0.004, gradual_unfreeze=False),
            "classify": dict(epochs=30, batch_size=128, base_lr=0.01, clip=None),
        }[stage]
        return cls(stage=stage, **{**base, **overrides})

    def lr_schedule(self, total_steps: int) -> LRSchedule:
        kind = self.schedule
        if kind == "slanted-triangular" and math.floor(total_steps * self.cut_frac) == 0:
            log.warning("%d steps too few for a slanted-triangular cycle; using a constant rate", total_steps)
            kind = "constant"
        return LRSchedule(kind, self.base_lr, total_steps, self.cut_frac, self.ratio)


@dataclass(frozen=True)
class SamplerWeights:
    weights: dict[str, float] = field(default_factory=lambda: {"happy": 0.4, "sad": 0.4, "angry": 0.4, "others": 0.2})

    def __post_init__(self):
        if set(self.weights) != set(LABELS):
            raise ValueError(f"sampler weights must cover {LABELS}")
        if any(w <= 0 for w in self.weights.values()):
            raise ValueError("sampler weights must be positive")

    def per_class(self) -> np.ndarray:
        return np.array([self.weights[c] for c in LABELS], dtype=np.float64)


class MetricsLog:
    """Per-epoch TSV lines (stage, epoch, split, loss, microF1) to a file and a stream."""

    HEADER = "stage\tepoch\tsplit\tloss\tmicroF1"

    def __init__(self, path=None, stream: TextIO | None = sys.stdout):
        self.stream = stream
        self.fh = None
        self.lines: list[str] = []
        if path is not None:
            self.fh = open(path, "a", encoding="utf-8", newline="\n")
            if self.fh.tell() == 0:
                self.fh.write(self.HEADER + "\n")

    def write(self, stage, epoch, split, loss, f1=None):
        line = f"{stage}\t{epoch}\t{split}\t{loss:.6f}\t" + ("NA" if f1 is None else f"{f1:.6f}")
        self.lines.append(line)
        for out in (self.fh, self.stream):
            if out is not None:
                out.write(line + "\n")
                out.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()
            self.fh = None


def group_lrs(lr: float, n_groups: int, discriminative: bool, n_trainable: int | None = None) -> list[float]:
    """Learning rate per group (bottom-up); top group gets ``lr``; frozen groups get 0."""
    lrs = [lr / (DISCRIMINATIVE_FACTOR ** (n_groups - 1 - g)) if discriminative else lr for g in range(n_groups)]
    if n_trainable is not None:
        lrs = [l if g >= n_groups - n_trainable else 0.0 for g, l in enumerate(lrs)]
    return lrs


def _check_loss(loss: torch.Tensor, where: str):
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss during {where}")


# ---------------------------------------------------------------- LM stages

def text_ids(tokens: Sequence[str], vocab: Vocabulary, backward: bool) -> list[int]:
    ids = vocab.encode(tokens)
    if backward:
        ids = ids[::-1]
    return [vocab.bos_id] + ids


def lm_stream(token_lists: Sequence[Sequence[str]], vocab: Vocabulary, backward: bool) -> torch.Tensor:
    """All texts, each prefixed by ``<bos>`` (token order reversed for backward LMs), concatenated."""
    out: list[int] = []
    for toks in token_lists:
        out += text_ids(toks, vocab, backward)
    return torch.tensor(out, dtype=torch.long)


def batchify(stream: torch.Tensor, batch_size: int) -> torch.Tensor:
    """Split one id stream into ``batch_size`` contiguous rows (remainder dropped)."""
    bs = min(batch_size, max(1, len(stream) // 2))
    if bs < batch_size:
        log.warning("stream of %d tokens too short for batch size %d; using %d", len(stream), batch_size, bs)
    n = len(stream) // bs
    if n < 2:
        raise ValueError("not enough tokens to form next-token pairs")
    return stream[: n * bs].view(bs, n)


def lm_groups(lm: LanguageModel):
    groups = lm.encoder.layer_groups()
    top = [lm.decoder_bias] + ([lm.decoder_weight] if lm.decoder_weight is not None else [])
    groups[-1] = groups[-1] + top
    return groups


@torch.no_grad()
def evaluate_lm(lm: LanguageModel, data: torch.Tensor, bptt: int = 70) -> float:
    """Mean per-token next-token loss over batchified data, dropout off."""
    lm.eval()
    total, count, state = 0.0, 0, None
    for i in range(0, data.shape[1] - 1, bptt):
        seq = min(bptt, data.shape[1] - 1 - i)
        x, y = data[:, i: i + seq], data[:, i + 1: i + 1 + seq]
        logits, state = lm(x, state)
        total += float(lm_loss(logits, y)) * y.numel()
        count += y.numel()
    return total / count


def train_lm(lm: LanguageModel, data: torch.Tensor, cfg: StageConfig, rng: RngStreams,
             log_to: MetricsLog | None = None) -> list[float]:
    """Truncated-BPTT next-token training over (rows, time) data. Returns per-epoch mean loss."""
    gen = rng.torch(f"{cfg.stage}/dropout")
    lm.encoder.generator = gen
    groups = lm_groups(lm)
    opt = Adam(groups)
    windows = list(range(0, data.shape[1] - 1, cfg.bptt))
    sched = cfg.lr_schedule(cfg.epochs * len(windows))
    step, history = 0, []
    for epoch in range(cfg.epochs):
        lm.train()
        state, total, count = None, 0.0, 0
        for i in windows:
            seq = min(cfg.bptt, data.shape[1] - 1 - i)
            x, y = data[:, i: i + seq], data[:, i + 1: i + 1 + seq]
            if state is not None:
                state = [(h.detach(), c.detach()) for h, c in state]
            logits, state = lm(x, state)
            loss = lm_loss(logits, y)
            _check_loss(loss, cfg.stage)
            opt.zero_grad()
            loss.backward()
            if cfg.clip:
                torch.nn.utils.clip_grad_norm_(opt.params, cfg.clip)
            opt.step(group_lrs(sched(step), len(groups), cfg.discriminative))
            step += 1
            total += loss.item() * y.numel()
            count += y.numel()
        history.append(total / count)
        if log_to is not None:
            log_to.write(cfg.stage, epoch + 1, "train", history[-1])
    lm.eval()
    return history


def pretrain_lm(corpus: Sequence[str], enc_cfg: dict, cfg: StageConfig, min_count: int = 3,
                log_to: MetricsLog | None = None) -> tuple[LanguageModel, Vocabulary, list[float]]:
    """Step 1: randomly initialized encoder+decoder trained on a general corpus.

    ``enc_cfg`` holds EncoderConfig fields other than ``vocab_size``.
    """
    if not corpus:
        raise ValueError("empty pretraining corpus")
    tokens = [tokenize(line) for line in corpus]
    vocab = build_vocab(tokens, min_count)
    if len(vocab) < len(RESERVED) + 1:
        raise ValueError(f"vocabulary has only the reserved tokens (min_count={min_count})")
    ecfg = EncoderConfig(vocab_size=len(vocab), **enc_cfg)
    rng = RngStreams(cfg.seed)
    lm = LanguageModel(ecfg)
    lm.reset_parameters(rng.torch("pretrain/init"))
    data = batchify(lm_stream(tokens, vocab, ecfg.direction == "backward"), cfg.batch_size)
    history = train_lm(lm, data, cfg, rng, log_to)
    return lm, vocab, history


def conversation_tokens(rec: ConversationRecord) -> list[str]:
    """Concatenated turn tokens, matching ``numericalize`` (an empty turn reads ``<unk>``)."""
    out = []
    for text in rec.turns:
        out += tokenize(text) or ["<unk>"]
    return out


def transfer_vocab(lm: LanguageModel, old: Vocabulary, new: Vocabulary) -> LanguageModel:
    """Copy of ``lm`` re-indexed to ``new``: shared tokens keep their rows, new tokens get the mean row."""
    cfg = replace(lm.cfg, vocab_size=len(new))
    out = LanguageModel(cfg)
    out.load_state_dict({k: v for k, v in lm.state_dict().items()
                         if not k.startswith("encoder.embedding") and not k.startswith("decoder_")}, strict=False)
    old_ids = torch.tensor([old.token_to_id.get(t, -1) for t in new.id_to_token])
    known = old_ids >= 0
    with torch.no_grad():
        for dst, src in ((out.encoder.embedding, lm.encoder.embedding), (out.decoder_bias, lm.decoder_bias)) + (
                ((out.decoder_weight, lm.decoder_weight),) if lm.decoder_weight is not None else ()):
            mean = src.mean(dim=0)
            dst.copy_(mean.expand_as(dst))
            dst[known] = src[old_ids[known]]
    return out


def finetune_lm(lm: LanguageModel, vocab: Vocabulary, task_texts: Sequence[ConversationRecord | str],
                cfg: StageConfig, min_count: int = 3,
                log_to: MetricsLog | None = None) -> tuple[LanguageModel, Vocabulary, list[float]]:
    """Step 2: rebuild the vocabulary from task text and continue LM training on it."""
    if not task_texts:
        raise ValueError("no task texts for fine-tuning")
    tokens = [conversation_tokens(t) if isinstance(t, ConversationRecord) else tokenize(t) for t in task_texts]
    new_vocab = build_vocab(tokens, min_count)
    ft = transfer_vocab(lm, vocab, new_vocab)
    rng = RngStreams(cfg.seed)
    data = batchify(lm_stream(tokens, new_vocab, ft.cfg.direction == "backward"), cfg.batch_size)
    history = train_lm(ft, data, cfg, rng, log_to)
    return ft, new_vocab, history


# ------------------------------------------------------------ classifier

def prepare(records: Sequence[ConversationRecord], vocab: Vocabulary, direction: str) -> list[NumericalizedConversation]:
    convs = [numericalize(r, vocab) for r in records]
    if direction == "backward":
        convs = [reverse_conversation(c) for c in convs]
    return convs


def collate(convs: Sequence[NumericalizedConversation], pad_id: int = 0):
    """Right-pad to the batch max length. Returns ids, lengths, spans, labels (or None)."""
    L = max(len(c.ids) for c in convs)
    ids = torch.full((len(convs), L), pad_id, dtype=torch.long)
    for i, c in enumerate(convs):
        ids[i, : len(c.ids)] = torch.tensor(c.ids, dtype=torch.long)
    lengths = torch.tensor([len(c.ids) for c in convs])
    spans = torch.tensor([c.spans for c in convs], dtype=torch.long)
    labels = None
    if all(c.label_id is not None for c in convs):
        labels = torch.tensor([c.label_id for c in convs], dtype=torch.long)
    return ids, lengths, spans, labels


def weighted_sample(labels: Sequence[int], weights: SamplerWeights, batch_size: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Indices drawn with replacement, each example weighted by its class weight."""
    labels = np.asarray(labels)
    present = set(labels.tolist())
    missing = [LABELS[c] for c in range(len(LABELS)) if c not in present]
    if missing:
        log.warning("no training examples for %s; sampling weights renormalized over present classes", missing)
    w = weights.per_class()[labels]
    return rng.choice(len(labels), size=batch_size, replace=True, p=w / w.sum())


@torch.no_grad()
def predict_proba(model: TurnAttentionClassifier, convs: Sequence[NumericalizedConversation],
                  batch_size: int = 128) -> torch.Tensor:
    model.eval()
    out = []
    for i in range(0, len(convs), batch_size):
        ids, lengths, spans, _ = collate(convs[i: i + batch_size])
        out.append(torch.softmax(model(ids, lengths, spans), dim=-1))
    return torch.cat(out) if out else torch.zeros(0, len(LABELS))


def score(probs: torch.Tensor, convs: Sequence[NumericalizedConversation]) -> tuple[float, float]:
    """(mean cross entropy, emotion micro-F1) of class probabilities against gold labels."""
    gold = torch.tensor([c.label_id for c in convs])
    loss = float(-torch.log(probs[torch.arange(len(gold)), gold].clamp_min(1e-12)).mean())
    preds = probs.argmax(dim=-1).tolist()
    counts = ConfusionCounts.from_labels([LABELS[p] for p in preds], [LABELS[g] for g in gold.tolist()])
    return loss, micro_f1(counts)


@dataclass
class ClassifierRun:
    model: TurnAttentionClassifier
    best_epoch: int
    best_f1: float
    history: list[dict] = field(default_factory=list)


def build_classifier(encoder: Encoder, cls_cfg: ClassifierConfig, rng: RngStreams) -> TurnAttentionClassifier:
    model = TurnAttentionClassifier(copy.deepcopy(encoder), cls_cfg)
    model.reset_head(rng.torch("classify/init"))
    return model


def train_classifier(lm: LanguageModel, vocab: Vocabulary, train: Sequence[ConversationRecord],
                     val: Sequence[ConversationRecord], cls_cfg: ClassifierConfig, cfg: StageConfig,
                     weights: SamplerWeights | None = None, log_to: MetricsLog | None = None,
                     val_metric: Callable[[TurnAttentionClassifier, int], float] | None = None) -> ClassifierRun:
    """Step 3: keep the encoder, swap the decoder for the attention classifier, fine-tune.

    The returned model is the snapshot with the best validation micro-F1.
    ``val_metric(model, epoch)`` replaces the validation micro-F1 when given.
    """
    if any(r.label is None for r in (*train, *val)):
        raise ValueError("classifier training needs labeled train and validation records")
    weights = weights or SamplerWeights()
    rng = RngStreams(cfg.seed)
    direction = lm.cfg.direction
    train_c = prepare(train, vocab, direction)
    val_c = prepare(val, vocab, direction)
    model = build_classifier(lm.encoder, cls_cfg, rng)
    model.set_generator(rng.torch("classify/dropout"))
    sampler = rng.numpy("classify/sampler")
    labels = [c.label_id for c in train_c]

    groups = model.layer_groups()
    opt = Adam(groups)
    n_batches = math.ceil(len(train_c) / cfg.batch_size)
    sched = cfg.lr_schedule(cfg.epochs * n_batches)
    step = 0
    best = ClassifierRun(model, 0, -1.0)
    best_state = None
    for epoch in range(1, cfg.epochs + 1):
        n_trainable = min(epoch, len(groups)) if cfg.gradual_unfreeze else None
        model.train()
        total = 0.0
        for _ in range(n_batches):
            idx = weighted_sample(labels, weights, cfg.batch_size, sampler)
            ids, lengths, spans, y = collate([train_c[i] for i in idx])
            loss = torch.nn.functional.cross_entropy(model(ids, lengths, spans), y)
            _check_loss(loss, "classifier training")
            opt.zero_grad()
            loss.backward()
            if cfg.clip:
                torch.nn.utils.clip_grad_norm_(opt.params, cfg.clip)
            opt.step(group_lrs(sched(step), len(groups), cfg.discriminative, n_trainable))
            step += 1
            total += loss.item()
        train_loss = total / n_batches
        val_loss, val_f1 = score(predict_proba(model, val_c), val_c) if val_c else (float("nan"), 0.0)
        if val_metric is not None:
            val_f1 = val_metric(model, epoch)
        best.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_f1": val_f1})
        if log_to is not None:
            log_to.write(cfg.stage, epoch, "train", train_loss)
            log_to.write(cfg.stage, epoch, "val", val_loss, val_f1)
        if val_f1 > best.best_f1:
            best.best_f1, best.best_epoch = val_f1, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return best


def stage_config_dict(cfg: StageConfig) -> dict:
    return asdict(cfg)
