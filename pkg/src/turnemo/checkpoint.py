"""Checkpoint directories: version file, configs, vocabulary and parameter blobs."""

from __future__ import annotations

import json
from pathlib import Path

from turnemo.classifier import ClassifierConfig, TurnAttentionClassifier
from turnemo.encoder import EncoderConfig, LanguageModel, Encoder
from turnemo.numeric import load_params, save_params
from turnemo.text_pipeline import Vocabulary

FORMAT = "turnemo-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _write_common(directory: Path, kind: str, enc_cfg: EncoderConfig, vocab: Vocabulary, extra: dict):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "VERSION").write_text(f"{FORMAT} {VERSION}\n")
    meta = {"kind": kind, "encoder": enc_cfg.to_dict(), **extra}
    (directory / "config.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    vocab.save(directory / "vocab.txt")


def _read_common(directory) -> tuple[Path, dict, EncoderConfig, Vocabulary]:
    directory = Path(directory)
    version_file = directory / "VERSION"
    if not version_file.exists():
        raise CheckpointError(f"{directory}: no VERSION file, not a checkpoint")
    fmt, _, ver = version_file.read_text().strip().partition(" ")
    if fmt != FORMAT or ver != str(VERSION):
        raise CheckpointError(f"{directory}: incompatible checkpoint version {fmt} {ver}")
    meta = json.loads((directory / "config.json").read_text())
    return directory, meta, EncoderConfig(**meta["encoder"]), Vocabulary.load(directory / "vocab.txt")


def _load_state(module, directory: Path):
    tensors = load_params(directory)
    expected = dict(module.named_parameters())
    if set(tensors) != set(expected):
        raise CheckpointError(f"{directory}: parameter names differ from the model's")
    for name, p in expected.items():
        if tuple(p.shape) != tuple(tensors[name].shape):
            raise CheckpointError(f"{directory}: {name} has shape {tuple(tensors[name].shape)}, expected {tuple(p.shape)}")
    module.load_state_dict(tensors, strict=True)


def save_lm(directory, lm: LanguageModel, vocab: Vocabulary, **extra):
    directory = Path(directory)
    _write_common(directory, "lm", lm.cfg, vocab, extra)
    save_params(directory, dict(lm.named_parameters()))


def load_lm(directory) -> tuple[LanguageModel, Vocabulary, dict]:
    directory, meta, cfg, vocab = _read_common(directory)
    if meta["kind"] != "lm":
        raise CheckpointError(f"{directory}: expected a language model checkpoint, found {meta['kind']!r}")
    lm = LanguageModel(cfg)
    _load_state(lm, directory)
    return lm, vocab, meta


def save_classifier(directory, model: TurnAttentionClassifier, vocab: Vocabulary, **extra):
    directory = Path(directory)
    _write_common(directory, "classifier", model.encoder.cfg, vocab, {"classifier": model.cfg.to_dict(), **extra})
    save_params(directory, dict(model.named_parameters()))


def load_classifier(directory) -> tuple[TurnAttentionClassifier, Vocabulary, dict]:
    directory, meta, cfg, vocab = _read_common(directory)
    if meta["kind"] != "classifier":
        raise CheckpointError(f"{directory}: expected a classifier checkpoint, found {meta['kind']!r}")
    model = TurnAttentionClassifier(Encoder(cfg), ClassifierConfig(**meta["classifier"]))
    _load_state(model, directory)
    return model, vocab, meta
