"""Command-line entry point: ``turnemo <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import torch

from turnemo import LABELS
from turnemo.analysis import attention_report, attention_tsv
from turnemo.checkpoint import load_classifier, load_lm, save_classifier, save_lm
from turnemo.classifier import ClassifierConfig, ensemble
from turnemo.corpus_io import load_conversations, load_corpus, load_lexicon, write_conversations
from turnemo.encoder import DESK_SCALE, EncoderConfig
from turnemo.evaluation import MetricsReport
from turnemo.training import (
    MetricsLog,
    SamplerWeights,
    StageConfig,
    finetune_lm,
    predict_proba,
    prepare,
    pretrain_lm,
    train_classifier,
)

log = logging.getLogger("turnemo")

SEED_ENV = "TURNEMO_SEED"
DIR_NAMES = {"fwd": "forward", "bwd": "backward"}
STAGE_KEYS = ("epochs", "batch_size", "base_lr", "schedule", "cut_frac", "ratio", "bptt",
              "discriminative", "gradual_unfreeze", "clip")


class UsageError(Exception):
    pass


def default_settings() -> dict:
    s = {"min_count": 3, "pretrain.min_count": 3}
    enc_defaults = {f.name: f.default for f in dataclasses.fields(EncoderConfig)
                    if f.name not in ("vocab_size", "direction")}
    s.update({f"encoder.{k}": v for k, v in enc_defaults.items()})
    for stage in ("pretrain", "finetune", "classify"):
        cfg = StageConfig.default(stage)
        s.update({f"{stage}.{k}": getattr(cfg, k) for k in STAGE_KEYS})
    cls = ClassifierConfig()
    s.update({f"classifier.{k}": getattr(cls, k) for k in ("hidden_dim", "dropout", "pooling")})
    s.update({f"sampler.{k}": v for k, v in SamplerWeights().weights.items()})
    return s


def desk_preset() -> dict:
    s = {f"encoder.{k}": v for k, v in DESK_SCALE.items()}
    s.update({f"{stage}.batch_size": 32 for stage in ("pretrain", "finetune", "classify")})
    return s


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"{key} expects true/false, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if raw.lower() == "none":
        return None
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or default is None:
        return float(raw)
    return raw


def parse_overrides(pairs, base: dict, source: str) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"{source}: expected key=value, got {pair!r}")
        key, raw = (x.strip() for x in pair.split("=", 1))
        if key not in base:
            raise UsageError(f"{source}: unknown setting {key!r}")
        try:
            out[key] = _coerce(key, raw, base[key])
        except ValueError as exc:
            raise UsageError(f"{source}: bad value for {key}: {exc}") from None
    return out


def read_config_file(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln for ln in (l.strip() for l in lines) if ln and not ln.startswith("#")]


def resolve_settings(args) -> dict:
    s = default_settings()
    if args.desk:
        s.update(desk_preset())
    if args.config:
        s.update(parse_overrides(read_config_file(args.config), s, str(args.config)))
    s.update(parse_overrides(args.set or [], s, "--set"))
    return s


def stage_config(s: dict, stage: str, seed: int) -> StageConfig:
    return StageConfig(stage=stage, seed=seed, **{k: s[f"{stage}.{k}"] for k in STAGE_KEYS})


def encoder_kwargs(s: dict, direction: str) -> dict:
    kw = {k.split(".", 1)[1]: v for k, v in s.items() if k.startswith("encoder.")}
    return {**kw, "direction": direction}


def classifier_config(s: dict, variant: str) -> ClassifierConfig:
    return ClassifierConfig(variant=variant, hidden_dim=s["classifier.hidden_dim"],
                            dropout=s["classifier.dropout"], pooling=s["classifier.pooling"])


def directions_for(args) -> list[str]:
    if getattr(args, "variant", None) == "F" and args.direction != "fwd":
        log.warning("variant F is the forward-only model; ignoring --direction %s", args.direction)
        return ["fwd"]
    return ["fwd", "bwd"] if args.direction == "both" else [args.direction]


def existing_directions(model_dir: Path, wanted: list[str]) -> list[str]:
    found = [d for d in wanted if (model_dir / d / "VERSION").exists()]
    if not found:
        raise FileNotFoundError(f"{model_dir}: no checkpoint for direction(s) {', '.join(wanted)}")
    return found


def write_snapshot(out: Path, args, settings: dict):
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"subcommand={args.command}"]
    for k in sorted(vars(args)):
        if k in ("command", "set", "func"):
            continue
        v = getattr(args, k)
        lines.append(f"run.{k}={' '.join(map(str, v)) if isinstance(v, list) else v}")
    lines += [f"{k}={settings[k]}" for k in sorted(settings)]
    (out / "config.resolved").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_records(path):
    """Conversations with or without a label column, decided by the header."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n").split("\t")
    return load_conversations(path, has_labels=len(header) >= 5)


# --------------------------------------------------------------- commands

def cmd_pretrain(args, s, out: Path, metrics: MetricsLog):
    corpus = load_corpus(args.corpus)
    for d in directions_for(args):
        cfg = stage_config(s, "pretrain", args.seed)
        lm, vocab, _ = pretrain_lm(corpus, encoder_kwargs(s, DIR_NAMES[d]), cfg, s["pretrain.min_count"],
                                   _tagged(metrics, d))
        save_lm(out / d, lm, vocab, stage="pretrain")


def cmd_finetune(args, s, out: Path, metrics: MetricsLog):
    texts = [r for path in args.data for r in read_records(path)]
    for d in existing_directions(Path(args.lm), directions_for(args)):
        lm, vocab, _ = load_lm(Path(args.lm) / d)
        ft, ft_vocab, _ = finetune_lm(lm, vocab, texts, stage_config(s, "finetune", args.seed), s["min_count"],
                                      _tagged(metrics, d))
        save_lm(out / d, ft, ft_vocab, stage="finetune")


def cmd_train_cls(args, s, out: Path, metrics: MetricsLog):
    train = load_conversations(args.data[0], has_labels=True)
    for extra in args.data[1:]:
        train += load_conversations(extra, has_labels=True)
    val = load_conversations(args.val, has_labels=True)
    weights = SamplerWeights({c: s[f"sampler.{c}"] for c in LABELS})
    for d in existing_directions(Path(args.lm), directions_for(args)):
        lm, vocab, _ = load_lm(Path(args.lm) / d)
        run = train_classifier(lm, vocab, train, val, classifier_config(s, args.variant),
                               stage_config(s, "classify", args.seed), weights, _tagged(metrics, d))
        save_classifier(out / d, run.model, vocab, best_epoch=run.best_epoch, best_val_micro_f1=run.best_f1)
        print(f"# {d}: best epoch {run.best_epoch}, val micro-F1 {run.best_f1:.4f}")


def model_probabilities(model_dir: Path, records, wanted: list[str]) -> tuple[torch.Tensor, dict]:
    """Per-direction class probabilities and their ensemble when more than one is present."""
    per_dir = {}
    for d in existing_directions(model_dir, wanted):
        model, vocab, _ = load_classifier(model_dir / d)
        if model.cfg.variant == "F" and d != "fwd":
            continue
        per_dir[d] = predict_proba(model, prepare(records, vocab, model.encoder.cfg.direction))
    probs = list(per_dir.values())
    combined = probs[0] if len(probs) == 1 else ensemble(probs[0], probs[1])
    return combined, per_dir


def cmd_eval(args, s, out: Path, metrics: MetricsLog):
    records = load_conversations(args.data[0], has_labels=True)
    probs, per_dir = model_probabilities(Path(args.model), records, directions_for(args))
    gold = [r.label for r in records]
    report = MetricsReport.from_labels([LABELS[i] for i in probs.argmax(-1).tolist()], gold)
    (out / "metrics_report.tsv").write_text(report.to_tsv(), encoding="utf-8")
    print(report.table(), end="")
    if len(per_dir) > 1:
        for d, p in per_dir.items():
            single = MetricsReport.from_labels([LABELS[i] for i in p.argmax(-1).tolist()], gold)
            print(f"# {d} only: micro-F1 {single.micro_f1:.4f}")


def cmd_predict(args, s, out: Path | None, metrics):
    records = read_records(args.data[0])
    probs, _ = model_probabilities(Path(args.model), records, directions_for(args))
    lines = ["id\tlabel\tp_happy\tp_sad\tp_angry\tp_others"]
    for rec, p in zip(records, probs.tolist()):
        best = max(range(len(LABELS)), key=lambda i: (p[i], -i))
        lines.append(f"{rec.id}\t{LABELS[best]}\t" + "\t".join(f"{x:.6f}" for x in p))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out is not None:
        (out / "predictions.tsv").write_text(text, encoding="utf-8")


def cmd_attn_report(args, s, out: Path, metrics):
    records = [r for r in load_conversations(args.data[0], has_labels=True)]
    model_dir = Path(args.model)
    d = existing_directions(model_dir, directions_for(args))[0]
    model, vocab, _ = load_classifier(model_dir / d)
    report, attn = attention_report(model, records, vocab, load_lexicon(args.lexicon),
                                    args.frac, args.scope, args.rows)
    (out / "attention.tsv").write_text(attention_tsv(attn), encoding="utf-8")
    (out / "attn_report.tsv").write_text(report.to_tsv(), encoding="utf-8")
    print(report.table(), end="")


def cmd_gradcheck(args, s, out, metrics) -> int:
    from turnemo.gradchecks import TOLERANCE, run_all

    results = run_all(eps=args.eps)
    ok = True
    for name, err, secs in results:
        passed = err < TOLERANCE
        ok &= passed
        print(f"{name}\t{err:.3e}\t{'ok' if passed else 'FAIL'}")
    return 0 if ok else 2


def cmd_synth(args, s, out: Path, metrics):
    from turnemo import synthetic

    recs = synthetic.make_conversations(args.n, seed=args.seed)
    n_val = n_test = max(1, args.n // 10)
    write_conversations(out / "train.tsv", recs[: args.n - n_val - n_test])
    write_conversations(out / "dev.tsv", recs[args.n - n_val - n_test: args.n - n_test])
    write_conversations(out / "test.tsv", recs[args.n - n_test:])
    (out / "corpus.txt").write_text("\n".join(synthetic.make_general_corpus(args.corpus_tokens, seed=args.seed)) + "\n",
                                    encoding="utf-8")
    (out / "lexicon.txt").write_text("\n".join(synthetic.lexicon_lines()) + "\n", encoding="utf-8")
    print(f"# wrote synthetic data to {out}")


class _tagged:
    """MetricsLog view that prefixes the stage column with a direction tag."""

    def __init__(self, inner: MetricsLog, tag: str):
        self.inner, self.tag = inner, tag

    def write(self, stage, epoch, split, loss, f1=None):
        self.inner.write(f"{stage}:{self.tag}", epoch, split, loss, f1)


# ----------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="turnemo", description="Turn-attentive emotion classification for three-turn conversations.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True, data=True, data_many=False):
        if data:
            sp.add_argument("--data", required=True, nargs="+" if data_many else 1, metavar="TSV")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, default=int(os.environ.get(SEED_ENV, "0")))
        sp.add_argument("--direction", choices=("fwd", "bwd", "both"), default="both")
        sp.add_argument("--desk", action="store_true", help="desk-scale preset (emb 64, hidden 128, batch 32)")
        sp.add_argument("--config", help="file of key=value lines")
        sp.add_argument("--set", nargs="*", metavar="KEY=VALUE", help="setting overrides")

    sp = sub.add_parser("pretrain-lm", help="step 1: LM on a general corpus")
    common(sp, data=False)
    sp.add_argument("--corpus", required=True)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune-lm", help="step 2: LM fine-tuning on task conversations")
    common(sp, data_many=True)
    sp.add_argument("--lm", required=True, help="pretrained LM directory")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("train-cls", help="step 3: classifier fine-tuning")
    common(sp, data_many=True)
    sp.add_argument("--lm", required=True, help="fine-tuned LM directory")
    sp.add_argument("--val", required=True)
    sp.add_argument("--variant", choices=tuple("ABCDEF"), default="A")
    sp.set_defaults(func=cmd_train_cls)

    sp = sub.add_parser("eval", help="per-class P/R/F1 and micro-F1")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="label and class probabilities per conversation")
    common(sp, out_required=False)
    sp.add_argument("--model", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("attn-report", help="top attended tokens matched against an emotion lexicon")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--lexicon", required=True)
    sp.add_argument("--frac", type=float, default=0.2)
    sp.add_argument("--scope", choices=("turn", "conversation"), default="turn")
    sp.add_argument("--rows", choices=("gold", "pred"), default="gold")
    sp.set_defaults(func=cmd_attn_report)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--eps", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck, out=None)

    sp = sub.add_parser("synth", help="write a synthetic dataset, corpus and lexicon")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--corpus-tokens", type=int, default=30000)
    sp.add_argument("--seed", type=int, default=int(os.environ.get(SEED_ENV, "0")))
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    uses_settings = args.command not in ("gradcheck", "synth")
    try:
        settings = resolve_settings(args) if uses_settings else {}
    except (UsageError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"turnemo: error: {exc}", file=sys.stderr)
        return 1
    torch.set_num_threads(1)
    out = Path(args.out) if args.out else None
    metrics = None
    try:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            if uses_settings:
                write_snapshot(out, args, settings)
        if args.command in ("pretrain-lm", "finetune-lm", "train-cls"):
            log_path = out / "metrics.tsv"
            log_path.unlink(missing_ok=True)
            metrics = MetricsLog(log_path)
        code = args.func(args, settings, out, metrics)
        return code or 0
    except Exception as exc:  # runtime failure: report and exit 2
        print(f"turnemo: error: {exc}", file=sys.stderr)
        return 2
    finally:
        if metrics is not None:
            metrics.close()


if __name__ == "__main__":
    sys.exit(main())
