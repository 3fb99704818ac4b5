"""Acceptance criteria, one test per criterion; the terminal summary prints PASS/FAIL lines."""

import time

import numpy as np
import pytest
import torch

from turnemo import EMOTIONS, LABELS
from turnemo.analysis import TurnAttention, attention_report, select_tokens
from turnemo.checkpoint import save_classifier
from turnemo.classifier import ClassifierConfig, TurnAttentionClassifier, build_input, ensemble, span_masks
from turnemo.cli import main
from turnemo.corpus_io import load_lexicon
from turnemo.encoder import DESK_SCALE, Encoder, EncoderConfig
from turnemo.evaluation import ConfusionCounts, lexicon_match, micro_f1
from turnemo.gradchecks import TOLERANCE, run_all
from turnemo.synthetic import lexicon_lines, make_conversations, make_general_corpus, make_random_corpus
from turnemo.training import (
    StageConfig,
    batchify,
    evaluate_lm,
    finetune_lm,
    lm_stream,
    predict_proba,
    prepare,
    pretrain_lm,
    score,
    train_classifier,
)
from turnemo.text_pipeline import build_vocab, tokenize

DESK_BATCH = 32


@pytest.mark.criterion(1, "gradcheck rel err < 1e-4 on all ops, runtime < 30 s")
def test_gradcheck():
    t0 = time.perf_counter()
    results = run_all(eps=1e-4)
    elapsed = time.perf_counter() - t0
    names = " ".join(n for n, _, _ in results)
    for op in ("lstm_cell", "embedding", "attention", "avg_pool", "linear_block"):
        assert op in names
    for v in "ABCDEF":
        assert f"build_input({v})" in names
    worst = max(err for _, err, _ in results)
    print(f"worst rel err {worst:.3e}, {elapsed:.2f} s")
    assert worst < TOLERANCE
    assert elapsed < 30


@pytest.mark.criterion(2, "attention sums to 1 +- 1e-6 with exact masked zeros over 10^3 conversations")
def test_attention_normalization():
    gen = torch.Generator().manual_seed(0)
    rng = np.random.default_rng(0)
    enc = Encoder(EncoderConfig(vocab_size=50, emb_dim=8, hidden_dim=16, emb_init=0.5))
    enc.reset_parameters(gen)
    model = TurnAttentionClassifier(enc, ClassifierConfig(hidden_dim=8))
    model.reset_head(gen)
    model.eval()
    worst = 0.0
    with torch.no_grad():
        for _ in range(10):
            lens = rng.integers(1, 12, size=(100, 3))
            total = lens.sum(1)
            L = int(total.max())
            ids = torch.zeros(100, L, dtype=torch.long)
            spans = torch.zeros(100, 3, 2, dtype=torch.long)
            for b in range(100):
                ids[b, : total[b]] = torch.from_numpy(rng.integers(1, 50, size=total[b]))
                ends = np.cumsum(lens[b])
                spans[b, :, 0] = torch.from_numpy(ends - lens[b])
                spans[b, :, 1] = torch.from_numpy(ends)
            _, att1, att3 = model(ids, torch.from_numpy(total), spans, return_attention=True)
            masks = span_masks(spans, L)
            for att, m in ((att1, masks[:, 0]), (att3, masks[:, 2])):
                worst = max(worst, (att.scores.sum(-1) - 1).abs().max().item())
                assert torch.all(att.scores[~m] == 0)
    print(f"max |sum - 1| = {worst:.2e}")
    assert worst <= 1e-6


@pytest.mark.criterion(3, "classifier input dims at d_enc=8: A/B/C/F=16, D/E=8")
def test_variant_shapes():
    enc = torch.randn(3, 9, 8)
    masks = span_masks(torch.tensor([[[0, 3], [3, 5], [5, 9]]] * 3), 9)
    W = torch.randn(8)
    expect = {"A": 16, "B": 16, "C": 16, "D": 8, "E": 8, "F": 16}
    for v, dim in expect.items():
        cfg = ClassifierConfig(variant=v)
        assert cfg.input_dim(8) == dim
        assert build_input(enc, masks, W, W, cfg).shape == (3, dim)


@pytest.mark.criterion(4, "identical turn 1/3 encodings with W1=W3 give ||O_diff|| = 0 exactly")
def test_zero_difference():
    g = torch.Generator().manual_seed(1)
    for _ in range(20):
        turn = torch.randn(5, 8, generator=g)
        enc = torch.cat([turn, torch.randn(3, 8, generator=g), turn]).unsqueeze(0)
        masks = span_masks(torch.tensor([[[0, 5], [5, 8], [8, 13]]]), 13)
        W = torch.randn(8, generator=g)
        x = build_input(enc, masks, W, W, ClassifierConfig(variant="A"))
        assert torch.linalg.vector_norm(x[0, :8]).item() == 0.0


def brute_micro(preds, gold):
    tp = fp = fn = 0
    for p, g in zip(preds, gold):
        if p == g and p in EMOTIONS:
            tp += 1
        else:
            fp += p in EMOTIONS
            fn += g in EMOTIONS
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0


@pytest.mark.criterion(5, "micro-F1 equals a brute-force oracle on 1000 random multisets")
def test_micro_f1_oracle():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        preds = [LABELS[i] for i in rng.integers(0, 4, n)]
        gold = [LABELS[i] for i in rng.integers(0, 4, n)]
        assert micro_f1(ConfusionCounts.from_labels(preds, gold)) == brute_micro(preds, gold)


@pytest.mark.slow
@pytest.mark.criterion(6, "desk-scale LM memorizes a 1k-token corpus to loss < 0.5 in 200 epochs, < 2 min")
def test_lm_memorization():
    corpus = make_random_corpus(1000, seed=1)
    assert sum(len(line.split()) for line in corpus) == 1000
    t0 = time.perf_counter()
    cfg = StageConfig.default("pretrain", epochs=200, batch_size=2, seed=0)
    lm, vocab, hist = pretrain_lm(corpus, dict(DESK_SCALE), cfg, min_count=1)
    data = batchify(lm_stream([tokenize(t) for t in corpus], vocab, False), 2)
    loss = evaluate_lm(lm, data, cfg.bptt)
    elapsed = time.perf_counter() - t0
    print(f"final train loss {hist[-1]:.4f}, eval loss {loss:.4f}, {elapsed:.1f} s")
    assert loss < 0.5
    assert elapsed < 120


# ------------------------------------------------------- end-to-end fixture

class Pipeline:
    """Three-stage runs on the synthetic task, shared by criteria 7-9 and 11."""

    def __init__(self):
        recs = make_conversations(2000, seed=7)
        self.train, self.val = recs[:1600], recs[1600:]
        corpus = make_general_corpus(30000, seed=3)
        self.runs, self.times = {}, {}
        for direction in ("forward", "backward"):
            t0 = time.perf_counter()
            pre = StageConfig.default("pretrain", epochs=15, batch_size=16)
            lm, vocab, _ = pretrain_lm(corpus, {**DESK_SCALE, "direction": direction}, pre)
            fin = StageConfig.default("finetune", epochs=2, batch_size=DESK_BATCH)
            lm, vocab, _ = finetune_lm(lm, vocab, self.train, fin)
            t_lm = time.perf_counter() - t0
            for variant in ("A", "E"):
                if variant == "E" and direction == "backward":
                    continue
                t1 = time.perf_counter()
                cls = StageConfig.default("classify", epochs=15, batch_size=DESK_BATCH)
                run = train_classifier(lm, vocab, self.train, self.val, ClassifierConfig(variant=variant), cls)
                self.runs[direction, variant] = (run, vocab)
                self.times[direction, variant] = t_lm + time.perf_counter() - t1

    def probs(self, direction, variant="A"):
        run, vocab = self.runs[direction, variant]
        return predict_proba(run.model, prepare(self.val, vocab, direction))

    def val_f1(self, probs):
        return score(probs, prepare(self.val, self.runs["forward", "A"][1], "forward"))[1]


@pytest.fixture(scope="module")
def pipeline():
    return Pipeline()


@pytest.mark.slow
@pytest.mark.criterion(7, "3-stage pipeline on synthetic data: variant A val micro-F1 >= 0.95 (< 5 min), E >= 0.90")
def test_end_to_end(pipeline):
    f1_a = pipeline.runs["forward", "A"][0].best_f1
    f1_e = pipeline.runs["forward", "E"][0].best_f1
    print(f"A: {f1_a:.4f} ({pipeline.times['forward', 'A']:.0f} s), E: {f1_e:.4f}")
    assert f1_a >= 0.95 and pipeline.times["forward", "A"] < 300
    assert f1_e >= 0.90


@pytest.mark.slow
@pytest.mark.criterion(8, "self-ensemble changes probabilities < 1e-7; fwd+bwd micro-F1 >= min of singles")
def test_ensemble(pipeline):
    fwd, bwd = pipeline.probs("forward"), pipeline.probs("backward")
    for p in (fwd, bwd):
        assert (ensemble(p, p) - p).abs().max().item() < 1e-7
    singles = [pipeline.val_f1(fwd), pipeline.val_f1(bwd)]
    both = pipeline.val_f1(ensemble(fwd, bwd))
    print(f"fwd {singles[0]:.4f} bwd {singles[1]:.4f} ensemble {both:.4f}")
    assert both >= min(singles)


@pytest.mark.slow
@pytest.mark.criterion(9, "attention report matches hand counts on injected scores; trained diagonal dominates")
def test_attention_report(pipeline, tmp_path):
    lex_path = tmp_path / "lexicon.txt"
    lex_path.write_text("\n".join(lexicon_lines()) + "\n")
    lexicon = load_lexicon(lex_path)
    assert len(lexicon.entries) == 6

    # injected scores: 5 tokens per turn -> 1 selected each
    attn = [
        TurnAttention("h1", 1, ("i", "feel", "glad", "now", "ok"), (0.1, 0.1, 0.5, 0.2, 0.1)),
        TurnAttention("h1", 3, ("so", "happy", "you", "came", "!"), (0.1, 0.6, 0.1, 0.1, 0.1)),
        TurnAttention("h2", 1, ("why", "cry", "at", "the", "end"), (0.1, 0.6, 0.1, 0.1, 0.1)),
        TurnAttention("h2", 3, ("it", "was", "fine", "mostly", "yes"), (0.1, 0.1, 0.6, 0.1, 0.1)),
        TurnAttention("s1", 1, ("do", "not", "cry", "over", "it"), (0.1, 0.1, 0.6, 0.1, 0.1)),
        TurnAttention("s1", 3, ("i", "am", "sad", "and", "mad"), (0.1, 0.1, 0.4, 0.1, 0.3)),
        TurnAttention("a1", 1, ("you", "make", "me", "mad", "today"), (0.1, 0.1, 0.1, 0.6, 0.1)),
        TurnAttention("a1", 3, ("so", "angry", "right", "now", "!"), (0.1, 0.5, 0.1, 0.1, 0.2)),
    ]
    buckets = {"h1": "happy", "h2": "happy", "s1": "sad", "a1": "angry"}
    report = lexicon_match(select_tokens(attn, buckets), lexicon)
    # happy: glad, happy, cry, fine -> joy 2/4, sadness 1/4; sad: cry, sad; angry: mad, angry
    assert report.cells["happy"] == {"joy": 50.0, "sadness": 25.0, "anger": 0.0}
    assert report.cells["sad"] == {"joy": 0.0, "sadness": 100.0, "anger": 0.0}
    assert report.cells["angry"] == {"joy": 0.0, "sadness": 0.0, "anger": 100.0}

    run, vocab = pipeline.runs["forward", "A"]
    trained, _ = attention_report(run.model, pipeline.val, vocab, lexicon)
    print(trained.table(), end="")
    for emo, lex in zip(EMOTIONS, ("joy", "sadness", "anger")):
        row = trained.cells[emo]
        assert all(row[lex] >= v for v in row.values())


@pytest.mark.criterion(10, "same seed gives byte-identical epoch logs")
def test_determinism(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--n", "80", "--corpus-tokens", "3000", "--seed", "5"]) == 0
    tiny = ["--set", "encoder.emb_dim=16", "encoder.hidden_dim=24", "encoder.emb_init=0.5",
            "pretrain.epochs=2", "finetune.epochs=1", "classify.epochs=3",
            "pretrain.batch_size=8", "finetune.batch_size=8", "classify.batch_size=8", "pretrain.min_count=1"]
    logs = []
    for run in ("r1", "r2"):
        root = tmp_path / run
        assert main(["pretrain-lm", "--corpus", str(data / "corpus.txt"), "--out", str(root / "pre"),
                     "--seed", "11", *tiny]) == 0
        assert main(["finetune-lm", "--data", str(data / "train.tsv"), "--lm", str(root / "pre"),
                     "--out", str(root / "ft"), "--seed", "11", *tiny]) == 0
        assert main(["train-cls", "--data", str(data / "train.tsv"), "--val", str(data / "dev.tsv"),
                     "--lm", str(root / "ft"), "--out", str(root / "cls"), "--seed", "11", *tiny]) == 0
        logs.append([(root / s / "metrics.tsv").read_bytes() for s in ("pre", "ft", "cls")])
    assert logs[0] == logs[1]
    assert all(len(b.splitlines()) > 1 for b in logs[0])


@pytest.mark.slow
@pytest.mark.criterion(11, "eval runs to completion and reports per-class P/R/F1 and micro-F1 in table layout")
def test_report_layout(pipeline, tmp_path, capsys):
    from turnemo.corpus_io import write_conversations

    model_dir = tmp_path / "model"
    for tag, direction in (("fwd", "forward"), ("bwd", "backward")):
        run, vocab = pipeline.runs[direction, "A"]
        save_classifier(model_dir / tag, run.model, vocab)
    write_conversations(tmp_path / "val.tsv", pipeline.val)
    assert main(["eval", "--data", str(tmp_path / "val.tsv"), "--model", str(model_dir),
                 "--out", str(tmp_path / "eval")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["Happy", "Sad", "Angry", "Micro"]
    assert lines[1].split() == ["P", "R", "F1"] * 3 + ["F1"]
    assert len([float(x) for x in lines[2].split()]) == 10
    tsv = (tmp_path / "eval" / "metrics_report.tsv").read_text().splitlines()
    assert [l.split("\t")[0] for l in tsv] == ["class", "happy", "sad", "angry", "micro"]
