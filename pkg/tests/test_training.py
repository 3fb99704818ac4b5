import math

import numpy as np
import pytest
import torch

from turnemo.checkpoint import CheckpointError, load_classifier, load_lm, save_classifier, save_lm
from turnemo.classifier import ClassifierConfig
from turnemo.encoder import LanguageModel, EncoderConfig, lm_loss
from turnemo.numeric import RngStreams
from turnemo.synthetic import make_conversations, make_text_corpus
from turnemo.text_pipeline import build_vocab, tokenize
from turnemo.training import (
    MetricsLog,
    SamplerWeights,
    StageConfig,
    batchify,
    build_classifier,
    collate,
    evaluate_lm,
    finetune_lm,
    group_lrs,
    lm_stream,
    predict_proba,
    prepare,
    pretrain_lm,
    score,
    train_classifier,
    transfer_vocab,
    weighted_sample,
)

TINY = {"emb_dim": 8, "hidden_dim": 12, "emb_init": 0.5}


def test_stage_defaults():
    p = StageConfig.default("pretrain")
    c = StageConfig.default("classify")
    assert (p.epochs, p.batch_size, p.base_lr, p.bptt) == (14, 128, 0.004, 70)
    assert (c.epochs, c.base_lr) == (30, 0.01)
    assert c.schedule == "slanted-triangular" and (c.cut_frac, c.ratio) == (0.1, 32)
    assert SamplerWeights().weights == {"happy": 0.4, "sad": 0.4, "angry": 0.4, "others": 0.2}


def test_group_lrs():
    assert group_lrs(1.0, 3, False) == [1.0, 1.0, 1.0]
    lrs = group_lrs(2.6 ** 2, 3, True)
    assert lrs == pytest.approx([1.0, 2.6, 2.6 ** 2])
    assert group_lrs(1.0, 3, False, n_trainable=1) == [0.0, 0.0, 1.0]


def test_weighted_sample_ratio():
    labels = [0] * 50 + [3] * 50
    w = SamplerWeights({"happy": 0.4, "sad": 0.4, "angry": 0.4, "others": 0.2})
    idx = weighted_sample(labels, w, 100_000, np.random.default_rng(0))
    frac = np.mean(np.asarray(labels)[idx] == 0)
    assert abs(frac - 2 / 3) < 0.03


def test_weighted_sample_uniform_single_and_deterministic():
    labels = [0, 1, 2, 3] * 25
    w = SamplerWeights({k: 1.0 for k in ("happy", "sad", "angry", "others")})
    idx = weighted_sample(labels, w, 100_000, np.random.default_rng(1))
    counts = np.bincount(np.asarray(labels)[idx], minlength=4) / len(idx)
    assert np.abs(counts - 0.25).max() < 0.02
    assert set(weighted_sample([2] * 5, SamplerWeights(), 50, np.random.default_rng(0))) <= set(range(5))
    a = weighted_sample(labels, w, 64, np.random.default_rng(9))
    b = weighted_sample(labels, w, 64, np.random.default_rng(9))
    assert (a == b).all()


def test_batchify_and_stream():
    toks = [["a", "b"], ["c"]]
    v = build_vocab(toks, 1)
    s = lm_stream(toks, v, backward=False)
    assert v.decode(s.tolist()) == ["<bos>", "a", "b", "<bos>", "c"]
    assert v.decode(lm_stream(toks, v, backward=True).tolist()) == ["<bos>", "b", "a", "<bos>", "c"]
    assert batchify(torch.arange(10), 3).shape == (3, 3)


def test_metrics_log(tmp_path):
    log = MetricsLog(tmp_path / "m.tsv", stream=None)
    log.write("classify", 1, "val", 0.5, 0.25)
    log.write("pretrain", 2, "train", 1.0)
    log.close()
    assert (tmp_path / "m.tsv").read_text().splitlines() == [
        "stage\tepoch\tsplit\tloss\tmicroF1", "classify\t1\tval\t0.500000\t0.250000", "pretrain\t2\ttrain\t1.000000\tNA"]


@pytest.fixture(scope="module")
def pretrained():
    corpus = make_text_corpus(3000, seed=0)
    cfg = StageConfig.default("pretrain", epochs=2, batch_size=8, seed=0)
    return pretrain_lm(corpus, TINY, cfg, min_count=2), corpus


def test_initial_loss_near_log_vocab():
    v = build_vocab([tokenize(t) for t in make_text_corpus(2000, 0)], 1)
    lm = LanguageModel(EncoderConfig(vocab_size=len(v), emb_dim=8, hidden_dim=12))
    lm.reset_parameters(torch.Generator().manual_seed(0))
    data = batchify(lm_stream([tokenize(t) for t in make_text_corpus(2000, 0)], v, False), 4)
    assert evaluate_lm(lm, data) == pytest.approx(math.log(len(v)), rel=0.02)


def test_pretrain_loss_decreases_and_is_deterministic(pretrained):
    (lm, vocab, hist), corpus = pretrained
    assert hist[-1] < hist[0]
    cfg = StageConfig.default("pretrain", epochs=2, batch_size=8, seed=0)
    lm2, vocab2, hist2 = pretrain_lm(corpus, TINY, cfg, min_count=2)
    assert hist2 == hist and vocab2 == vocab
    assert all(torch.equal(a, b) for a, b in zip(lm.state_dict().values(), lm2.state_dict().values()))


def test_transfer_vocab_rows(pretrained):
    (lm, vocab, _), _ = pretrained
    new = build_vocab([["the", "zzzz", "qqqq"], ["the"]], 1)
    ft = transfer_vocab(lm, vocab, new)
    emb_old, emb_new = lm.encoder.embedding, ft.encoder.embedding
    assert emb_new.shape[0] == len(new)
    for tok in new.id_to_token:
        i = new.token_to_id[tok]
        if tok in vocab.token_to_id:
            assert torch.equal(emb_new[i], emb_old[vocab.token_to_id[tok]])
        else:
            assert torch.allclose(emb_new[i], emb_old.mean(0))
    assert torch.equal(ft.encoder.layers[0].w_ih, lm.encoder.layers[0].w_ih)


def test_finetune_vocab_from_task(pretrained):
    (lm, vocab, _), _ = pretrained
    recs = make_conversations(60, seed=1)
    cfg = StageConfig.default("finetune", epochs=1, batch_size=4)
    ft, v2, hist = finetune_lm(lm, vocab, recs, cfg, min_count=3)
    assert len(hist) == 1 and math.isfinite(hist[0])
    toks = [t for r in recs for turn in r.turns for t in tokenize(turn)]
    assert set(v2.id_to_token) <= set(toks) | {"<pad>", "<unk>", "<bos>", "<maj>", "<up>", "<rep>"}


def test_encoder_gets_gradient_and_no_decoder(pretrained):
    (lm, vocab, _), _ = pretrained
    model = build_classifier(lm.encoder, ClassifierConfig(hidden_dim=6), RngStreams(0))
    assert not any("decoder" in n for n, _ in model.named_parameters())
    convs = prepare(make_conversations(8, seed=2), vocab, "forward")
    ids, lengths, spans, y = collate(convs)
    torch.nn.functional.cross_entropy(model(ids, lengths, spans), y).backward()
    for group in model.layer_groups():
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in group)
    assert model.encoder is not lm.encoder


def test_best_epoch_snapshot_and_checkpoint(pretrained, tmp_path):
    (lm, vocab, _), _ = pretrained
    recs = make_conversations(40, seed=3)
    train, val = recs[:30], recs[30:]
    fake = {1: 0.1, 2: 0.9, 3: 0.5}
    snaps = {}

    def metric(model, epoch):
        snaps[epoch] = {k: v.clone() for k, v in model.state_dict().items()}
        return fake[epoch]

    cfg = StageConfig.default("classify", epochs=3, batch_size=8, gradual_unfreeze=False)
    run = train_classifier(lm, vocab, train, val, ClassifierConfig(hidden_dim=6), cfg, val_metric=metric)
    assert run.best_epoch == 2 and run.best_f1 == 0.9
    assert all(torch.equal(v, snaps[2][k]) for k, v in run.model.state_dict().items())
    assert not torch.equal(snaps[1]["encoder.embedding"], lm.encoder.embedding)

    convs = prepare(val, vocab, "forward")
    before = score(predict_proba(run.model, convs), convs)
    save_classifier(tmp_path / "cls", run.model, vocab)
    model2, vocab2, _ = load_classifier(tmp_path / "cls")
    assert vocab2 == vocab
    assert score(predict_proba(model2, convs), convs) == before


def test_lm_checkpoint_roundtrip_and_errors(pretrained, tmp_path):
    (lm, vocab, _), _ = pretrained
    save_lm(tmp_path / "lm", lm, vocab)
    lm2, v2, _ = load_lm(tmp_path / "lm")
    assert all(torch.equal(a, b) for a, b in zip(lm.state_dict().values(), lm2.state_dict().values()))
    with pytest.raises(CheckpointError):
        load_classifier(tmp_path / "lm")
    (tmp_path / "lm" / "VERSION").write_text("turnemo-checkpoint 99\n")
    with pytest.raises(CheckpointError):
        load_lm(tmp_path / "lm")


def test_classifier_rejects_unlabeled(pretrained):
    (lm, vocab, _), _ = pretrained
    recs = make_conversations(4, seed=0)
    unlabeled = [type(r)(r.id, r.turns, None) for r in recs]
    with pytest.raises(ValueError):
        train_classifier(lm, vocab, unlabeled, recs, ClassifierConfig(), StageConfig.default("classify", epochs=1))
