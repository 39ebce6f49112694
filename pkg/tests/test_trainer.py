import numpy as np
import pytest

from transducerlab import datasets as ds
from transducerlab import network as net
from transducerlab import tokenizer as tok
from transducerlab import trainer as tr
from transducerlab.numerics import parameter
from transducerlab.trainer import FreezeScope, TrainConfig


@pytest.fixture(scope="module")
def toy_world():
    spec = ds.make_spec("base", sentence_len=(2, 3))
    corpus = ds.synth_corpus(spec, 24, seed=5)
    vocab = tok.build_vocab(ds.transcripts(corpus), 30)
    arch = net.parse_arch_spec("16p8_1x1", feature_dim=8, stack_factor=3)
    return spec, corpus, vocab, arch


def make_cfg(arch, **kw):
    defaults = dict(lr=5e-3, epochs=2, batch_size=4, seed=3, pretrain_epochs=2,
                    eval_dev_wer=False)
    defaults.update(kw)
    return TrainConfig(arch=arch, **defaults)


def encoder_bytes(layers):
    chunks = []
    for layer in layers:
        for t in layer.lstm.tensors().values():
            chunks.append(t.data.tobytes())
        if layer.context is not None:
            chunks.append(layer.context.data.tobytes())
    return b"".join(chunks)


def test_config_validation():
    arch = net.parse_arch_spec("16p8x1")
    with pytest.raises(tr.TrainerError):
        TrainConfig(arch=arch, lr=0.0)
    with pytest.raises(tr.TrainerError):
        TrainConfig(arch=arch, init="warm")
    with pytest.raises(tr.TrainerError):
        TrainConfig(arch=arch, batch_size=0)


def test_lr_schedule():
    arch = net.parse_arch_spec("16p8x1")
    cfg = TrainConfig(arch=arch, lr=1.0, lr_decay=0.5, lr_decay_every=2)
    assert [cfg.lr_at(e) for e in range(5)] == [1.0, 1.0, 0.5, 0.5, 0.25]


def test_adam_reduces_quadratic():
    theta = parameter(np.array([4.0, -3.0]))
    opt = tr.Adam({"theta": theta}, lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        theta.grad = 2.0 * theta.data
        opt.step()
    assert np.abs(theta.data).max() < 1e-2


def test_clip_global_norm():
    a = parameter(np.zeros(3))
    b = parameter(np.zeros(2))
    a.grad = np.array([3.0, 0.0, 0.0])
    b.grad = np.array([0.0, 4.0])
    norm = tr.clip_global_norm({"a": a, "b": b}, max_norm=2.5)
    assert norm == pytest.approx(2.5)
    total = np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum())
    assert total <= 2.5 + 1e-9


def test_clip_noop_below_threshold():
    a = parameter(np.zeros(2))
    a.grad = np.array([0.3, 0.4])
    norm = tr.clip_global_norm({"a": a}, max_norm=2.0)
    assert norm == pytest.approx(0.5)
    assert np.allclose(a.grad, [0.3, 0.4])


def test_dev_split_is_stable_and_small(toy_world):
    _, corpus, _, _ = toy_world
    train, dev = tr.split_corpus(corpus, seed=7)
    train2, dev2 = tr.split_corpus(corpus, seed=7)
    assert [u.utt_id for u in dev] == [u.utt_id for u in dev2]
    assert 0 < len(dev) < len(corpus) / 2


def test_pretrain_zero_epochs_returns_random_init(toy_world):
    _, corpus, vocab, arch = toy_world
    cfg = make_cfg(arch, pretrain_epochs=0)
    enc = tr.pretrain_encoder_ce(cfg, corpus, vocab)
    reference = net.init_model(arch, vocab.n_labels, cfg.seed).encoder
    assert encoder_bytes(enc) == encoder_bytes(reference)


def test_pretrain_deterministic(toy_world):
    _, corpus, vocab, arch = toy_world
    cfg = make_cfg(arch)
    a = tr.pretrain_encoder_ce(cfg, corpus, vocab)
    b = tr.pretrain_encoder_ce(cfg, corpus, vocab)
    assert encoder_bytes(a) == encoder_bytes(b)


def test_pretrain_ce_overfits_single_utterance(toy_world):
    _, corpus, vocab, arch = toy_world
    cfg = make_cfg(arch, pretrain_epochs=200, lr=1e-2)
    enc, head = tr.pretrain_encoder_ce(cfg, corpus[:1], vocab, keep_head=True)
    acc = tr.frame_accuracy(enc, head, cfg, corpus[0], vocab)
    assert acc > 0.95


def test_pretrain_ctc_overfits_single_utterance(toy_world):
    _, corpus, vocab, arch = toy_world
    from transducerlab import transducer_loss as tl
    from transducerlab.numerics import no_grad

    cfg = make_cfg(arch, pretrain_epochs=200, lr=1e-2)
    enc, head = tr.pretrain_encoder_ctc(cfg, corpus[:1], vocab, keep_head=True)
    item = tr._prepare(corpus[:1], vocab, arch)[0]
    with no_grad():
        out = net.encoder_layers_forward(enc, item.stacked)
        logits = out.data @ head[0].data + head[1].data
    assert tl.ctc_loss_grad(logits, item.labels).loss < 0.1


def test_pretrain_ctc_skips_short_utterances(toy_world, caplog):
    import logging

    from transducerlab.alignment import WordTiming

    _, corpus, vocab, arch = toy_world
    word = corpus[0].words[0].word
    # 3 pre-stack frames -> 1 stacked frame, below the word's label count
    shorty = ds.Utterance(utt_id="tiny", features=net.FrameMatrix(np.zeros((3, 8))),
                          transcript=word, words=[WordTiming(word, 0, 3)])
    with caplog.at_level(logging.WARNING):
        tr.pretrain_encoder_ctc(make_cfg(arch, pretrain_epochs=1),
                                [corpus[0], shorty], vocab)
    assert any("skipped 1" in r.getMessage() for r in caplog.records)


def test_missing_timing_yields_named_error(toy_world):
    _, corpus, vocab, arch = toy_world
    broken = ds.Utterance(utt_id="lost", features=corpus[0].features,
                          transcript="", words=[])
    broken.transcript = corpus[0].transcript  # sidestep constructor validation
    with pytest.raises(tr.TrainerError, match="lost"):
        tr.pretrain_encoder_ce(make_cfg(arch, pretrain_epochs=1), [broken], vocab)


def test_train_rnnt_history_and_determinism(toy_world):
    _, corpus, vocab, arch = toy_world
    cfg = make_cfg(arch, epochs=2)
    model_a, hist_a = tr.train_rnnt(cfg, corpus, vocab)
    model_b, hist_b = tr.train_rnnt(cfg, corpus, vocab)
    assert net.save_state(model_a) == net.save_state(model_b)
    train_rows = [r for r in hist_a if r.split == "train"]
    assert [r.epoch for r in train_rows] == [0, 1]
    assert all(np.isfinite(r.loss) for r in hist_a)


def test_init_transfer_preserves_encoder_function(toy_world):
    _, corpus, vocab, arch = toy_world
    cfg = make_cfg(arch, pretrain_epochs=1)
    enc = tr.pretrain_encoder_ce(cfg, corpus, vocab)
    model = net.init_model(arch, vocab.n_labels, cfg.seed)
    tr.transfer_encoder(model, enc)
    probe = tr._prepare(corpus[:3], vocab, arch)
    for item in probe:
        mine = net.encoder_forward(model, item.stacked)
        theirs = net.encoder_layers_forward(enc, item.stacked)
        assert np.array_equal(mine.data, theirs.data)


def test_train_metrics_csv(tmp_path, toy_world):
    _, corpus, vocab, arch = toy_world
    cfg = make_cfg(arch, epochs=1, eval_dev_wer=True)
    _, hist = tr.train_rnnt(cfg, corpus, vocab)
    path = tmp_path / "metrics.csv"
    tr.write_metrics_csv(path, hist)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,split,loss,wer"
    assert lines[1].startswith("0,train,")


def test_adapt_freeze_scope_keeps_encoder_bytes(toy_world):
    _, corpus, vocab, arch = toy_world
    cfg = make_cfg(arch, epochs=1)
    model, _ = tr.train_rnnt(make_cfg(arch, epochs=1), corpus, vocab)
    before = encoder_bytes(model.encoder)
    pred_before = model.pred_embed.data.copy()
    adapted = tr.adapt(model, cfg, corpus, vocab, FreezeScope.PREDICTION_AND_JOINT)
    assert encoder_bytes(adapted.encoder) == before
    assert not np.array_equal(adapted.pred_embed.data, pred_before)
    # the input model itself is untouched
    assert np.array_equal(model.pred_embed.data, pred_before)


def test_adapt_zero_epochs_is_identity(toy_world):
    _, corpus, vocab, arch = toy_world
    model, _ = tr.train_rnnt(make_cfg(arch, epochs=1), corpus, vocab)
    adapted = tr.adapt(model, make_cfg(arch, epochs=0), corpus, vocab,
                       FreezeScope.ALL)
    assert net.save_state(adapted) == net.save_state(model)


def test_adapt_update_all_changes_encoder(toy_world):
    _, corpus, vocab, arch = toy_world
    model, _ = tr.train_rnnt(make_cfg(arch, epochs=1), corpus, vocab)
    adapted = tr.adapt(model, make_cfg(arch, epochs=1), corpus, vocab,
                       FreezeScope.ALL)
    assert encoder_bytes(adapted.encoder) != encoder_bytes(model.encoder)


def test_adapt_empty_corpus_rejected(toy_world):
    _, corpus, vocab, arch = toy_world
    model, _ = tr.train_rnnt(make_cfg(arch, epochs=1), corpus, vocab)
    with pytest.raises(tr.TrainerError, match="empty"):
        tr.adapt(model, make_cfg(arch), [], vocab, FreezeScope.ALL)


def test_adapt_mix_ratio_validation(toy_world):
    _, corpus, vocab, arch = toy_world
    model, _ = tr.train_rnnt(make_cfg(arch, epochs=1), corpus, vocab)
    with pytest.raises(tr.TrainerError, match="ratio"):
        tr.adapt(model, make_cfg(arch, epochs=1), corpus, vocab,
                 FreezeScope.ALL, mix=(corpus, 1.5))


def test_adapt_with_mix_runs(toy_world):
    _, corpus, vocab, arch = toy_world
    model, _ = tr.train_rnnt(make_cfg(arch, epochs=1), corpus, vocab)
    adapted = tr.adapt(model, make_cfg(arch, epochs=1), corpus[:12], vocab,
                       FreezeScope.PREDICTION_AND_JOINT, mix=(corpus[12:], 0.5))
    assert encoder_bytes(adapted.encoder) == encoder_bytes(model.encoder)


def test_load_train_config(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("""# toy setup
arch = 32p16_2x1
feature_dim = 8
epochs = 3
lr = 0.005
seed = 11
eval_dev_wer = false
""")
    cfg = tr.load_train_config(path)
    assert cfg.arch.cells == 32 and cfg.arch.tau == 2
    assert cfg.epochs == 3 and cfg.seed == 11
    assert cfg.lr == pytest.approx(0.005)
    assert cfg.eval_dev_wer is False


def test_load_train_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("arch = 16p8x1\nwarmup = 3\n")
    with pytest.raises(tr.TrainerError, match="unknown config keys"):
        tr.load_train_config(path)


def test_batches_respect_lattice_budget(toy_world):
    _, corpus, vocab, arch = toy_world
    cfg = make_cfg(arch, batch_size=16, max_lattice_mb=0.02)
    items = tr._prepare(corpus, vocab, arch)
    rng = np.random.default_rng(0)
    from transducerlab import transducer_loss as tl
    for batch in tr._batches(items, cfg, vocab, rng):
        cost = sum(tl.lattice_memory_bytes(i.stacked.shape[0], len(i.labels),
                                           vocab.n_labels, 8) for i in batch)
        assert len(batch) == 1 or cost <= 0.02 * 1024 * 1024
