import json

import numpy as np
import pytest

from mpath import autograd as ag
from mpath.autograd import Tensor
from mpath.model import ModelState, forward_loss, init_state
from mpath.tokenizer import build_vocab
from mpath.training import (
    EarlyStopping,
    EpochRecord,
    OptState,
    TrainConfig,
    adamw_step,
    cross_validate,
    kfold_split,
    lr_at_step,
    sample_prompt,
    train_fold,
)

from conftest import tiny_config
from scripted import run_curve


def scalar_state(theta, trainable=True):
    vocab = build_vocab(["x"])
    cfg = tiny_config(len(vocab))
    params = {"prompt.theta": Tensor(np.array([theta]), requires_grad=trainable, dtype=np.float64)}
    params["tok_emb"] = Tensor(np.array([5.0]), dtype=np.float64)
    return ModelState(cfg, vocab, params)


# -- schedule ---------------------------------------------------------------


def test_lr_examples():
    cfg = TrainConfig()
    assert lr_at_step(250, cfg) == pytest.approx(5e-5, rel=1e-15)
    assert lr_at_step(500, cfg) == 1e-4
    assert lr_at_step(10_000, cfg) == 1e-4


def test_lr_monotone_then_constant():
    cfg = TrainConfig(warmup_steps=50)
    lrs = [lr_at_step(t, cfg) for t in range(1, 120)]
    assert all(a <= b for a, b in zip(lrs, lrs[1:]))
    assert set(lrs[49:]) == {cfg.lr}
    with pytest.raises(ValueError):
        lr_at_step(0, cfg)


# -- optimizer --------------------------------------------------------------


def test_adamw_single_step_oracle():
    st = scalar_state(1.0)
    opt = OptState()
    adamw_step(st, opt, 0.1, grads={"prompt.theta": np.array([1.0])}, weight_decay=0.0)
    # hand-executed: m = 0.1, v = 0.001, bias corrected m_hat = v_hat = 1
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.001 * 1.0) / (1 - 0.999)
    expected = 1.0 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert st.p("prompt.theta").data[0] == pytest.approx(expected, abs=1e-12)
    assert st.p("prompt.theta").data[0] == pytest.approx(0.9, abs=1e-8)
    assert opt.t == 1
    assert st.p("tok_emb").data[0] == 5.0


def test_adamw_decay_with_zero_grad():
    st = scalar_state(2.0)
    opt = OptState()
    lr, wd = 0.05, 0.01
    for _ in range(50):
        adamw_step(st, opt, lr, grads={"prompt.theta": np.zeros(1)}, weight_decay=wd)
    assert st.p("prompt.theta").data[0] == pytest.approx(2.0 * (1 - lr * wd) ** 50, rel=1e-12)


def test_adamw_missing_grad():
    st = scalar_state(1.0)
    with pytest.raises(ValueError, match="prompt.theta"):
        adamw_step(st, OptState(), 0.1)


def test_frozen_untouched_after_1000_steps(small_vocab, small_corpus):
    st = init_state(tiny_config(len(small_vocab), prompt_dropout=0.0), small_vocab, 0)
    before = st.frozen_digest()
    opt = OptState()
    rng = np.random.default_rng(0)
    for step in range(1000):
        idx = rng.choice(len(small_corpus), size=2, replace=False)
        loss, _ = forward_loss([small_corpus[i] for i in idx], st)
        ag.backward(loss)
        adamw_step(st, opt, 1e-3)
    assert st.frozen_digest() == before
    assert opt.t == 1000


# -- early stopping ---------------------------------------------------------


def test_early_stopping_definition():
    es = EarlyStopping(2)
    for score in [0.1, 0.2, 0.3, 0.3, 0.3]:
        es.update(score)
        if es.should_stop:
            break
    assert (es.epoch, es.best_epoch) == (5, 3)


def test_early_stopping_never_triggers_on_monotone_curve():
    es = EarlyStopping(2)
    for i in range(10):
        es.update(i / 10)
        assert not es.should_stop
    with pytest.raises(ValueError):
        EarlyStopping(0)


def test_train_fold_scripted_curve(small_vocab, small_corpus):
    st = init_state(tiny_config(len(small_vocab)), small_vocab, 0)
    curve = [0.1, 0.2, 0.3, 0.3, 0.3, 0.9, 0.9]
    best, hist, snaps = run_curve(curve, 2, small_corpus[:48], small_corpus[48:], st)
    assert len(hist) == 5
    assert [r.val_composite for r in hist] == curve[:5]
    for n, p in best.params.items():
        np.testing.assert_array_equal(p.data, snaps[3][n])
    assert any(not np.array_equal(best.p(n).data, snaps[5][n]) for n in best.trainable_names)


def test_train_fold_monotone_runs_to_max(small_vocab, small_corpus):
    st = init_state(tiny_config(len(small_vocab)), small_vocab, 0)
    _, hist, _ = run_curve([i / 10 for i in range(10)], 2, small_corpus[:16], small_corpus[16:20], st)
    assert [r.epoch for r in hist] == list(range(1, 11))


def test_train_fold_rejects_bad_splits(tiny_state, small_corpus):
    cfg = TrainConfig()
    with pytest.raises(ValueError):
        train_fold([], small_corpus[:2], tiny_state, cfg)
    with pytest.raises(ValueError, match="overlap"):
        train_fold(small_corpus[:4], small_corpus[3:6], tiny_state, cfg)


def test_train_fold_real_scoring_is_deterministic(small_vocab, small_corpus):
    st = init_state(tiny_config(len(small_vocab), max_len=12), small_vocab, 0)
    cfg = TrainConfig(max_epochs=2, batch_size=8, lr=1e-2, warmup_steps=2)
    a, ha = train_fold(small_corpus[:24], small_corpus[24:30], st, cfg)
    b, hb = train_fold(small_corpus[:24], small_corpus[24:30], st, cfg)
    assert [r.to_json() for r in ha] == [r.to_json() for r in hb]
    assert all(a.p(n).data.tobytes() == b.p(n).data.tobytes() for n in a.params)
    assert a.frozen_digest() == st.frozen_digest()
    assert set(json.loads(ha[0].to_json())) == {
        "epoch", "train_loss", "val_bleu", "val_rouge", "val_key", "val_emb", "val_composite", "lr"
    }


def test_cross_validate_summary(small_vocab, small_corpus):
    st = init_state(tiny_config(len(small_vocab), max_len=10), small_vocab, 0)
    cfg = TrainConfig(max_epochs=1, n_folds=2, batch_size=16)
    results, summary = cross_validate(small_corpus[:20], st, cfg)
    assert len(results) == 2 and summary["n_folds"] == 2
    scores = [r.best_composite for r in results]
    assert summary["mean_composite"] == pytest.approx(np.mean(scores))
    assert summary["sd_composite"] == pytest.approx(np.std(scores, ddof=1))


# -- splits and prompts -----------------------------------------------------


def test_kfold_small():
    folds = kfold_split(10, 5, seed=1)
    vals = [set(v) for _, v in folds]
    assert [len(v) for v in vals] == [2] * 5
    assert set().union(*vals) == set(range(10))
    assert sum(len(v) for v in vals) == 10
    for tr, va in folds:
        assert not set(tr) & set(va) and len(tr) + len(va) == 10
    assert kfold_split(10, 5, seed=1) == folds


def test_kfold_paper_count():
    assert [len(v) for _, v in kfold_split(7385, 5, seed=7)] == [1477] * 5


def test_kfold_uneven_sizes():
    sizes = [len(v) for _, v in kfold_split(23, 5, seed=0)]
    assert max(sizes) - min(sizes) <= 1 and sum(sizes) == 23


def test_kfold_errors():
    with pytest.raises(ValueError):
        kfold_split(3, 5, 0)
    with pytest.raises(ValueError):
        kfold_split(10, 1, 0)


def test_sample_prompt_extremes():
    rng = np.random.default_rng(0)
    never = tiny_config(10, prompt_dropout=0.0)
    always = tiny_config(10, prompt_dropout=1.0)
    assert {sample_prompt(rng, never) for _ in range(200)} == {"Pathology report:"}
    assert {sample_prompt(rng, always) for _ in range(200)} == {""}


def test_train_config_validation():
    for bad in (dict(lr=0), dict(patience=0), dict(n_folds=1), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig.from_dict(TrainConfig(lr=3e-4).to_dict()).lr == 3e-4


def test_epoch_record_json():
    rec = EpochRecord(1, 0.5, 0.1, 0.2, 0.3, 0.4, 0.25, 1e-4)
    assert json.loads(rec.to_json())["val_composite"] == 0.25
