"""Acceptance criteria A1-A9.  Each test prints the numbers it judged."""

import hashlib
import itertools
import time

import numpy as np
import pytest

from mpath import autograd as ag
from mpath.checkpoint import load_checkpoint, save_checkpoint
from mpath.cli import run
from mpath.metrics import Scorer, bleu4, composite_score, rouge_l_f1
from mpath.model import (
    ModelConfig,
    PretrainConfig,
    encode_visual_prefix,
    forward_loss,
    init_backbone_pretrain,
    init_state,
)
from mpath.reports import (
    ORGANS,
    CorpusConfig,
    MalformedReport,
    default_taxonomy,
    draw_report,
    parse_report,
    render_report,
    synthesize_corpus,
)
from mpath.tokenizer import build_vocab, normalize
from mpath.training import OptState, TrainConfig, adamw_step, generate_for, sample_prompt, train_fold

from conftest import BLADDER, FIXTURE_PAIRS, GENERATED, GROUND_TRUTH, tiny_config
from gradcases import PRIMITIVE_CASES
from oracles import bleu4_oracle, rouge_l_oracle
from scripted import run_curve


def _f64(state):
    for p in state.params.values():
        p.data = p.data.astype(np.float64)
    return state


# ---------------------------------------------------------------------------


def test_A1_gradient_suite(small_vocab, small_corpus):
    t0 = time.perf_counter()
    errors = {}
    for name, build in sorted(PRIMITIVE_CASES.items()):
        for seed in (0, 1):
            f, params = build(np.random.default_rng(seed))
            errors[f"{name}/{seed}"] = ag.grad_check(f, params, eps=1e-5).max_error

    for seed in range(3):
        st = _f64(init_state(tiny_config(len(small_vocab)), small_vocab, seed))
        feats = np.random.default_rng(seed).normal(size=12)
        w = np.random.default_rng(seed + 100).normal(size=(2, 8))
        prompt = [st.p(n) for n in ("prompt.W1", "prompt.b1", "prompt.W2", "prompt.b2")]

        def prefix_loss():
            p_v, _ = encode_visual_prefix(feats, st)
            return ag.reduce_sum(ag.mul(p_v, ag.Tensor(w, dtype=np.float64)))

        errors[f"prompt_encoder/{seed}"] = ag.grad_check(prefix_loss, prompt).max_error

    for side, seed in itertools.product(("encoder", "decoder"), range(3)):
        cfg = tiny_config(len(small_vocab), prefix_side=side, prompt_dropout=0.0)
        st = _f64(init_state(cfg, small_vocab, seed))
        batch = small_corpus[3 * seed : 3 * seed + 3]
        prompts = ["Pathology report:", "", "Pathology report:"]
        report = ag.grad_check(
            lambda: forward_loss(batch, st, prompts=prompts)[0], list(st.params.values()), max_entries=8, seed=seed
        )
        errors[f"full_model_{side}/{seed}"] = report.max_error

    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    print(f"A1: {len(errors)} cases, max rel err {errors[worst]:.2e} ({worst}), {elapsed:.1f}s")
    assert len(errors) >= 50
    assert errors[worst] < 1e-4
    assert elapsed < 120


def test_A2_frozen_backbone_invariance():
    t0 = time.perf_counter()
    corpus = synthesize_corpus(CorpusConfig(n_samples=64, seed=7))
    vocab = build_vocab([s.report_text for s in corpus] + ["Pathology report:"])
    tax = default_taxonomy()
    cfg = ModelConfig(vocab_size=len(vocab), n_sample_types=len(tax.sample_types), n_findings=len(tax.findings))
    st = init_state(cfg, vocab, seed=7)

    def frozen_sha():
        h = hashlib.sha256()
        for name in st.frozen_names:
            h.update(st.p(name).data.tobytes())
        return h.hexdigest()

    before = frozen_sha()
    trainable_before = {n: st.p(n).data.copy() for n in st.trainable_names}
    rng = np.random.default_rng([7, 99])
    opt = OptState()
    for step in range(1, 201):
        batch = [corpus[i] for i in rng.choice(64, size=8, replace=False)]
        loss, _ = forward_loss(batch, st, rng)
        ag.backward(loss)
        adamw_step(st, opt, 1e-3)
    after = frozen_sha()
    moved = sum(not np.array_equal(trainable_before[n], st.p(n).data) for n in st.trainable_names)
    elapsed = time.perf_counter() - t0
    print(f"A2: frozen sha256 {before[:16]} -> {after[:16]}, {moved} trainable tensors moved, {elapsed:.1f}s")
    assert before == after
    assert moved == len(st.trainable_names)
    assert elapsed < 60


# ---------------------------------------------------------------------------
# A3: one full end-to-end run shared by the checks below


def _organ_of(text):
    try:
        return parse_report(text).organ
    except (MalformedReport, ValueError):
        return None


@pytest.fixture(scope="module")
def e2e():
    t0 = time.perf_counter()
    corpus = synthesize_corpus(CorpusConfig(n_samples=1000, noise_sigma=0.0, seed=7))
    perm = np.random.default_rng([7, 5]).permutation(len(corpus))
    test = [corpus[i] for i in sorted(perm[:100])]
    val = [corpus[i] for i in sorted(perm[100:200])]
    train = [corpus[i] for i in sorted(perm[200:])]
    texts = [s.report_text for s in train + val]
    prompt = ModelConfig.prompt_text
    vocab = build_vocab(texts + [prompt])
    tax = default_taxonomy()
    cfg = ModelConfig(vocab_size=len(vocab), n_sample_types=len(tax.sample_types), n_findings=len(tax.findings))
    losses = []
    backbone = init_backbone_pretrain(texts, cfg, vocab, 7, PretrainConfig(), losses)
    best, history = train_fold(train, val, backbone, TrainConfig(seed=7))
    gens = generate_for(test, best)
    ablation = generate_for(test, best, zero_prefix=True)
    return dict(
        test=test,
        backbone=backbone,
        best=best,
        history=history,
        gens=gens,
        ablation=ablation,
        losses=losses,
        score=Scorer().score_corpus([(s.id, g, s.report_text) for s, g in zip(test, gens)]).mean,
        elapsed=time.perf_counter() - t0,
    )


@pytest.mark.slow
def test_A3_end_to_end_learning(e2e):
    test, gens = e2e["test"], e2e["gens"]
    truth = [s.report.organ for s in test]
    organ_acc = np.mean([_organ_of(g) == o for g, o in zip(gens, truth)])
    ablation_acc = np.mean([_organ_of(g) == o for g, o in zip(e2e["ablation"], truth)])
    exact = np.mean([normalize(g) == normalize(s.report_text) for g, s in zip(gens, test)])
    initial, final = np.mean(e2e["losses"][:10]), np.mean(e2e["losses"][-10:])
    epochs = len(e2e["history"])

    pairs = [(i, j) for i, j in itertools.combinations(range(len(test)), 2) if truth[i] != truth[j]]
    picks = np.random.default_rng(0).choice(len(pairs), size=min(500, len(pairs)), replace=False)
    sensitive = np.mean([_organ_of(gens[pairs[k][0]]) != _organ_of(gens[pairs[k][1]]) for k in picks])

    print(
        f"A3: composite {e2e['score'].composite:.4f}, organ acc {organ_acc:.3f}, ablation organ acc "
        f"{ablation_acc:.3f}, exact match {exact:.3f}, sensitivity {sensitive:.3f}, epochs run {epochs}, "
        f"pretrain loss {initial:.3f} -> {final:.3f}, {e2e['elapsed']:.0f}s"
    )
    assert e2e["score"].composite >= 0.95
    assert organ_acc >= 0.95
    assert ablation_acc <= 0.30
    assert epochs < 100
    assert final < 0.5 * initial
    assert exact >= 0.9
    assert sensitive >= 0.95
    assert e2e["best"].frozen_digest() == e2e["backbone"].frozen_digest()


# ---------------------------------------------------------------------------


def test_A4_metric_oracles():
    t0 = time.perf_counter()
    words = "lung biopsy carcinoma grade ii ; , ( ) a b c".split()
    rng = np.random.default_rng(2024)
    pairs = [(gen, gt) for gt, gen in FIXTURE_PAIRS] + [(gt, gen) for gt, gen in FIXTURE_PAIRS]
    for _ in range(150):
        n, m = rng.integers(0, 9, size=2)
        pairs.append((" ".join(rng.choice(words, size=n)), " ".join(rng.choice(words, size=m))))
    worst = 0.0
    for c, r in pairs:
        worst = max(worst, abs(bleu4(c, r) - bleu4_oracle(c, r)), abs(rouge_l_f1(c, r) - rouge_l_oracle(c, r)))

    grid = [0.0, 0.5, 1.0]
    exact = all(
        composite_score(R, B, K, E) == 0.15 * (R + B) + 0.4 * K + 0.3 * E
        for R, B, K, E in itertools.product(grid, repeat=4)
    )
    elapsed = time.perf_counter() - t0
    print(f"A4: {len(pairs)} pairs, max oracle diff {worst:.1e}, composite grid exact={exact}, {elapsed:.2f}s")
    assert len(pairs) >= 100
    assert worst < 1e-9
    assert exact
    assert elapsed < 10


def test_A5_perfect_match():
    tax = default_taxonomy()
    rng = np.random.default_rng(5)
    scorer = Scorer()
    scores = [scorer.score(t, t).composite for t in (render_report(draw_report(rng, tax), tax) for _ in range(500))]
    print(f"A5: 500 self-scores, min composite {min(scores)!r}")
    assert all(s == 1.0 for s in scores)


def test_A6_prompt_dropout_frequency():
    cfg = ModelConfig(vocab_size=10, prompt_dropout=0.2)
    rng = np.random.default_rng(6)
    empty = sum(sample_prompt(rng, cfg) == "" for _ in range(100_000)) / 100_000
    print(f"A6: empty-prompt fraction {empty:.5f}")
    assert 0.196 <= empty <= 0.204


CURVES = [
    ([0.1, 0.2, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3], 2, 3),
    ([0.5, 0.4, 0.6, 0.55, 0.6, 0.58, 0.59, 0.2, 0.9], 3, 3),
    ([0.1, 0.1, 0.2, 0.15, 0.3, 0.29, 0.28, 0.27, 0.26, 0.25, 0.99], 4, 5),
]


def test_A7_early_stopping(small_vocab, small_corpus):
    lines = []
    for curve, patience, best_epoch in CURVES:
        st = init_state(tiny_config(len(small_vocab)), small_vocab, 0)
        best, hist, snaps = run_curve(curve, patience, small_corpus[:32], small_corpus[32:40], st)
        stop = len(hist)
        same = all(np.array_equal(best.p(n).data, snaps[best_epoch][n]) for n in best.params)
        lines.append(f"patience {patience}: best {best_epoch}, stopped {stop}, best state returned={same}")
        assert stop == best_epoch + patience
        assert same
    print("A7: " + "; ".join(lines))


def test_A8_determinism_and_persistence(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(["gen-data", "--n-samples", "200", "--seed", "7", "--out-dir", "data"]) == 0
    assert run(["pretrain", "--corpus", "data/corpus.jsonl", "--steps", "30", "--seed", "7", "--out-dir", "data"]) == 0
    outputs = []
    for rep in ("run1", "run2"):
        code = run(["cv", "--folds", "5", "--seed", "7", "--epochs", "2", "--corpus", "data/corpus.jsonl",
                    "--backbone", "data/backbone.ckpt", "--out-dir", rep])
        assert code == 0
        outputs.append({p.name: p.read_bytes() for p in sorted((tmp_path / rep).iterdir())})
    identical = outputs[0] == outputs[1]

    state, meta = load_checkpoint(tmp_path / "run1" / "fold0.ckpt", with_meta=True)
    save_checkpoint(state, tmp_path / "again.ckpt", meta)
    again = load_checkpoint(tmp_path / "again.ckpt")
    bit_exact = all(
        again.p(n).data.tobytes() == p.data.tobytes() and again.p(n).requires_grad == p.requires_grad
        for n, p in state.params.items()
    )
    resaved = (tmp_path / "again.ckpt").read_bytes() == outputs[0]["fold0.ckpt"]
    print(f"A8: {len(outputs[0])} files per run, byte-identical={identical}, round trip bit-exact={bit_exact}")
    assert sorted(outputs[0]) == sorted(
        [f"fold{i}.ckpt" for i in range(5)] + [f"fold{i}_history.jsonl" for i in range(5)] + ["cv_report.json"]
    )
    assert identical and bit_exact and resaved


def test_A9_fixture_parsing():
    parsed = [parse_report(t) for t in GROUND_TRUTH + GENERATED]
    gt, gen = FIXTURE_PAIRS[BLADDER]
    a, b = parse_report(gt), parse_report(gen)
    score = Scorer().score(gen, gt)
    print(f"A9: {len(parsed)} fixtures parsed, bladder KEY {score.key:.3f}, header {b.organ}/{b.sample_type}")
    assert len(parsed) == 10
    assert (a.organ, a.sample_type) == (b.organ, b.sample_type) == ("bladder", "transurethral resection")
    assert score.key < 1.0
    assert [p.organ for p in parsed[:5]] == ["breast", "breast", "bladder", "prostate", "lung"]
    assert set(ORGANS) >= {p.organ for p in parsed}
