"""AdamW over the trainable parameters, warmup schedule, early stopping, k-fold CV."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from mpath import autograd as ag
from mpath.metrics import Scorer, ScoreBreakdown
from mpath.model import ModelState, forward_loss, generate_batch
from mpath.reports import PairedSample

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    warmup_steps: int = 500
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 20
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 7
    n_folds: int = 5
    eval_batch_size: int = 128

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def lr_at_step(t: int, cfg) -> float:
    """Linear warmup to ``cfg.lr`` over ``cfg.warmup_steps``, constant afterwards."""
    if t < 1:
        raise ValueError("steps are counted from 1")
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, t / cfg.warmup_steps)


def adamw_step(
    state: ModelState,
    opt: OptState,
    lr_t: float,
    grads: dict[str, np.ndarray] | None = None,
    weight_decay: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One decoupled-weight-decay Adam update of the trainable parameters.

    ``grads`` defaults to the ``.grad`` slots, which are cleared afterwards.
    Frozen parameters are never read or written.
    """
    names = state.trainable_names
    if grads is None:
        grads = {n: state.params[n].grad for n in names}
    missing = [n for n in names if grads.get(n) is None]
    if missing:
        raise ValueError(f"no gradient for trainable parameter(s): {', '.join(missing)}")
    b1, b2 = betas
    opt.t += 1
    c1 = 1.0 - b1**opt.t
    c2 = 1.0 - b2**opt.t
    for n in names:
        p = state.params[n]
        g = np.asarray(grads[n], dtype=p.data.dtype)
        m = opt.m.get(n)
        if m is None:
            m = opt.m[n] = np.zeros_like(p.data)
            opt.v[n] = np.zeros_like(p.data)
        v = opt.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= p.data.dtype.type(1.0 - lr_t * weight_decay)
        p.data -= (lr_t * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype, copy=False)
        p.grad = None


# ---------------------------------------------------------------------------
# early stopping and splits


class EarlyStopping:
    """Track the best score; stop once ``patience`` epochs pass without a strict gain."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best_score = -np.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, score: float) -> bool:
        """Record one epoch's score; returns True if it is a new best."""
        self.epoch += 1
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = self.epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self.epoch - self.best_epoch >= self.patience


def kfold_split(n: int, n_folds: int, seed: int) -> list[tuple[list[int], list[int]]]:
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    if n < n_folds:
        raise ValueError(f"cannot split {n} samples into {n_folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    chunks = np.array_split(perm, n_folds)
    folds = []
    for i, val in enumerate(chunks):
        train = np.concatenate([c for j, c in enumerate(chunks) if j != i])
        folds.append((sorted(train.tolist()), sorted(val.tolist())))
    return folds


def sample_prompt(rng: np.random.Generator, cfg) -> str:
    """Empty prompt with probability ``cfg.prompt_dropout``, else ``cfg.prompt_text``."""
    from mpath.model import sample_prompt as _sample

    return _sample(rng, cfg)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_bleu: float
    val_rouge: float
    val_key: float
    val_emb: float
    val_composite: float
    lr: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def generate_for(samples: Sequence[PairedSample], state: ModelState, batch_size: int = 128, **kw) -> list[str]:
    out: list[str] = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        out.extend(generate_batch(np.stack([s.features for s in chunk]), state, **kw))
    return out


def validation_score(
    state: ModelState, val: Sequence[PairedSample], scorer: Scorer | None = None, batch_size: int = 128
) -> ScoreBreakdown:
    scorer = scorer or Scorer()
    gens = generate_for(val, state, batch_size)
    return scorer.score_corpus([(s.id, g, s.report_text) for s, g in zip(val, gens)]).mean


ScoreFn = Callable[[ModelState, Sequence[PairedSample]], ScoreBreakdown]


def train_fold(
    train: Sequence[PairedSample],
    val: Sequence[PairedSample],
    state: ModelState,
    cfg: TrainConfig,
    score_fn: ScoreFn | None = None,
    on_epoch: Callable[[EpochRecord, ModelState], None] | None = None,
) -> tuple[ModelState, list[EpochRecord]]:
    """Train the prompt encoder and auxiliary heads of ``state`` (a copy is used).

    After every epoch the validation composite is computed with ``score_fn``
    (greedy generation + :class:`Scorer` by default); the best-scoring state is
    returned along with the per-epoch history.
    """
    if not train or not val:
        raise ValueError("train and validation sets must both be non-empty")
    train_ids = {s.id for s in train}
    if any(s.id in train_ids for s in val):
        raise ValueError("train and validation sets overlap")
    if score_fn is None:
        scorer = Scorer()
        score_fn = lambda st, v: validation_score(st, v, scorer, cfg.eval_batch_size)  # noqa: E731

    state = state.copy()
    rng = np.random.default_rng([cfg.seed, 11])
    opt = OptState()
    stopper = EarlyStopping(cfg.patience)
    best = state.copy()
    history: list[EpochRecord] = []
    step = 0
    lr = 0.0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[start : start + cfg.batch_size]]
            loss, _ = forward_loss(batch, state, rng)
            ag.backward(loss)
            step += 1
            lr = lr_at_step(step, cfg)
            adamw_step(state, opt, lr, weight_decay=cfg.weight_decay, betas=cfg.betas, eps=cfg.eps)
            losses.append(loss.item())
        score = score_fn(state, val)
        rec = EpochRecord(
            epoch,
            float(np.mean(losses)),
            score.bleu4,
            score.rouge_l_f1,
            score.key,
            score.emb,
            score.composite,
            lr,
        )
        history.append(rec)
        if stopper.update(score.composite):
            best = state.copy()
        log.info(
            "epoch %d loss %.4f val_composite %.4f best %.4f@%d",
            epoch, rec.train_loss, rec.val_composite, stopper.best_score, stopper.best_epoch,
        )
        if on_epoch is not None:
            on_epoch(rec, state)
        if stopper.should_stop:
            break
    return best, history


@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    best_composite: float
    epochs_run: int


def cross_validate(
    samples: Sequence[PairedSample],
    state: ModelState,
    cfg: TrainConfig,
    on_fold: Callable[[int, ModelState, list[EpochRecord]], None] | None = None,
) -> tuple[list[FoldResult], dict]:
    """Five-fold (``cfg.n_folds``) CV of prefix training from one pretrained backbone."""
    results = []
    for i, (tr, va) in enumerate(kfold_split(len(samples), cfg.n_folds, cfg.seed)):
        best, hist = train_fold([samples[j] for j in tr], [samples[j] for j in va], state, cfg)
        top = max(hist, key=lambda r: (r.val_composite, -r.epoch))
        results.append(FoldResult(i, top.epoch, top.val_composite, len(hist)))
        if on_fold is not None:
            on_fold(i, best, hist)
    scores = np.array([r.best_composite for r in results])
    summary = {
        "n_folds": cfg.n_folds,
        "mean_composite": float(scores.mean()),
        "sd_composite": float(scores.std(ddof=1)) if len(scores) > 1 else 0.0,
        "folds": [asdict(r) for r in results],
    }
    return results, summary
