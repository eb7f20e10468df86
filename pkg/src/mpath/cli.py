"""Command-line entry point: ``mpath <subcommand> [flags]``.

Subcommands write only inside ``--out-dir``; logs go to stderr as JSON lines.
Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from mpath import reports
from mpath.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from mpath.metrics import EMB_BACKENDS, KeywordLexicon, Scorer, TokenEmbeddingBackend, read_pairs
from mpath.model import ModelConfig, PretrainConfig, init_backbone_pretrain
from mpath.reports import CorpusConfig, MalformedReport, default_taxonomy, read_corpus, synthesize_corpus
from mpath.tokenizer import build_vocab
from mpath.training import TrainConfig, cross_validate, generate_for, train_fold

log = logging.getLogger("mpath")

SUBCOMMANDS = ("gen-data", "pretrain", "train", "cv", "generate", "evaluate", "score")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Every tunable, addressed by flat dotted keys such as ``train.lr``."""

    seed: int = 7
    out_dir: str = "out"
    corpus: dict = field(default_factory=lambda: {"n_samples": 1000, "d_v": 768, "noise_sigma": 0.1})
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    emb_backend: str = "trigram"
    val_fraction: float = 0.1

    SECTIONS = {
        "corpus": {f.name for f in fields(CorpusConfig)} - {"seed"},
        "model": {f.name for f in fields(ModelConfig)} - {"vocab_size", "n_organs", "n_sample_types", "n_findings"},
        "train": {f.name for f in fields(TrainConfig)} - {"seed"},
        "pretrain": {f.name for f in fields(PretrainConfig)},
        "paths": {"corpus", "backbone", "checkpoint", "lexicon", "input", "taxonomy"},
    }

    def set(self, key: str, value) -> None:
        if "." not in key:
            if key not in ("seed", "out_dir", "emb_backend", "val_fraction"):
                raise UsageError(f"unknown config key {key!r}")
            setattr(self, key, value)
            return
        section, name = key.split(".", 1)
        if section not in self.SECTIONS or name not in self.SECTIONS[section]:
            raise UsageError(f"unknown config key {key!r}")
        getattr(self, section)[name] = value

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed config {path}: {exc}") from None
        if not isinstance(obj, dict):
            raise UsageError(f"malformed config {path}: top level must be an object of dotted keys")
        cfg = cls()
        for k, v in obj.items():
            cfg.set(k, v)
        return cfg

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(seed=self.seed, taxonomy_path=self.paths.get("taxonomy"), **self.corpus)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.train)

    def input_path(self, key: str, what: str) -> Path:
        p = self.paths.get(key)
        if not p:
            raise UsageError(f"--{key} is required for {what}")
        if not Path(p).exists():
            raise DataError(f"{key} file {p} does not exist")
        return Path(p)

    def out(self, name: str) -> Path:
        d = Path(self.out_dir)
        d.mkdir(parents=True, exist_ok=True)
        return d / name


_FLAG_KEYS = {
    "seed": "seed",
    "out_dir": "out_dir",
    "folds": "train.n_folds",
    "epochs": "train.max_epochs",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "warmup_steps": "train.warmup_steps",
    "patience": "train.patience",
    "prefix_len": "model.L_p",
    "prompt_dropout": "model.prompt_dropout",
    "prefix_side": "model.prefix_side",
    "beam_width": "model.beam_width",
    "emb_backend": "emb_backend",
    "lexicon": "paths.lexicon",
    "taxonomy": "paths.taxonomy",
    "n_samples": "corpus.n_samples",
    "noise_sigma": "corpus.noise_sigma",
    "d_v": "corpus.d_v",
    "steps": "pretrain.steps",
    "corpus": "paths.corpus",
    "backbone": "paths.backbone",
    "checkpoint": "paths.checkpoint",
    "input": "paths.input",
}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", metavar="PATH", help="JSON file of flat dotted keys; flags win")
    g.add_argument("--seed", type=int, metavar="U64")
    g.add_argument("--out-dir", metavar="PATH")
    g.add_argument("--folds", type=int, metavar="N")
    g.add_argument("--epochs", type=int, metavar="N")
    g.add_argument("--batch-size", type=int, metavar="N")
    g.add_argument("--lr", type=float, metavar="F")
    g.add_argument("--warmup-steps", type=int, metavar="N")
    g.add_argument("--patience", type=int, metavar="N")
    g.add_argument("--prefix-len", type=int, metavar="N")
    g.add_argument("--prompt-dropout", type=float, metavar="F")
    g.add_argument("--prefix-side", choices=("encoder", "decoder"))
    g.add_argument("--beam-width", type=int, metavar="N")
    g.add_argument("--emb-backend", choices=EMB_BACKENDS)
    g.add_argument("--lexicon", metavar="PATH")
    g.add_argument("--taxonomy", metavar="PATH")

    parser = _Parser(prog="mpath", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic paired corpus (corpus.jsonl)")
    p.add_argument("--n-samples", type=int, metavar="N")
    p.add_argument("--noise-sigma", type=float, metavar="F")
    p.add_argument("--d-v", type=int, metavar="N")

    p = sub.add_parser("pretrain", parents=[common], help="pretrain and freeze the backbone (backbone.ckpt)")
    p.add_argument("--corpus", metavar="PATH")
    p.add_argument("--steps", type=int, metavar="N")

    p = sub.add_parser("train", parents=[common], help="train the prompt encoder (model.ckpt, history.jsonl)")
    p.add_argument("--corpus", metavar="PATH")
    p.add_argument("--backbone", metavar="PATH")

    p = sub.add_parser("cv", parents=[common], help="k-fold cross-validation (fold*.ckpt, cv_report.json)")
    p.add_argument("--corpus", metavar="PATH")
    p.add_argument("--backbone", metavar="PATH")

    p = sub.add_parser("generate", parents=[common], help="generate reports for a corpus (generated.jsonl)")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--input", metavar="PATH", help="corpus JSONL with feature vectors")
    p.add_argument("--zero-prefix", action="store_true", help="ablation: replace the visual prefix with zeros")

    p = sub.add_parser("evaluate", parents=[common], help="score generated-vs-reference JSONL (eval_report.json)")
    p.add_argument("--input", metavar="PATH", help='JSONL of {"id", "generated", "reference"}')
    p.add_argument("--checkpoint", metavar="PATH", help="needed by --emb-backend model")

    p = sub.add_parser("score", parents=[common], help="score one pair and print the breakdown")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--checkpoint", metavar="PATH", help="needed by --emb-backend model")
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(key, value)
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def _load_corpus(cfg: RunConfig):
    path = cfg.input_path("corpus", "this subcommand")
    try:
        return read_corpus(path, cfg.corpus_config().taxonomy())
    except (ValueError, KeyError) as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from None


def _load_ckpt(path: Path):
    try:
        return load_checkpoint(path, with_meta=True)
    except CheckpointError as exc:
        raise DataError(str(exc)) from None


def _scorer(cfg: RunConfig) -> Scorer:
    lex_path = cfg.paths.get("lexicon")
    if lex_path and not Path(lex_path).exists():
        raise DataError(f"lexicon file {lex_path} does not exist")
    lexicon = KeywordLexicon.load(lex_path) if lex_path else None
    backend = cfg.emb_backend
    if backend == "model":
        state, _ = _load_ckpt(cfg.input_path("checkpoint", "--emb-backend model"))
        backend = TokenEmbeddingBackend(state.params["tok_emb"].data, state.vocab)
    return Scorer(lexicon, backend)


def cmd_gen_data(cfg: RunConfig) -> int:
    ccfg = cfg.corpus_config()
    samples = synthesize_corpus(ccfg)
    path = cfg.out("corpus.jsonl")
    reports.write_corpus(samples, path)
    log.info("wrote %d samples to %s", len(samples), path)
    return 0


def _model_config(cfg: RunConfig, vocab_size: int, d_v: int) -> ModelConfig:
    tax = cfg.corpus_config().taxonomy() if cfg.paths.get("taxonomy") else default_taxonomy()
    model = dict(cfg.model)
    model.setdefault("d_v", d_v)
    return ModelConfig(
        vocab_size=vocab_size, n_sample_types=len(tax.sample_types), n_findings=len(tax.findings), **model
    )


def cmd_pretrain(cfg: RunConfig) -> int:
    samples = _load_corpus(cfg)
    texts = [s.report_text for s in samples]
    vocab = build_vocab(texts + [cfg.model.get("prompt_text", ModelConfig.prompt_text)])
    if not samples:
        raise DataError("corpus is empty")
    mcfg = _model_config(cfg, len(vocab), len(samples[0].features))
    if len(samples[0].features) != mcfg.d_v:
        raise DataError(f"corpus features have length {len(samples[0].features)}, model expects d_v={mcfg.d_v}")
    losses: list[float] = []
    state = init_backbone_pretrain(texts, mcfg, vocab, cfg.seed, PretrainConfig(**cfg.pretrain), losses)
    path = cfg.out("backbone.ckpt")
    save_checkpoint(state, path, {"stage": "pretrain", "initial_loss": losses[0], "final_loss": losses[-1]})
    log.info("pretrain loss %.4f -> %.4f; wrote %s", losses[0], losses[-1], path)
    return 0


# settings that may differ from the ones the backbone was pretrained with
_RUNTIME_MODEL_KEYS = ("prompt_dropout", "prompt_text", "beam_width", "lambda_organ", "lambda_sample", "lambda_finding")


def _backbone(cfg: RunConfig):
    state, _ = _load_ckpt(cfg.input_path("backbone", "this subcommand"))
    merged = state.config.to_dict()
    for key, value in cfg.model.items():
        if key in _RUNTIME_MODEL_KEYS:
            merged[key] = value
        elif merged[key] != value:
            raise UsageError(f"model.{key}={value!r} conflicts with the backbone ({merged[key]!r})")
    state.config = ModelConfig.from_dict(merged)
    state.set_phase("prefix")
    return state


def _write_history(path: Path, history) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in history:
            fh.write(rec.to_json() + "\n")


def cmd_train(cfg: RunConfig) -> int:
    samples = _load_corpus(cfg)
    state = _backbone(cfg)
    tcfg = cfg.train_config()
    perm = np.random.default_rng([cfg.seed, 5]).permutation(len(samples))
    n_val = max(1, int(round(cfg.val_fraction * len(samples))))
    val = [samples[i] for i in sorted(perm[:n_val])]
    train = [samples[i] for i in sorted(perm[n_val:])]
    best, history = train_fold(train, val, state, tcfg)
    save_checkpoint(best, cfg.out("model.ckpt"), {"stage": "train", "train": tcfg.to_dict()})
    _write_history(cfg.out("history.jsonl"), history)
    top = max(history, key=lambda r: (r.val_composite, -r.epoch))
    log.info("best epoch %d composite %.4f", top.epoch, top.val_composite)
    return 0


def cmd_cv(cfg: RunConfig) -> int:
    samples = _load_corpus(cfg)
    state = _backbone(cfg)
    tcfg = cfg.train_config()

    def on_fold(i, best, hist):
        save_checkpoint(best, cfg.out(f"fold{i}.ckpt"), {"stage": "cv", "fold": i})
        _write_history(cfg.out(f"fold{i}_history.jsonl"), hist)
        log.info("fold %d done after %d epochs", i, len(hist))

    _, summary = cross_validate(samples, state, tcfg, on_fold)
    cfg.out("cv_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"composite {summary['mean_composite']:.4f} ± {summary['sd_composite']:.4f} over {tcfg.n_folds} folds")
    return 0


def cmd_generate(cfg: RunConfig, zero_prefix: bool = False) -> int:
    state, _ = _load_ckpt(cfg.input_path("checkpoint", "generate"))
    if "beam_width" in cfg.model:
        state.config = ModelConfig.from_dict({**state.config.to_dict(), "beam_width": cfg.model["beam_width"]})
    path = cfg.input_path("input", "generate")
    try:
        samples = read_corpus(path, cfg.corpus_config().taxonomy())
    except (ValueError, KeyError) as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from None
    gens = generate_for(samples, state, zero_prefix=zero_prefix)
    out = cfg.out("generated.jsonl")
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for s, g in zip(samples, gens):
            fh.write(json.dumps({"id": s.id, "generated": g, "reference": s.report_text}, ensure_ascii=False) + "\n")
    log.info("wrote %d generations to %s", len(gens), out)
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    path = cfg.input_path("input", "evaluate")
    try:
        pairs = read_pairs(path)
    except (ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read pairs {path}: {exc}") from None
    result = _scorer(cfg).score_corpus(pairs)
    cfg.out("eval_report.json").write_text(result.to_json() + "\n", encoding="utf-8")
    print(json.dumps(result.mean.as_dict(), sort_keys=True))
    return 0


def cmd_score(cfg: RunConfig, generated: str, reference: str) -> int:
    b = _scorer(cfg).score(generated, reference)
    print(json.dumps(b.as_dict(), sort_keys=True))
    return 0


# ---------------------------------------------------------------------------


class _JsonLines(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()})


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, _value):
        pass


def _setup_logging() -> None:
    root = logging.getLogger("mpath")
    if not any(isinstance(h, _StderrHandler) for h in root.handlers):
        h = _StderrHandler()
        h.setFormatter(_JsonLines())
        root.addHandler(h)
    root.setLevel(logging.INFO)
    root.propagate = False


def run(argv: list[str] | None = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing subcommand; choose one of {', '.join(SUBCOMMANDS)}")
        cfg = resolve(args)
        try:
            if args.command == "gen-data":
                return cmd_gen_data(cfg)
            if args.command == "pretrain":
                return cmd_pretrain(cfg)
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "cv":
                return cmd_cv(cfg)
            if args.command == "generate":
                return cmd_generate(cfg, args.zero_prefix)
            if args.command == "evaluate":
                return cmd_evaluate(cfg)
            return cmd_score(cfg, args.generated, args.reference)
        except TypeError as exc:
            # unknown keys reaching a config dataclass
            raise UsageError(f"bad configuration: {exc}") from None
        except (MalformedReport,) as exc:
            raise DataError(str(exc)) from None
    except UsageError as exc:
        print(f"mpath: usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"mpath: data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"mpath: invalid value: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
