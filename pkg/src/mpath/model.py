"""Frozen encoder-decoder backbone conditioned on a slide feature vector.

The prompt encoder maps a feature vector ``f`` to ``L_p`` pseudo-token
embeddings::

    h   = relu(W1 @ f + b1)                 # (h,)
    p_v = reshape(W2 @ h + b2, (L_p, d))    # (L_p, d)

which are prepended to the prompt's token embeddings on the encoder side (or
the decoder side, see ``ModelConfig.prefix_side``).  Auxiliary organ,
sample-type and finding heads read ``h``.  Only the prompt encoder and the
auxiliary heads are trainable once the backbone has been pretrained.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from typing import Sequence

import numpy as np

from mpath import autograd as ag
from mpath.autograd import Tensor
from mpath.reports import ORGANS, PairedSample
from mpath.tokenizer import BOS, EOS, PAD, Vocab, decode, encode

TRAINABLE_PREFIXES = ("prompt.", "aux.")


@dataclass
class ModelConfig:
    vocab_size: int
    d_v: int = 768
    h: int = 512
    L_p: int = 8
    d: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    max_len: int = 96
    prompt_text: str = "Pathology report:"
    prompt_dropout: float = 0.2
    prefix_side: str = "encoder"
    n_organs: int = len(ORGANS)
    n_sample_types: int = 11
    n_findings: int = 27
    lambda_organ: float = 0.1
    lambda_sample: float = 0.1
    lambda_finding: float = 0.1
    beam_width: int = 1

    def __post_init__(self):
        if self.L_p < 1:
            raise ValueError("L_p must be >= 1")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.prompt_dropout <= 1.0:
            raise ValueError("prompt_dropout must lie in [0, 1]")
        if self.prefix_side not in ("encoder", "decoder"):
            raise ValueError("prefix_side must be 'encoder' or 'decoder'")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


def is_trainable_name(name: str) -> bool:
    return name.startswith(TRAINABLE_PREFIXES)


@dataclass
class ModelState:
    config: ModelConfig
    vocab: Vocab
    params: dict[str, Tensor]
    truncated: int = field(default=0, compare=False)

    def frozen(self, name: str) -> bool:
        return not self.params[name].requires_grad

    @property
    def trainable_names(self) -> list[str]:
        return [n for n, p in self.params.items() if p.requires_grad]

    @property
    def frozen_names(self) -> list[str]:
        return [n for n, p in self.params.items() if not p.requires_grad]

    def set_phase(self, phase: str) -> None:
        """``pretrain``: only the backbone learns.  ``prefix``: backbone frozen."""
        for name, p in self.params.items():
            prompt_part = is_trainable_name(name)
            p.requires_grad = prompt_part if phase == "prefix" else not prompt_part
            p.grad = None

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.frozen_names):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelState":
        params = {}
        for n, p in self.params.items():
            params[n] = Tensor(p.data.copy(), requires_grad=p.requires_grad, dtype=p.data.dtype, name=n)
        return ModelState(self.config, self.vocab, params, self.truncated)

    def p(self, name: str) -> Tensor:
        return self.params[name]


# ---------------------------------------------------------------------------
# initialisation


def _linear_init(rng, params, name, n_out, n_in, std=None):
    std = math.sqrt(1.0 / n_in) if std is None else std
    params[f"{name}.W"] = rng.normal(0.0, std, (n_out, n_in))
    params[f"{name}.b"] = np.zeros(n_out)


def _ln_init(params, name, d):
    params[f"{name}.g"] = np.ones(d)
    params[f"{name}.b"] = np.zeros(d)


def _attn_init(rng, params, name, d, n_layers):
    for part in ("q", "k", "v"):
        _linear_init(rng, params, f"{name}.{part}", d, d)
    _linear_init(rng, params, f"{name}.o", d, d, std=math.sqrt(1.0 / d) / math.sqrt(2 * n_layers))


def init_prompt_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    params["prompt.W1"] = rng.normal(0.0, math.sqrt(2.0 / cfg.d_v), (cfg.h, cfg.d_v))
    params["prompt.b1"] = np.zeros(cfg.h)
    params["prompt.W2"] = rng.normal(0.0, math.sqrt(1.0 / cfg.h), (cfg.L_p * cfg.d, cfg.h))
    params["prompt.b2"] = np.zeros(cfg.L_p * cfg.d)
    _linear_init(rng, params, "aux.organ", cfg.n_organs, cfg.h)
    _linear_init(rng, params, "aux.sample", cfg.n_sample_types, cfg.h)
    _linear_init(rng, params, "aux.finding", cfg.n_findings, cfg.h)
    return params


def init_state(cfg: ModelConfig, vocab: Vocab, seed: int) -> ModelState:
    if len(vocab) != cfg.vocab_size:
        raise ValueError(f"vocab has {len(vocab)} tokens but config says {cfg.vocab_size}")
    rng = np.random.default_rng([seed, 1])
    d, f = cfg.d, cfg.ffn_dim
    n_layers = cfg.n_enc_layers + cfg.n_dec_layers
    params: dict[str, np.ndarray] = {"tok_emb": rng.normal(0.0, d**-0.5, (cfg.vocab_size, d))}
    for i in range(cfg.n_enc_layers):
        pre = f"enc.{i}"
        _ln_init(params, f"{pre}.ln1", d)
        _attn_init(rng, params, f"{pre}.attn", d, n_layers)
        _ln_init(params, f"{pre}.ln2", d)
        _linear_init(rng, params, f"{pre}.ffn1", f, d)
        _linear_init(rng, params, f"{pre}.ffn2", d, f, std=math.sqrt(1.0 / f) / math.sqrt(2 * n_layers))
    _ln_init(params, "enc.ln", d)
    for i in range(cfg.n_dec_layers):
        pre = f"dec.{i}"
        _ln_init(params, f"{pre}.ln1", d)
        _attn_init(rng, params, f"{pre}.self", d, n_layers)
        _ln_init(params, f"{pre}.ln2", d)
        _attn_init(rng, params, f"{pre}.cross", d, n_layers)
        _ln_init(params, f"{pre}.ln3", d)
        _linear_init(rng, params, f"{pre}.ffn1", f, d)
        _linear_init(rng, params, f"{pre}.ffn2", d, f, std=math.sqrt(1.0 / f) / math.sqrt(2 * n_layers))
    _ln_init(params, "dec.ln", d)
    _linear_init(rng, params, "lm_head", cfg.vocab_size, d, std=0.02)
    params.update(init_prompt_params(cfg, np.random.default_rng([seed, 2])))
    tensors = {
        n: Tensor(v.astype(np.float32), requires_grad=is_trainable_name(n), name=n) for n, v in params.items()
    }
    return ModelState(cfg, vocab, tensors)


# ---------------------------------------------------------------------------
# building blocks


@lru_cache(maxsize=32)
def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    inv = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(pos * inv)
    pe[:, 1::2] = np.cos(pos * inv)
    return pe.astype(np.float32)


def _const(x: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(x, dtype=like.data.dtype)


def _lin(x: Tensor, st: ModelState, name: str) -> Tensor:
    return ag.linear(x, st.p(f"{name}.W"), st.p(f"{name}.b"))


def _ln(x: Tensor, st: ModelState, name: str) -> Tensor:
    return ag.layernorm(x, st.p(f"{name}.g"), st.p(f"{name}.b"))


def _heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return ag.transpose(ag.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _attention(q_in: Tensor, kv_in: Tensor, st: ModelState, name: str, mask: np.ndarray) -> Tensor:
    """Multi-head attention; ``mask`` is additive and broadcasts to (B, H, Tq, Tk)."""
    n_heads = st.config.n_heads
    b, tq, d = q_in.shape
    q = _heads(_lin(q_in, st, f"{name}.q"), n_heads)
    k = _heads(_lin(kv_in, st, f"{name}.k"), n_heads)
    v = _heads(_lin(kv_in, st, f"{name}.v"), n_heads)
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // n_heads))
    attn = ag.softmax(ag.add(scores, _const(mask, scores)))
    out = ag.reshape(ag.transpose(ag.matmul(attn, v), (0, 2, 1, 3)), (b, tq, d))
    return _lin(out, st, f"{name}.o")


def _ffn(x: Tensor, st: ModelState, name: str) -> Tensor:
    return _lin(ag.relu(_lin(x, st, f"{name}.ffn1")), st, f"{name}.ffn2")


_NEG = -1e9


def _key_mask(valid: np.ndarray) -> np.ndarray:
    return np.where(valid, 0.0, _NEG)[:, None, None, :]


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), _NEG), k=1)[None, None]


def _token_embed(ids: np.ndarray, st: ModelState) -> Tensor:
    return ag.scale(ag.embedding(st.p("tok_emb"), ids), math.sqrt(st.config.d))


def _add_positions(x: Tensor) -> Tensor:
    _, t, d = x.shape
    return ag.add(x, _const(sinusoidal_positions(t, d), x))


def run_encoder(x: Tensor, valid: np.ndarray, st: ModelState) -> Tensor:
    x = _add_positions(x)
    mask = _key_mask(valid)
    for i in range(st.config.n_enc_layers):
        pre = f"enc.{i}"
        hx = _ln(x, st, f"{pre}.ln1")
        x = ag.add(x, _attention(hx, hx, st, f"{pre}.attn", mask))
        x = ag.add(x, _ffn(_ln(x, st, f"{pre}.ln2"), st, pre))
    return _ln(x, st, "enc.ln")


def run_decoder(y: Tensor, memory: Tensor, mem_valid: np.ndarray, st: ModelState) -> Tensor:
    """Decoder over already-embedded inputs ``y``; returns logits (B, T, V)."""
    y = _add_positions(y)
    self_mask = _causal_mask(y.shape[1])
    cross_mask = _key_mask(mem_valid)
    for i in range(st.config.n_dec_layers):
        pre = f"dec.{i}"
        hy = _ln(y, st, f"{pre}.ln1")
        y = ag.add(y, _attention(hy, hy, st, f"{pre}.self", self_mask))
        y = ag.add(y, _attention(_ln(y, st, f"{pre}.ln2"), memory, st, f"{pre}.cross", cross_mask))
        y = ag.add(y, _ffn(_ln(y, st, f"{pre}.ln3"), st, pre))
    return _lin(_ln(y, st, "dec.ln"), st, "lm_head")


# ---------------------------------------------------------------------------
# prompt encoder


def _prefix_batch(features: np.ndarray, st: ModelState) -> tuple[Tensor, Tensor]:
    cfg = st.config
    f = np.asarray(features)
    if f.ndim != 2 or f.shape[1] != cfg.d_v:
        raise ValueError(f"feature vectors must have length d_v={cfg.d_v}, got shape {f.shape}")
    f = _const(f, st.p("prompt.W1"))
    h = ag.relu(ag.linear(f, st.p("prompt.W1"), st.p("prompt.b1")))
    p = ag.linear(h, st.p("prompt.W2"), st.p("prompt.b2"))
    return ag.reshape(p, (f.shape[0], cfg.L_p, cfg.d)), h


def encode_visual_prefix(f_wsi, st: ModelState) -> tuple[Tensor, Tensor]:
    """Return ``(p_v, h)`` with shapes (L_p, d) and (h,)."""
    f = np.asarray(f_wsi)
    if f.ndim != 1 or f.shape[0] != st.config.d_v:
        raise ValueError(f"f_WSI must have length d_v={st.config.d_v}, got shape {f.shape}")
    p, h = _prefix_batch(f[None, :], st)
    cfg = st.config
    return ag.reshape(p, (cfg.L_p, cfg.d)), ag.reshape(h, (cfg.h,))


def build_encoder_input(p_v: Tensor, prompt_ids: Sequence[int], st: ModelState) -> tuple[Tensor, np.ndarray]:
    """Prefix rows followed by prompt token embeddings; mask marks non-PAD rows."""
    ids = np.asarray(prompt_ids, dtype=np.int64)
    if ids.size == 0:
        return p_v, np.ones(p_v.shape[0], dtype=bool)
    tok = ag.reshape(_token_embed(ids[None, :], st), (ids.size, st.config.d))
    seq = ag.concat([p_v, tok], axis=0)
    mask = np.concatenate([np.ones(p_v.shape[0], dtype=bool), ids != PAD])
    return seq, mask


def _pad(rows: Sequence[Sequence[int]], width: int | None = None) -> np.ndarray:
    width = max((len(r) for r in rows), default=0) if width is None else width
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def _memory(
    prefix: Tensor, prompt_ids: Sequence[Sequence[int]], st: ModelState
) -> tuple[Tensor, np.ndarray, Tensor | None]:
    """Encoder memory and, for decoder-side prefixes, the decoder prefix rows."""
    b = prefix.shape[0]
    ids = _pad(prompt_ids)
    if st.config.prefix_side == "encoder":
        if ids.shape[1]:
            x = ag.concat([prefix, _token_embed(ids, st)], axis=1)
        else:
            x = prefix
        valid = np.concatenate([np.ones((b, st.config.L_p), dtype=bool), ids != PAD], axis=1)
        return run_encoder(x, valid, st), valid, None
    # decoder side: the encoder only sees the prompt (EOS stands in for an empty one)
    rows = [list(r) if len(r) else [EOS] for r in prompt_ids]
    ids = _pad(rows)
    valid = ids != PAD
    return run_encoder(_token_embed(ids, st), valid, st), valid, prefix


def _decode_logits(memory, mem_valid, dec_prefix, dec_ids: np.ndarray, st: ModelState) -> Tensor:
    y = _token_embed(dec_ids, st)
    if dec_prefix is not None:
        y = ag.concat([dec_prefix, y], axis=1)
    return run_decoder(y, memory, mem_valid, st)


# ---------------------------------------------------------------------------
# losses


def sample_prompt(rng: np.random.Generator, cfg: ModelConfig) -> str:
    return "" if rng.random() < cfg.prompt_dropout else cfg.prompt_text


def target_ids(text: str, st: ModelState) -> list[int]:
    ids = encode(text, st.vocab, add_specials=True)
    limit = st.config.max_len + 1
    if len(ids) > limit:
        st.truncated += 1
        ids = ids[:limit]
    return ids


@dataclass
class LossParts:
    gen: float
    organ: float
    sample: float
    finding: float


def forward_loss(
    batch: Sequence[PairedSample],
    st: ModelState,
    rng: np.random.Generator | None = None,
    prompts: Sequence[str] | None = None,
) -> tuple[Tensor, LossParts]:
    """Teacher-forced generation loss plus weighted auxiliary label losses."""
    if not batch:
        raise ValueError("empty batch")
    cfg = st.config
    if prompts is None:
        if cfg.prompt_dropout > 0 and rng is None:
            raise ValueError("an rng is needed when prompt_dropout > 0")
        prompts = [sample_prompt(rng, cfg) if cfg.prompt_dropout > 0 else cfg.prompt_text for _ in batch]
    prompt_ids = [encode(p, st.vocab, add_specials=False) for p in prompts]
    feats = np.stack([s.features for s in batch])
    prefix, h = _prefix_batch(feats, st)
    memory, mem_valid, dec_prefix = _memory(prefix, prompt_ids, st)

    seqs = [target_ids(s.report_text, st) for s in batch]
    dec_in = _pad([s[:-1] for s in seqs])
    dec_out = _pad([s[1:] for s in seqs])
    if dec_prefix is not None:
        dec_out = np.concatenate([np.full((len(batch), cfg.L_p), PAD, dtype=np.int64), dec_out], axis=1)
    logits = _decode_logits(memory, mem_valid, dec_prefix, dec_in, st)
    b, t, v = logits.shape
    gen = ag.cross_entropy(ag.reshape(logits, (b * t, v)), dec_out.reshape(-1), ignore_index=PAD)

    organ_t = np.array([s.labels.organ for s in batch])
    sample_t = np.array([s.labels.sample_type for s in batch])
    finding_t = np.zeros((len(batch), cfg.n_findings))
    for i, s in enumerate(batch):
        finding_t[i, list(s.labels.findings)] = 1.0
    organ = ag.cross_entropy(_lin(h, st, "aux.organ"), organ_t)
    sample = ag.cross_entropy(_lin(h, st, "aux.sample"), sample_t)
    finding = ag.bce_logits(_lin(h, st, "aux.finding"), finding_t)

    total = gen
    for lam, part in ((cfg.lambda_organ, organ), (cfg.lambda_sample, sample), (cfg.lambda_finding, finding)):
        if lam:
            total = ag.add(total, ag.scale(part, lam))
    parts = LossParts(gen.item(), organ.item(), sample.item(), finding.item())
    return total, parts


# ---------------------------------------------------------------------------
# generation


def generate_batch(
    features: np.ndarray,
    st: ModelState,
    prompt_text: str | None = None,
    max_len: int | None = None,
    zero_prefix: bool = False,
    beam_width: int | None = None,
) -> list[str]:
    cfg = st.config
    prompt_text = cfg.prompt_text if prompt_text is None else prompt_text
    max_len = cfg.max_len if max_len is None else max_len
    beam_width = cfg.beam_width if beam_width is None else beam_width
    feats = np.asarray(features, dtype=np.float32)
    if feats.ndim == 1:
        feats = feats[None, :]
    if len(feats) == 0:
        return []
    with ag.no_grad():
        prefix, _ = _prefix_batch(feats, st)
        if zero_prefix:
            prefix = _const(np.zeros(prefix.shape), prefix)
        prompt_ids = [encode(prompt_text, st.vocab, add_specials=False)] * len(feats)
        memory, mem_valid, dec_prefix = _memory(prefix, prompt_ids, st)
        if beam_width > 1:
            out = [
                _beam_search(memory, mem_valid, dec_prefix, i, st, max_len, beam_width) for i in range(len(feats))
            ]
        else:
            out = _greedy(memory, mem_valid, dec_prefix, st, max_len)
    return [decode(ids, st.vocab) for ids in out]


def _greedy(memory, mem_valid, dec_prefix, st, max_len) -> list[list[int]]:
    b = memory.shape[0]
    seqs = np.full((b, 1), BOS, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    for _ in range(max_len):
        logits = _decode_logits(memory, mem_valid, dec_prefix, seqs, st).data[:, -1]
        nxt = np.where(done, PAD, logits.argmax(axis=-1))
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    return [_strip(row[1:]) for row in seqs]


def _strip(row) -> list[int]:
    out = []
    for tok in row:
        if tok in (EOS, PAD):
            break
        out.append(int(tok))
    return out


def _beam_search(memory, mem_valid, dec_prefix, i, st, max_len, width) -> list[int]:
    mem = Tensor(memory.data[i : i + 1], dtype=memory.data.dtype)
    valid = mem_valid[i : i + 1]
    pre = None if dec_prefix is None else Tensor(dec_prefix.data[i : i + 1], dtype=dec_prefix.data.dtype)
    beams: list[tuple[float, list[int]]] = [(0.0, [BOS])]
    finished: list[tuple[float, list[int]]] = []
    for _ in range(max_len):
        k = len(beams)
        seqs = np.array([s for _, s in beams], dtype=np.int64)
        rep = lambda t: None if t is None else Tensor(np.repeat(t.data, k, axis=0), dtype=t.data.dtype)  # noqa: E731
        logits = _decode_logits(rep(mem), np.repeat(valid, k, axis=0), rep(pre), seqs, st).data[:, -1]
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        cand = []
        for (score, seq), row in zip(beams, logp):
            for tok in np.argsort(-row, kind="stable")[:width]:
                cand.append((score + float(row[tok]), seq + [int(tok)]))
        cand.sort(key=lambda c: -c[0])
        beams = []
        for score, seq in cand:
            (finished if seq[-1] == EOS else beams).append((score, seq))
            if len(beams) == width:
                break
        if not beams or (finished and max(f[0] for f in finished) >= beams[0][0]):
            break
    pool = finished or beams
    best = max(pool, key=lambda c: c[0] / len(c[1]))
    return _strip(best[1][1:])


def generate(f_wsi, st: ModelState, prompt_text: str | None = None, max_len: int | None = None) -> str:
    return generate_batch(np.asarray(f_wsi)[None, :], st, prompt_text, max_len)[0]


# ---------------------------------------------------------------------------
# backbone pretraining


@dataclass
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 200
    weight_decay: float = 0.01
    keep_prob: float = 0.5


def _corrupt(ids: list[int], rng: np.random.Generator, keep_prob: float) -> list[int]:
    return [t for t in ids if rng.random() < keep_prob]


def pretrain_loss(texts: Sequence[str], st: ModelState, rng: np.random.Generator, keep_prob: float) -> Tensor:
    """Denoising autoencoder loss: zero prefix + prompt + corrupted report -> report."""
    cfg = st.config
    b = len(texts)
    prompt_ids, seqs = [], []
    for text in texts:
        prompt = sample_prompt(rng, cfg)
        tgt = target_ids(text, st)
        noisy = _corrupt(tgt[1:-1], rng, keep_prob)
        prompt_ids.append(encode(prompt, st.vocab, add_specials=False) + noisy)
        seqs.append(tgt)
    prefix = Tensor(np.zeros((b, cfg.L_p, cfg.d)))
    memory, mem_valid, dec_prefix = _memory(prefix, prompt_ids, st)
    dec_in = _pad([s[:-1] for s in seqs])
    dec_out = _pad([s[1:] for s in seqs])
    if dec_prefix is not None:
        dec_out = np.concatenate([np.full((b, cfg.L_p), PAD, dtype=np.int64), dec_out], axis=1)
    logits = _decode_logits(memory, mem_valid, dec_prefix, dec_in, st)
    bt, t, v = logits.shape
    return ag.cross_entropy(ag.reshape(logits, (bt * t, v)), dec_out.reshape(-1), ignore_index=PAD)


def init_backbone_pretrain(
    texts: Sequence[str],
    cfg: ModelConfig,
    vocab: Vocab,
    seed: int,
    pre: PretrainConfig | None = None,
    history: list | None = None,
) -> ModelState:
    """Train the backbone as a text denoiser, then freeze it.

    The prefix rows are zeros throughout, so the prompt encoder and auxiliary
    heads keep their initial values.  ``history`` (if given) receives the loss
    of every step.
    """
    from mpath.training import OptState, adamw_step, lr_at_step

    if not texts:
        raise ValueError("pretraining needs at least one report text")
    pre = pre or PretrainConfig()
    st = init_state(cfg, vocab, seed)
    st.set_phase("pretrain")
    rng = np.random.default_rng([seed, 3])
    opt = OptState()
    texts = list(texts)
    order = rng.permutation(len(texts))
    cursor = 0
    for step in range(1, pre.steps + 1):
        if cursor + pre.batch_size > len(order):
            order = rng.permutation(len(texts))
            cursor = 0
        idx = order[cursor : cursor + pre.batch_size]
        cursor += pre.batch_size
        loss = pretrain_loss([texts[i] for i in idx], st, rng, pre.keep_prob)
        ag.backward(loss)
        adamw_step(st, opt, lr_at_step(step, pre), weight_decay=pre.weight_decay)
        if history is not None:
            history.append(loss.item())
    st.set_phase("prefix")
    return st
