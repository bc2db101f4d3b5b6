"""Tiny decoder-only language model for fluency scoring.

A causal transformer LM trained on the task's target-side reference text;
perplexity is exp(mean negative log-likelihood per token) with the final EOS
included. Log-probabilities are accumulated in float64 so that a uniform
model over V classes scores a perplexity of exactly V.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import BOS, EOS, PAD, UNK, encode_batch
from .model import (
    _causal_attn_mask,
    _init_array,
    _pad_attn_mask,
    attention_sublayer,
    ffn_sublayer,
    sinusoidal_positions,
)
from .optim import adam_init, adam_step, inverse_sqrt_lr


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    max_len: int
    dim: int = 64
    layers: int = 1
    heads: int = 4
    ffn: int = 256

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


def _lm_param_specs(cfg: LMConfig):
    yield "embed", (cfg.vocab_size, cfg.dim)
    for i in range(cfg.layers):
        p = f"layer.{i}"
        yield f"{p}.ln1.g", (cfg.dim,)
        yield f"{p}.ln1.b", (cfg.dim,)
        for w in ("wq", "wk", "wv", "wo"):
            yield f"{p}.attn.{w}", (cfg.dim, cfg.dim)
            yield f"{p}.attn.{w}b", (cfg.dim,)
        yield f"{p}.ln2.g", (cfg.dim,)
        yield f"{p}.ln2.b", (cfg.dim,)
        yield f"{p}.ffn.w1", (cfg.dim, cfg.ffn)
        yield f"{p}.ffn.b1", (cfg.ffn,)
        yield f"{p}.ffn.w2", (cfg.ffn, cfg.dim)
        yield f"{p}.ffn.b2", (cfg.dim,)
    yield "ln.g", (cfg.dim,)
    yield "ln.b", (cfg.dim,)


class TinyLM:
    def __init__(self, config: LMConfig, params: ParameterSet):
        self.config = config
        self.params = params
        self._pe = sinusoidal_positions(config.max_len + 1, config.dim)


def init_lm(config: LMConfig, seed: int) -> TinyLM:
    rng = np.random.default_rng([abs(int(seed)) + 1, 77])
    params = ParameterSet(seed=seed)
    for name, shape in _lm_param_specs(config):
        params.add(name, _init_array(name, shape, rng))
    return TinyLM(config, params)


def uniform_lm(vocab_size: int, max_len: int) -> TinyLM:
    """An LM whose logits are identically zero: exact uniform distribution."""
    lm = init_lm(LMConfig(vocab_size=vocab_size, max_len=max_len), seed=0)
    lm.params["embed"].data[...] = 0.0
    return lm


def lm_logits(lm: TinyLM, ids: np.ndarray) -> Tensor:
    """Causal logits (B, T, V) over BOS-prefixed input ids."""
    cfg = lm.config
    ids = np.asarray(ids)
    p = lm.params
    t = ids.shape[1]
    x = ad.embedding_lookup(p["embed"], ids)
    x = ad.add(ad.scale(x, math.sqrt(cfg.dim)), Tensor(lm._pe[:t]))
    mask = _causal_attn_mask(t) + _pad_attn_mask(ids != PAD)
    for i in range(cfg.layers):
        pre = f"layer.{i}"
        h_in = ad.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        h = attention_sublayer(p, f"{pre}.attn", h_in, h_in, mask, cfg.heads)
        x = ad.add(x, h)
        h = ffn_sublayer(p, f"{pre}.ffn", ad.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"]))
        x = ad.add(x, h)
    x = ad.layer_norm(x, p["ln.g"], p["ln.b"])
    return ad.scale(ad.matmul(x, ad.transpose_2d(p["embed"])), 1.0 / math.sqrt(cfg.dim))


def train_lm(lm: TinyLM, sequences, steps: int, tokens_per_batch: int = 512,
             peak_lr: float = 3e-3, warmup: int = 50, seed: int = 0) -> list[float]:
    """Next-token training on raw target sequences (BOS ... EOS)."""
    rng = np.random.default_rng([abs(seed) + 1, 23])
    seqs = [tuple(s) for s in sequences if len(s) > 0]
    if not seqs:
        raise ValueError("train_lm: no training sequences")
    state = adam_init(lm.params)
    losses = []
    n = len(seqs)
    order = rng.permutation(n)
    cursor = 0
    for step in range(1, steps + 1):
        batch = []
        width = 0
        while True:
            s = seqs[int(order[cursor])]
            cursor += 1
            if cursor >= n:
                order = rng.permutation(n)
                cursor = 0
            w = len(s) + 1
            if batch and (len(batch) + 1) * max(width, w) > tokens_per_batch:
                break
            batch.append(s)
            width = max(width, w)
        maxl = max(len(s) for s in batch) + 1
        b = len(batch)
        dec_in = np.full((b, maxl), PAD, dtype=np.int64)
        targets = np.full((b, maxl), PAD, dtype=np.int64)
        weights = np.zeros((b, maxl), dtype=np.float32)
        dec_in[:, 0] = BOS
        for i, s in enumerate(batch):
            dec_in[i, 1 : len(s) + 1] = s
            targets[i, : len(s)] = s
            targets[i, len(s)] = EOS
            weights[i, : len(s) + 1] = 1.0
        lm.params.zero_grad()
        loss = ad.cross_entropy_with_label_smoothing(lm_logits(lm, dec_in), targets, 0.0, weights)
        ad.backward(loss)
        adam_step(lm.params, state, inverse_sqrt_lr(step, peak_lr, warmup))
        losses.append(loss.item())
    return losses


@dataclass
class LMScore:
    perplexity: float
    total_tokens: int
    oov_tokens: int


def lm_perplexity(lm: TinyLM, hypotheses) -> LMScore:
    """exp(mean NLL per token, EOS included). Ids outside the LM vocabulary
    are scored as UNK and counted."""
    total_nll = 0.0
    total_tokens = 0
    oov = 0
    v = lm.config.vocab_size
    with ad.no_grad():
        for hyp in hypotheses:
            ids = list(hyp)
            mapped = []
            for i in ids:
                if 0 <= int(i) < v:
                    mapped.append(int(i))
                else:
                    mapped.append(UNK)
                    oov += 1
            seq = mapped[: lm.config.max_len]
            dec_in = np.array([[BOS] + seq], dtype=np.int64)
            targets = seq + [EOS]
            logp = ad.log_softmax_np(lm_logits(lm, dec_in).data[0])
            for t, tok in enumerate(targets):
                total_nll -= float(logp[t, tok])
            total_tokens += len(targets)
    if total_tokens == 0:
        raise ValueError("lm_perplexity: no tokens to score")
    return LMScore(
        perplexity=float(np.exp(total_nll / total_tokens)),
        total_tokens=total_tokens,
        oov_tokens=oov,
    )


def save_lm(lm: TinyLM, path) -> None:
    save_checkpoint(path, lm.params, {"lm": asdict(lm.config)})


def load_lm(path) -> TinyLM:
    seed, meta, arrays = load_checkpoint(path)
    lm = init_lm(LMConfig(**meta["lm"]), seed=seed)
    lm.params.load_state_dict(arrays)
    return lm
