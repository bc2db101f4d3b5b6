"""Transformer encoder-decoder with independently sized components.

Encoder and decoder depth/width/FFN/heads are free, so the same code serves
symmetric models, single-component scaling, and the cone shape (deep wide
encoder, shallow narrow decoder). When enc_dim != dec_dim a single learned
linear bridge maps encoder states into the decoder width, computed once per
source batch. Decoder self-attention is bidirectional in NAT mode and
strictly causal in AT mode. Pre-norm residual blocks, ReLU feed-forward,
sinusoidal positions, decoder embedding tied with the output projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_INF, ParameterSet, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import MASK, PAD

AT = "at"
NAT = "nat"


@dataclass(frozen=True)
class ArchConfig:
    enc_layers: int
    dec_layers: int
    enc_dim: int
    dec_dim: int
    enc_ffn: int
    dec_ffn: int
    enc_heads: int
    dec_heads: int
    vocab_size: int
    max_len: int
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("enc_layers", "dec_layers", "enc_dim", "dec_dim", "enc_ffn", "dec_ffn",
                     "enc_heads", "dec_heads", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"ArchConfig.{name} must be a positive integer")
        if self.enc_dim % self.enc_heads != 0:
            raise ValueError(f"enc_dim {self.enc_dim} not divisible by enc_heads {self.enc_heads}")
        if self.dec_dim % self.dec_heads != 0:
            raise ValueError(f"dec_dim {self.dec_dim} not divisible by dec_heads {self.dec_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")

    @property
    def has_bridge(self) -> bool:
        return self.enc_dim != self.dec_dim


# Desk-scale preset shapes: (enc_layers, dec_layers, enc_dim, dec_dim, heads).
# FFN widths are 4x the model width, mirroring the usual base/big convention;
# "cone" doubles encoder depth and width while halving both on the decoder.
_PRESETS: dict[str, tuple[int, int, int, int, int, int]] = {
    "base": (2, 2, 64, 64, 4, 4),
    "big": (2, 2, 128, 128, 8, 8),
    "deep": (8, 8, 64, 64, 4, 4),
    "enc_big": (2, 2, 128, 64, 8, 4),
    "dec_big": (2, 2, 64, 128, 4, 8),
    "cone": (4, 1, 128, 32, 8, 2),
}

PRESET_NAMES = tuple(_PRESETS)


def arch_preset(name: str, vocab_size: int = 512, max_len: int = 32, dropout: float = 0.0) -> ArchConfig:
    if name not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")
    el, dl, ed, dd, eh, dh = _PRESETS[name]
    return ArchConfig(
        enc_layers=el, dec_layers=dl, enc_dim=ed, dec_dim=dd,
        enc_ffn=4 * ed, dec_ffn=4 * dd, enc_heads=eh, dec_heads=dh,
        vocab_size=vocab_size, max_len=max_len, dropout=dropout,
    )


def _param_specs(config: ArchConfig):
    """Yield (name, shape) for every parameter, in creation order."""
    V, E, D = config.vocab_size, config.enc_dim, config.dec_dim
    yield "enc.embed", (V, E)
    for i in range(config.enc_layers):
        p = f"enc.{i}"
        yield f"{p}.ln1.g", (E,)
        yield f"{p}.ln1.b", (E,)
        for w in ("wq", "wk", "wv", "wo"):
            yield f"{p}.attn.{w}", (E, E)
            yield f"{p}.attn.{w}b", (E,)
        yield f"{p}.ln2.g", (E,)
        yield f"{p}.ln2.b", (E,)
        yield f"{p}.ffn.w1", (E, config.enc_ffn)
        yield f"{p}.ffn.b1", (config.enc_ffn,)
        yield f"{p}.ffn.w2", (config.enc_ffn, E)
        yield f"{p}.ffn.b2", (E,)
    yield "enc.ln.g", (E,)
    yield "enc.ln.b", (E,)
    if config.has_bridge:
        yield "bridge.w", (E, D)
        yield "bridge.b", (D,)
    yield "dec.embed", (V, D)  # tied with the output projection
    for i in range(config.dec_layers):
        p = f"dec.{i}"
        yield f"{p}.ln1.g", (D,)
        yield f"{p}.ln1.b", (D,)
        for w in ("wq", "wk", "wv", "wo"):
            yield f"{p}.self.{w}", (D, D)
            yield f"{p}.self.{w}b", (D,)
        yield f"{p}.ln2.g", (D,)
        yield f"{p}.ln2.b", (D,)
        for w in ("wq", "wk", "wv", "wo"):
            yield f"{p}.cross.{w}", (D, D)
            yield f"{p}.cross.{w}b", (D,)
        yield f"{p}.ln3.g", (D,)
        yield f"{p}.ln3.b", (D,)
        yield f"{p}.ffn.w1", (D, config.dec_ffn)
        yield f"{p}.ffn.b1", (config.dec_ffn,)
        yield f"{p}.ffn.w2", (config.dec_ffn, D)
        yield f"{p}.ffn.b2", (D,)
    yield "dec.ln.g", (D,)
    yield "dec.ln.b", (D,)
    yield "len_head.w", (E, config.max_len)
    yield "len_head.b", (config.max_len,)


def param_count(config: ArchConfig) -> int:
    """Exact number of scalars in a model built from this config."""
    return sum(int(np.prod(shape)) for _, shape in _param_specs(config))


def _init_array(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".g"):
        return np.ones(shape, dtype=ad.DTYPE)
    if name.endswith((".b", "b1", "b2", ".wqb", ".wkb", ".wvb", ".wob")) or name.endswith("_head.b"):
        return np.zeros(shape, dtype=ad.DTYPE)
    if name.endswith(".embed"):
        bound = math.sqrt(3.0 / shape[1])
        return rng.uniform(-bound, bound, size=shape).astype(ad.DTYPE)
    # scaled-uniform (Glorot) for projection matrices
    fan_in, fan_out = shape[0], shape[1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(ad.DTYPE)


def sinusoidal_positions(max_len: int, dim: int) -> np.ndarray:
    """Fixed (max_len, dim) sine/cosine position table."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(ad.DTYPE)


class TransformerModel:
    """Config + parameters + decoder kind; construct via init_model/load_model."""

    def __init__(self, config: ArchConfig, params: ParameterSet, decoder_kind: str):
        if decoder_kind not in (AT, NAT):
            raise ValueError(f"decoder_kind must be {AT!r} or {NAT!r}, got {decoder_kind!r}")
        self.config = config
        self.params = params
        self.decoder_kind = decoder_kind
        self._pe_enc = sinusoidal_positions(config.max_len, config.enc_dim)
        self._pe_dec = sinusoidal_positions(config.max_len + 1, config.dec_dim)

    @property
    def has_bridge(self) -> bool:
        return self.config.has_bridge

    def __repr__(self):
        c = self.config
        return (
            f"TransformerModel({self.decoder_kind}, ({c.enc_layers}x{c.enc_dim}, "
            f"{c.dec_layers}x{c.dec_dim}), vocab={c.vocab_size})"
        )


def init_model(config: ArchConfig, decoder_kind: str, seed: int) -> TransformerModel:
    """Deterministic scaled-uniform initialization from a single seeded stream."""
    rng = np.random.default_rng([abs(int(seed)) + 1, 42] )
    params = ParameterSet(seed=seed)
    for name, shape in _param_specs(config):
        params.add(name, _init_array(name, shape, rng))
    return TransformerModel(config, params, decoder_kind)


@dataclass
class EncoderOutput:
    states: Tensor            # (B, Ts, enc_dim)
    mask: np.ndarray          # (B, Ts) bool, True at real tokens
    bridged: Tensor | None    # (B, Ts, dec_dim) when enc_dim != dec_dim


def _pad_attn_mask(mask: np.ndarray) -> np.ndarray:
    """(B, T) bool -> additive (B, 1, 1, T) mask hiding padded keys."""
    add = np.where(mask, 0.0, NEG_INF).astype(ad.DTYPE)
    return add[:, None, None, :]


def _causal_attn_mask(t: int) -> np.ndarray:
    """(1, 1, T, T) additive mask hiding keys strictly after the query."""
    m = np.triu(np.full((t, t), NEG_INF, dtype=ad.DTYPE), k=1)
    return m[None, None, :, :]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    x = ad.reshape(x, (b, t, heads, d // heads))
    # (B, T, H, dh) -> (B, H, T, dh)
    out = Tensor(x.data.transpose(0, 2, 1, 3).copy())

    def bwd(g):
        return [(x, g.transpose(0, 2, 1, 3))]

    return ad._record(out, (x,), bwd)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    out = Tensor(x.data.transpose(0, 2, 1, 3).reshape(b, t, h * dh).copy())

    def bwd(g):
        return [(x, g.reshape(b, t, h, dh).transpose(0, 2, 1, 3))]

    return ad._record(out, (x,), bwd)


def attention_sublayer(
    params: ParameterSet,
    prefix: str,
    x: Tensor,
    kv: Tensor,
    attn_mask: np.ndarray,
    heads: int,
    return_weights: bool = False,
):
    """Multi-head attention block: queries from x, keys/values from kv."""
    q = ad.linear(x, params[f"{prefix}.wq"], params[f"{prefix}.wqb"])
    k = ad.linear(kv, params[f"{prefix}.wk"], params[f"{prefix}.wkb"])
    v = ad.linear(kv, params[f"{prefix}.wv"], params[f"{prefix}.wvb"])
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    if return_weights:
        ctx, weights = ad.scaled_dot_attention(qh, kh, vh, attn_mask, return_weights=True)
    else:
        ctx = ad.scaled_dot_attention(qh, kh, vh, attn_mask)
        weights = None
    out = ad.linear(_merge_heads(ctx), params[f"{prefix}.wo"], params[f"{prefix}.wob"])
    if return_weights:
        return out, weights
    return out


def ffn_sublayer(params: ParameterSet, prefix: str, x: Tensor) -> Tensor:
    h = ad.relu(ad.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return ad.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _maybe_dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rng is None or rate == 0.0:
        return x
    return ad.dropout(x, rate, rng)


def encode(model: TransformerModel, src_ids: np.ndarray, src_mask: np.ndarray,
           dropout_rng: np.random.Generator | None = None) -> EncoderOutput:
    """Run the encoder stack over a padded source batch."""
    cfg = model.config
    src_ids = np.asarray(src_ids)
    if src_ids.ndim != 2:
        raise ValueError(f"encode: expected (B, T) ids, got shape {src_ids.shape}")
    if src_ids.shape[1] > cfg.max_len:
        raise ValueError(f"encode: input length {src_ids.shape[1]} > max_len {cfg.max_len}")
    if src_ids.size and src_ids.max() >= cfg.vocab_size:
        raise ValueError("encode: token id outside vocabulary")
    p = model.params
    b, t = src_ids.shape
    x = ad.embedding_lookup(p["enc.embed"], src_ids)
    x = ad.add(ad.scale(x, math.sqrt(cfg.enc_dim)), Tensor(model._pe_enc[:t]))
    x = _maybe_dropout(x, cfg.dropout, dropout_rng)
    attn_mask = _pad_attn_mask(src_mask)
    for i in range(cfg.enc_layers):
        pre = f"enc.{i}"
        h_in = ad.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        h = attention_sublayer(p, f"{pre}.attn", h_in, h_in, attn_mask, cfg.enc_heads)
        x = ad.add(x, _maybe_dropout(h, cfg.dropout, dropout_rng))
        h = ffn_sublayer(p, f"{pre}.ffn", ad.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"]))
        x = ad.add(x, _maybe_dropout(h, cfg.dropout, dropout_rng))
    x = ad.layer_norm(x, p["enc.ln.g"], p["enc.ln.b"])
    bridged = None
    if cfg.has_bridge:
        bridged = ad.linear(x, p["bridge.w"], p["bridge.b"])
    return EncoderOutput(states=x, mask=np.asarray(src_mask, dtype=bool), bridged=bridged)


def decoder_forward(model: TransformerModel, enc: EncoderOutput, tgt_ids: np.ndarray,
                    dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Decoder logits (B, Tt, V). NAT attends bidirectionally over non-pad
    positions; AT is strictly causal. Cross-attention reads (bridged) encoder
    states with padded source keys hidden."""
    cfg = model.config
    tgt_ids = np.asarray(tgt_ids)
    if tgt_ids.ndim != 2 or tgt_ids.shape[0] != enc.states.shape[0]:
        raise ValueError(
            f"decoder_forward: target batch {tgt_ids.shape} does not match encoder batch "
            f"{enc.states.shape[0]}"
        )
    if tgt_ids.shape[1] > cfg.max_len + 1:
        raise ValueError(f"decoder_forward: target length {tgt_ids.shape[1]} > max_len+1")
    if tgt_ids.size and tgt_ids.max() >= cfg.vocab_size:
        raise ValueError("decoder_forward: token id outside vocabulary")
    if model.decoder_kind == AT and (tgt_ids == MASK).any():
        raise ValueError("decoder_forward: MASK id passed to an AT decoder")

    p = model.params
    b, t = tgt_ids.shape
    x = ad.embedding_lookup(p["dec.embed"], tgt_ids)
    x = ad.add(ad.scale(x, math.sqrt(cfg.dec_dim)), Tensor(model._pe_dec[:t]))
    x = _maybe_dropout(x, cfg.dropout, dropout_rng)

    if model.decoder_kind == AT:
        self_mask = _causal_attn_mask(t) + _pad_attn_mask(tgt_ids != PAD)
    else:
        self_mask = _pad_attn_mask(tgt_ids != PAD)
    cross_mask = _pad_attn_mask(enc.mask)
    memory = enc.bridged if enc.bridged is not None else enc.states

    for i in range(cfg.dec_layers):
        pre = f"dec.{i}"
        h_in = ad.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        h = attention_sublayer(p, f"{pre}.self", h_in, h_in, self_mask, cfg.dec_heads)
        x = ad.add(x, _maybe_dropout(h, cfg.dropout, dropout_rng))
        h = attention_sublayer(
            p, f"{pre}.cross",
            ad.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"]),
            memory, cross_mask, cfg.dec_heads,
        )
        x = ad.add(x, _maybe_dropout(h, cfg.dropout, dropout_rng))
        h = ffn_sublayer(p, f"{pre}.ffn", ad.layer_norm(x, p[f"{pre}.ln3.g"], p[f"{pre}.ln3.b"]))
        x = ad.add(x, _maybe_dropout(h, cfg.dropout, dropout_rng))
    x = ad.layer_norm(x, p["dec.ln.g"], p["dec.ln.b"])
    # output projection tied with the decoder embedding; the 1/sqrt(d) factor
    # keeps initial logits near-uniform under the shared init scale
    return ad.scale(ad.matmul(x, ad.transpose_2d(p["dec.embed"])), 1.0 / math.sqrt(cfg.dec_dim))


def length_logits(model: TransformerModel, enc: EncoderOutput) -> Tensor:
    """Length-head logits (B, max_len); index i corresponds to length i+1."""
    pooled = ad.mean_pool_masked(enc.states, enc.mask)
    return ad.linear(pooled, model.params["len_head.w"], model.params["len_head.b"])


def predict_length(model: TransformerModel, enc: EncoderOutput, beam: int) -> list[list[tuple[int, float]]]:
    """Top-`beam` distinct candidate lengths per row, log-probs descending."""
    if not 1 <= beam <= model.config.max_len:
        raise ValueError(f"predict_length: beam {beam} outside [1, {model.config.max_len}]")
    with ad.no_grad():
        logits = length_logits(model, enc)
    logp = ad.log_softmax_np(logits.data)  # (B, max_len)
    out = []
    for row in logp:
        idx = np.argsort(-row, kind="stable")[:beam]
        out.append([(int(i) + 1, float(row[i])) for i in idx])
    return out


def save_model(model: TransformerModel, path) -> None:
    meta = {"arch": asdict(model.config), "decoder_kind": model.decoder_kind}
    save_checkpoint(path, model.params, meta)


def load_model(path) -> TransformerModel:
    seed, meta, arrays = load_checkpoint(path)
    config = ArchConfig(**meta["arch"])
    model = init_model(config, meta["decoder_kind"], seed=seed)
    model.params.load_state_dict(arrays)
    return model
