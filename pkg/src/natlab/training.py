"""Training loops: AT teacher, masked-LM NAT student (CMLM), glancing NAT
student (GLAT), distillation corpus construction, checkpoint averaging.

Everything is a deterministic function of (corpus, config, seed). Gradients
accumulate until the loop zeroes them; the length head is trained jointly
with the token loss for NAT models and left untouched for AT models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import decoding as D
from . import model as M
from .autodiff import Tensor
from .data import BOS, EOS, MASK, PAD, UNK, ParallelCorpus, encode_batch
from .metrics import corpus_bleu
from .optim import AdamState, adam_init, adam_step, inverse_sqrt_lr

KIND_AT = "at"
KIND_CMLM = "cmlm"
KIND_GLAT = "glat"

MODEL_KINDS = {KIND_AT: M.AT, KIND_CMLM: M.NAT, KIND_GLAT: M.NAT}


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    tokens_per_batch: int = 512
    warmup_steps: int = 50
    peak_lr: float = 3e-3
    label_smoothing: float = 0.1
    glancing_start: float = 0.5
    glancing_end: float = 0.3
    length_loss_weight: float = 0.1
    validation_interval: int = 200
    checkpoints_to_average: int = 1
    betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be > 0")
        for lam in (self.glancing_start, self.glancing_end):
            if not 0.0 <= lam <= 1.0:
                raise ValueError("glancing ratio must be within [0, 1]")
        if self.checkpoints_to_average < 1:
            raise ValueError("checkpoints_to_average must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be within [0, 1)")


def glancing_ratio(config: TrainConfig, step: int) -> float:
    """Linear decay from glancing_start to glancing_end over the run."""
    if config.steps <= 1:
        return config.glancing_end
    frac = min(1.0, max(0.0, (step - 1) / (config.steps - 1)))
    return config.glancing_start + (config.glancing_end - config.glancing_start) * frac


@dataclass
class Batch:
    src: np.ndarray       # (B, Ls) ids
    src_mask: np.ndarray  # (B, Ls) bool
    tgt: np.ndarray       # (B, Lt) ids, no BOS/EOS
    tgt_mask: np.ndarray  # (B, Lt) bool
    tgt_lens: np.ndarray  # (B,)


def iter_batches(corpus: ParallelCorpus, tokens_per_batch: int, rng: np.random.Generator):
    """Endless shuffled batches packed to a padded-token budget.

    The cost of a batch is max(src, tgt+1) padded length times the sentence
    count; +1 leaves room for the AT shift/EOS column.
    """
    n = len(corpus.pairs)
    while True:
        order = rng.permutation(n)
        batch: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
        width = 0
        for idx in order:
            src, tgt = corpus.pairs[int(idx)]
            w = max(len(src), len(tgt) + 1)
            if batch and (len(batch) + 1) * max(width, w) > tokens_per_batch:
                yield _make_batch(batch)
                batch, width = [], 0
            batch.append((src, tgt))
            width = max(width, w)
        if batch:
            yield _make_batch(batch)


def _make_batch(pairs) -> Batch:
    srcs = [p[0] for p in pairs]
    tgts = [p[1] for p in pairs]
    maxl = max(max(len(s) for s in srcs), max(len(t) for t in tgts) + 1)
    src, src_mask = encode_batch(srcs, maxl)
    tgt, tgt_mask = encode_batch(tgts, maxl)
    lens = np.array([len(t) for t in tgts], dtype=np.int64)
    return Batch(src=src, src_mask=src_mask, tgt=tgt, tgt_mask=tgt_mask, tgt_lens=lens)


# ---------------------------------------------------------------------------
# Step functions
# ---------------------------------------------------------------------------


def train_at_step(model: M.TransformerModel, batch: Batch, config: TrainConfig,
                  dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Teacher-forced cross entropy over all real target positions + EOS."""
    if model.decoder_kind != M.AT:
        raise ValueError("train_at_step: model is not an AT decoder")
    b, lt = batch.tgt.shape
    dec_in = np.full((b, lt + 1), PAD, dtype=np.int64)
    dec_in[:, 0] = BOS
    dec_in[:, 1:] = batch.tgt
    targets = np.full((b, lt + 1), PAD, dtype=np.int64)
    targets[:, :lt] = batch.tgt
    targets[np.arange(b), batch.tgt_lens] = EOS
    weights = np.zeros((b, lt + 1), dtype=np.float32)
    weights[:, :lt] = batch.tgt_mask
    weights[np.arange(b), batch.tgt_lens] = 1.0

    enc = M.encode(model, batch.src, batch.src_mask, dropout_rng)
    logits = M.decoder_forward(model, enc, dec_in, dropout_rng)
    return ad.cross_entropy_with_label_smoothing(
        logits, targets, config.label_smoothing, weights
    )


def sample_cmlm_masks(tgt_lens: np.ndarray, rng: np.random.Generator, width: int) -> np.ndarray:
    """Per sentence: draw k ~ uniform{1..T} and mask k positions without
    replacement. Returns a (B, width) bool matrix."""
    b = len(tgt_lens)
    out = np.zeros((b, width), dtype=bool)
    for i in range(b):
        t = int(tgt_lens[i])
        if t < 1:
            raise ValueError(f"sample_cmlm_masks: sentence {i} has empty target")
        k = int(rng.integers(1, t + 1))
        pos = rng.permutation(t)[:k]
        out[i, pos] = True
    return out


def _length_loss(model: M.TransformerModel, enc: M.EncoderOutput, tgt_lens: np.ndarray) -> Tensor:
    logits = M.length_logits(model, enc)
    return ad.cross_entropy_with_label_smoothing(logits, tgt_lens - 1, 0.0)


def train_cmlm_step(model: M.TransformerModel, batch: Batch, config: TrainConfig,
                    rng: np.random.Generator,
                    dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Conditional masked-LM step: loss only at masked positions; the length
    head is trained jointly against the true length."""
    if model.decoder_kind != M.NAT:
        raise ValueError("train_cmlm_step: model is not a NAT decoder")
    if (batch.tgt_lens < 1).any():
        raise ValueError("train_cmlm_step: empty target in batch")
    masked = sample_cmlm_masks(batch.tgt_lens, rng, batch.tgt.shape[1])
    dec_in = np.where(masked, MASK, batch.tgt)
    dec_in = np.where(batch.tgt_mask, dec_in, PAD)

    enc = M.encode(model, batch.src, batch.src_mask, dropout_rng)
    logits = M.decoder_forward(model, enc, dec_in, dropout_rng)
    token_loss = ad.cross_entropy_with_label_smoothing(
        logits, batch.tgt, config.label_smoothing, masked.astype(np.float32)
    )
    return ad.add(token_loss, ad.scale(_length_loss(model, enc, batch.tgt_lens), config.length_loss_weight))


@dataclass
class GlancingStats:
    mean_hamming: float
    revealed: int
    scored_positions: int
    ratio: float
    skipped: bool = False


def train_glat_step(model: M.TransformerModel, batch: Batch, config: TrainConfig,
                    rng: np.random.Generator, lam: float,
                    dropout_rng: np.random.Generator | None = None) -> tuple[Tensor | None, GlancingStats]:
    """Glancing step: a no-gradient first pass from all-MASK input measures
    the Hamming distance d to the reference; round-half-up(lam * d) reference
    tokens are revealed at uniform positions and the loss covers the still
    masked positions. Returns (loss, stats); loss is None when every position
    was revealed (step skipped).
    """
    if model.decoder_kind != M.NAT:
        raise ValueError("train_glat_step: model is not a NAT decoder")
    if (batch.tgt_lens < 1).any():
        raise ValueError("train_glat_step: empty target in batch")
    b, lt = batch.tgt.shape
    all_mask = np.where(batch.tgt_mask, MASK, PAD)

    with ad.no_grad():
        enc0 = M.encode(model, batch.src, batch.src_mask)
        logits0 = M.decoder_forward(model, enc0, all_mask).data
    pred = logits0.argmax(axis=-1)
    wrong = (pred != batch.tgt) & batch.tgt_mask
    dists = wrong.sum(axis=1)

    reveal = np.zeros((b, lt), dtype=bool)
    n_reveal_total = 0
    for i in range(b):
        n_rev = int(np.floor(lam * int(dists[i]) + 0.5))
        n_rev = min(n_rev, int(batch.tgt_lens[i]))
        if n_rev > 0:
            pos = rng.permutation(int(batch.tgt_lens[i]))[:n_rev]
            reveal[i, pos] = True
            n_reveal_total += n_rev
    scored = batch.tgt_mask & ~reveal
    stats = GlancingStats(
        mean_hamming=float(dists.mean()),
        revealed=n_reveal_total,
        scored_positions=int(scored.sum()),
        ratio=lam,
    )
    if stats.scored_positions == 0:
        stats.skipped = True
        return None, stats

    dec_in = np.where(reveal, batch.tgt, all_mask)
    enc = M.encode(model, batch.src, batch.src_mask, dropout_rng)
    logits = M.decoder_forward(model, enc, dec_in, dropout_rng)
    token_loss = ad.cross_entropy_with_label_smoothing(
        logits, batch.tgt, config.label_smoothing, scored.astype(np.float32)
    )
    loss = ad.add(token_loss, ad.scale(_length_loss(model, enc, batch.tgt_lens), config.length_loss_weight))
    return loss, stats


# ---------------------------------------------------------------------------
# Checkpoint selection
# ---------------------------------------------------------------------------


@dataclass
class CheckpointRecord:
    step: int
    val_bleu: float
    state: dict[str, np.ndarray]


def select_and_average_checkpoints(history: list[CheckpointRecord], k: int) -> dict[str, np.ndarray]:
    """Elementwise mean of the k best checkpoints by validation BLEU.

    Ties prefer the later step. k=1 returns the single best state bit-exact.
    """
    if len(history) < k:
        raise ValueError(f"need at least {k} checkpoints, have {len(history)}")
    ranked = sorted(history, key=lambda r: (-r.val_bleu, -r.step))[:k]
    if k == 1:
        return {name: arr.copy() for name, arr in ranked[0].state.items()}
    out: dict[str, np.ndarray] = {}
    for name in ranked[0].state:
        acc = np.zeros_like(ranked[0].state[name], dtype=np.float64)
        for rec in ranked:
            acc += rec.state[name]
        out[name] = (acc / k).astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[CheckpointRecord]
    log: list[dict] = field(default_factory=list)
    glancing_skipped: int = 0


def _validation_settings(kind: str, max_len: int) -> D.DecodeSettings:
    if kind == KIND_AT:
        return D.DecodeSettings(max_len=max_len)
    if kind == KIND_GLAT:
        return D.DecodeSettings(iterations=1, length_beam=1, max_len=max_len)
    return D.DecodeSettings(iterations=4, length_beam=1, max_len=max_len)


def validation_bleu(model: M.TransformerModel, corpus: ParallelCorpus,
                    settings: D.DecodeSettings) -> float:
    results = D.decode_corpus(model, corpus.sources(), settings)
    hyps = [r.tokens for r in results]
    return corpus_bleu(hyps, corpus.targets())


def train_model(
    model: M.TransformerModel,
    kind: str,
    train_corpus: ParallelCorpus,
    val_corpus: ParallelCorpus | None,
    config: TrainConfig,
) -> TrainResult:
    """Run the training loop and load the averaged best checkpoint back into
    the model. Emits one log record per step plus validation records."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown training kind {kind!r}")
    if MODEL_KINDS[kind] != model.decoder_kind:
        raise ValueError(f"{kind} training needs a {MODEL_KINDS[kind]} decoder")

    rng = np.random.default_rng([abs(config.seed) + 1, 11])
    mask_rng = np.random.default_rng([abs(config.seed) + 1, 13])
    batches = iter_batches(train_corpus, config.tokens_per_batch, rng)
    state = adam_init(model.params)
    result = TrainResult(history=[])
    val_settings = _validation_settings(kind, model.config.max_len)

    def validate(step: int):
        if val_corpus is None or len(val_corpus) == 0:
            bleu = 0.0
        else:
            bleu = validation_bleu(model, val_corpus, val_settings)
        result.history.append(
            CheckpointRecord(step=step, val_bleu=bleu, state=model.params.state_dict())
        )
        result.log.append({"step": step, "val_bleu": bleu})

    for step in range(1, config.steps + 1):
        batch = next(batches)
        model.params.zero_grad()
        if kind == KIND_AT:
            loss = train_at_step(model, batch, config)
        elif kind == KIND_CMLM:
            loss = train_cmlm_step(model, batch, config, mask_rng)
        else:
            lam = glancing_ratio(config, step)
            loss, stats = train_glat_step(model, batch, config, mask_rng, lam)
            if loss is None:
                result.glancing_skipped += 1
                result.log.append({"step": step, "loss": None, "skipped": True})
                continue
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise FloatingPointError(f"non-finite loss at step {step}")
        ad.backward(loss)
        # parameters outside the active loss (AT: the length head) get zero
        # gradients, which leaves them bit-identical under the update
        for _, p in model.params.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        lr = inverse_sqrt_lr(step, config.peak_lr, config.warmup_steps)
        adam_step(model.params, state, lr, config.betas, config.adam_eps)
        result.log.append({"step": step, "loss": loss_val, "lr": lr})
        if config.validation_interval > 0 and step % config.validation_interval == 0:
            validate(step)

    if not result.history or result.history[-1].step != config.steps:
        validate(config.steps)
    k = min(config.checkpoints_to_average, len(result.history))
    averaged = select_and_average_checkpoints(result.history, k)
    model.params.load_state_dict(averaged)
    return result


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------


def distill_corpus(teacher: M.TransformerModel, raw: ParallelCorpus, beam: int = 1) -> ParallelCorpus:
    """Replace targets with the teacher's decoded outputs (D_KD).

    Sources are preserved in order and the corpus size is unchanged. Greedy
    decoding when beam == 1, per-sentence beam search otherwise; both are
    deterministic, so a repeated source always maps to the same target.
    """
    if teacher.decoder_kind != M.AT:
        raise ValueError("distill_corpus: teacher must be an AT model")
    if beam < 1:
        raise ValueError("distill_corpus: beam must be >= 1")
    if teacher.config.vocab_size != len(raw.src_vocab):
        raise ValueError(
            f"distill_corpus: teacher vocab size {teacher.config.vocab_size} does not match "
            f"corpus vocab {len(raw.src_vocab)}"
        )
    settings = D.DecodeSettings(beam=beam, max_len=raw.max_len)
    results = D.decode_corpus(teacher, raw.sources(), settings)
    pairs = []
    for (src, _), res in zip(raw.pairs, results):
        tgt = res.tokens if res.tokens else (UNK,)
        pairs.append((src, tuple(tgt)))
    return ParallelCorpus(pairs, raw.src_vocab, raw.tgt_vocab, max_len=raw.max_len)
