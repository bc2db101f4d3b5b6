"""Mask-predict iterative decoding, single-pass NAT decoding, AT greedy/beam.

All decoders are deterministic given (model, source, settings) and emit a
DecodeResult with a per-iteration trace, the length-beam candidate list and
the committed per-token log-probabilities.

NAT conventions: candidate lengths are exact (no EOS inside NAT outputs);
reserved ids (PAD/BOS/EOS/MASK) are excluded from NAT argmax commitments, so
the structural invariants hold for untrained models too. The re-mask
schedule at iteration t (1-based) of T keeps n_t = floor(L * (T - t) / T)
lowest-scoring positions masked; committed tokens keep the score from the
iteration that committed them and scores refresh when a position is
re-masked and re-predicted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as M
from .data import BOS, EOS, MASK, PAD, UNK, encode_batch

SCORE_POLICY = "refresh-on-repredict"


@dataclass(frozen=True)
class DecodeSettings:
    iterations: int = 10
    length_beam: int = 5
    beam: int = 1          # AT search width
    max_len: int = 32      # AT output cap

    def __post_init__(self):
        if self.iterations < 1 or self.length_beam < 1 or self.beam < 1:
            raise ValueError("decode settings must be >= 1")


@dataclass
class Candidate:
    length: int
    tokens: tuple[int, ...]
    mean_logprob: float


@dataclass
class IterationStep:
    masked_positions: tuple[int, ...]
    predictions: tuple[int, ...]
    scores: tuple[float, ...]


@dataclass
class DecodeResult:
    tokens: tuple[int, ...]
    per_token_scores: tuple[float, ...]
    iteration_trace: list[IterationStep]
    candidates: list[Candidate]
    chosen_index: int
    score_policy: str = SCORE_POLICY


def remask_counts(length: int, iterations: int) -> list[int]:
    """Number of positions re-masked after each iteration t = 1..T."""
    return [length * (iterations - t) // iterations for t in range(1, iterations + 1)]


def lowest_score_positions(scores: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n lowest scores; ties resolved leftmost."""
    if n <= 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(scores, kind="stable")
    return np.sort(order[:n])


def _choose_candidate(cands: list[Candidate]) -> int:
    best = 0
    for i, c in enumerate(cands[1:], start=1):
        b = cands[best]
        if c.mean_logprob > b.mean_logprob or (
            c.mean_logprob == b.mean_logprob and c.length < b.length
        ):
            best = i
    return best


def _nat_forbidden_ids(vocab_size: int) -> np.ndarray:
    bad = np.zeros(vocab_size, dtype=bool)
    bad[[PAD, BOS, EOS, MASK]] = True
    return bad


def mask_predict_batch(
    model: M.TransformerModel,
    sources: list,
    iterations: int,
    length_beam: int,
) -> list[DecodeResult]:
    """Iterative NAT decoding over a batch of source sentences."""
    if model.decoder_kind != M.NAT:
        raise ValueError("mask_predict: model is not a NAT decoder")
    if iterations < 1:
        raise ValueError("mask_predict: iterations must be >= 1")
    if not 1 <= length_beam <= model.config.max_len:
        raise ValueError(
            f"mask_predict: length beam {length_beam} exceeds max_len {model.config.max_len}"
        )
    if not sources:
        return []
    n = len(sources)
    src_ids, src_mask = encode_batch(sources, model.config.max_len)

    with ad.no_grad():
        enc = M.encode(model, src_ids, src_mask)
        length_cands = M.predict_length(model, enc, length_beam)

        # one decoder row per (sentence, candidate length)
        rows = n * length_beam
        row_len = np.array(
            [length_cands[s][c][0] for s in range(n) for c in range(length_beam)], dtype=np.int64
        )
        lmax = int(row_len.max())
        rep = np.repeat(np.arange(n), length_beam)
        enc_rows = M.EncoderOutput(
            states=ad.Tensor(enc.states.data[rep]),
            mask=enc.mask[rep],
            bridged=None if enc.bridged is None else ad.Tensor(enc.bridged.data[rep]),
        )

        pos = np.arange(lmax)[None, :]
        alive = pos < row_len[:, None]                     # (rows, lmax) real positions
        tgt = np.where(alive, MASK, PAD).astype(np.int64)
        masked = alive.copy()
        tokens = np.zeros((rows, lmax), dtype=np.int64)
        scores = np.full((rows, lmax), -np.inf, dtype=np.float64)
        forbidden = _nat_forbidden_ids(model.config.vocab_size)
        traces: list[list[IterationStep]] = [[] for _ in range(rows)]

        for t in range(1, iterations + 1):
            logits = M.decoder_forward(model, enc_rows, tgt).data.copy()
            logits[:, :, forbidden] = -np.inf
            logp = ad.log_softmax_np(logits)
            pred = logp.argmax(axis=-1)
            pred_score = np.take_along_axis(logp, pred[..., None], axis=-1)[..., 0]

            for r in range(rows):
                sel = np.flatnonzero(masked[r])
                traces[r].append(
                    IterationStep(
                        masked_positions=tuple(int(i) for i in sel),
                        predictions=tuple(int(pred[r, i]) for i in sel),
                        scores=tuple(float(pred_score[r, i]) for i in sel),
                    )
                )
            tokens = np.where(masked, pred, tokens)
            scores = np.where(masked, pred_score, scores)
            tgt = np.where(alive, tokens, PAD)
            masked = np.zeros_like(masked)
            if t < iterations:
                for r in range(rows):
                    L = int(row_len[r])
                    n_t = L * (iterations - t) // iterations
                    if n_t > 0:
                        idx = lowest_score_positions(scores[r, :L], n_t)
                        masked[r, idx] = True
                        tgt[r, idx] = MASK

    results: list[DecodeResult] = []
    for s in range(n):
        cands = []
        for c in range(length_beam):
            r = s * length_beam + c
            L = int(row_len[r])
            cands.append(
                Candidate(
                    length=L,
                    tokens=tuple(int(i) for i in tokens[r, :L]),
                    mean_logprob=float(scores[r, :L].mean()),
                )
            )
        chosen = _choose_candidate(cands)
        r = s * length_beam + chosen
        L = int(row_len[r])
        results.append(
            DecodeResult(
                tokens=cands[chosen].tokens,
                per_token_scores=tuple(float(x) for x in scores[r, :L]),
                iteration_trace=traces[r],
                candidates=cands,
                chosen_index=chosen,
            )
        )
    return results


def mask_predict(
    model: M.TransformerModel, source, iterations: int, length_beam: int
) -> DecodeResult:
    return mask_predict_batch(model, [tuple(source)], iterations, length_beam)[0]


def glat_decode(model: M.TransformerModel, source) -> DecodeResult:
    """Single-pass fully-NAT decoding: mask-predict with T=1, B=1."""
    return mask_predict(model, source, iterations=1, length_beam=1)


def glat_decode_batch(model: M.TransformerModel, sources: list) -> list[DecodeResult]:
    return mask_predict_batch(model, sources, iterations=1, length_beam=1)


# ---------------------------------------------------------------------------
# Autoregressive decoding
# ---------------------------------------------------------------------------


def _at_forbidden_ids(vocab_size: int) -> np.ndarray:
    bad = np.zeros(vocab_size, dtype=bool)
    bad[[PAD, BOS, MASK]] = True  # EOS allowed: it terminates the hypothesis
    return bad


def at_greedy_batch(model: M.TransformerModel, sources: list, max_len: int) -> list[DecodeResult]:
    """Token-by-token argmax from BOS until EOS or max_len, over a batch."""
    if model.decoder_kind != M.AT:
        raise ValueError("at_greedy: model is not an AT decoder")
    if not sources:
        return []
    max_len = min(max_len, model.config.max_len)
    n = len(sources)
    src_ids, src_mask = encode_batch(sources, model.config.max_len)
    forbidden = _at_forbidden_ids(model.config.vocab_size)

    with ad.no_grad():
        enc = M.encode(model, src_ids, src_mask)
        prefix = np.full((n, 1), BOS, dtype=np.int64)
        out_tokens: list[list[int]] = [[] for _ in range(n)]
        out_scores: list[list[float]] = [[] for _ in range(n)]
        eos_score = np.zeros(n, dtype=np.float64)
        done = np.zeros(n, dtype=bool)
        for _ in range(max_len):
            logits = M.decoder_forward(model, enc, prefix).data[:, -1, :].copy()
            logits[:, forbidden] = -np.inf
            logp = ad.log_softmax_np(logits)
            nxt = logp.argmax(axis=-1)
            step_score = np.take_along_axis(logp, nxt[:, None], axis=-1)[:, 0]
            for i in range(n):
                if done[i]:
                    nxt[i] = PAD
                    continue
                if nxt[i] == EOS:
                    eos_score[i] = step_score[i]
                    done[i] = True
                else:
                    out_tokens[i].append(int(nxt[i]))
                    out_scores[i].append(float(step_score[i]))
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
            if done.all():
                break
        # sequences cut at max_len are finalized with the EOS log-prob
        if not done.all():
            logits = M.decoder_forward(model, enc, prefix).data[:, -1, :]
            logp = ad.log_softmax_np(logits)
            for i in range(n):
                if not done[i]:
                    eos_score[i] = float(logp[i, EOS])

    results = []
    for i in range(n):
        toks = tuple(out_tokens[i])
        norm = (sum(out_scores[i]) + eos_score[i]) / (len(toks) + 1)
        cand = Candidate(length=len(toks), tokens=toks, mean_logprob=float(norm))
        results.append(
            DecodeResult(
                tokens=toks,
                per_token_scores=tuple(out_scores[i]),
                iteration_trace=[],
                candidates=[cand],
                chosen_index=0,
            )
        )
    return results


def at_greedy(model: M.TransformerModel, source, max_len: int) -> DecodeResult:
    return at_greedy_batch(model, [tuple(source)], max_len)[0]


def at_beam(model: M.TransformerModel, source, beam: int, max_len: int) -> DecodeResult:
    """Length-normalized beam search; beam=1 follows the greedy path exactly.

    Hypothesis score is (sum of token log-probs + EOS log-prob) divided by
    (length + 1); all finished hypotheses compete at the end, so the winner's
    normalized score is >= that of any pruned finished hypothesis.
    """
    if model.decoder_kind != M.AT:
        raise ValueError("at_beam: model is not an AT decoder")
    if beam < 1:
        raise ValueError("at_beam: beam must be >= 1")
    max_len = min(max_len, model.config.max_len)
    source = tuple(source)
    src_ids, src_mask = encode_batch([source], model.config.max_len)
    forbidden = _at_forbidden_ids(model.config.vocab_size)

    with ad.no_grad():
        enc = M.encode(model, src_ids, src_mask)
        # (tokens, scores, sum_logp)
        live: list[tuple[tuple[int, ...], tuple[float, ...], float]] = [((), (), 0.0)]
        finished: list[tuple[tuple[int, ...], tuple[float, ...], float]] = []
        for _ in range(max_len):
            if not live or len(finished) >= beam:
                break
            prefix = np.array([(BOS,) + h[0] for h in live], dtype=np.int64)
            rep = np.zeros(len(live), dtype=np.int64)
            enc_rows = M.EncoderOutput(
                states=ad.Tensor(enc.states.data[rep]),
                mask=enc.mask[rep],
                bridged=None if enc.bridged is None else ad.Tensor(enc.bridged.data[rep]),
            )
            logits = M.decoder_forward(model, enc_rows, prefix).data[:, -1, :].copy()
            logits[:, forbidden] = -np.inf
            logp = ad.log_softmax_np(logits)
            expanded: list[tuple[tuple[int, ...], tuple[float, ...], float]] = []
            for h, row in zip(live, logp):
                toks, scs, total = h
                top = np.argsort(-row, kind="stable")[: beam + 1]
                for tok in top:
                    tok = int(tok)
                    s = float(row[tok])
                    if tok == EOS:
                        finished.append((toks, scs, total + s))
                    else:
                        expanded.append((toks + (tok,), scs + (s,), total + s))
            expanded.sort(key=lambda h: (-h[2], h[0]))
            live = expanded[:beam]
        # finalize leftovers at the length cap with their EOS log-prob
        if live and len(finished) < beam:
            prefix = np.array([(BOS,) + h[0] for h in live], dtype=np.int64)
            rep = np.zeros(len(live), dtype=np.int64)
            enc_rows = M.EncoderOutput(
                states=ad.Tensor(enc.states.data[rep]),
                mask=enc.mask[rep],
                bridged=None if enc.bridged is None else ad.Tensor(enc.bridged.data[rep]),
            )
            logp = ad.log_softmax_np(M.decoder_forward(model, enc_rows, prefix).data[:, -1, :])
            for h, row in zip(live, logp):
                finished.append((h[0], h[1], h[2] + float(row[EOS])))

    cands = [
        Candidate(length=len(t), tokens=t, mean_logprob=total / (len(t) + 1))
        for t, _, total in finished
    ]
    order = sorted(range(len(cands)), key=lambda i: (-cands[i].mean_logprob, cands[i].length, i))
    keep = order[: max(beam, 1)]
    kept = [cands[i] for i in keep]
    kept_scores = [finished[i][1] for i in keep]
    chosen = _choose_candidate(kept)
    return DecodeResult(
        tokens=kept[chosen].tokens,
        per_token_scores=tuple(kept_scores[chosen]),
        iteration_trace=[],
        candidates=kept,
        chosen_index=chosen,
    )


# ---------------------------------------------------------------------------
# Corpus-level decoding
# ---------------------------------------------------------------------------


def decode_corpus(
    model: M.TransformerModel,
    sources: list,
    settings: DecodeSettings,
    batch_size: int = 32,
) -> list[DecodeResult]:
    """Decode sentences in order; results are order-stable."""
    results: list[DecodeResult] = []
    if model.decoder_kind == M.AT and settings.beam > 1:
        for src in sources:
            results.append(at_beam(model, src, settings.beam, settings.max_len))
        return results
    for lo in range(0, len(sources), batch_size):
        chunk = [tuple(s) for s in sources[lo : lo + batch_size]]
        if model.decoder_kind == M.AT:
            results.extend(at_greedy_batch(model, chunk, settings.max_len))
        else:
            results.extend(mask_predict_batch(model, chunk, settings.iterations, settings.length_beam))
    return results


def write_hypotheses(results: list[DecodeResult], vocab, path) -> None:
    """One hypothesis per line, tokens space-separated, input order."""
    from pathlib import Path

    lines = [" ".join(vocab.decode(r.tokens)) for r in results]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_trace(results: list[DecodeResult], path) -> None:
    """Line-delimited trace records, one JSON object per decoded sentence."""
    import json
    from pathlib import Path

    lines = []
    for i, r in enumerate(results):
        rec = {
            "index": i,
            "score_policy": r.score_policy,
            "chosen_index": r.chosen_index,
            "candidates": [
                {"length": c.length, "tokens": list(c.tokens), "mean_logprob": c.mean_logprob}
                for c in r.candidates
            ],
            "iterations": [
                {
                    "masked_positions": list(s.masked_positions),
                    "predictions": list(s.predictions),
                }
                for s in r.iteration_trace
            ],
        }
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
