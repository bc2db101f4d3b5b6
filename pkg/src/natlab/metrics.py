"""Quality and weakness metrics: corpus BLEU, repetition ratio, word
accuracy. All metrics are pure functions over token sequences (ids or
strings) and are bitwise-deterministic for equal inputs."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass


@dataclass
class MetricsReport:
    model_tag: str
    dataset_tag: str
    seed: int
    bleu: float | None = None
    repetition_ratio: float | None = None
    word_accuracy_f: float | None = None
    perplexity: float | None = None

    def __post_init__(self):
        checks = [
            ("bleu", self.bleu, 0.0, 100.0),
            ("repetition_ratio", self.repetition_ratio, 0.0, 1.0),
            ("word_accuracy_f", self.word_accuracy_f, 0.0, 1.0),
        ]
        for name, val, lo, hi in checks:
            if val is not None and not (math.isfinite(val) and lo <= val <= hi):
                raise ValueError(f"MetricsReport.{name}={val} outside [{lo}, {hi}]")
        if self.perplexity is not None and not (
            math.isfinite(self.perplexity) and self.perplexity >= 1.0
        ):
            raise ValueError(f"MetricsReport.perplexity={self.perplexity} must be >= 1")

    def to_record(self) -> dict:
        rec = {"kind": "metrics", "model": self.model_tag, "dataset": self.dataset_tag,
               "seed": self.seed}
        for name in ("bleu", "repetition_ratio", "word_accuracy_f", "perplexity"):
            val = getattr(self, name)
            if val is not None:
                rec[name] = val
        return rec


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, references, max_order: int = 4) -> float:
    """Corpus-level BLEU-4 with brevity penalty, in [0, 100].

    Modified n-gram precisions are clipped per sentence and aggregated over
    the corpus. Orders with zero matches get add-1 smoothing on both counts
    (short synthetic sentences would otherwise zero the score).
    """
    if len(hypotheses) != len(references):
        raise ValueError(
            f"corpus_bleu: {len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if not hypotheses:
        raise ValueError("corpus_bleu: empty corpus")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = 0
    ref_len = 0
    for i, (hyp, ref) in enumerate(zip(hypotheses, references)):
        hyp, ref = list(hyp), list(ref)
        if not ref:
            raise ValueError(f"corpus_bleu: reference {i} is empty")
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            hc = _ngrams(hyp, n)
            if not hc:
                continue
            rc = _ngrams(ref, n)
            totals[n - 1] += sum(hc.values())
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(max_order):
        m, t = matches[n], totals[n]
        if m == 0:
            m, t = m + 1, t + 1
        log_sum += math.log(m / t)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_sum / max_order)


def repetition_ratio(hypotheses) -> float:
    """Fraction of tokens equal to their immediate predecessor, corpus-wide."""
    repeats = 0
    total = 0
    for hyp in hypotheses:
        hyp = list(hyp)
        total += len(hyp)
        repeats += sum(1 for a, b in zip(hyp, hyp[1:]) if a == b)
    return repeats / total if total else 0.0


def word_accuracy(hypotheses, references) -> float:
    """Micro-averaged F-measure of output word counts vs the reference.

    Matches are clipped per sentence: sum_w min(count_hyp(w), count_ref(w)).
    Symmetric under hyp/ref exchange.
    """
    if len(hypotheses) != len(references):
        raise ValueError(
            f"word_accuracy: {len(hypotheses)} hypotheses vs {len(references)} references"
        )
    match = 0
    hyp_total = 0
    ref_total = 0
    for hyp, ref in zip(hypotheses, references):
        hc, rc = Counter(hyp), Counter(ref)
        hyp_total += sum(hc.values())
        ref_total += sum(rc.values())
        match += sum(min(c, rc[w]) for w, c in hc.items())
    if hyp_total == 0 or ref_total == 0 or match == 0:
        return 0.0
    p = match / hyp_total
    r = match / ref_total
    return 2.0 * p * r / (p + r)


def word_accuracy_buckets(hypotheses, references, edges=(1, 2, 4, 8, 16)) -> dict[str, float]:
    """Supplementary per-frequency-bucket F-measure (reference frequency)."""
    freq: Counter = Counter()
    for ref in references:
        freq.update(ref)

    def bucket(w) -> str:
        f = freq[w]
        for e in edges:
            if f <= e:
                return f"<={e}"
        return f">{edges[-1]}"

    match: Counter = Counter()
    hyp_total: Counter = Counter()
    ref_total: Counter = Counter()
    for hyp, ref in zip(hypotheses, references):
        hc, rc = Counter(hyp), Counter(ref)
        for w, c in hc.items():
            hyp_total[bucket(w)] += c
            match[bucket(w)] += min(c, rc[w])
        for w, c in rc.items():
            ref_total[bucket(w)] += c
    out = {}
    for b in sorted(set(hyp_total) | set(ref_total)):
        m, ht, rt = match[b], hyp_total[b], ref_total[b]
        if m == 0 or ht == 0 or rt == 0:
            out[b] = 0.0
        else:
            p, r = m / ht, m / rt
            out[b] = 2 * p * r / (p + r)
    return out
