"""Decoding-throughput measurement: single-sentence rate and max-batch rate.

"As large as the hardware allows" is rendered as an explicit token budget: a
batch of k sentences costs k * padded_len * cost_factor budget units, where
the cost factor scales with decoder width relative to the base preset and,
for iterative decoders, with the iteration count (each refinement pass keeps
its own decoder activations resident). The max batch is found by doubling
then bisection with a trial decode at every probe, so the chosen batch
depends only on (budget, lengths, cost factor), never on the clock.

Timing runs must execute without concurrent in-process work; external
machine load invalidates the measurements.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import decoding as D
from . import model as M

BASE_DEC_DIM = 64  # decoder width of the desk-scale base preset


@dataclass
class SpeedReport:
    model_tag: str
    warmup_runs: int
    measured_runs: int
    sentences_per_second_single: float | None = None
    sentences_per_second_max: float | None = None
    max_batch_sentences: int | None = None
    token_budget: int | None = None
    aggregation: str = "median"

    def __post_init__(self):
        if self.measured_runs < 3:
            raise ValueError("SpeedReport: measured_runs must be >= 3")
        for rate in (self.sentences_per_second_single, self.sentences_per_second_max):
            if rate is not None and rate <= 0:
                raise ValueError("SpeedReport: rates must be positive")

    def to_record(self) -> dict:
        rec = {"kind": "speed", "model": self.model_tag, "warmup_runs": self.warmup_runs,
               "measured_runs": self.measured_runs, "aggregation": self.aggregation}
        if self.sentences_per_second_single is not None:
            rec["speed1"] = self.sentences_per_second_single
        if self.sentences_per_second_max is not None:
            rec["speedmax"] = self.sentences_per_second_max
            rec["max_batch"] = self.max_batch_sentences
            rec["token_budget"] = self.token_budget
        return rec


def _decode_batch(model: M.TransformerModel, sentences: list, settings: D.DecodeSettings) -> None:
    if model.decoder_kind == M.AT:
        D.at_greedy_batch(model, sentences, settings.max_len)
    else:
        D.mask_predict_batch(model, sentences, settings.iterations, settings.length_beam)


def decode_cost_factor(model: M.TransformerModel, settings: D.DecodeSettings,
                       base_dec_dim: int = BASE_DEC_DIM) -> float:
    """Budget units per padded token for this model + decode configuration."""
    width = model.config.dec_dim / base_dec_dim
    iters = settings.iterations if model.decoder_kind == M.NAT else 1
    return width * iters


def batch_cost(sentences: list, k: int, factor: float) -> float:
    """Cost of a batch holding the first k (cycled) sentences."""
    lens = [len(sentences[i % len(sentences)]) for i in range(k)]
    return k * max(lens) * factor


def measure_speed1(
    model: M.TransformerModel,
    settings: D.DecodeSettings,
    sentences: list,
    model_tag: str = "model",
    warmup_runs: int = 2,
    measured_runs: int = 3,
) -> SpeedReport:
    """Decode one sentence per call over the set; median sentences/second."""
    if len(sentences) < 20:
        raise ValueError(f"measure_speed1: need >= 20 test sentences, got {len(sentences)}")
    sentences = [tuple(s) for s in sentences]

    def one_pass() -> float:
        t0 = time.perf_counter()
        for i, s in enumerate(sentences):
            try:
                _decode_batch(model, [s], settings)
            except Exception as exc:
                raise RuntimeError(f"decode failed at sentence {i}: {exc}") from exc
        return time.perf_counter() - t0

    for _ in range(warmup_runs):
        one_pass()
    rates = [len(sentences) / one_pass() for _ in range(measured_runs)]
    return SpeedReport(
        model_tag=model_tag,
        warmup_runs=warmup_runs,
        measured_runs=measured_runs,
        sentences_per_second_single=float(np.median(rates)),
    )


def find_max_batch(
    model: M.TransformerModel,
    settings: D.DecodeSettings,
    sentences: list,
    token_budget: int,
    base_dec_dim: int = BASE_DEC_DIM,
    trial_decode: bool = True,
) -> int:
    """Largest sentence count whose cost fits the budget (doubling + bisection)."""
    factor = decode_cost_factor(model, settings, base_dec_dim)
    if batch_cost(sentences, 1, factor) > token_budget:
        raise ValueError(
            f"token budget {token_budget} below the cost of a single sentence "
            f"({batch_cost(sentences, 1, factor):.0f})"
        )

    def fits(k: int) -> bool:
        if batch_cost(sentences, k, factor) > token_budget:
            return False
        if trial_decode:
            batch = [tuple(sentences[i % len(sentences)]) for i in range(k)]
            _decode_batch(model, batch, settings)
        return True

    k = 1
    while fits(2 * k):
        k *= 2
    lo, hi = k, 2 * k  # fits(lo), not fits(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return lo


def measure_speedmax(
    model: M.TransformerModel,
    settings: D.DecodeSettings,
    sentences: list,
    token_budget: int,
    model_tag: str = "model",
    base_dec_dim: int = BASE_DEC_DIM,
    warmup_runs: int = 2,
    measured_runs: int = 3,
) -> SpeedReport:
    """Throughput at the largest batch the budget admits; median over runs."""
    if token_budget < max(len(s) for s in sentences):
        raise ValueError("measure_speedmax: budget below one sentence")
    sentences = [tuple(s) for s in sentences]
    k = find_max_batch(model, settings, sentences, token_budget, base_dec_dim)
    batch = [sentences[i % len(sentences)] for i in range(k)]

    def one_pass() -> float:
        t0 = time.perf_counter()
        _decode_batch(model, batch, settings)
        return time.perf_counter() - t0

    for _ in range(warmup_runs):
        one_pass()
    rates = [k / one_pass() for _ in range(measured_runs)]
    return SpeedReport(
        model_tag=model_tag,
        warmup_runs=warmup_runs,
        measured_runs=measured_runs,
        sentences_per_second_max=float(np.median(rates)),
        max_batch_sentences=k,
        token_budget=token_budget,
    )


def merge_reports(speed1: SpeedReport, speedmax: SpeedReport) -> SpeedReport:
    if speed1.model_tag != speedmax.model_tag:
        raise ValueError("merge_reports: model tags differ")
    return SpeedReport(
        model_tag=speed1.model_tag,
        warmup_runs=speed1.warmup_runs,
        measured_runs=speed1.measured_runs,
        sentences_per_second_single=speed1.sentences_per_second_single,
        sentences_per_second_max=speedmax.sentences_per_second_max,
        max_batch_sentences=speedmax.max_batch_sentences,
        token_budget=speedmax.token_budget,
    )


@dataclass
class SpeedupRow:
    model_tag: str
    speed1_ratio: float | None
    speedmax_ratio: float | None


def speedup_report(reports: list[SpeedReport], baseline_tag: str) -> list[SpeedupRow]:
    """Each model's rate divided by the baseline's, per metric."""
    base = next((r for r in reports if r.model_tag == baseline_tag), None)
    if base is None:
        raise ValueError(f"speedup_report: baseline {baseline_tag!r} not among reports")
    rows = []
    for r in reports:
        s1 = None
        smax = None
        if r.sentences_per_second_single and base.sentences_per_second_single:
            s1 = r.sentences_per_second_single / base.sentences_per_second_single
        if r.sentences_per_second_max and base.sentences_per_second_max:
            smax = r.sentences_per_second_max / base.sentences_per_second_max
        rows.append(SpeedupRow(model_tag=r.model_tag, speed1_ratio=s1, speedmax_ratio=smax))
    return rows
