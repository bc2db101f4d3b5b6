"""Markdown report rendering over the line-delimited record files.

Four table shapes are supported: quality (model/size/BLEU), weakness
(repetition / perplexity / word accuracy with deltas against the first
model), speed (absolute rates plus ratios over the first model), and the
cone comparison (speedup / size / BLEU). Rendering is deterministic:
identical records give byte-identical markdown.
"""

from __future__ import annotations

import json
from pathlib import Path

REPORT_STYLES = ("table1", "table3", "table4", "table7")

_REQUIRED = {
    "table1": ("bleu", "size"),
    "table3": ("repetition_ratio", "perplexity", "word_accuracy_f"),
    "table4": ("speed1", "speedmax"),
    "table7": ("speedmax", "size", "bleu"),
}


def load_records(paths) -> list[dict]:
    records = []
    for path in paths:
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                records.append(json.loads(line))
    return records


def _by_model(records: list[dict]) -> tuple[list[str], dict[str, dict]]:
    """Merge records per model tag, first-seen order."""
    order: list[str] = []
    merged: dict[str, dict] = {}
    for rec in records:
        tag = rec.get("model")
        if tag is None:
            continue
        if tag not in merged:
            merged[tag] = {}
            order.append(tag)
        merged[tag].update({k: v for k, v in rec.items() if k not in ("kind", "model")})
    return order, merged


def _need(merged: dict, order: list[str], style: str) -> None:
    for tag in order:
        for field in _REQUIRED[style]:
            if field not in merged[tag]:
                raise ValueError(f"report style {style}: model {tag!r} is missing metric {field!r}")


def render_report(records: list[dict], style: str) -> str:
    """Render one markdown table from parsed records."""
    if style not in REPORT_STYLES:
        raise ValueError(f"unknown report style {style!r}; expected one of {REPORT_STYLES}")
    order, merged = _by_model(records)
    if not order:
        raise ValueError("render_report: no model records to render")
    _need(merged, order, style)

    if style == "table1":
        lines = ["| Model | Size | BLEU |", "| --- | ---: | ---: |"]
        for tag in order:
            m = merged[tag]
            lines.append(f"| {tag} | {m['size']} | {m['bleu']:.1f} |")
    elif style == "table3":
        base = merged[order[0]]
        lines = [
            "| Model | Repetition | Δ | PPL | Δ | WA | Δ |",
            "| --- | ---: | ---: | ---: | ---: | ---: | ---: |",
        ]
        for i, tag in enumerate(order):
            m = merged[tag]
            rep = m["repetition_ratio"] * 100
            ppl = m["perplexity"]
            wa = m["word_accuracy_f"] * 100
            if i == 0:
                deltas = ("-", "-", "-")
            else:
                deltas = (
                    f"{rep - base['repetition_ratio'] * 100:+.2f}%",
                    f"{ppl - base['perplexity']:+.1f}",
                    f"{wa - base['word_accuracy_f'] * 100:+.2f}%",
                )
            lines.append(
                f"| {tag} | {rep:.2f}% | {deltas[0]} | {ppl:.1f} | {deltas[1]} "
                f"| {wa:.2f}% | {deltas[2]} |"
            )
    elif style == "table4":
        base = merged[order[0]]
        lines = [
            "| Model | Speed1 | Ratio | Speedmax | Ratio |",
            "| --- | ---: | ---: | ---: | ---: |",
        ]
        for tag in order:
            m = merged[tag]
            r1 = m["speed1"] / base["speed1"]
            rmax = m["speedmax"] / base["speedmax"]
            lines.append(
                f"| {tag} | {m['speed1']:.2f} | {r1:.2f}x | {m['speedmax']:.2f} | {rmax:.2f}x |"
            )
    else:  # table7
        base = merged[order[0]]
        lines = ["| Model | Speed | Size | BLEU |", "| --- | ---: | ---: | ---: |"]
        for tag in order:
            m = merged[tag]
            ratio = m["speedmax"] / base["speedmax"]
            lines.append(f"| {tag} | {ratio:.2f}x | {m['size']} | {m['bleu']:.1f} |")
    return "\n".join(lines) + "\n"


def render_report_files(paths, style: str) -> str:
    return render_report(load_records(paths), style)
