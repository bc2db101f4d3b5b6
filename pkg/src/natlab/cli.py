"""Command-line pipeline driver.

Subcommands map onto pipeline stages:

    generate-data  build the synthetic corpora
    train          train the configured model (teacher + KD included when needed)
    distill        build the knowledge-distilled corpus
    decode         decode the test split
    evaluate       quality / weakness metrics
    bench-speed    single-sentence and max-batch throughput
    probe          linear probes over the encoder
    report         render a markdown table from record files

Every subcommand takes --config (key = value file); common flags override
config fields. Exit code 0 on success; on stage failure the stage name is
printed to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .pipeline import Pipeline, PipelineConfig, StageError, load_config
from .reports import REPORT_STYLES, render_report_files

_STAGE_OF = {
    "generate-data": "data",
    "train": "model",
    "distill": "distill",
    "decode": "decode",
    "evaluate": "evaluate",
    "bench-speed": "bench",
    "probe": "probe",
}


def _apply_overrides(config: PipelineConfig, args) -> PipelineConfig:
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.preset is not None:
        updates["preset"] = args.preset
    if args.out_dir is not None:
        updates["out_dir"] = args.out_dir
    if getattr(args, "model", None):
        updates["model"] = args.model
    if getattr(args, "train_on", None):
        updates["train_on"] = args.train_on
    decode_updates = {}
    if args.iterations is not None:
        decode_updates["iterations"] = args.iterations
    if args.length_beam is not None:
        decode_updates["length_beam"] = args.length_beam
    if decode_updates:
        updates["decode"] = dataclasses.replace(config.decode, **decode_updates)
    if args.token_budget is not None:
        updates["speed"] = dataclasses.replace(config.speed, token_budget=args.token_budget)
    return dataclasses.replace(config, **updates) if updates else config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="natlab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="key = value config file")
        p.add_argument("--out-dir", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--preset", default=None, help="architecture preset name")
        p.add_argument("--model", default=None, help="at | maskt | glat")
        p.add_argument("--train-on", dest="train_on", default=None, help="raw | kd")
        p.add_argument("--iterations", type=int, default=None, help="mask-predict iterations T")
        p.add_argument("--length-beam", type=int, default=None, help="length beam B")
        p.add_argument("--token-budget", type=int, default=None, help="max-batch token budget")
        p.add_argument("--force", action="store_true", help="rerun completed stages")

    for name in _STAGE_OF:
        p = sub.add_parser(name)
        common(p)

    rep = sub.add_parser("report")
    rep.add_argument("--style", choices=REPORT_STYLES, required=True)
    rep.add_argument("--out", type=Path, default=None, help="write markdown here (default stdout)")
    rep.add_argument("records", nargs="+", type=Path, help="metrics/speed/probe record files")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        try:
            text = render_report_files(args.records, args.style)
        except (ValueError, OSError) as exc:
            print(f"stage 'report' failed: {exc}", file=sys.stderr)
            return 1
        if args.out is not None:
            args.out.write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
        return 0

    config = load_config(args.config) if args.config else PipelineConfig()
    config = _apply_overrides(config, args)
    pipe = Pipeline(config)
    try:
        status = pipe.run([_STAGE_OF[args.command]], force=args.force)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    for stage, what in status.items():
        print(f"{stage}: {what} -> {pipe.stage_dir(stage)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
