"""Experiment pipeline: staged artifacts with config-hash caching.

Each stage writes under <out_dir>/<stage>/<hash12>/ where the hash covers
exactly the configuration slice (plus upstream hashes) that determines the
stage's output. Reruns with an equal config skip completed stages; sweeps
that share data / teacher / KD corpus reuse those directories. Every stage
directory carries a stamp.json recording the full config hash and seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import data as dt
from . import decoding as D
from . import model as M
from . import probes as P
from . import speed as S
from . import training as T
from .lm import LMConfig, init_lm, lm_perplexity, load_lm, save_lm, train_lm
from .metrics import MetricsReport, corpus_bleu, repetition_ratio, word_accuracy

STAGES = ("data", "teacher", "distill", "model", "decode", "lm", "evaluate", "probe", "bench")

MODEL_KIND_ALIASES = {"at": T.KIND_AT, "maskt": T.KIND_CMLM, "cmlm": T.KIND_CMLM, "glat": T.KIND_GLAT}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class TaskSection:
    content_vocab_size: int = 60
    min_len: int = 4
    max_len: int = 13
    modes: int = 4
    synonym_weight: float = 0.4
    reorder_weight: float = 0.6
    corpus_size: int = 2048
    occurrences_per_source: int = 8

    def to_spec(self, seed: int) -> dt.SyntheticTaskSpec:
        return dt.SyntheticTaskSpec(
            content_vocab_size=self.content_vocab_size,
            min_len=self.min_len,
            max_len=self.max_len,
            modes_per_source=self.modes,
            synonym_weight=self.synonym_weight,
            reorder_weight=self.reorder_weight,
            corpus_size=self.corpus_size,
            seed=seed,
            occurrences_per_source=self.occurrences_per_source,
        )


@dataclass(frozen=True)
class TrainSection:
    steps: int = 800
    tokens_per_batch: int = 1024
    warmup_steps: int = 100
    peak_lr: float = 5e-3
    label_smoothing: float = 0.1
    glancing_start: float = 0.5
    glancing_end: float = 0.3
    length_loss_weight: float = 0.1
    validation_interval: int = 200
    checkpoints_to_average: int = 1

    def to_config(self, seed: int) -> T.TrainConfig:
        return T.TrainConfig(seed=seed, **asdict(self))


@dataclass(frozen=True)
class DecodeSection:
    iterations: int = 10
    length_beam: int = 5
    beam: int = 1
    trace: bool = False


@dataclass(frozen=True)
class EvalSection:
    bleu: bool = True
    repetition: bool = True
    word_accuracy: bool = True
    perplexity: bool = True
    lm_steps: int = 400


@dataclass(frozen=True)
class SpeedSection:
    token_budget: int = 4096
    warmup_runs: int = 2
    measured_runs: int = 3


@dataclass(frozen=True)
class ProbeSection:
    examples: int = 600
    steps: int = 400
    wc_candidates: int = 4


@dataclass(frozen=True)
class PipelineConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    model: str = "glat"               # at | maskt | glat
    preset: str = "base"
    arch: dict | None = None          # explicit ArchConfig fields override preset
    train_on: str = "kd"              # raw | kd
    task: TaskSection = field(default_factory=TaskSection)
    train: TrainSection = field(default_factory=TrainSection)
    teacher_train: TrainSection = field(default_factory=TrainSection)
    teacher_preset: str = "base"
    distill_beam: int = 1
    decode: DecodeSection = field(default_factory=DecodeSection)
    eval: EvalSection = field(default_factory=EvalSection)
    speed: SpeedSection = field(default_factory=SpeedSection)
    probe: ProbeSection = field(default_factory=ProbeSection)

    def __post_init__(self):
        if self.model not in MODEL_KIND_ALIASES:
            raise ValueError(f"model must be one of {sorted(MODEL_KIND_ALIASES)}, got {self.model!r}")
        if self.train_on not in ("raw", "kd"):
            raise ValueError(f"train_on must be 'raw' or 'kd', got {self.train_on!r}")
        if self.arch is None and self.preset not in M.PRESET_NAMES:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.teacher_preset not in M.PRESET_NAMES:
            raise ValueError(f"unknown teacher preset {self.teacher_preset!r}")

    # -- derived ------------------------------------------------------------

    @property
    def training_kind(self) -> str:
        return MODEL_KIND_ALIASES[self.model]

    @property
    def model_tag(self) -> str:
        arch = self.preset if self.arch is None else "custom"
        return f"{self.model}-{arch}-{self.train_on}"

    def task_spec(self) -> dt.SyntheticTaskSpec:
        return self.task.to_spec(self.seed)

    def arch_config(self, vocab_size: int, max_len: int) -> M.ArchConfig:
        if self.arch is not None:
            fields = dict(self.arch)
            fields.setdefault("vocab_size", vocab_size)
            fields.setdefault("max_len", max_len)
            return M.ArchConfig(**fields)
        return M.arch_preset(self.preset, vocab_size=vocab_size, max_len=max_len)

    def teacher_arch_config(self, vocab_size: int, max_len: int) -> M.ArchConfig:
        return M.arch_preset(self.teacher_preset, vocab_size=vocab_size, max_len=max_len)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_hash(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


# ---------------------------------------------------------------------------
# Config file parsing: dotted key = value lines with full defaulting
# ---------------------------------------------------------------------------

_SECTIONS = {
    "task": TaskSection,
    "train": TrainSection,
    "teacher_train": TrainSection,
    "decode": DecodeSection,
    "eval": EvalSection,
    "speed": SpeedSection,
    "probe": ProbeSection,
}

_TOP_KEYS = {
    "out_dir": str, "seed": int, "model": str, "preset": str, "train_on": str,
    "teacher_preset": str, "distill_beam": int,
}

_ARCH_KEYS = {f.name: f.type for f in dataclasses.fields(M.ArchConfig)}


def _coerce(raw: str, typ) -> object:
    if typ is bool or typ == "bool":
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if typ is int or typ == "int":
        return int(raw)
    if typ is float or typ == "float":
        return float(raw)
    return raw


def parse_config_text(text: str) -> PipelineConfig:
    top: dict = {}
    sections: dict[str, dict] = {name: {} for name in _SECTIONS}
    arch: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if "." in key:
            section, sub = key.split(".", 1)
            if section == "arch":
                if sub not in _ARCH_KEYS:
                    raise ValueError(f"config line {lineno}: unknown arch field {sub!r}")
                arch[sub] = _coerce(raw, _ARCH_KEYS[sub])
            elif section in _SECTIONS:
                fields = {f.name: f.type for f in dataclasses.fields(_SECTIONS[section])}
                if sub not in fields:
                    raise ValueError(f"config line {lineno}: unknown key {key!r}")
                sections[section][sub] = _coerce(raw, fields[sub])
            else:
                raise ValueError(f"config line {lineno}: unknown section {section!r}")
        else:
            if key not in _TOP_KEYS:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            top[key] = _coerce(raw, _TOP_KEYS[key])
    kwargs = dict(top)
    for name, cls in _SECTIONS.items():
        kwargs[name if name != "eval" else "eval"] = cls(**sections[name])
    if arch:
        kwargs["arch"] = arch
    return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Stage runner
# ---------------------------------------------------------------------------


class Pipeline:
    """Binds a PipelineConfig to an output directory and runs stages."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = Path(config.out_dir)
        self.full_hash = config_hash(config.to_dict())
        self.ran: dict[str, str] = {}
        self._hashes: dict[str, str] = {}
        self._cache: dict[str, object] = {}

    # -- stage hashing -------------------------------------------------------

    def stage_hash(self, stage: str) -> str:
        if stage in self._hashes:
            return self._hashes[stage]
        cfg = self.config
        deps: dict = {"stage": stage, "seed": cfg.seed}
        if stage == "data":
            deps["task"] = asdict(cfg.task)
        elif stage == "teacher":
            deps["data"] = self.stage_hash("data")
            deps["train"] = asdict(cfg.teacher_train)
            deps["preset"] = cfg.teacher_preset
        elif stage == "distill":
            deps["teacher"] = self.stage_hash("teacher")
            deps["beam"] = cfg.distill_beam
        elif stage == "model":
            deps["source"] = self.stage_hash("distill" if cfg.train_on == "kd" else "data")
            deps["train"] = asdict(cfg.train)
            deps["arch"] = cfg.arch if cfg.arch is not None else cfg.preset
            deps["kind"] = cfg.training_kind
        elif stage == "decode":
            deps["model"] = self.stage_hash("model")
            deps["decode"] = asdict(cfg.decode)
        elif stage == "lm":
            deps["data"] = self.stage_hash("data")
            deps["lm_steps"] = cfg.eval.lm_steps
        elif stage == "evaluate":
            deps["decode"] = self.stage_hash("decode")
            deps["lm"] = self.stage_hash("lm") if cfg.eval.perplexity else None
            deps["eval"] = asdict(cfg.eval)
            deps["tag"] = cfg.model_tag
        elif stage == "probe":
            deps["model"] = self.stage_hash("model")
            deps["probe"] = asdict(cfg.probe)
        elif stage == "bench":
            deps["model"] = self.stage_hash("model")
            deps["decode"] = asdict(cfg.decode)
            deps["speed"] = asdict(cfg.speed)
        else:
            raise ValueError(f"unknown stage {stage!r}")
        h = config_hash(deps)
        self._hashes[stage] = h
        return h

    def stage_dir(self, stage: str) -> Path:
        return self.out / stage / self.stage_hash(stage)[:12]

    def _stamp(self, stage: str, extra: dict | None = None) -> None:
        d = self.stage_dir(stage)
        rec = {
            "stage": stage,
            "stage_hash": self.stage_hash(stage),
            "config_hash": self.full_hash,
            "seed": self.config.seed,
        }
        if extra:
            rec.update(extra)
        (d / "stamp.json").write_text(json.dumps(rec, sort_keys=True, indent=1), encoding="utf-8")

    def _complete(self, stage: str) -> bool:
        stamp = self.stage_dir(stage) / "stamp.json"
        if not stamp.exists():
            return False
        try:
            rec = json.loads(stamp.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            return False
        return rec.get("stage_hash") == self.stage_hash(stage)

    def run(self, stages, force: bool = False) -> dict[str, str]:
        """Execute stages (dependencies included) in order; returns
        {stage: 'ran'|'skipped'}."""
        want: list[str] = []
        for s in stages:
            for dep in self._with_deps(s):
                if dep not in want:
                    want.append(dep)
        for stage in want:
            if not force and self._complete(stage):
                self.ran[stage] = "skipped"
                continue
            d = self.stage_dir(stage)
            d.mkdir(parents=True, exist_ok=True)
            try:
                getattr(self, f"_run_{stage}")()
            except Exception as exc:
                failed = d / "FAILED.json"
                failed.write_text(
                    json.dumps({"stage": stage, "error": str(exc)}, sort_keys=True),
                    encoding="utf-8",
                )
                raise StageError(stage, exc) from exc
            self.ran[stage] = "ran"
        return dict(self.ran)

    def _with_deps(self, stage: str) -> list[str]:
        deps = {
            "data": [],
            "teacher": ["data"],
            "distill": ["teacher"],
            "model": ["data"] if self.config.train_on == "raw" else ["distill"],
            "decode": ["model"],
            "lm": ["data"],
            "evaluate": ["decode"] + (["lm"] if self.config.eval.perplexity else []),
            "probe": ["model"],
            "bench": ["model"],
        }
        out: list[str] = []

        def visit(s: str):
            for d in deps[s]:
                visit(d)
            if s not in out:
                out.append(s)

        visit(stage)
        return out

    # -- artifact loading ------------------------------------------------------

    def corpora(self):
        key = "corpora"
        if key not in self._cache:
            d = self.stage_dir("data")
            vocab = dt.Vocab.load(d / "vocab.txt")
            spec = self.config.task_spec()
            corpora = []
            for split in ("train", "valid", "test"):
                corpus, _ = dt.load_corpus(d / f"{split}.tsv", vocab, max_len=spec.max_len)
                corpora.append(corpus)
            self._cache[key] = tuple(corpora)
        return self._cache[key]

    def kd_corpus(self):
        key = "kd"
        if key not in self._cache:
            train, _, _ = self.corpora()
            corpus, _ = dt.load_corpus(
                self.stage_dir("distill") / "train.tsv", train.src_vocab, max_len=train.max_len
            )
            self._cache[key] = corpus
        return self._cache[key]

    def model(self) -> M.TransformerModel:
        key = "model"
        if key not in self._cache:
            self._cache[key] = M.load_model(self.stage_dir("model") / "checkpoint.bin")
        return self._cache[key]

    def seq_max_len(self) -> int:
        # room for task sentences plus shift/EOS column
        return self.config.task.max_len + 2

    # -- stages ---------------------------------------------------------------

    def _run_data(self):
        d = self.stage_dir("data")
        spec = self.config.task_spec()
        train, valid, test = dt.generate_synthetic_corpus(spec)
        train.src_vocab.save(d / "vocab.txt")
        dt.save_corpus(train, d / "train.tsv")
        dt.save_corpus(valid, d / "valid.tsv")
        dt.save_corpus(test, d / "test.tsv")
        modes = dt.count_modes(train)
        self._stamp("data", {"n_train": len(train), "mode_mean": modes.mean})

    def _run_teacher(self):
        d = self.stage_dir("teacher")
        train, valid, _ = self.corpora()
        cfg = self.config.teacher_arch_config(len(train.src_vocab), self.seq_max_len())
        teacher = M.init_model(cfg, M.AT, seed=self.config.seed)
        result = T.train_model(
            teacher, T.KIND_AT, train, valid, self.config.teacher_train.to_config(self.config.seed)
        )
        M.save_model(teacher, d / "checkpoint.bin")
        _write_jsonl(d / "log.jsonl", result.log)
        self._cache["teacher"] = teacher
        self._stamp("teacher", {"val_bleu": result.history[-1].val_bleu})

    def _run_distill(self):
        d = self.stage_dir("distill")
        train, _, _ = self.corpora()
        teacher = self._cache.get("teacher")
        if teacher is None:
            teacher = M.load_model(self.stage_dir("teacher") / "checkpoint.bin")
        kd = T.distill_corpus(teacher, train, beam=self.config.distill_beam)
        dt.save_corpus(kd, d / "train.tsv")
        self._stamp("distill", {"mode_mean": dt.count_modes(kd).mean})

    def _run_model(self):
        d = self.stage_dir("model")
        train, valid, _ = self.corpora()
        corpus = self.kd_corpus() if self.config.train_on == "kd" else train
        cfg = self.config.arch_config(len(train.src_vocab), self.seq_max_len())
        kind = self.config.training_kind
        model = M.init_model(cfg, T.MODEL_KINDS[kind], seed=self.config.seed)
        result = T.train_model(model, kind, corpus, valid, self.config.train.to_config(self.config.seed))
        M.save_model(model, d / "checkpoint.bin")
        _write_jsonl(d / "log.jsonl", result.log)
        self._cache["model"] = model
        self._stamp("model", {"val_bleu": result.history[-1].val_bleu, "params": M.param_count(cfg)})

    def _decode_settings(self) -> D.DecodeSettings:
        dc = self.config.decode
        return D.DecodeSettings(
            iterations=dc.iterations, length_beam=dc.length_beam, beam=dc.beam,
            max_len=self.seq_max_len(),
        )

    def _run_decode(self):
        d = self.stage_dir("decode")
        _, _, test = self.corpora()
        model = self.model()
        results = D.decode_corpus(model, test.sources(), self._decode_settings())
        D.write_hypotheses(results, test.tgt_vocab, d / "test.hyp.txt")
        if self.config.decode.trace:
            D.write_trace(results, d / "test.trace.jsonl")
        self._stamp("decode")

    def _run_lm(self):
        d = self.stage_dir("lm")
        train, _, _ = self.corpora()
        lm = init_lm(
            LMConfig(vocab_size=len(train.src_vocab), max_len=self.seq_max_len()),
            seed=self.config.seed,
        )
        train_lm(lm, train.targets(), steps=self.config.eval.lm_steps, seed=self.config.seed)
        save_lm(lm, d / "lm.bin")
        self._stamp("lm")

    def _run_evaluate(self):
        d = self.stage_dir("evaluate")
        _, _, test = self.corpora()
        hyp_path = self.stage_dir("decode") / "test.hyp.txt"
        hyps = [
            tuple(test.tgt_vocab.encode(line.split()))
            for line in hyp_path.read_text(encoding="utf-8").splitlines()
        ]
        refs = test.targets()
        ev = self.config.eval
        kw: dict = {}
        if ev.bleu:
            kw["bleu"] = corpus_bleu(hyps, refs)
        if ev.repetition:
            kw["repetition_ratio"] = repetition_ratio(hyps)
        if ev.word_accuracy:
            kw["word_accuracy_f"] = word_accuracy(hyps, refs)
        if ev.perplexity:
            lm = load_lm(self.stage_dir("lm") / "lm.bin")
            kw["perplexity"] = lm_perplexity(lm, hyps).perplexity
        report = MetricsReport(
            model_tag=self.config.model_tag, dataset_tag=f"synthetic-m{self.config.task.modes}",
            seed=self.config.seed, **kw,
        )
        records = [
            {"kind": "model", "model": self.config.model_tag,
             "size": M.param_count(self.model().config), "config_hash": self.full_hash},
            {**report.to_record(), "config_hash": self.full_hash},
        ]
        _write_jsonl(d / "metrics.jsonl", records)
        self._stamp("evaluate")

    def _run_probe(self):
        d = self.stage_dir("probe")
        model = self.model()
        spec = self.config.task_spec()
        pc = self.config.probe
        records = []
        selen = P.run_probe(
            model, P.SELEN, P.selen_dataset(spec, pc.examples, seed=self.config.seed),
            seed=self.config.seed, steps=pc.steps,
        )
        wc = P.run_probe(
            model, P.WC,
            P.wc_dataset(spec, pc.examples, seed=self.config.seed, n_candidates=pc.wc_candidates),
            seed=self.config.seed, steps=pc.steps,
        )
        for rep in (selen, wc):
            records.append({**rep.to_record(), "model": self.config.model_tag,
                            "config_hash": self.full_hash})
        _write_jsonl(d / "probes.jsonl", records)
        self._stamp("probe")

    def _run_bench(self):
        d = self.stage_dir("bench")
        _, _, test = self.corpora()
        model = self.model()
        sentences = test.sources()
        sp = self.config.speed
        settings = self._decode_settings()
        r1 = S.measure_speed1(
            model, settings, sentences, model_tag=self.config.model_tag,
            warmup_runs=sp.warmup_runs, measured_runs=sp.measured_runs,
        )
        rmax = S.measure_speedmax(
            model, settings, sentences, sp.token_budget, model_tag=self.config.model_tag,
            warmup_runs=sp.warmup_runs, measured_runs=sp.measured_runs,
        )
        merged = S.merge_reports(r1, rmax)
        _write_jsonl(d / "speed.jsonl", [{**merged.to_record(), "config_hash": self.full_hash}])
        self._stamp("bench")


def _write_jsonl(path, records) -> None:
    Path(path).write_text(
        "\n".join(json.dumps(r, sort_keys=True) for r in records) + "\n", encoding="utf-8"
    )


def run_pipeline(config: PipelineConfig, stages=("evaluate",), force: bool = False) -> dict[str, str]:
    """Run the requested stages (plus dependencies); returns per-stage status."""
    return Pipeline(config).run(stages, force=force)
