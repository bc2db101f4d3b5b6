"""Synthetic multimodal translation tasks, vocabulary, corpus I/O, batching.

The task is word-level translation with a controllable number of modes per
source sentence: every source token belongs to a synonym class on the target
side, and each distinct source gets m valid renderings built from full
synonym redraws and/or adjacent-token swaps. Training occurrences of a
source sample one rendering uniformly; validation and test references are
the canonical rendering (class member 0, source order), so single-reference
scores are stable.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD, BOS, EOS, MASK, UNK = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<bos>", "<eos>", "<mask>", "<unk>")

_MIN_SOURCE_TYPES = 4


class Vocab:
    """Token/id mapping with fixed reserved ids 0..4 (PAD BOS EOS MASK UNK)."""

    def __init__(self, content_tokens):
        tokens = list(RESERVED) + list(content_tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, tokens) -> tuple[int, ...]:
        return tuple(self._ids.get(t, UNK) for t in tokens)

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[: len(RESERVED)] != list(RESERVED):
            raise ValueError(f"{path}: reserved tokens missing or reordered")
        return cls(lines[len(RESERVED) :])


def build_vocab(text, max_size: int) -> Vocab:
    """Frequency-sorted vocabulary, ties broken lexicographically.

    `text` is either a whitespace-tokenized string or an iterable of such
    strings. max_size counts the five reserved tokens.
    """
    if isinstance(text, str):
        text = [text]
    counts: Counter[str] = Counter()
    for line in text:
        counts.update(line.split())
    if not counts:
        raise ValueError("build_vocab: empty corpus")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    capacity = max(0, max_size - len(RESERVED))
    return Vocab([tok for tok, _ in ordered[:capacity]])


@dataclass
class ParallelCorpus:
    """Aligned source/target token-id sequences sharing a vocabulary."""

    pairs: list[tuple[tuple[int, ...], tuple[int, ...]]]
    src_vocab: Vocab
    tgt_vocab: Vocab
    max_len: int

    def __post_init__(self):
        for i, (src, tgt) in enumerate(self.pairs):
            if not src or not tgt:
                raise ValueError(f"corpus pair {i}: empty sequence")
            if len(src) > self.max_len or len(tgt) > self.max_len:
                raise ValueError(f"corpus pair {i}: sequence longer than max_len={self.max_len}")
            if max(src) >= len(self.src_vocab) or max(tgt) >= len(self.tgt_vocab):
                raise ValueError(f"corpus pair {i}: token id outside vocabulary")

    @property
    def size(self) -> int:
        return len(self.pairs)

    def __len__(self):
        return len(self.pairs)

    def sources(self) -> list[tuple[int, ...]]:
        return [src for src, _ in self.pairs]

    def targets(self) -> list[tuple[int, ...]]:
        return [tgt for _, tgt in self.pairs]


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Parameters of the synthetic multimodal task.

    content_vocab_size is the total content-token budget shared by both
    sides: with synonym classes of size C, each source type costs 1 + C
    entries, so the number of source types is content_vocab_size // (1 + C).
    """

    content_vocab_size: int
    min_len: int
    max_len: int
    modes_per_source: int
    synonym_weight: float = 0.5
    reorder_weight: float = 0.5
    corpus_size: int = 2048
    seed: int = 0
    forbid_adjacent_duplicates: bool = True
    occurrences_per_source: int = 8

    def __post_init__(self):
        if self.modes_per_source < 1:
            raise ValueError("modes_per_source must be >= 1")
        if self.occurrences_per_source < 1:
            raise ValueError("occurrences_per_source must be >= 1")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError(f"bad length range ({self.min_len}, {self.max_len})")
        if self.synonym_weight < 0 or self.reorder_weight < 0:
            raise ValueError("mechanism weights must be nonnegative")
        if abs(self.synonym_weight + self.reorder_weight - 1.0) > 1e-9:
            raise ValueError("mechanism weights must sum to 1")
        if self.corpus_size < 1:
            raise ValueError("corpus_size must be >= 1")
        if self.synonym_weight == 0.0 and self.modes_per_source > self.min_len:
            raise ValueError(
                "reordering alone cannot guarantee "
                f"{self.modes_per_source} modes at min_len={self.min_len}"
            )

    @property
    def class_size(self) -> int:
        if self.modes_per_source > 1 and self.synonym_weight > 0:
            return self.modes_per_source
        return 1

    @property
    def n_source_types(self) -> int:
        return self.content_vocab_size // (1 + self.class_size)

    def validate_budget(self) -> None:
        need = _MIN_SOURCE_TYPES * (1 + self.class_size)
        if self.n_source_types < _MIN_SOURCE_TYPES:
            raise ValueError(
                f"content_vocab_size={self.content_vocab_size} too small for "
                f"m={self.modes_per_source} synonym classes; need at least {need}"
            )


def task_vocab(spec: SyntheticTaskSpec) -> Vocab:
    """Shared vocabulary: source types s{i}, then class members t{i}.{j}."""
    spec.validate_budget()
    n, c = spec.n_source_types, spec.class_size
    tokens = [f"s{i}" for i in range(n)]
    for i in range(n):
        tokens.extend(f"t{i}.{j}" for j in range(c))
    return Vocab(tokens)


def _source_token_ids(spec: SyntheticTaskSpec) -> np.ndarray:
    return np.arange(len(RESERVED), len(RESERVED) + spec.n_source_types)


def _class_member(spec: SyntheticTaskSpec, src_id: int, member: int) -> int:
    base = len(RESERVED) + spec.n_source_types
    return base + (src_id - len(RESERVED)) * spec.class_size + member


def sample_sources(spec: SyntheticTaskSpec, n: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Draw n distinct source sentences from the task distribution."""
    spec.validate_budget()
    src_ids = _source_token_ids(spec)
    out: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 1000 * n:
            raise ValueError(f"could not generate {n} distinct sources; task space too small")
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        toks = []
        for pos in range(length):
            t = int(rng.choice(src_ids))
            if spec.forbid_adjacent_duplicates:
                while toks and t == toks[-1]:
                    t = int(rng.choice(src_ids))
            toks.append(t)
        sent = tuple(toks)
        if sent not in seen:
            seen.add(sent)
            out.append(sent)
    return out


def _canonical_rendering(spec: SyntheticTaskSpec, source: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(_class_member(spec, s, 0) for s in source)


def _eligible_pairs(spec: SyntheticTaskSpec, source: tuple[int, ...]) -> list[int]:
    """Disjoint adjacent positions whose swap is valid for this source.

    Classes mirror source order, so eligibility is decided on source ids:
    the pair's tokens must differ and, under forbid_adjacent_duplicates, the
    swap must not create an adjacent duplicate.
    """
    toks = list(source)
    n = len(toks)
    pairs = []
    p = 0
    while p < n - 1:
        if toks[p] != toks[p + 1]:
            ok = True
            if spec.forbid_adjacent_duplicates:
                left = toks[p - 1] if p > 0 else None
                right = toks[p + 2] if p + 2 < n else None
                ok = left != toks[p + 1] and right != toks[p]
            if ok:
                pairs.append(p)
                p += 2
                continue
        p += 1
    return pairs


def _balanced_swap_matrix(m: int, n_pairs: int, rng: np.random.Generator) -> np.ndarray:
    """(m, n_pairs) bool; row 0 is all-False (canonical order) and each column
    is True in exactly floor(m/2) of the remaining rows.

    Balancing the two orders of every eligible pair across renderings is
    what makes the target distribution genuinely multimodal: no order has a
    positionwise majority, so a conditionally independent decoder cannot
    resolve it from marginals alone.
    """
    mat = np.zeros((m, n_pairs), dtype=bool)
    for j in range(n_pairs):
        rows = rng.permutation(np.arange(1, m))[: m // 2]
        mat[rows, j] = True
    return mat


def renderings_for_source(spec: SyntheticTaskSpec, source: tuple[int, ...]) -> list[tuple[int, ...]]:
    """The m target renderings of one source, deterministic per (seed, source).

    Rendering 0 is canonical. The other renderings combine the two
    mechanisms: synonym_weight is the per-position probability of re-drawing
    the class member, and reorder_weight > 0 turns on balanced adjacent-pair
    order families over the eligible pairs.
    """
    rng = np.random.default_rng([abs(spec.seed) + 1, 7919, *source])
    canonical = _canonical_rendering(spec, source)
    m = spec.modes_per_source
    if m == 1:
        return [canonical]
    pairs = _eligible_pairs(spec, source) if spec.reorder_weight > 0 else []
    c = spec.class_size

    for _ in range(50):
        swaps = _balanced_swap_matrix(m, len(pairs), rng)
        pool: list[tuple[int, ...]] = [canonical]
        seen = {canonical}
        failed = False
        for k in range(1, m):
            cand = None
            for _ in range(60):
                toks = list(canonical)
                if spec.synonym_weight > 0:
                    for i, s in enumerate(source):
                        if rng.random() < spec.synonym_weight:
                            toks[i] = _class_member(spec, s, int(rng.integers(c)))
                for j, p in enumerate(pairs):
                    if swaps[k, j]:
                        toks[p], toks[p + 1] = toks[p + 1], toks[p]
                trial = tuple(toks)
                if trial not in seen:
                    cand = trial
                    break
            if cand is None:
                failed = True
                break
            seen.add(cand)
            pool.append(cand)
        if not failed:
            return pool
    raise ValueError(
        f"could not build {m} distinct renderings for a length-{len(source)} source; "
        "loosen the task spec (more modes need longer sentences or synonym weight > 0)"
    )


def generate_synthetic_corpus(
    spec: SyntheticTaskSpec,
) -> tuple[ParallelCorpus, ParallelCorpus, ParallelCorpus]:
    """Build (train, valid, test) corpora; splits are disjoint by source.

    Train repeats each of ceil(N / occurrences_per_source) distinct sources
    an equal number of times and samples a rendering uniformly per
    occurrence. Valid/test contain fresh sources paired with their canonical
    rendering.
    """
    spec.validate_budget()
    vocab = task_vocab(spec)
    n_train_distinct = max(1, -(-spec.corpus_size // spec.occurrences_per_source))
    n_heldout = max(8, min(64, n_train_distinct // 2))

    rng = np.random.default_rng([abs(spec.seed) + 1, 104729])
    all_sources = sample_sources(spec, n_train_distinct + 2 * n_heldout, rng)
    train_sources = all_sources[:n_train_distinct]
    val_sources = all_sources[n_train_distinct : n_train_distinct + n_heldout]
    test_sources = all_sources[n_train_distinct + n_heldout :]

    renderings = {s: renderings_for_source(spec, s) for s in train_sources}

    quota, extra = divmod(spec.corpus_size, n_train_distinct)
    occurrences: list[tuple[int, ...]] = []
    for i, s in enumerate(train_sources):
        occurrences.extend([s] * (quota + (1 if i < extra else 0)))
    order = rng.permutation(len(occurrences))
    pairs = []
    for idx in order:
        src = occurrences[int(idx)]
        opts = renderings[src]
        tgt = opts[int(rng.integers(len(opts)))]
        pairs.append((src, tgt))

    def _heldout(sources):
        return [(s, _canonical_rendering(spec, s)) for s in sources]

    mk = lambda p: ParallelCorpus(p, vocab, vocab, max_len=spec.max_len)
    return mk(pairs), mk(_heldout(val_sources)), mk(_heldout(test_sources))


@dataclass
class ModeCount:
    mean: float
    histogram: dict[int, int]


def count_modes(corpus: ParallelCorpus) -> ModeCount:
    """Mean and histogram of distinct targets per distinct source (exact grouping)."""
    groups: dict[tuple[int, ...], set[tuple[int, ...]]] = {}
    for src, tgt in corpus.pairs:
        groups.setdefault(src, set()).add(tgt)
    hist: dict[int, int] = {}
    for targets in groups.values():
        hist[len(targets)] = hist.get(len(targets), 0) + 1
    mean = sum(k * v for k, v in hist.items()) / max(1, len(groups))
    return ModeCount(mean=mean, histogram=dict(sorted(hist.items())))


def encode_batch(sentences, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences with PAD; mask marks real tokens.

    Returns (ids (B, L), mask (B, L)) with L = longest sequence in the batch.
    """
    for i, s in enumerate(sentences):
        if len(s) > max_len:
            raise ValueError(f"sentence {i} has length {len(s)} > max_len={max_len}")
    if not sentences:
        return np.zeros((0, 0), dtype=np.int64), np.zeros((0, 0), dtype=bool)
    width = max(len(s) for s in sentences)
    ids = np.full((len(sentences), width), PAD, dtype=np.int64)
    mask = np.zeros((len(sentences), width), dtype=bool)
    for i, s in enumerate(sentences):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def save_corpus(corpus: ParallelCorpus, path) -> None:
    """One pair per line: source and target tab-separated, tokens space-separated."""
    lines = []
    for src, tgt in corpus.pairs:
        lines.append(
            " ".join(corpus.src_vocab.decode(src)) + "\t" + " ".join(corpus.tgt_vocab.decode(tgt))
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(
    path, src_vocab: Vocab, tgt_vocab: Vocab | None = None, max_len: int = 64
) -> tuple[ParallelCorpus, int]:
    """Read the tab-separated format; out-of-vocabulary tokens map to UNK.

    Returns (corpus, unk_count).
    """
    tgt_vocab = tgt_vocab or src_vocab
    pairs = []
    unk = 0
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{lineno}: expected a tab between source and target")
        src_text, tgt_text = line.split("\t", 1)
        src = src_vocab.encode(src_text.split())
        tgt = tgt_vocab.encode(tgt_text.split())
        unk += sum(1 for i in src if i == UNK) + sum(1 for i in tgt if i == UNK)
        pairs.append((src, tgt))
    return ParallelCorpus(pairs, src_vocab, tgt_vocab, max_len=max_len), unk
