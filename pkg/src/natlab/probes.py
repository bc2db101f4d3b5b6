"""Linear probes over frozen encoder representations.

Two synthetic analogues of the standard surface probing tasks:

* selen -- classify sentence length into 5 equal-width buckets; chance 0.2.
* wc    -- given (sentence, candidate word), decide contained / not
           contained on a balanced set; chance 0.5. The probe feature is the
           mean-pooled encoder state concatenated with the candidate word's
           encoder embedding.

The classifier is a single linear layer trained with the in-repo optimizer;
the probed encoder is never updated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import ParameterSet, Tensor
from .data import SyntheticTaskSpec, encode_batch, sample_sources
from .optim import adam_init, adam_step

SELEN = "selen"
WC = "wc"
N_LENGTH_BUCKETS = 5
MIN_EXAMPLES = 100


@dataclass
class ProbeReport:
    task: str
    accuracy: float
    chance: float
    representation: str = "encoder.final.mean_pool"
    n_train: int = 0
    n_test: int = 0

    def to_record(self) -> dict:
        return {
            "kind": "probe",
            "task": self.task,
            "accuracy": self.accuracy,
            "chance": self.chance,
            "representation": self.representation,
        }


def length_bucket(length: int, min_len: int, max_len: int, buckets: int = N_LENGTH_BUCKETS) -> int:
    width = (max_len - min_len + 1) / buckets
    return min(buckets - 1, int((length - min_len) / width))


def selen_dataset(spec: SyntheticTaskSpec, n: int, seed: int = 0) -> list[tuple[tuple[int, ...], int]]:
    """(sentence, length-bucket) pairs from fresh task sources."""
    rng = np.random.default_rng([abs(seed) + 1, 31])
    sources = sample_sources(spec, n, rng)
    return [(s, length_bucket(len(s), spec.min_len, spec.max_len)) for s in sources]


def wc_dataset(
    spec: SyntheticTaskSpec, n: int, seed: int = 0, n_candidates: int = 4
) -> list[tuple[tuple[tuple[int, ...], int], int]]:
    """Balanced ((sentence, candidate word id), contained) pairs.

    Candidates are drawn from a small fixed set of source content words so a
    linear classifier on concatenated features has a usable decision surface.
    """
    rng = np.random.default_rng([abs(seed) + 1, 37])
    sources = sample_sources(spec, n, rng)
    cand_ids = [int(i) for i in np.asarray(
        rng.choice(np.arange(5, 5 + spec.n_source_types), size=min(n_candidates, spec.n_source_types), replace=False)
    )]
    out = []
    for si, s in enumerate(sources):
        want_positive = si % 2 == 0
        present = [c for c in cand_ids if c in s]
        absent = [c for c in cand_ids if c not in s]
        if want_positive and present:
            word = present[int(rng.integers(len(present)))]
            label = 1
        elif not want_positive and absent:
            word = absent[int(rng.integers(len(absent)))]
            label = 0
        elif present:
            word = present[int(rng.integers(len(present)))]
            label = 1
        else:
            word = absent[int(rng.integers(len(absent)))]
            label = 0
        out.append(((s, word), label))
    return out


def _pooled_states(model: M.TransformerModel, sentences: list, batch_size: int = 64) -> np.ndarray:
    feats = []
    with ad.no_grad():
        for lo in range(0, len(sentences), batch_size):
            chunk = sentences[lo : lo + batch_size]
            ids, mask = encode_batch(chunk, model.config.max_len)
            enc = M.encode(model, ids, mask)
            feats.append(ad.mean_pool_masked(enc.states, enc.mask).data.copy())
    return np.concatenate(feats, axis=0)


def _probe_features(model: M.TransformerModel, task: str, labeled: list) -> tuple[np.ndarray, np.ndarray]:
    if task == SELEN:
        sentences = [x for x, _ in labeled]
        labels = np.array([y for _, y in labeled], dtype=np.int64)
        return _pooled_states(model, sentences), labels
    if task == WC:
        sentences = [x[0] for x, _ in labeled]
        words = np.array([x[1] for x, _ in labeled], dtype=np.int64)
        labels = np.array([y for _, y in labeled], dtype=np.int64)
        pooled = _pooled_states(model, sentences)
        emb = model.params["enc.embed"].data[words]
        return np.concatenate([pooled, emb], axis=1), labels
    raise ValueError(f"unknown probe task {task!r}")


def run_probe(
    model: M.TransformerModel,
    task: str,
    labeled: list,
    seed: int = 0,
    train_frac: float = 0.8,
    steps: int = 400,
    lr: float = 0.05,
) -> ProbeReport:
    """Train the linear probe on a split of `labeled` and report held-out
    accuracy with the task's chance level."""
    if len(labeled) < MIN_EXAMPLES:
        raise ValueError(f"run_probe: need at least {MIN_EXAMPLES} labeled examples, got {len(labeled)}")
    n_classes = N_LENGTH_BUCKETS if task == SELEN else 2
    feats, labels = _probe_features(model, task, labeled)

    rng = np.random.default_rng([abs(seed) + 1, 41])
    order = rng.permutation(len(labeled))
    n_train = int(round(train_frac * len(labeled)))
    tr, te = order[:n_train], order[n_train:]
    x_tr, y_tr = feats[tr], labels[tr]
    x_te, y_te = feats[te], labels[te]

    # standardize features on the training split only
    mu = x_tr.mean(axis=0, keepdims=True)
    sd = x_tr.std(axis=0, keepdims=True) + 1e-6
    x_tr = ((x_tr - mu) / sd).astype(np.float32)
    x_te = ((x_te - mu) / sd).astype(np.float32)

    params = ParameterSet(seed=seed)
    init_rng = np.random.default_rng([abs(seed) + 1, 43])
    params.add("w", init_rng.normal(0, 0.01, (feats.shape[1], n_classes)).astype(np.float32))
    params.add("b", np.zeros(n_classes, dtype=np.float32))
    state = adam_init(params)
    xt = Tensor(x_tr)
    for step in range(1, steps + 1):
        params.zero_grad()
        logits = ad.linear(xt, params["w"], params["b"])
        loss = ad.cross_entropy_with_label_smoothing(logits, y_tr, 0.0)
        ad.backward(loss)
        adam_step(params, state, lr)
    with ad.no_grad():
        test_logits = ad.linear(Tensor(x_te), params["w"], params["b"]).data
    acc = float((test_logits.argmax(axis=-1) == y_te).mean())
    return ProbeReport(
        task=task,
        accuracy=acc,
        chance=1.0 / n_classes,
        n_train=len(tr),
        n_test=len(te),
    )
