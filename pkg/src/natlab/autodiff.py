"""Dense float32 tensors with reverse-mode automatic differentiation.

The op set is the minimum a tiny transformer encoder-decoder needs. All
value arrays are float32, row-major; integer side inputs (token ids, class
targets, boolean masks) are plain numpy arrays, never Tensors. Build a
scalar loss, call backward(), read gradients off the leaf tensors.

Graph construction and backward are single-writer; finished tensors are safe
for concurrent read-only use.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

# Additive attention-mask value for hidden positions. exp(-1e9 - max)
# underflows to exactly 0.0 in float32, so masked weights are exact zeros.
NEG_INF = -1e9

_node_ids = itertools.count(1)
_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (decode / oracles)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Float32 array plus optional gradient buffer and tape node."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _record(out: Tensor, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = next(_node_ids)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.astype(DTYPE, copy=False)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class ParameterSet:
    """Ordered name -> Tensor mapping; every entry requires grad.

    Iteration order is insertion order and must be identical across runs with
    the same seed, which makes optimizer updates and checkpoints bit-stable.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._entries.items()

    def n_scalars(self) -> int:
        return sum(t.size for t in self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._entries.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = [k for k in self._entries if k not in state]
        if missing:
            raise ValueError(f"state dict missing parameters: {missing}")
        for k, t in self._entries.items():
            arr = np.asarray(state[k], dtype=DTYPE)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"parameter {k!r}: shape {arr.shape} != expected {t.data.shape}"
                )
            t.data[...] = arr


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product: (..., n, k) @ (..., k, m) -> (..., n, m)."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return [(a, ga), (b, gb)]

    return _record(out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting elementwise sum."""
    try:
        data = a.data + b.data
    except ValueError:
        raise ValueError(f"add_broadcast: shapes {a.shape} and {b.shape} do not broadcast")
    out = Tensor(data)

    def bwd(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting elementwise product."""
    try:
        data = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    out = Tensor(data)

    def bwd(g):
        return [(a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))]

    return _record(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar constant."""
    s = float(s)
    out = Tensor(a.data * np.float32(s))

    def bwd(g):
        return [(a, g * np.float32(s))]

    return _record(out, (a,), bwd)


_relu_trace: list | None = None


def relu(a: Tensor) -> Tensor:
    global _relu_trace
    if _relu_trace is not None:
        _relu_trace.append(a.data > 0)
    out = Tensor(np.maximum(a.data, 0))

    def bwd(g):
        return [(a, g * (a.data > 0))]

    return _record(out, (a,), bwd)


def softmax_lastaxis(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis; rows sum to 1."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return [(a, (g - dot) * y)]

    return _record(out, (a,), bwd)


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    """log softmax over the last axis, computed in float64 for scoring."""
    x = x.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},) for input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bwd(g):
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        dxhat = g * gain.data
        # dL/dx for xhat = (x - mu) * inv with biased variance
        dx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return [(x, dx.astype(DTYPE)), (gain, dgain), (bias, dbias)]

    return _record(out, (x, gain, bias), bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of (V, d) by integer ids; scatter-add on backward."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("embedding_lookup: ids must be an integer array")
    if table.data.ndim != 2:
        raise ValueError(f"embedding_lookup: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"embedding_lookup: id out of range [0, {table.shape[0]}) in lookup of shape {ids.shape}"
        )
    out = Tensor(table.data[ids])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return [(table, gt)]

    return _record(out, (table,), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: (..., n_in) @ (n_in, n_out) + b."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"linear: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y.reshape(*lead, w.shape[1]))

    def bwd(g):
        g2 = g.reshape(-1, w.shape[1])
        grads = [(x, (g2 @ w.data.T).reshape(x.shape)), (w, x2.T @ g2)]
        if b is not None:
            grads.append((b, g2.sum(axis=0)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        return [(x, g.reshape(x.shape))]

    return _record(out, (x,), bwd)


def swap_last_axes(x: Tensor) -> Tensor:
    out = Tensor(x.data.swapaxes(-1, -2).copy())

    def bwd(g):
        return [(x, g.swapaxes(-1, -2))]

    return _record(out, (x,), bwd)


def transpose_2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"transpose_2d: expected 2-d tensor, got {x.shape}")
    return swap_last_axes(x)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate tensors along one axis; backward splits the gradient."""
    if not parts:
        raise ValueError("concat: need at least one tensor")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ValueError(f"concat: shapes {[p.shape for p in parts]} do not align on axis {axis}")
    out = Tensor(data)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        return list(zip(parts, pieces))

    return _record(out, tuple(parts), bwd)


def mean_pool_masked(x: Tensor, mask: np.ndarray) -> Tensor:
    """Masked mean over axis 1: (B, T, d), bool (B, T) -> (B, d)."""
    mask = np.asarray(mask)
    if x.data.ndim != 3 or mask.shape != x.shape[:2]:
        raise ValueError(f"mean_pool_masked: input {x.shape} does not match mask {mask.shape}")
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("mean_pool_masked: a row has no unmasked positions")
    m = mask.astype(DTYPE)[:, :, None]
    inv = (1.0 / counts).astype(DTYPE)[:, None]
    out = Tensor((x.data * m).sum(axis=1) * inv)

    def bwd(g):
        return [(x, (g * inv)[:, None, :] * m)]

    return _record(out, (x,), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(DTYPE) / np.float32(1.0 - rate)
    out = Tensor(x.data * keep)

    def bwd(g):
        return [(x, g * keep)]

    return _record(out, (x,), bwd)


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray | Tensor,
    return_weights: bool = False,
):
    """Attention over the last two axes: (..., Tq, dh) x (..., Tk, dh).

    mask is additive (0 for visible, NEG_INF for hidden) and must broadcast
    against the (..., Tq, Tk) score matrix. Weights at hidden positions are
    exactly 0 after the softmax.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ValueError(
            f"scaled_dot_attention: shapes q={q.shape} k={k.shape} v={v.shape} do not conform"
        )
    mask_t = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=DTYPE))
    scores = scale(matmul(q, swap_last_axes(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = softmax_lastaxis(add(scores, mask_t))
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def cross_entropy_with_label_smoothing(
    logits: Tensor,
    targets: np.ndarray,
    smoothing: float = 0.0,
    weights: np.ndarray | None = None,
) -> Tensor:
    """Mean per-position cross entropy against a smoothed one-hot target.

    The target distribution is (1 - smoothing) * onehot + smoothing / V
    uniform over all V classes, so smoothing 0 on a one-hot target is exactly
    the negative log softmax probability. `weights` selects / weights
    positions (e.g. masked-only training); the loss is sum(w * l) / sum(w).
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"cross_entropy: smoothing {smoothing} outside [0, 1)")
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}"
        )
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(f"cross_entropy: target id out of range [0, {vocab})")
    if weights is None:
        w = np.ones(targets.shape, dtype=DTYPE)
    else:
        w = np.asarray(weights, dtype=DTYPE)
        if w.shape != targets.shape:
            raise ValueError(f"cross_entropy: weights {w.shape} do not match targets {targets.shape}")
    denom = float(w.sum())
    if denom <= 0.0:
        raise ValueError("cross_entropy: no positions selected (weights sum to 0)")

    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse  # (..., V)
    tgt_logp = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    s = np.float32(smoothing)
    per_pos = -(1.0 - s) * tgt_logp - s * logp.mean(axis=-1)
    out = Tensor((per_pos * w).sum() / np.float32(denom))

    def bwd(g):
        p = np.exp(logp)
        q = np.full_like(p, s / vocab)
        np.put_along_axis(
            q, targets[..., None], np.take_along_axis(q, targets[..., None], axis=-1) + (1.0 - s), axis=-1
        )
        gl = (p - q) * (w / np.float32(denom))[..., None] * g
        return [(logits, gl.astype(DTYPE))]

    return _record(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# Dispatch surface
# ---------------------------------------------------------------------------

OP_KINDS = (
    "matmul",
    "add_broadcast",
    "scale",
    "relu",
    "softmax_lastaxis",
    "layer_norm",
    "embedding_lookup",
    "linear",
    "scaled_dot_attention",
    "cross_entropy_with_label_smoothing",
    "mean_pool_masked",
    "concat",
)


def forward_primitives(inputs: Sequence[Tensor], op_kind: str, **kwargs) -> Tensor:
    """Uniform entry point over the primitive op set.

    Tensor operands go in `inputs`; op-specific side inputs (ids, targets,
    masks, scalars) go in kwargs. Non-finite tensor inputs are rejected here.
    """
    if op_kind not in OP_KINDS:
        raise ValueError(f"unknown op_kind {op_kind!r}; expected one of {OP_KINDS}")
    inputs = list(inputs)
    for i, t in enumerate(inputs):
        if not isinstance(t, Tensor):
            raise TypeError(f"{op_kind}: input {i} is not a Tensor")
        if not np.isfinite(t.data).all():
            raise ValueError(f"{op_kind}: input {i} contains non-finite values")

    if op_kind == "matmul":
        return matmul(*inputs)
    if op_kind == "add_broadcast":
        return add(*inputs)
    if op_kind == "scale":
        return scale(inputs[0], kwargs["factor"])
    if op_kind == "relu":
        return relu(inputs[0])
    if op_kind == "softmax_lastaxis":
        return softmax_lastaxis(inputs[0])
    if op_kind == "layer_norm":
        return layer_norm(inputs[0], inputs[1], inputs[2], eps=kwargs.get("eps", 1e-5))
    if op_kind == "embedding_lookup":
        return embedding_lookup(inputs[0], kwargs["ids"])
    if op_kind == "linear":
        return linear(*inputs)
    if op_kind == "scaled_dot_attention":
        return scaled_dot_attention(inputs[0], inputs[1], inputs[2], kwargs["mask"])
    if op_kind == "cross_entropy_with_label_smoothing":
        return cross_entropy_with_label_smoothing(
            inputs[0],
            kwargs["targets"],
            smoothing=kwargs.get("smoothing", 0.0),
            weights=kwargs.get("weights"),
        )
    if op_kind == "mean_pool_masked":
        return mean_pool_masked(inputs[0], kwargs["mask"])
    if op_kind == "concat":
        return concat(inputs, axis=kwargs.get("axis", -1))
    raise AssertionError(op_kind)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a recorded scalar loss.

    Gradients accumulate into the .grad buffers of leaf tensors; repeated
    calls without zeroing add up. Intermediate nodes keep no gradient state.
    """
    if loss._backward is None:
        raise ValueError("backward: tensor has no recorded graph")
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.astype(DTYPE)
            continue
        for parent, pg in node._backward(g):
            if not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg.astype(DTYPE, copy=False).reshape(parent.shape).copy()
            else:
                acc += pg.astype(DTYPE, copy=False).reshape(parent.shape)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    checked: int


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_err < self.tolerance for e in self.entries)


class precision:
    """Context manager that switches the working dtype (gradient oracle use)."""

    def __init__(self, dtype):
        self.dtype = dtype

    def __enter__(self):
        global DTYPE
        self._prev = DTYPE
        DTYPE = self.dtype
        return self

    def __exit__(self, *exc):
        global DTYPE
        DTYPE = self._prev
        return False


def _eval_with_relu_trace(build_loss, params) -> tuple[float, list[np.ndarray]]:
    global _relu_trace
    _relu_trace = []
    try:
        f = float(build_loss(params).data)
        trace = _relu_trace
    finally:
        _relu_trace = None
    return f, trace


def _crosses_kink(trace_a: list[np.ndarray], trace_b: list[np.ndarray]) -> bool:
    if len(trace_a) != len(trace_b):
        return True
    return any((ta != tb).any() for ta, tb in zip(trace_a, trace_b))


def gradient_check(
    params: ParameterSet,
    build_loss: Callable[[ParameterSet], Tensor],
    tolerance: float = 1e-3,
    step: float = 1e-3,
    samples_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    build_loss must be a deterministic function of the parameter values.
    When samples_per_param is None every coordinate is checked (keep the
    parameter set small); otherwise a deterministic random subset per
    parameter is used, which is what full model presets need.

    The oracle evaluates in float64: float32 forward round-off at step 1e-3
    exceeds small gradient magnitudes on deep graphs, which would report
    noise rather than differentiation errors. Parameter values stay float32
    and perturbations land on the float32 grid. Coordinates whose
    perturbation flips a ReLU sign are resampled: central differences are
    not valid across a kink, and the detection uses forward values only, so
    it cannot hide a backward bug.
    """
    with precision(np.float64):
        params.zero_grad()
        loss = build_loss(params)
        if loss.data.size != 1:
            raise ValueError("gradient_check: builder must produce a scalar loss")
        if not np.isfinite(loss.data).all():
            raise ValueError("gradient_check: builder produced a non-finite loss")
        backward(loss)
        analytic = {
            name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for name, t in params.items()
        }

        report = GradCheckReport(tolerance=tolerance)
        with no_grad():
            for pi, (name, t) in enumerate(params.items()):
                flat = t.data.reshape(-1)
                n = flat.size
                rng = np.random.default_rng([seed, pi])
                if samples_per_param is None or samples_per_param >= n:
                    candidates = list(rng.permutation(n))
                    want = n
                else:
                    candidates = list(rng.permutation(n))
                    want = samples_per_param
                worst = 0.0
                checked = 0
                a_flat = analytic[name].reshape(-1)
                for i in candidates:
                    if checked >= want:
                        break
                    old = flat[i]
                    hi = np.float32(old + step)
                    lo = np.float32(old - step)
                    flat[i] = hi
                    f_plus, trace_plus = _eval_with_relu_trace(build_loss, params)
                    flat[i] = lo
                    f_minus, trace_minus = _eval_with_relu_trace(build_loss, params)
                    flat[i] = old
                    if _crosses_kink(trace_plus, trace_minus):
                        continue  # not differentiable inside the stencil
                    h = float(hi) - float(lo)
                    num = (f_plus - f_minus) / h
                    a = float(a_flat[i])
                    rel = abs(a - num) / max(abs(a) + abs(num), 1e-3)
                    worst = max(worst, rel)
                    checked += 1
                report.entries.append(GradCheckEntry(name=name, max_rel_err=worst, checked=checked))
    return report
