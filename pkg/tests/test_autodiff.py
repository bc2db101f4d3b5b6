import numpy as np
import pytest

from natlab import autodiff as ad
from natlab.autodiff import (
    ParameterSet,
    Tensor,
    backward,
    forward_primitives,
    gradient_check,
)
from natlab.optim import adam_init, adam_step


def rand(shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return (rng.normal(0, scale, shape)).astype(np.float32)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------


def test_softmax_uniform_on_zeros():
    out = forward_primitives([Tensor(np.zeros(3, dtype=np.float32))], "softmax_lastaxis")
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], rtol=1e-6)


def test_softmax_rows_sum_to_one():
    out = ad.softmax_lastaxis(Tensor(rand((4, 7), seed=1, scale=3.0)))
    np.testing.assert_allclose(out.data.sum(-1), np.ones(4), atol=1e-6)


def test_matmul_identity():
    a = rand((3, 3), seed=2)
    out = forward_primitives([Tensor(np.eye(3, dtype=np.float32)), Tensor(a)], "matmul")
    np.testing.assert_array_equal(out.data, a)


def test_matmul_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(rand((2, 3))), Tensor(rand((2, 3))))


def test_layer_norm_hand_computed():
    # x = [1, 2, 3]: mu = 2, biased var = 2/3, xhat = (x - 2) / sqrt(2/3 + eps)
    x = np.array([1.0, 2.0, 3.0], dtype=np.float32)
    out = forward_primitives(
        [Tensor(x), Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32))],
        "layer_norm",
    )
    expected = (x - 2.0) / np.sqrt(2.0 / 3.0 + 1e-5)
    np.testing.assert_allclose(out.data, expected, rtol=1e-5)
    assert abs(out.data.mean()) < 1e-6
    np.testing.assert_allclose(out.data.std(), 1.0, atol=1e-3)


def test_non_finite_input_rejected():
    bad = np.array([1.0, np.inf], dtype=np.float32)
    with pytest.raises(ValueError, match="relu.*non-finite"):
        forward_primitives([Tensor(bad)], "relu")


def test_unknown_op_kind_rejected():
    with pytest.raises(ValueError, match="unknown op_kind"):
        forward_primitives([Tensor(np.zeros(1))], "conv2d")


def test_cross_entropy_zero_smoothing_is_nll():
    logits = rand((5, 11), seed=3, scale=2.0)
    targets = np.arange(5) % 11
    loss = ad.cross_entropy_with_label_smoothing(Tensor(logits), targets, smoothing=0.0)
    logp = ad.log_softmax_np(logits)
    expected = -logp[np.arange(5), targets].mean()
    np.testing.assert_allclose(loss.item(), expected, rtol=1e-5)


def test_attention_masked_weights_exactly_zero():
    rng = np.random.default_rng(4)
    q = Tensor(rng.normal(0, 1, (1, 1, 4, 8)).astype(np.float32))
    k = Tensor(rng.normal(0, 1, (1, 1, 5, 8)).astype(np.float32))
    v = Tensor(rng.normal(0, 1, (1, 1, 5, 8)).astype(np.float32))
    mask = np.zeros((1, 1, 4, 5), dtype=np.float32)
    mask[..., 3:] = ad.NEG_INF
    _, weights = ad.scaled_dot_attention(q, k, v, mask, return_weights=True)
    assert (weights.data[..., 3:] == 0.0).all()
    np.testing.assert_allclose(weights.data.sum(-1), np.ones((1, 1, 4)), atol=1e-6)


def test_mean_pool_masked_ignores_padding():
    x = Tensor(rand((2, 3, 4), seed=5))
    mask = np.array([[True, True, False], [True, False, False]])
    out = ad.mean_pool_masked(x, mask)
    np.testing.assert_allclose(out.data[0], x.data[0, :2].mean(0), rtol=1e-6)
    np.testing.assert_allclose(out.data[1], x.data[1, 0], rtol=1e-6)


def test_embedding_rejects_out_of_range():
    with pytest.raises(ValueError, match="id out of range"):
        ad.embedding_lookup(Tensor(rand((4, 2))), np.array([0, 4]))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    ps = ParameterSet(seed=0)
    p = ps.add("p", rand((3, 4), seed=6))
    total = ad.matmul(
        ad.reshape(p, (1, 12)), Tensor(np.ones((12, 1), dtype=np.float32))
    )
    backward(ad.reshape(total, (1,)))
    np.testing.assert_array_equal(p.grad, np.ones((3, 4), dtype=np.float32))


def test_backward_quadratic_gives_p():
    ps = ParameterSet(seed=0)
    p = ps.add("p", rand((6,), seed=7))
    half_sq = ad.scale(ad.matmul(ad.reshape(p, (1, 6)), ad.reshape(p, (6, 1))), 0.5)
    backward(ad.reshape(half_sq, (1,)))
    np.testing.assert_allclose(p.grad, p.data, rtol=1e-6)


def test_backward_accumulates_without_zeroing():
    ps = ParameterSet(seed=0)
    p = ps.add("p", rand((4,), seed=8))

    def run():
        s = ad.matmul(ad.reshape(p, (1, 4)), Tensor(np.ones((4, 1), dtype=np.float32)))
        backward(ad.reshape(s, (1,)))

    run()
    run()
    np.testing.assert_array_equal(p.grad, 2 * np.ones(4, dtype=np.float32))


def test_backward_rejects_unrecorded_tensor():
    t = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError, match="no recorded graph"):
        backward(t)


def test_backward_rejects_non_scalar():
    ps = ParameterSet(seed=0)
    p = ps.add("p", rand((3,), seed=9))
    y = ad.relu(p)
    with pytest.raises(ValueError, match="scalar"):
        backward(y)


# ---------------------------------------------------------------------------
# gradient_check against finite differences
# ---------------------------------------------------------------------------


def test_gradient_check_linear_layer():
    ps = ParameterSet(seed=0)
    ps.add("w", rand((6, 4), seed=10, scale=0.5))
    ps.add("b", rand((4,), seed=11, scale=0.5))
    x = rand((3, 6), seed=12)
    targets = np.array([0, 3, 1])

    def build(p):
        return ad.cross_entropy_with_label_smoothing(
            ad.linear(Tensor(x), p["w"], p["b"]), targets, smoothing=0.1
        )

    report = gradient_check(ps, build, tolerance=1e-3)
    assert report.passed, report.entries


def test_gradient_check_zero_parameters_passes():
    report = gradient_check(ParameterSet(seed=0), lambda p: ad.scale(Tensor([1.0]), 2.0))
    assert report.passed
    assert report.entries == []


def test_gradient_check_attention_block_with_mask():
    ps = ParameterSet(seed=0)
    ps.add("wq", rand((8, 8), seed=13, scale=0.4))
    ps.add("wk", rand((8, 8), seed=14, scale=0.4))
    ps.add("wv", rand((8, 8), seed=15, scale=0.4))
    x = rand((1, 5, 8), seed=16)
    mask = np.zeros((1, 1, 1, 5), dtype=np.float32)
    mask[..., 4] = ad.NEG_INF
    proj = rand((8, 6), seed=17, scale=0.4)
    targets = np.array([[1, 0, 2, 1, 0]])

    def build(p):
        x_t = Tensor(x)
        q = ad.linear(x_t, p["wq"])
        k = ad.linear(x_t, p["wk"])
        v = ad.linear(x_t, p["wv"])
        out = ad.scaled_dot_attention(q, k, v, mask)
        logits = ad.matmul(out, Tensor(proj))
        return ad.cross_entropy_with_label_smoothing(logits, targets, 0.0)

    report = gradient_check(ps, build, tolerance=1e-3)
    assert report.passed, report.entries


def test_gradient_check_every_primitive_composite():
    ps = ParameterSet(seed=0)
    ps.add("emb", rand((9, 8), seed=18, scale=0.5))
    ps.add("w", rand((8, 8), seed=19, scale=0.4))
    ps.add("b", rand((8,), seed=20, scale=0.2))
    ps.add("g", np.ones(8, dtype=np.float32))
    ps.add("beta", np.zeros(8, dtype=np.float32))
    ps.add("w2", rand((16, 5), seed=21, scale=0.4))
    ids = np.array([[1, 4, 7, 2]])
    mask = np.array([[True, True, True, False]])
    targets = np.array([[2, 0, 1, 3]])

    def build(p):
        e = ad.embedding_lookup(p["emb"], ids)
        h = ad.relu(ad.linear(e, p["w"], p["b"]))
        h = ad.layer_norm(h, p["g"], p["beta"])
        h = ad.add(h, ad.scale(e, 0.5))
        pooled = ad.mean_pool_masked(h, mask)
        sm = ad.softmax_lastaxis(h)
        feats = ad.concat([sm, h], axis=-1)
        logits = ad.matmul(feats, p["w2"])
        token = ad.cross_entropy_with_label_smoothing(logits, targets, 0.1, mask.astype(np.float32))
        pooled_logits = ad.linear(pooled, p["w"], p["b"])
        aux = ad.cross_entropy_with_label_smoothing(pooled_logits, np.array([2]), 0.0)
        return ad.add(token, ad.scale(aux, 0.3))

    report = gradient_check(ps, build, tolerance=1e-3)
    assert report.passed, max(report.entries, key=lambda e: e.max_rel_err)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_adam_zero_grad_leaves_params_unchanged():
    ps = ParameterSet(seed=0)
    p = ps.add("p", rand((5,), seed=22))
    before = p.data.copy()
    p.grad = np.zeros_like(p.data)
    adam_step(ps, adam_init(ps), lr=0.1)
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_decreases_positive_grad_param():
    ps = ParameterSet(seed=0)
    p = ps.add("p", np.array([1.0], dtype=np.float32))
    p.grad = np.array([0.5], dtype=np.float32)
    adam_step(ps, adam_init(ps), lr=0.1)
    assert p.data[0] < 1.0


def test_adam_missing_grad_names_parameter():
    ps = ParameterSet(seed=0)
    ps.add("alpha", rand((2,), seed=23))
    ps.add("beta_p", rand((2,), seed=24))
    ps["alpha"].grad = np.zeros(2, dtype=np.float32)
    with pytest.raises(ValueError, match="beta_p"):
        adam_step(ps, adam_init(ps), lr=0.1)


def test_adam_grads_untouched_by_step():
    ps = ParameterSet(seed=0)
    p = ps.add("p", rand((3,), seed=25))
    g = rand((3,), seed=26)
    p.grad = g.copy()
    adam_step(ps, adam_init(ps), lr=0.01)
    np.testing.assert_array_equal(p.grad, g)


def test_training_determinism_100_steps_bitwise():
    def run():
        ps = ParameterSet(seed=3)
        rng = np.random.default_rng(3)
        w = ps.add("w", rng.normal(0, 0.3, (6, 6)).astype(np.float32))
        state = adam_init(ps)
        data_rng = np.random.default_rng(7)
        for step in range(100):
            x = data_rng.normal(0, 1, (4, 6)).astype(np.float32)
            tg = data_rng.integers(0, 6, 4)
            ps.zero_grad()
            loss = ad.cross_entropy_with_label_smoothing(ad.linear(Tensor(x), w), tg, 0.1)
            backward(loss)
            adam_step(ps, state, lr=1e-2)
        return w.data.copy()

    np.testing.assert_array_equal(run(), run())
