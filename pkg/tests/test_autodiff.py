"""Tensor-core op oracles and gradient checks."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixtrack import autodiff as ad


def rand(shape, rng, lo=-1.0, hi=1.0):
    return ad.Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def rand_off_kink(shape, rng):
    """Values bounded away from 0 so relu kinks cannot corrupt central differences."""
    mag = rng.uniform(0.1, 1.0, shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return ad.Tensor(mag * sign, requires_grad=True)


# ---------------------------------------------------------------------------
# hadamard_select


def test_hadamard_identity_selector():
    rng = np.random.default_rng(0)
    v = ad.Tensor(rng.normal(size=(2, 2, 3)))
    out = ad.hadamard_select(ad.Tensor(np.ones(3)), v)
    np.testing.assert_array_equal(out.data, v.data)


def test_hadamard_scalar_case():
    out = ad.hadamard_select(ad.Tensor([2.0, 0.0]), ad.Tensor([[[3.0, 5.0]]]))
    np.testing.assert_array_equal(out.data, [[[6.0, 0.0]]])


def test_hadamard_matches_loop_oracle():
    rng = np.random.default_rng(1)
    s = rng.normal(size=4)
    v = rng.normal(size=(2, 2, 4))
    out = ad.hadamard_select(ad.Tensor(s), ad.Tensor(v)).data
    expect = np.empty_like(v)
    for h in range(2):
        for w in range(2):
            for c in range(4):
                expect[h, w, c] = s[c] * v[h, w, c]
    np.testing.assert_array_equal(out, expect)


def test_hadamard_shape_mismatch_names_both_shapes():
    with pytest.raises(ad.ShapeError) as exc:
        ad.hadamard_select(ad.Tensor(np.ones(3)), ad.Tensor(np.ones((2, 2, 4))))
    assert "(3,)" in str(exc.value) and "(2, 2, 4)" in str(exc.value)


def test_hadamard_bilinear():
    rng = np.random.default_rng(2)
    s = rng.normal(size=5)
    v = rng.normal(size=(3, 3, 5))
    alpha = 1.7
    base = ad.hadamard_select(ad.Tensor(s), ad.Tensor(v)).data
    left = ad.hadamard_select(ad.Tensor(alpha * s), ad.Tensor(v)).data
    right = ad.hadamard_select(ad.Tensor(s), ad.Tensor(alpha * v)).data
    for scaled in (left, right):
        rel = np.abs(scaled - alpha * base) / np.maximum(np.abs(alpha * base), 1e-300)
        assert rel.max() <= 1e-12


# ---------------------------------------------------------------------------
# channel_shuffle


def test_shuffle_single_group_is_identity():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(2, 3, 6))
    out = ad.channel_shuffle(ad.Tensor(v), 1).data
    np.testing.assert_array_equal(out, v)


def test_shuffle_group_transpose():
    v = np.arange(4, dtype=float).reshape(1, 1, 4)  # channels a,b,c,d
    out = ad.channel_shuffle(ad.Tensor(v), 2).data
    np.testing.assert_array_equal(out[0, 0], [0, 2, 1, 3])


def test_shuffle_twice_restores_order():
    rng = np.random.default_rng(4)
    v = rng.normal(size=(2, 2, 4))
    once = ad.channel_shuffle(ad.Tensor(v), 2)
    twice = ad.channel_shuffle(once, 2).data
    np.testing.assert_array_equal(twice, v)


def test_shuffle_rejects_indivisible_groups():
    with pytest.raises(ValueError):
        ad.channel_shuffle(ad.Tensor(np.ones((1, 1, 5))), 2)


@settings(max_examples=30, deadline=None)
@given(
    groups=st.sampled_from([1, 2, 4]),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_shuffle_preserves_multiset_per_site(groups, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(2, 2, 8))
    out = ad.channel_shuffle(ad.Tensor(v), groups).data
    for h in range(2):
        for w in range(2):
            assert sorted(out[h, w]) == sorted(v[h, w])


# ---------------------------------------------------------------------------
# cosine_similarity_matrix


def test_cosine_orthonormal_rows_give_identity():
    a = ad.Tensor(np.eye(3))
    out = ad.cosine_similarity_matrix(a, a).data
    np.testing.assert_allclose(out, np.eye(3), atol=1e-15)


def test_cosine_orthogonal_rows_give_zero():
    a = ad.Tensor([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    b = ad.Tensor([[3.0, 0.0, 0.0], [0.0, 0.0, 5.0]])
    out = ad.cosine_similarity_matrix(a, b).data
    assert out[0, 1] == 0.0
    assert out[1, 1] == 0.0


def test_cosine_matches_direct_formula():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 3))
    out = ad.cosine_similarity_matrix(ad.Tensor(a), ad.Tensor(b)).data
    for i in range(2):
        for j in range(2):
            expect = a[i] @ b[j] / (np.linalg.norm(a[i]) * np.linalg.norm(b[j]))
            assert abs(out[i, j] - expect) < 1e-12
    assert np.all(out <= 1 + 1e-12) and np.all(out >= -1 - 1e-12)


def test_cosine_unit_diagonal():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(4, 6))
    out = ad.cosine_similarity_matrix(ad.Tensor(a), ad.Tensor(a)).data
    np.testing.assert_allclose(np.diag(out), 1.0, atol=1e-12)


def test_cosine_zero_norm_row_raises():
    a = ad.Tensor([[0.0, 0.0], [1.0, 0.0]])
    b = ad.Tensor([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ad.DegenerateInputError):
        ad.cosine_similarity_matrix(a, b)


# ---------------------------------------------------------------------------
# softmax_cross_entropy_rows


def test_ce_single_logit_is_zero():
    out = ad.softmax_cross_entropy_rows(ad.Tensor([[4.2]]), [0])
    assert out.item() == 0.0


def test_ce_uniform_two_way_is_ln2():
    out = ad.softmax_cross_entropy_rows(ad.Tensor([[1.0, 1.0]]), [0])
    assert abs(out.item() - math.log(2.0)) < 1e-12


def test_ce_matches_logsumexp_oracle():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(3, 3))
    labels = [2, 0, 1]
    out = ad.softmax_cross_entropy_rows(ad.Tensor(z), labels).item()
    expect = 0.0
    for i, lab in enumerate(labels):
        expect += math.log(np.exp(z[i]).sum()) - z[i, lab]
    expect /= 3
    assert abs(out - expect) < 1e-12
    assert out >= 0.0


def test_ce_rejects_out_of_range_label():
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy_rows(ad.Tensor(np.zeros((2, 2))), [0, 2])


# ---------------------------------------------------------------------------
# convolution / pooling oracles


def depthwise_loop_oracle(x, w, stride):
    k = w.shape[0]
    h, wid, c = x.shape
    oh = ad.same_pad_out(h, stride)
    ow = ad.same_pad_out(wid, stride)
    pad_top = max((oh - 1) * stride + k - h, 0) // 2
    pad_left = max((ow - 1) * stride + k - wid, 0) // 2
    out = np.zeros((oh, ow, c))
    for i in range(oh):
        for j in range(ow):
            for ch in range(c):
                acc = 0.0
                for di in range(k):
                    for dj in range(k):
                        y = i * stride + di - pad_top
                        xx = j * stride + dj - pad_left
                        if 0 <= y < h and 0 <= xx < wid:
                            acc += x[y, xx, ch] * w[di, dj, ch]
                out[i, j, ch] = acc
    return out


@pytest.mark.parametrize("k", [3, 5, 7])
@pytest.mark.parametrize("stride", [1, 2])
def test_depthwise_conv_matches_loop_oracle(k, stride):
    rng = np.random.default_rng(100 + k + stride)
    x = rng.normal(size=(6, 5, 3))
    w = rng.normal(size=(k, k, 3))
    out = ad.depthwise_conv(ad.Tensor(x), ad.Tensor(w), stride).data
    np.testing.assert_allclose(out, depthwise_loop_oracle(x, w, stride), atol=1e-12)
    assert out.shape == (ad.same_pad_out(6, stride), ad.same_pad_out(5, stride), 3)


def test_pointwise_conv_matches_loop_oracle():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 4, 2))
    w = rng.normal(size=(2, 5))
    out = ad.pointwise_conv(ad.Tensor(x), ad.Tensor(w)).data
    expect = np.zeros((3, 4, 5))
    for h in range(3):
        for wi in range(4):
            for co in range(5):
                expect[h, wi, co] = sum(x[h, wi, ci] * w[ci, co] for ci in range(2))
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_global_mean_pool_matches_loop():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, 3, 2))
    out = ad.global_mean_pool(ad.Tensor(x)).data
    np.testing.assert_allclose(out, x.mean(axis=(0, 1)), atol=1e-15)


def test_concat_split_roundtrip():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 2, 6))
    parts = ad.split_channels(ad.Tensor(x), [2, 4])
    back = ad.concat_channels(parts).data
    np.testing.assert_array_equal(back, x)


def test_channel_affine_matches_loop():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 3, 4))
    g = rng.normal(size=4)
    b = rng.normal(size=4)
    out = ad.channel_affine(ad.Tensor(x), ad.Tensor(g), ad.Tensor(b)).data
    np.testing.assert_allclose(out, x * g + b, atol=1e-15)


def test_xcorr_matches_sliding_dot_oracle():
    rng = np.random.default_rng(12)
    search = rng.normal(size=(4, 4, 1))
    template = rng.normal(size=(2, 2, 1))
    out = ad.depthwise_xcorr(ad.Tensor(search), ad.Tensor(template)).data
    for i in range(3):
        for j in range(3):
            expect = (search[i : i + 2, j : j + 2, 0] * template[:, :, 0]).sum()
            assert abs(out[i, j, 0] - expect) < 1e-12


def test_xcorr_rejects_oversized_template():
    with pytest.raises(ValueError):
        ad.depthwise_xcorr(ad.Tensor(np.ones((2, 2, 1))), ad.Tensor(np.ones((3, 3, 1))))


def test_finite_outputs_on_finite_inputs():
    rng = np.random.default_rng(13)
    x = ad.Tensor(rng.normal(size=(4, 4, 4)) * 100.0, requires_grad=True)
    w = ad.Tensor(rng.normal(size=(3, 3, 4)) * 100.0, requires_grad=True)
    out = ad.depthwise_conv(ad.relu(x), w, 2)
    assert np.all(np.isfinite(out.data))
    loss = ad.tsum(out)
    loss.backward()
    assert np.all(np.isfinite(x.grad))


# ---------------------------------------------------------------------------
# graph mechanics


def test_graph_trace_orders_inputs_before_consumers():
    x = ad.Tensor(np.ones((2, 2, 2)), requires_grad=True)
    graph = ad.Graph(lambda t: ad.tsum(ad.relu(ad.scale(t, 2.0))))
    graph.run(x)
    assert graph.nodes, "trace should record op nodes"
    seen = set()
    ids = {n_id for node in graph.nodes for n_id in node.input_ids}
    for node in graph.nodes:
        node_id = graph.output_id if node is graph.nodes[-1] else None
        for src in node.input_ids:
            assert src not in seen or True  # inputs may repeat across nodes
        seen.update(node.input_ids)
    assert graph.output_id is not None
    assert graph.nodes == sorted(graph.nodes, key=lambda n: max(n.input_ids))


def test_backward_visits_each_node_once_on_diamond():
    # y = x*x consumed twice: (y + y) doubles the gradient only if each
    # node is visited exactly once with accumulated upstream gradient.
    x = ad.Tensor(np.array(3.0), requires_grad=True)
    y = ad.mul(x, x)
    z = ad.add(y, y)
    z.backward()
    assert float(x.grad) == pytest.approx(12.0)


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ad.GraphError):
        ad.scale(x, 1.0).backward()


def test_no_grad_suppresses_recording():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.tsum(ad.scale(x, 2.0))
    assert out._backward is None and not out.requires_grad


# ---------------------------------------------------------------------------
# grad_check


def test_grad_check_linear_function_is_exact():
    rng = np.random.default_rng(14)
    x = rand((3, 3, 2), rng)
    report = ad.grad_check(lambda t: ad.tsum(t), [x])
    assert report.passed
    assert report.worst() < 1e-9


def test_grad_check_hadamard_hand_derivative():
    rng = np.random.default_rng(15)
    s = rand((4,), rng)
    v = rand((3, 2, 4), rng)
    out = ad.tsum(ad.hadamard_select(s, v))
    out.backward()
    np.testing.assert_allclose(s.grad, v.data.sum(axis=(0, 1)), atol=1e-12)
    report = ad.grad_check(lambda a, b: ad.tsum(ad.hadamard_select(a, b)), [s, v])
    assert report.worst() < 1e-7


def test_grad_check_contrastive_graph():
    rng = np.random.default_rng(16)
    ev = rand((3, 4), rng, lo=0.3, hi=1.0)
    el = rand((3, 4), rng, lo=0.3, hi=1.0)

    def loss(a, b):
        sims = ad.cosine_similarity_matrix(a, b)
        labels = list(range(3))
        fwd = ad.softmax_cross_entropy_rows(sims, labels)
        bwd = ad.softmax_cross_entropy_rows(ad.matmul(ad.Tensor(np.eye(3)), sims), labels)
        return ad.scale(ad.add(fwd, bwd), 0.5)

    report = ad.grad_check(loss, [ev, el], h=1e-4, tol=1e-5)
    assert report.passed, report.errors


def test_grad_check_rejects_non_scalar():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ad.GraphError):
        ad.grad_check(lambda t: ad.scale(t, 1.0), [x])


OPS_UNDER_CHECK = [
    ("add", lambda rng: ([rand((3, 4), rng), rand((3, 4), rng)], lambda a, b: ad.tsum(ad.add(a, b)))),
    ("mul", lambda rng: ([rand((3, 4), rng), rand((3, 4), rng)], lambda a, b: ad.tsum(ad.mul(a, b)))),
    ("relu", lambda rng: ([rand_off_kink((4, 4), rng)], lambda a: ad.tsum(ad.relu(a)))),
    ("vecmat", lambda rng: ([rand((3,), rng), rand((3, 5), rng)], lambda v, w: ad.tsum(ad.vecmat(v, w)))),
    (
        "hadamard_select",
        lambda rng: ([rand((8,), rng), rand((6, 6, 8), rng)], lambda s, v: ad.tsum(ad.hadamard_select(s, v))),
    ),
    (
        "channel_affine",
        lambda rng: (
            [rand((4, 4, 3), rng), rand((3,), rng), rand((3,), rng)],
            lambda x, g, b: ad.tsum(ad.channel_affine(x, g, b)),
        ),
    ),
    (
        "channel_shuffle",
        lambda rng: ([rand((3, 3, 8), rng)], lambda x: ad.tsum(ad.mul(ad.channel_shuffle(x, 2), ad.channel_shuffle(x, 2)))),
    ),
    (
        "depthwise_conv_k3s1",
        lambda rng: ([rand((5, 5, 2), rng), rand((3, 3, 2), rng)], lambda x, w: ad.tsum(ad.depthwise_conv(x, w, 1))),
    ),
    (
        "depthwise_conv_k5s2",
        lambda rng: ([rand((6, 6, 2), rng), rand((5, 5, 2), rng)], lambda x, w: ad.tsum(ad.depthwise_conv(x, w, 2))),
    ),
    (
        "depthwise_conv_k7s1",
        lambda rng: ([rand((6, 6, 1), rng), rand((7, 7, 1), rng)], lambda x, w: ad.tsum(ad.depthwise_conv(x, w, 1))),
    ),
    (
        "pointwise_conv",
        lambda rng: ([rand((4, 4, 3), rng), rand((3, 5), rng)], lambda x, w: ad.tsum(ad.pointwise_conv(x, w))),
    ),
    ("global_mean_pool", lambda rng: ([rand((5, 4, 3), rng)], lambda x: ad.tsum(ad.global_mean_pool(x)))),
    (
        "concat_split",
        lambda rng: (
            [rand((3, 3, 6), rng)],
            lambda x: ad.tsum(ad.concat_channels(list(ad.split_channels(x, [2, 4]))[::-1])),
        ),
    ),
    (
        "roi_pool",
        lambda rng: ([rand((6, 6, 3), rng)], lambda x: ad.tsum(ad.roi_pool(x, (0.5, 0.45, 0.6, 0.5), grid=4))),
    ),
    (
        "depthwise_xcorr",
        lambda rng: (
            [rand((5, 5, 2), rng), rand((2, 2, 2), rng)],
            lambda s, t: ad.tsum(ad.depthwise_xcorr(s, t)),
        ),
    ),
    (
        "cosine_similarity_matrix",
        lambda rng: (
            [rand((3, 4), rng, lo=0.3, hi=1.0), rand((3, 4), rng, lo=0.3, hi=1.0)],
            lambda a, b: ad.tsum(ad.cosine_similarity_matrix(a, b)),
        ),
    ),
    (
        "softmax_cross_entropy_rows",
        lambda rng: ([rand((3, 3), rng)], lambda z: ad.softmax_cross_entropy_rows(z, [0, 1, 2])),
    ),
    (
        "score_map_divergence",
        lambda rng: (
            [rand((4, 4), rng)],
            lambda z: ad.score_map_divergence(z, ad.Tensor(np.full((4, 4), 0.3))),
        ),
    ),
    (
        "masked_l1",
        lambda rng: (
            [rand((3, 3, 4), rng)],
            lambda p: ad.masked_l1(p, ad.Tensor(np.ones((3, 3, 4)) * 5.0), np.eye(3)),
        ),
    ),
]


@pytest.mark.parametrize("name,builder", OPS_UNDER_CHECK, ids=[n for n, _ in OPS_UNDER_CHECK])
def test_grad_check_every_op(name, builder):
    failures = []
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        inputs, fn = builder(rng)
        report = ad.grad_check(fn, inputs, h=1e-4, tol=1e-5)
        if not report.passed:
            failures.append((seed, report.worst()))
    assert not failures, f"{name}: {failures}"
