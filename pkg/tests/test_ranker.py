import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aveyb import numerics as nx
from aveyb import ranker as rk
from aveyb.model import AveyB, ForwardTrace
from aveyb.numerics import ConfigurationError, Matrix, Rng
from aveyb.props import brute_force_topk

from conftest import tiny_config


def test_partition_examples():
    plan, splits = rk.partition(Matrix(np.arange(8.0).reshape(4, 2)), 2)
    assert (plan.num_splits, plan.pad_len) == (2, 0)
    plan, splits = rk.partition(Matrix(np.arange(1.0, 11.0).reshape(5, 2)), 2)
    assert (plan.num_splits, plan.pad_len) == (3, 1)
    assert np.array_equal(splits.data[2, 1], [0.0, 0.0])
    assert rk.plan_splits(2048, 256).num_splits == 8


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 9), st.integers(1, 4))
def test_partition_round_trip(N, S, d):
    x = Rng(N, S, d).normal((N, d))
    plan, splits = rk.partition(Matrix(x), S)
    assert plan.num_splits * S == N + plan.pad_len and 0 <= plan.pad_len < S
    assert np.array_equal(rk.unpartition(splits, plan).data, x)


def test_maxsim_identical_unit_rows_counts_real_tokens():
    q = np.eye(4)[:3]
    padded = np.vstack([q, np.zeros((1, 4))])
    assert rk.maxsim(padded, padded) == pytest.approx(3.0, abs=1e-15)


def test_maxsim_orthogonal_is_zero():
    assert rk.maxsim(np.eye(4)[:2], np.eye(4)[2:]) == 0.0


def test_maxsim_frozen_value():
    q = [[1.0, 0.0, 2.0], [0.0, 1.0, 1.0], [3.0, -1.0, 0.0], [0.0, 0.0, 0.0]]
    c = [[1.0, 1.0, 0.0], [0.0, 2.0, -1.0], [-1.0, 0.0, 1.0], [2.0, 0.0, 1.0]]
    assert abs(rk.maxsim(q, c) - 2.148528137423857) < 1e-12  # double-loop oracle


def test_maxsim_random_vs_double_loop():
    r = Rng(3)
    q, c = r.normal((4, 8)), r.normal((4, 8))
    oracle = sum(max(float(a @ b) / (math.sqrt(a @ a) * math.sqrt(b @ b)) for b in c) for a in q)
    assert abs(rk.maxsim(q, c) - oracle) < 1e-10


def test_maxsim_matrix_matches_pairwise():
    s = Rng(4).normal((5, 3, 4))
    m = rk.maxsim_matrix(s)
    for t in range(5):
        for c in range(5):
            assert abs(m[t, c] - rk.maxsim(s[t], s[c])) < 1e-12
    causal = rk.maxsim_matrix(s, causal=True)
    assert np.array_equal(np.triu(causal), np.zeros((5, 5)))


def test_select_topk_examples():
    rb = rk.select_topk(3, [0.5, 2.0, 1.0, 99.0], 2)
    assert rb.retrieved_indices == (1, 2) and rb.normalized_weights == (1.0, 0.5)
    rb = rk.select_topk(1, [0.7, 5.0], 3)
    assert rb.retrieved_indices == (0,) and rb.normalized_weights == (1.0,)
    assert rk.select_topk(0, [1.0, 2.0], 3).retrieved_indices == ()


def test_select_topk_ties_and_bidirectional():
    rb = rk.select_topk(4, [1.0, 2.0, 2.0, 1.0, 0.0], 2)
    assert rb.retrieved_indices == (1, 2)
    rb = rk.select_topk(0, [0.0, 1.0, 3.0, 2.0], 2, "bidirectional")
    assert rb.retrieved_indices == (2, 3)


def test_select_topk_oracle_eight_splits():
    r = Rng(9)
    for trial in range(20):
        s = r.normal((8, 4, 6))
        scores = rk.maxsim_matrix(s, causal=True)
        for t in range(8):
            got = rk.select_topk(t, scores[t], 3).retrieved_indices
            assert list(got) == brute_force_topk(s, t, 3, "unidirectional")
            assert all(i < t for i in got) and len(set(got)) == len(got)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=9), st.integers(1, 5))
def test_select_topk_weights(scores, k):
    rb = rk.select_topk(len(scores), scores + [0.0], k)
    if rb.retrieved_indices:
        assert max(rb.normalized_weights) == 1.0
        assert all(0.0 < w <= 1.0 for w in rb.normalized_weights)
        assert list(rb.maxsim_scores) == sorted(rb.maxsim_scores, reverse=True)


def _splits(n, S=2, d=3, seed=0):
    return Matrix(Rng(seed).normal((n, S, d)))


def test_assemble_block_layouts():
    s = _splits(4)
    plan = rk.SplitPlan(8, 2, 4, 0)
    rb = rk.RankedBlock(3, (), (), ())
    assert np.array_equal(rk.assemble_block(plan, s, rb, 0).data, s.data[3])
    rb = rk.RankedBlock(3, (1,), (2.0,), (1.0,))
    block = rk.assemble_block(plan, s, rb, 3).data
    assert np.array_equal(block[:4], np.zeros((4, 3)))
    assert np.array_equal(block[4:6], s.data[1])
    assert np.array_equal(block[6:8], s.data[3])
    rb = rk.RankedBlock(3, (2, 0), (2.0, 1.0), (1.0, 0.5))
    block = rk.assemble_block(plan, s, rb, 2).data
    assert np.array_equal(block[0:2], s.data[0] * 0.5)  # ascending split order
    assert np.array_equal(block[2:4], s.data[2])


def test_compress_examples():
    S, d, k = 2, 3, 3
    cur = Rng(1).normal((S, d))
    block = np.vstack([Rng(2).normal((k * S, d)), cur])
    selector = np.hstack([np.zeros((S, k * S)), np.eye(S)])
    assert np.array_equal(rk.compress(Matrix(block), Matrix(selector), Matrix(cur), False).data, cur)
    zero = np.zeros((S, (k + 1) * S))
    assert np.array_equal(rk.compress(Matrix(block), Matrix(zero), Matrix(cur), True).data, cur)
    with pytest.raises(ConfigurationError):
        rk.compress(Matrix(block), Matrix(np.zeros((S, k * S))), Matrix(cur))


def test_compress_is_linear():
    r = Rng(5)
    P = Matrix(r.normal((2, 8)))
    A, B, cur = r.normal((8, 3)), r.normal((8, 3)), Matrix(np.zeros((2, 3)))
    lhs = rk.compress(Matrix(2.5 * A - 0.5 * B), P, cur, False).data
    rhs = 2.5 * rk.compress(Matrix(A), P, cur, False).data - 0.5 * rk.compress(Matrix(B), P, cur, False).data
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_rank_all_single_split_and_causality():
    cfg = tiny_config()
    one = rk.rank_all(_splits(1, cfg.S, cfg.d), cfg)
    assert one[0].retrieved_indices == () and np.array_equal(one[0].block.data[-cfg.S:], _splits(1, cfg.S, cfg.d).data[0])
    many = rk.rank_all(_splits(8, cfg.S, cfg.d), cfg)
    for rb in many:
        assert all(i < rb.target_index for i in rb.retrieved_indices)


def test_processor_rows_with_and_without_compression():
    for on, per_split in [(True, 8), (False, 32)]:
        cfg = tiny_config(compression_on=on, N=36)
        tr = ForwardTrace()
        with nx.no_grad():
            AveyB(cfg).forward(Rng(0).integers(2, 200, (1, 36)), tr)
        n = rk.plan_splits(36, cfg.S).num_splits
        assert tr.processor_in.shape[1] * tr.processor_in.shape[2] == n * per_split


def test_batched_path_matches_reference_rank_all():
    cfg = tiny_config(k=2)
    model = AveyB(cfg)
    ids = Rng(7).integers(2, 200, (2, 40))
    tr = ForwardTrace()
    with nx.no_grad():
        model.forward(ids, tr)
    plan, splits = rk.partition(model.embed(ids), cfg.S)
    for b in range(2):
        ref = rk.rank_all(Matrix(splits.data[b]), cfg, model.P, plan)
        for t, rb in enumerate(ref):
            assert np.allclose(tr.blocks.data[b, t], rb.block.data, atol=1e-13)
            assert np.allclose(tr.processor_in.data[b, t], rb.compressed.data, atol=1e-12)


def test_retrieval_weights_are_differentiable():
    x = Matrix.param(Rng(1).normal((1, 3, 4, 5)))
    table = rk.retrieval_table(x.data, 2, "unidirectional")
    w = Rng(2).normal((1, 3, 12, 5))
    with nx.Tape() as t:
        loss = (rk.weighted_blocks(x, table) * Matrix(w)).sum()
    g = t.backward(loss, [x])[x]

    def f():
        with nx.no_grad():
            return float(np.sum(rk.weighted_blocks(Matrix(x.data), table).data * w))

    from conftest import central_difference
    fd = central_difference(f, x.data)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-5
