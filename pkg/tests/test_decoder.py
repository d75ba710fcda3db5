import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genrec import decoder
from genrec.backbone import ModelConfig, param_shapes
from genrec.decoder import (DecoderConfig, build_candidates, candidate_logits, full_softmax_reference, ntp_loss,
                            project_head, sample_negatives, sample_negatives_batch, weighted_xent)
from genrec.errors import ConfigError, InternalError


def fisher_yates_oracle(V, m, target, seed):
    """Reference partial shuffle: Durstenfeld swaps from the front."""
    pool = [i for i in range(V) if i != target]
    rng = np.random.default_rng(seed)
    for i in range(m):
        j = int(rng.integers(i, len(pool)))
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:m]


def dense_xent(u, table, target):
    z = table @ u
    return float(np.log(np.exp(z - z.max()).sum()) + z.max() - z[target])


def test_project_head_shapes_and_linearity():
    W = np.random.default_rng(0).standard_normal((32, 4))
    assert project_head(np.zeros(32), {"head.proj": W}).tolist() == [0.0] * 4
    assert project_head(np.ones((3, 32)), {"head.proj": W}).shape == (3, 4)
    assert ModelConfig(d=32, head_mode="projected").d_out == 4
    assert ModelConfig(d=4096, heads=8, head_mode="projected").d_out == 512


def test_projected_mode_has_one_shared_head():
    shapes = param_shapes(ModelConfig(d=32, head_mode="projected", n_tasks=3))
    heads = [k for k in shapes if k.startswith("head.")]
    assert heads == ["head.proj"]


def test_sample_negatives_exhaustive_case():
    assert sorted(sample_negatives(100, 0.99, 5, seed=0).tolist()) == [i for i in range(100) if i != 5]


def test_sample_negatives_never_returns_target():
    for seed in range(10_000):
        out = sample_negatives(20, 0.25, seed % 20, seed)
        assert (seed % 20) not in out
        assert len(set(out.tolist())) == 5


@pytest.mark.parametrize("seed", [0, 1, 42, 2024])
def test_sample_negatives_matches_fisher_yates(seed):
    assert sample_negatives(10, 0.3, 4, seed).tolist() == fisher_yates_oracle(10, 3, 4, seed)


def test_sample_negatives_errors():
    with pytest.raises(ConfigError):
        sample_negatives(50, 0.01, 0, 0)
    with pytest.raises(ConfigError):
        sample_negatives(1, 1.0, 0, 0)


@settings(max_examples=60, deadline=None)
@given(V=st.integers(2, 300), frac=st.floats(0.01, 1.0), seed=st.integers(0, 2**31))
def test_sample_negatives_properties(V, frac, seed):
    target = seed % V
    if frac * V < 1:
        with pytest.raises(ConfigError):
            sample_negatives(V, frac, target, seed)
        return
    out = sample_negatives(V, frac, target, seed)
    assert len(out) == min(math.ceil(round(frac * V, 9)), V - 1)
    assert len(set(out.tolist())) == len(out)
    assert target not in out and out.min() >= 0 and out.max() < V
    assert np.array_equal(out, sample_negatives(V, frac, target, seed))


def test_batch_sampler_rejects_all_positives(rng):
    pos = np.array([[1, 2, -1], [0, 0, 5]])
    for _ in range(200):
        neg = sample_negatives_batch(rng, 8, 5, pos)
        assert neg.shape == (2, 5)
        assert not set(neg[0]) & {1, 2} and not set(neg[1]) & {0, 5}
        assert all(len(set(r)) == 5 for r in neg)
    with pytest.raises(ConfigError):
        sample_negatives_batch(rng, 4, 3, np.array([[0, 1]]))


def test_batch_sampler_is_uniform(rng):
    counts = np.zeros(10)
    for _ in range(4000):
        counts[sample_negatives_batch(rng, 10, 3, np.array([[7]]))[0]] += 1
    assert counts[7] == 0
    freq = np.delete(counts, 7) / 4000
    assert np.allclose(freq, 3 / 9, atol=0.03)


def test_two_equal_candidates_give_ln2():
    table = np.array([[1.0, 0.0], [1.0, 0.0]])
    loss, _ = ntp_loss(np.array([0.3, 0.7]), 0, [0, 1], table, {})
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_full_candidates_match_dense_oracle():
    rng = np.random.default_rng(3)
    table = rng.standard_normal((50, 8))
    for _ in range(20):
        h = rng.standard_normal(8)
        t = int(rng.integers(50))
        full, _ = ntp_loss(h, t, None, table, {})
        listed, _ = ntp_loss(h, t, np.arange(50), table, {})
        oracle = dense_xent(h, table, t)
        assert full == pytest.approx(oracle, abs=1e-6)
        assert listed == pytest.approx(oracle, abs=1e-6)
        assert full_softmax_reference(h, t, table, {}) == pytest.approx(oracle, abs=1e-12)


def test_full_coverage_sampling_equals_full_softmax():
    rng = np.random.default_rng(4)
    table = rng.standard_normal((50, 8))
    W = rng.standard_normal((8, 8)) / 3
    for seed in range(10):
        h = rng.standard_normal(8)
        t = int(rng.integers(50))
        neg = sample_negatives(50, 1.0, t, seed)
        assert len(neg) == 49
        sampled, _ = ntp_loss(h, t, np.concatenate([[t], neg]), table, {"head.proj": W})
        assert sampled == pytest.approx(full_softmax_reference(h, t, table, {"head.proj": W}), abs=1e-6)


def test_sampled_loss_bounded_by_full_loss():
    rng = np.random.default_rng(5)
    table = rng.standard_normal((50, 6))
    for seed in range(200):
        h = rng.standard_normal(6)
        t = int(rng.integers(50))
        cand = np.concatenate([[t], sample_negatives(50, 0.2, t, seed)])
        sampled, _ = ntp_loss(h, t, cand, table, {})
        full = dense_xent(h, table, t)
        assert sampled <= full + 1e-12
        assert sampled <= full + math.log(50 / len(cand))


@settings(max_examples=40, deadline=None)
@given(shift=st.floats(-50, 50), seed=st.integers(0, 1000))
def test_logit_shift_invariance(shift, seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((3, 7))
    pos = np.array([[0, 2], [5, -1], [1, 1]])
    w = rng.random((3, 2))
    a, ga = weighted_xent(logits.copy(), pos, w)
    b, gb = weighted_xent(logits + shift, pos, w)
    assert np.allclose(a, b, atol=1e-9)
    assert np.allclose(ga, gb, atol=1e-9)


def test_target_missing_from_candidates_is_internal_error():
    table = np.eye(4)
    with pytest.raises(InternalError):
        ntp_loss(np.ones(4), 3, [0, 1, 2], table, {})


def test_candidate_placeholders_score_minus_inf():
    u = np.ones((1, 2))
    table = np.array([[1.0, 0.0], [0.0, 2.0]])
    out = candidate_logits(u, table, np.array([[1, -1, 0]]))
    assert out.tolist() == [[2.0, -np.inf, 1.0]]


def test_build_candidates_deduplicates_positives():
    cand, idx = build_candidates(np.array([[4, 4, -1], [1, 2, 3]]), np.array([[7, 8], [5, 6]]))
    assert cand.tolist() == [[4, -1, -1, 7, 8], [1, 2, 3, 5, 6]]
    assert idx.tolist() == [[0, 0, -1], [0, 1, 2]]


def test_ntp_gradients_are_exact():
    rng = np.random.default_rng(8)
    table = rng.standard_normal((12, 4))
    W = rng.standard_normal((8, 4))
    h = rng.standard_normal(8)
    cand = np.array([3, 0, 5, 9])
    loss, g = ntp_loss(h, 3, cand, table, {"head.proj": W})
    eps = 1e-6
    for i in range(8):
        e = np.zeros(8)
        e[i] = eps
        num = (ntp_loss(h + e, 3, cand, table, {"head.proj": W})[0]
               - ntp_loss(h - e, 3, cand, table, {"head.proj": W})[0]) / (2 * eps)
        assert g["h"][i] == pytest.approx(num, rel=1e-6, abs=1e-9)
    # only candidate rows of the table receive gradient
    touched = np.flatnonzero(np.abs(g["item_vectors"]).sum(axis=1))
    assert set(touched.tolist()) <= set(cand.tolist())


def test_decoder_config_validation():
    with pytest.raises(ConfigError):
        DecoderConfig(mode="tied")
    with pytest.raises(ConfigError):
        DecoderConfig(sampling="uniform", fraction=0.0)


def test_single_scoring_call_per_batch(monkeypatch):
    calls = []
    real = decoder.candidate_logits

    def counting(*a, **k):
        calls.append(1)
        return real(*a, **k)

    monkeypatch.setattr(decoder, "candidate_logits", counting)
    table = np.random.default_rng(0).standard_normal((10, 4))
    ntp_loss(np.ones(4), 2, None, table, {})
    assert len(calls) == 1
