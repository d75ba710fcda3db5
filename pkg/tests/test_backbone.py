import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genrec import backbone as bb
from genrec.backbone import ModelConfig, TokenBatch, param_count, param_shapes
from genrec.errors import ConfigError, InputError, InternalError, NumericError
from genrec.gradcheck import check_gradients


def tokens_for(items, S=None, n_ctx=(2, 8, 4, 3)):
    items = np.atleast_2d(items)
    B, S = items.shape
    z = np.zeros((B, S), dtype=np.int64)
    return TokenBatch(items=items, context=np.zeros((B, S, len(n_ctx)), dtype=np.int64), task=z.copy(),
                      valid=np.ones((B, S), bool), req_task=z.copy(), req_hour=z.copy(),
                      use_oov=np.zeros((B, S), bool))


def small_cfg(**kw):
    base = dict(layers=2, d=8, heads=2, seq_len=6, vocab=10, semantic_dims=(2, 2, 1), precision="f64")
    return ModelConfig(**{**base, **kw})


def test_zero_features_and_context_give_id_row():
    cfg = small_cfg()
    p = bb.init_params(cfg, 0)
    for k in p:
        if k.startswith("ctx."):
            p[k][:] = 0.0
    feats = np.zeros((cfg.vocab, cfg.n_features))
    tok, _ = bb.embed_events(p, tokens_for([[3, 7]]), feats)
    assert np.array_equal(tok[0], p["item_emb"][[3, 7]])


def test_oov_routing_and_permutation():
    cfg = small_cfg()
    p = bb.init_params(cfg, 0)
    feats = np.random.default_rng(0).standard_normal((cfg.vocab, cfg.n_features))
    batch = tokens_for([[3, 7, 1]])
    batch.use_oov[0, 1] = True
    tok, _ = bb.embed_events(p, batch, feats)
    plain, _ = bb.embed_events(p, tokens_for([[3, 7, 1]]), feats)
    assert np.allclose(tok[0, 1] - plain[0, 1], p["oov_emb"] - p["item_emb"][7])
    assert np.array_equal(tok[0, [0, 2]], plain[0, [0, 2]])
    swapped, _ = bb.embed_events(p, tokens_for([[1, 7, 3]]), feats)
    assert np.array_equal(swapped[0], plain[0, [2, 1, 0]])


def test_unknown_item_without_oov_is_input_error():
    cfg = small_cfg()
    p = bb.init_params(cfg, 0)
    with pytest.raises(InputError):
        bb.embed_events(p, tokens_for([[3, 10]]), np.zeros((11, cfg.n_features)))
    in_vocab = np.ones(11, bool)
    tok, cache = bb.embed_events(p, tokens_for([[3, 10]]), np.zeros((11, cfg.n_features)), in_vocab)
    assert cache["oov"].tolist() == [[False, True]]


def test_forward_is_causal_bitwise():
    cfg = small_cfg()
    p = bb.init_params(cfg, 1)
    x = np.random.default_rng(2).standard_normal((2, 6, 8))
    h, _ = bb.forward(p, x, cfg)
    for t in range(5):
        y = x.copy()
        y[:, t + 1:] += np.random.default_rng(t).standard_normal(y[:, t + 1:].shape)
        h2, _ = bb.forward(p, y, cfg)
        assert np.array_equal(h[:, :t + 1], h2[:, :t + 1])


def test_gradient_of_earlier_position_ignores_later_tokens():
    cfg = small_cfg()
    p = bb.init_params(cfg, 1)
    x = np.random.default_rng(2).standard_normal((1, 6, 8))
    h, cache = bb.forward(p, x, cfg)
    dh = np.zeros_like(h)
    dh[0, 2] = np.random.default_rng(3).standard_normal(8)
    dx = bb.backward(p, cache, dh, cfg)
    assert np.all(dx[0, 3:] == 0.0)
    assert np.abs(dx[0, :3]).sum() > 0


def test_zero_layers_rejected_and_shape_checks():
    with pytest.raises(ConfigError):
        small_cfg(layers=0)
    with pytest.raises(ConfigError):
        small_cfg(d=12)
    with pytest.raises(ConfigError):
        small_cfg(heads=3)
    cfg = small_cfg()
    p = bb.init_params(cfg, 0)
    with pytest.raises(InternalError):
        bb.forward(p, np.zeros((1, 7, 8)), cfg)
    h, cache = bb.forward(p, np.zeros((1, 3, 8)), cfg)
    with pytest.raises((InternalError, ValueError)):
        bb.backward(p, cache, np.zeros((1, 4, 8)), cfg)


def _layer_norm(x, g, b):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / math.sqrt(var + bb.LN_EPS) * g + b


def _gelu(v):
    return 0.5 * v * (1 + np.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3)))


def test_single_position_matches_hand_oracle():
    # one position: attention weight is exactly 1, so the block reduces to v @ wo
    cfg = small_cfg(layers=1)
    p = bb.init_params(cfg, 3)
    rng = np.random.default_rng(4)
    for k in p:
        if k.endswith((".g", ".b")):
            p[k] = p[k] + 0.1 * rng.standard_normal(p[k].shape)
    tok = rng.standard_normal(8)
    h, _ = bb.forward(p, tok[None, None, :], cfg)
    x = tok + p["pos_emb"][0]
    x = x + _layer_norm(x, p["l0.ln1.g"], p["l0.ln1.b"]) @ p["l0.wv"] @ p["l0.wo"]
    x = x + _gelu(_layer_norm(x, p["l0.ln2.g"], p["l0.ln2.b"]) @ p["l0.w1"]) @ p["l0.w2"]
    expected = _layer_norm(x, p["lnf.g"], p["lnf.b"])
    assert np.allclose(h[0, 0], expected, atol=1e-12)


def test_zero_upstream_gives_zero_gradients():
    cfg = small_cfg(d_backbone=16)
    p = bb.init_params(cfg, 0)
    h, cache = bb.forward(p, np.random.default_rng(0).standard_normal((2, 4, 8)), cfg)
    grads = bb.zeros_like(p)
    dx = bb.backward(p, cache, np.zeros_like(h), cfg, grads)
    assert not dx.any()
    assert not any(g.any() for g in grads.values())


@pytest.mark.parametrize("d_backbone", [None, 16])
def test_backbone_gradients_match_finite_differences(d_backbone):
    cfg = small_cfg(d_backbone=d_backbone)
    p = bb.init_params(cfg, 2)
    rng = np.random.default_rng(6)
    for k in p:
        if k.endswith((".g", ".b")):
            p[k] = p[k] + 0.1 * rng.standard_normal(p[k].shape)
    x = rng.standard_normal((2, 5, 8))
    R = rng.standard_normal((2, 5, 8))

    def loss():
        return float((bb.forward(p, x, cfg)[0] * R).sum())

    h, cache = bb.forward(p, x, cfg)
    grads = bb.zeros_like(p)
    dx = bb.backward(p, cache, R, cfg, grads)
    names = [k for k, (_, sc) in param_shapes(cfg).items() if sc == "backbone"] + ["pos_emb"]
    err, per = check_gradients(loss, p, grads, names=names)
    assert err < 1e-4, per
    # and with respect to the tokens themselves
    xs = {"x": x}
    err_x, _ = check_gradients(lambda: float((bb.forward(p, xs["x"], cfg)[0] * R).sum()), xs, {"x": dx})
    assert err_x < 1e-4


def test_non_finite_activation_names_layer():
    cfg = small_cfg()
    p = bb.init_params(cfg, 0)
    p["l1.w2"][:] = np.inf
    with pytest.raises(NumericError) as e, np.errstate(invalid="ignore", over="ignore"):
        bb.forward(p, np.ones((1, 2, 8)), cfg)
    assert e.value.layer == 1


def test_param_count_reference_scale():
    cfg = ModelConfig(layers=6, d=1024, heads=8, seq_len=512, vocab=1000)
    n = param_count(cfg, "backbone_only")
    assert n == 12 * 6 * 1024 ** 2 + 6 * 4 * 1024 + 2 * 1024
    assert n == pytest.approx(7.55e7, rel=5e-3)


def test_embedding_scope_includes_id_table():
    cfg = ModelConfig(vocab=1000, d=32)
    shapes = param_shapes(cfg)
    assert shapes["item_emb"] == ((1000, 32), "embeddings")
    emb = param_count(cfg, "embeddings")
    assert emb >= 32_000 + shapes["sem_in"][0][0] * 32


@settings(max_examples=30, deadline=None)
@given(layers=st.integers(1, 4), d=st.sampled_from([8, 16, 32]), width=st.sampled_from([None, 8, 24, 64]),
       head_mode=st.sampled_from(["full", "projected"]), tower=st.sampled_from(["semantic", "table"]),
       vocab=st.integers(2, 500))
def test_scopes_partition_every_tensor(layers, d, width, head_mode, tower, vocab):
    cfg = ModelConfig(layers=layers, d=d, heads=2, d_backbone=width, vocab=vocab, head_mode=head_mode,
                      item_tower=tower)
    total = sum(int(np.prod(s)) for s, _ in param_shapes(cfg).values())
    parts = [param_count(cfg, s) for s in ("backbone_only", "embeddings", "decoding")]
    assert sum(parts) == param_count(cfg, "total") == total
    assert {sc for _, sc in param_shapes(cfg).values()} <= {"backbone", "embeddings", "decoding"}
    p = bb.init_params(cfg, 0)
    assert set(p) == set(param_shapes(cfg))
    assert all(np.isfinite(v).all() for v in p.values())
