"""Semantic title tower, OOV routing and collaborative-embedding masking.

A title's item-side vector is built from two parts: its collaborative ID
embedding (or the single shared OOV vector when the title is outside the
vocabulary or masked), and a semantic code ``z`` computed from its graph,
language and annotation features. A two-layer MLP merges the two into the
vector that the projected user state is scored against. Context fields never
enter the item side.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .backbone import gelu, gelu_grad
from .decoder import project_head
from .errors import ConfigError, InputError

SIDES = ("input", "output", "either")


def phi_sem(features, params):
    """Semantic code ``z`` from concatenated (graph, lang, ann) features."""
    W = params["sem.phi_w"]
    features = np.asarray(features)
    if features.shape[-1] != W.shape[0]:
        raise InputError(f"feature width {features.shape[-1]} != expected {W.shape[0]}")
    return features.astype(W.dtype, copy=False) @ W + params["sem.phi_b"]


def resolve_id_embedding(ids, in_vocab, params, force_oov=None):
    """ID-table row for in-vocabulary titles, the shared OOV vector otherwise.

    Returns ``(emb, oov_flags)``. ``in_vocab`` is a boolean array over all
    catalog ids; ``force_oov`` marks instances masked during training.
    """
    ids = np.asarray(ids, dtype=np.int64)
    table = params["item_emb"]
    if in_vocab is None:
        oov = ids >= table.shape[0]
    else:
        in_vocab = np.asarray(in_vocab, dtype=bool)
        if in_vocab.size and not in_vocab.any():
            raise ConfigError("vocabulary is empty")
        oov = ~in_vocab[np.clip(ids, 0, len(in_vocab) - 1)] | (ids >= table.shape[0])
    if force_oov is not None:
        oov = oov | np.asarray(force_oov, dtype=bool)
    emb = table[np.where(oov, 0, np.clip(ids, 0, table.shape[0] - 1))]
    emb = np.where(oov[..., None], params["oov_emb"], emb)
    return emb, oov


def title_vector(e_id, z, params):
    """``v = W2 gelu(W1 [e_id; z] + b1) + b2``; returns ``(v, cache)``."""
    x = np.concatenate([e_id, z], axis=-1)
    a = x @ params["sem.psi_w1"] + params["sem.psi_b1"]
    g = gelu(a)
    v = g @ params["sem.psi_w2"] + params["sem.psi_b2"]
    return v, (x, a, g)


def title_vector_backward(dv, cache, params, grads):
    """Accumulate MLP grads; return ``(d e_id, d z)``."""
    x, a, g = cache
    grads["sem.psi_w2"] += g.reshape(-1, g.shape[-1]).T @ dv.reshape(-1, dv.shape[-1])
    grads["sem.psi_b2"] += dv.reshape(-1, dv.shape[-1]).sum(axis=0)
    da = (dv @ params["sem.psi_w2"].T) * gelu_grad(a)
    grads["sem.psi_w1"] += x.reshape(-1, x.shape[-1]).T @ da.reshape(-1, da.shape[-1])
    grads["sem.psi_b1"] += da.reshape(-1, da.shape[-1]).sum(axis=0)
    dx = da @ params["sem.psi_w1"].T
    d = params["item_emb"].shape[1]
    return dx[..., :d], dx[..., d:]


def score(h, v, params):
    """``s(u, i) = g(h_u) . v_i`` for every pair of rows (``(n, m)`` matrix)."""
    return project_head(h, params) @ np.asarray(v).T


@dataclass
class TowerCache:
    ids: np.ndarray
    oov: np.ndarray
    feats: np.ndarray
    mlp: tuple | None


def item_tower(params, ids, features, in_vocab=None, force_oov=None):
    """Item-side vectors for catalog ``ids`` (any shape); returns ``(v, cache)``.

    With a plain table decoder (``dec.table`` present) the ID row is used
    directly and OOV routing does not apply.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if "dec.table" in params:
        return params["dec.table"][ids], TowerCache(ids, np.zeros(ids.shape, bool), None, None)
    feats = np.asarray(features)[ids]
    z = phi_sem(feats, params)
    e_id, oov = resolve_id_embedding(ids, in_vocab, params, force_oov)
    v, mlp = title_vector(e_id, z, params)
    return v, TowerCache(ids, oov, feats, mlp)


def item_tower_backward(dv, cache: TowerCache, params, grads):
    if cache.mlp is None:
        np.add.at(grads["dec.table"], cache.ids.reshape(-1), dv.reshape(-1, dv.shape[-1]))
        return
    de, dz = title_vector_backward(dv, cache.mlp, params, grads)
    F = cache.feats.reshape(-1, cache.feats.shape[-1]).astype(dz.dtype, copy=False)
    dz2 = dz.reshape(-1, dz.shape[-1])
    grads["sem.phi_w"] += F.T @ dz2
    grads["sem.phi_b"] += dz2.sum(axis=0)
    de2 = de.reshape(-1, de.shape[-1])
    oov = cache.oov.reshape(-1)
    grads["oov_emb"] += de2[oov].sum(axis=0)
    np.add.at(grads["item_emb"], cache.ids.reshape(-1)[~oov], de2[~oov])


@dataclass(frozen=True)
class MaskingConfig:
    p_mask: float = 0.0
    side: str = "either"

    def __post_init__(self):
        if not 0.0 <= self.p_mask <= 1.0:
            raise ConfigError(f"p_mask must lie in [0, 1], got {self.p_mask}")
        if self.side not in SIDES:
            raise ConfigError(f"unknown mask side {self.side!r}; expected one of {SIDES}")


def draw_masks(shape, cfg: MaskingConfig, rng: np.random.Generator):
    """Per-position ``(input_mask, output_mask)`` boolean arrays.

    Each position is one masking instance. Under ``either`` a masked instance
    picks exactly one side uniformly.
    """
    if cfg.p_mask == 0.0:
        z = np.zeros(shape, dtype=bool)
        return z, z.copy()
    hit = rng.random(shape) < cfg.p_mask
    if cfg.side == "input":
        return hit, np.zeros(shape, dtype=bool)
    if cfg.side == "output":
        return np.zeros(shape, dtype=bool), hit
    to_input = rng.random(shape) < 0.5
    return hit & to_input, hit & ~to_input


def apply_masking(batch, cfg: MaskingConfig, seed):
    """Copy of a training batch with mask flags set.

    Input-side masks route the position's event token through the OOV vector;
    output-side masks route every target of that position through it.
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if cfg.p_mask == 0.0:
        return batch
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    valid = batch.tokens.valid
    m_in, m_out = draw_masks(valid.shape, cfg, rng)
    m_in &= valid
    m_out &= valid
    tokens = dataclasses.replace(batch.tokens, use_oov=batch.tokens.use_oov | m_in)
    target_oov = batch.target_oov | (m_out[..., None] & (batch.targets >= 0))
    return dataclasses.replace(batch, tokens=tokens, target_oov=target_oov)
