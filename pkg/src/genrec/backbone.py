"""Causal sequence encoder over fused event tokens, with explicit backward.

Each event becomes one token: the item's ID embedding (or the shared OOV
vector), a linear projection of its semantic features, and one embedding per
context field, all summed. The encoder is a pre-norm transformer with learned
positions and tanh-GELU feed-forward blocks. When the backbone width differs
from the embedding width, a pair of linear maps moves in and out of the
residual stream; those maps count as backbone parameters.

Parameter scopes partition every tensor:

``backbone``    attention/FFN weights, layer norms, width adapters
``embeddings``  ID table, OOV vector, semantic input projection, context,
                request and position embeddings
``decoding``    projected head, item-side table or semantic title tower
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, InternalError, NumericError

SCOPES = ("backbone_only", "embeddings", "decoding", "total")
CONTEXT_FIELDS = ("action", "hour", "page", "country")
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    d: int = 32
    heads: int = 2
    seq_len: int = 64
    vocab: int = 1000
    n_in_vocab: int | None = None
    d_backbone: int | None = None
    proj_factor: int = 8
    semantic_dims: tuple = (8, 8, 4)
    d_z: int | None = None
    head_mode: str = "full"  # full | projected
    item_tower: str = "semantic"  # semantic | table
    context_sizes: tuple = (2, 8, 4, 3)
    n_tasks: int = 3
    precision: str = "f32"
    init_scale: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "semantic_dims", tuple(int(v) for v in self.semantic_dims))
        object.__setattr__(self, "context_sizes", tuple(int(v) for v in self.context_sizes))
        self.validate()

    def validate(self):
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.d < 8 or self.d % 8:
            raise ConfigError(f"d must be a positive multiple of 8, got {self.d}")
        if self.proj_factor != 8:
            raise ConfigError("proj_factor is fixed at 8")
        db = self.width
        if self.heads < 1 or db % self.heads:
            raise ConfigError(f"heads={self.heads} must divide backbone width {db}")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2")
        if self.vocab < 2:
            raise ConfigError("vocab must be >= 2")
        if not 1 <= self.vocab_in <= self.vocab:
            raise ConfigError("n_in_vocab must lie in [1, vocab]")
        if self.head_mode not in ("full", "projected"):
            raise ConfigError(f"unknown head_mode {self.head_mode!r}")
        if self.item_tower not in ("semantic", "table"):
            raise ConfigError(f"unknown item_tower {self.item_tower!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if len(self.context_sizes) != len(CONTEXT_FIELDS):
            raise ConfigError("context_sizes needs one entry per context field")
        if min(self.semantic_dims) < 1:
            raise ConfigError("semantic dims must be >= 1")

    @property
    def width(self) -> int:
        return self.d_backbone or self.d

    @property
    def vocab_in(self) -> int:
        return self.vocab if self.n_in_vocab is None else self.n_in_vocab

    @property
    def dz(self) -> int:
        return self.d_z or self.d // 2

    @property
    def d_out(self) -> int:
        return self.d // self.proj_factor if self.head_mode == "projected" else self.d

    @property
    def n_features(self) -> int:
        return sum(self.semantic_dims)

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Name -> (shape, scope) for every tensor, in checkpoint order."""
    d, db, V = cfg.d, cfg.width, cfg.vocab
    s: dict[str, tuple[tuple[int, ...], str]] = {}
    s["item_emb"] = ((V, d), "embeddings")
    s["oov_emb"] = ((d,), "embeddings")
    s["sem_in"] = ((cfg.n_features, d), "embeddings")
    for name, size in zip(CONTEXT_FIELDS, cfg.context_sizes):
        s[f"ctx.{name}"] = ((size, d), "embeddings")
    s["ctx.task"] = ((cfg.n_tasks, d), "embeddings")
    s["req.task"] = ((cfg.n_tasks, d), "embeddings")
    s["req.hour"] = ((cfg.context_sizes[1], d), "embeddings")
    s["pos_emb"] = ((cfg.seq_len, d), "embeddings")
    if db != d:
        s["bb.in"] = ((d, db), "backbone")
    for i in range(cfg.layers):
        p = f"l{i}."
        s[p + "ln1.g"] = ((db,), "backbone")
        s[p + "ln1.b"] = ((db,), "backbone")
        for w in ("wq", "wk", "wv", "wo"):
            s[p + w] = ((db, db), "backbone")
        s[p + "ln2.g"] = ((db,), "backbone")
        s[p + "ln2.b"] = ((db,), "backbone")
        s[p + "w1"] = ((db, 4 * db), "backbone")
        s[p + "w2"] = ((4 * db, db), "backbone")
    s["lnf.g"] = ((db,), "backbone")
    s["lnf.b"] = ((db,), "backbone")
    if db != d:
        s["bb.out"] = ((db, d), "backbone")
    if cfg.head_mode == "projected":
        s["head.proj"] = ((d, cfg.d_out), "decoding")
    if cfg.item_tower == "table":
        s["dec.table"] = ((V, cfg.d_out), "decoding")
    else:
        s["sem.phi_w"] = ((cfg.n_features, cfg.dz), "decoding")
        s["sem.phi_b"] = ((cfg.dz,), "decoding")
        s["sem.psi_w1"] = ((d + cfg.dz, d), "decoding")
        s["sem.psi_b1"] = ((d,), "decoding")
        s["sem.psi_w2"] = ((d, cfg.d_out), "decoding")
        s["sem.psi_b2"] = ((cfg.d_out,), "decoding")
    return s


def param_count(cfg: ModelConfig, scope: str = "backbone_only") -> int:
    if scope not in SCOPES:
        raise ConfigError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    want = {"backbone_only": "backbone"}.get(scope, scope)
    return sum(int(np.prod(shape)) for shape, sc in param_shapes(cfg).values()
               if scope == "total" or sc == want)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 17]))
    dt = cfg.dtype
    params = {}
    for name, (shape, _) in param_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith((".b", "_b", "_b1", "_b2")):
            arr = np.zeros(shape)
        elif len(shape) == 2 and not name.startswith(("item_emb", "sem_in", "ctx.", "req.", "pos_emb", "dec.table")):
            arr = rng.standard_normal(shape) / math.sqrt(shape[0])
            if name.endswith(("wo", "w2")):
                arr *= 1.0 / math.sqrt(2 * cfg.layers)
        else:
            arr = cfg.init_scale * rng.standard_normal(shape)
        params[name] = arr.astype(dt)
    return params


def zeros_like(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# event tokens


@dataclass
class TokenBatch:
    """Per-position inputs for one batch of event windows (right-padded)."""

    items: np.ndarray  # (B, S) catalog ids
    context: np.ndarray  # (B, S, 4)
    task: np.ndarray  # (B, S)
    valid: np.ndarray  # (B, S) real (non-padding) positions
    req_task: np.ndarray  # (B, S) task of the request each position answers
    req_hour: np.ndarray  # (B, S)
    use_oov: np.ndarray  # (B, S) route the ID side through the OOV vector


def embed_events(params, batch: TokenBatch, features: np.ndarray, in_vocab: np.ndarray | None = None):
    """Sum ID (or OOV), semantic and context embeddings per event.

    ``in_vocab`` enables OOV routing for titles outside the vocabulary; without
    it an id past the ID table is an input error.
    """
    items = batch.items
    V = params["item_emb"].shape[0]
    if items.size and (items.min() < 0 or items.max() >= V):
        if in_vocab is None:
            raise InputError(f"item id outside [0, {V}) and no OOV routing enabled")
    oov = batch.use_oov.copy()
    if in_vocab is not None:
        safe = np.clip(items, 0, len(in_vocab) - 1)
        oov |= ~in_vocab[safe] | (items >= V)
    ids = np.where(oov, 0, np.clip(items, 0, V - 1))
    tok = params["item_emb"][ids]
    tok = np.where(oov[..., None], params["oov_emb"], tok)
    feats = features[np.clip(items, 0, len(features) - 1)].astype(tok.dtype, copy=False)
    tok = tok + feats @ params["sem_in"]
    for j, name in enumerate(CONTEXT_FIELDS):
        tok = tok + params[f"ctx.{name}"][batch.context[..., j]]
    tok = tok + params["ctx.task"][batch.task]
    cache = {"ids": ids, "oov": oov, "feats": feats}
    return tok, cache


def embed_events_backward(dtok, batch: TokenBatch, cache, grads):
    d = dtok.shape[-1]
    flat = dtok.reshape(-1, d)
    oov = cache["oov"].reshape(-1)
    ids = cache["ids"].reshape(-1)
    np.add.at(grads["item_emb"], ids[~oov], flat[~oov])
    grads["oov_emb"] += flat[oov].sum(axis=0)
    grads["sem_in"] += cache["feats"].reshape(-1, cache["feats"].shape[-1]).T @ flat
    for j, name in enumerate(CONTEXT_FIELDS):
        np.add.at(grads[f"ctx.{name}"], batch.context[..., j].reshape(-1), flat)
    np.add.at(grads["ctx.task"], batch.task.reshape(-1), flat)


def add_request_context(params, tok, batch: TokenBatch):
    """Fold the next request's task and hour bucket into each position."""
    return tok + params["req.task"][batch.req_task] + params["req.hour"][batch.req_hour]


def add_request_context_backward(dtok, batch: TokenBatch, grads):
    d = dtok.shape[-1]
    flat = dtok.reshape(-1, d)
    np.add.at(grads["req.task"], batch.req_task.reshape(-1), flat)
    np.add.at(grads["req.hour"], batch.req_hour.reshape(-1), flat)


# ---------------------------------------------------------------------------
# primitives


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_bwd(dy, cache, g):
    xhat, rstd = cache
    D = xhat.shape[-1]
    dg = (dy * xhat).reshape(-1, D).sum(axis=0)
    db = dy.reshape(-1, D).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def gelu_grad(x):
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)


def _causal_mask(S):
    return np.triu(np.ones((S, S), dtype=bool), k=1)


def _attn_fwd(x, p, pre, heads):
    B, S, D = x.shape
    dh = D // heads
    q = (x @ p[pre + "wq"]).reshape(B, S, heads, dh).transpose(0, 2, 1, 3)
    k = (x @ p[pre + "wk"]).reshape(B, S, heads, dh).transpose(0, 2, 1, 3)
    v = (x @ p[pre + "wv"]).reshape(B, S, heads, dh).transpose(0, 2, 1, 3)
    scale = 1.0 / math.sqrt(dh)
    sc = (q @ k.transpose(0, 1, 3, 2)) * scale
    sc = np.where(_causal_mask(S), -np.inf, sc)
    sc = sc - sc.max(axis=-1, keepdims=True)
    e = np.exp(sc)
    P = e / e.sum(axis=-1, keepdims=True)
    o = (P @ v).transpose(0, 2, 1, 3).reshape(B, S, D)
    y = o @ p[pre + "wo"]
    return y, (x, q, k, v, P, o, scale)


def _attn_bwd(dy, cache, p, pre, heads, g):
    x, q, k, v, P, o, scale = cache
    B, S, D = x.shape
    dh = D // heads
    g[pre + "wo"] += o.reshape(-1, D).T @ dy.reshape(-1, D)
    do = (dy @ p[pre + "wo"].T).reshape(B, S, heads, dh).transpose(0, 2, 1, 3)
    dP = do @ v.transpose(0, 1, 3, 2)
    dv = P.transpose(0, 1, 3, 2) @ do
    dsc = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
    dq = dsc @ k
    dk = dsc.transpose(0, 1, 3, 2) @ q
    merge = lambda t: t.transpose(0, 2, 1, 3).reshape(B, S, D)
    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    xf = x.reshape(-1, D)
    g[pre + "wq"] += xf.T @ dq.reshape(-1, D)
    g[pre + "wk"] += xf.T @ dk.reshape(-1, D)
    g[pre + "wv"] += xf.T @ dv.reshape(-1, D)
    return dq @ p[pre + "wq"].T + dk @ p[pre + "wk"].T + dv @ p[pre + "wv"].T


# ---------------------------------------------------------------------------
# encoder


def forward(params, tokens, cfg: ModelConfig):
    """Hidden states ``(B, S, d)``; position ``t`` only sees tokens ``<= t``."""
    B, S, d = tokens.shape
    if S > cfg.seq_len or d != cfg.d:
        raise InternalError(f"token shape {tokens.shape} does not match config (S<={cfg.seq_len}, d={cfg.d})")
    cache = {"S": S}
    x = tokens + params["pos_emb"][:S]
    if "bb.in" in params:
        cache["x_in"] = x
        x = x @ params["bb.in"]
    layers = []
    for i in range(cfg.layers):
        pre = f"l{i}."
        h1, c_ln1 = _ln_fwd(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        a, c_att = _attn_fwd(h1, params, pre, cfg.heads)
        x = x + a
        h2, c_ln2 = _ln_fwd(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        f1 = h2 @ params[pre + "w1"]
        gf1 = gelu(f1)
        x = x + gf1 @ params[pre + "w2"]
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite activations in layer {i}", layer=i)
        layers.append((c_ln1, c_att, c_ln2, h2, f1, gf1))
    cache["layers"] = layers
    h, cache["lnf"] = _ln_fwd(x, params["lnf.g"], params["lnf.b"])
    if "bb.out" in params:
        cache["h_pre_out"] = h
        h = h @ params["bb.out"]
    return h, cache


def backward(params, cache, dh, cfg: ModelConfig, grads=None):
    """Accumulate backbone gradients into ``grads``; return d(tokens)."""
    if grads is None:
        grads = zeros_like(params)
    if "bb.out" in params:
        hp = cache["h_pre_out"]
        if dh.shape[:-1] != hp.shape[:-1]:
            raise InternalError("upstream gradient shape mismatch")
        grads["bb.out"] += hp.reshape(-1, hp.shape[-1]).T @ dh.reshape(-1, dh.shape[-1])
        dh = dh @ params["bb.out"].T
    dx, dg, db = _ln_bwd(dh, cache["lnf"], params["lnf.g"])
    if dx.shape != cache["lnf"][0].shape:
        raise InternalError("upstream gradient shape mismatch")
    grads["lnf.g"] += dg
    grads["lnf.b"] += db
    for i in reversed(range(cfg.layers)):
        pre = f"l{i}."
        c_ln1, c_att, c_ln2, h2, f1, gf1 = cache["layers"][i]
        D = dx.shape[-1]
        grads[pre + "w2"] += gf1.reshape(-1, gf1.shape[-1]).T @ dx.reshape(-1, D)
        df1 = (dx @ params[pre + "w2"].T) * gelu_grad(f1)
        grads[pre + "w1"] += h2.reshape(-1, D).T @ df1.reshape(-1, df1.shape[-1])
        dh2 = df1 @ params[pre + "w1"].T
        dxx, dg, db = _ln_bwd(dh2, c_ln2, params[pre + "ln2.g"])
        grads[pre + "ln2.g"] += dg
        grads[pre + "ln2.b"] += db
        dx = dx + dxx
        dh1 = _attn_bwd(dx, c_att, params, pre, cfg.heads, grads)
        dxx, dg, db = _ln_bwd(dh1, c_ln1, params[pre + "ln1.g"])
        grads[pre + "ln1.g"] += dg
        grads[pre + "ln1.b"] += db
        dx = dx + dxx
    if "bb.in" in params:
        xin = cache["x_in"]
        grads["bb.in"] += xin.reshape(-1, xin.shape[-1]).T @ dx.reshape(-1, dx.shape[-1])
        dx = dx @ params["bb.in"].T
    S = cache["S"]
    grads["pos_emb"][:S] += dx.sum(axis=0)
    return dx
