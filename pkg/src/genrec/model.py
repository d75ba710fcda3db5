"""End-to-end recommender: batching from event logs, loss with gradients, scoring.

Positions inside a window are trained to answer the request made by the next
event: the next event's task and hour bucket are folded into the position's
token, and its targets are either that next item (NTP) or the decayed label set
of future same-task high-value events (MTP).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from .backbone import ModelConfig, TokenBatch
from .cold_start import MaskingConfig, apply_masking, item_tower, item_tower_backward
from .cost import n_sampled
from .decoder import DecoderConfig, build_candidates, project_head, sample_negatives_batch, softmax_loss
from .errors import ConfigError, InternalError
from .mtp import MtpConfig, build_label_arrays
from .world import EventLog, TitleCatalog

OBJECTIVES = ("ntp", "mtp")


@dataclass
class TrainBatch:
    tokens: TokenBatch
    targets: np.ndarray  # (B, S, K) item ids, -1 padding
    weights: np.ndarray  # (B, S, K)
    target_oov: np.ndarray  # (B, S, K) output-side OOV routing


def model_config_for(catalog: TitleCatalog, **kw) -> ModelConfig:
    """Model config whose vocabulary and feature widths match a catalog."""
    return ModelConfig(vocab=len(catalog), n_in_vocab=catalog.n_in_vocab,
                       semantic_dims=catalog.semantic_dims, **kw)


class SequenceData:
    """Training windows over a (user, time)-sorted history log."""

    def __init__(self, log: EventLog, n_users: int, seq_len: int, objective: str = "ntp",
                 mtp: MtpConfig | None = None):
        if objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {objective!r}")
        self.log = log
        self.seq_len = seq_len
        self.objective = objective
        self.mtp = mtp or MtpConfig()
        offsets = log.user_offsets(n_users)
        n = len(log)
        # request index for every position: the next event of the same user
        nxt = np.arange(1, n + 1)
        last = np.zeros(n, dtype=bool)
        ends = offsets[1:][offsets[1:] > offsets[:-1]] - 1
        last[ends] = True
        self.has_next = ~last
        self.next_index = np.where(self.has_next, nxt, 0)
        if objective == "ntp":
            self.label_items = log.item.reshape(-1, 1).astype(np.int64)
            self.label_weights = np.ones((n, 1))
        else:
            self.label_items, self.label_weights = build_label_arrays(log, self.mtp)
        starts = []
        for u in range(n_users):
            lo, hi = int(offsets[u]), int(offsets[u + 1])
            if hi - lo < 2:
                continue
            s = hi - seq_len
            while s > lo:
                starts.append(s)
                s -= seq_len
            starts.append(lo)
        self.starts = np.array(sorted(starts), dtype=np.int64)
        self.stops = np.minimum(self.starts + seq_len, offsets[np.searchsorted(offsets, self.starts, side="right")])
        if self.starts.size == 0:
            raise ConfigError("no user has at least two history events")

    @property
    def n_windows(self) -> int:
        return int(self.starts.size)

    def batch(self, window_ids) -> TrainBatch:
        window_ids = np.asarray(window_ids)
        B, S = window_ids.size, self.seq_len
        lens = (self.stops - self.starts)[window_ids]
        p = np.arange(S)
        valid = p[None, :] < lens[:, None]
        g = np.where(valid, self.starts[window_ids][:, None] + p[None, :], 0)
        log = self.log
        req = self.next_index[g]
        has_req = valid & self.has_next[g]
        req = np.where(has_req, req, 0)
        tokens = TokenBatch(
            items=np.where(valid, log.item[g], 0),
            context=np.where(valid[..., None], log.context[g], 0),
            task=np.where(valid, log.task[g], 0),
            valid=valid,
            req_task=np.where(has_req, log.task[req], 0),
            req_hour=np.where(has_req, log.context[req, 1], 0),
            use_oov=np.zeros((B, S), dtype=bool),
        )
        K = self.label_items.shape[1]
        targets = np.where(has_req[..., None], self.label_items[req], -1)
        weights = np.where(targets >= 0, self.label_weights[req], 0.0)
        return TrainBatch(tokens, targets, weights, np.zeros((B, S, K), dtype=bool))


def query_tokens(log: EventLog, offsets, users, req_task, req_hour, seq_len: int):
    """Windows of the last ``seq_len`` events per query user, request folded into the last slot.

    Returns ``(tokens, last_position)``. Users without history must be filtered
    out by the caller.
    """
    users = np.asarray(users, dtype=np.int64)
    lo, hi = offsets[users], offsets[users + 1]
    if (hi <= lo).any():
        raise InternalError("query user without history")
    start = np.maximum(lo, hi - seq_len)
    lens = hi - start
    p = np.arange(seq_len)
    valid = p[None, :] < lens[:, None]
    g = np.where(valid, start[:, None] + p[None, :], 0)
    last = lens - 1
    nxt = np.where(valid & (p[None, :] < last[:, None]), g + 1, 0)
    rt = np.where(valid, log.task[nxt], 0)
    rh = np.where(valid, log.context[nxt, 1], 0)
    rows = np.arange(users.size)
    rt[rows, last] = req_task
    rh[rows, last] = req_hour
    tokens = TokenBatch(
        items=np.where(valid, log.item[g], 0),
        context=np.where(valid[..., None], log.context[g], 0),
        task=np.where(valid, log.task[g], 0),
        valid=valid, req_task=rt, req_hour=rh,
        use_oov=np.zeros(valid.shape, dtype=bool),
    )
    return tokens, last


class Recommender:
    """Parameters plus the catalog-side inputs needed to score titles."""

    def __init__(self, cfg: ModelConfig, params: dict, features: np.ndarray, in_vocab: np.ndarray):
        if len(features) != cfg.vocab or len(in_vocab) != cfg.vocab:
            raise ConfigError("catalog size does not match model vocabulary")
        self.cfg = cfg
        self.params = params
        self.features = np.asarray(features)
        self.in_vocab = np.asarray(in_vocab, dtype=bool)
        self.train_ids = np.flatnonzero(self.in_vocab)
        self.id_to_row = np.full(cfg.vocab, -1, dtype=np.int64)
        self.id_to_row[self.train_ids] = np.arange(self.train_ids.size)

    @classmethod
    def create(cls, cfg: ModelConfig, catalog: TitleCatalog, seed: int = 0) -> "Recommender":
        return cls(cfg, bb.init_params(cfg, seed), catalog.features, catalog.in_vocab)

    # -- encoding -----------------------------------------------------------

    def encode(self, tokens: TokenBatch):
        tok, ecache = bb.embed_events(self.params, tokens, self.features, self.in_vocab)
        tok = bb.add_request_context(self.params, tok, tokens)
        h, bcache = bb.forward(self.params, tok, self.cfg)
        return h, (ecache, bcache)

    def user_states(self, tokens: TokenBatch, last) -> np.ndarray:
        h, _ = self.encode(tokens)
        return h[np.arange(h.shape[0]), last]

    def item_matrix(self, ids=None) -> np.ndarray:
        """Item-side vectors with OOV routing for out-of-vocabulary titles."""
        ids = np.arange(self.cfg.vocab) if ids is None else np.asarray(ids)
        v, _ = item_tower(self.params, ids, self.features, self.in_vocab)
        return v

    def scores(self, h, ids=None) -> np.ndarray:
        return project_head(h, self.params) @ self.item_matrix(ids).T

    def score_queries(self, dataset, ex, cand_ids) -> np.ndarray:
        """Scores ``(len(ex), len(cand_ids))`` for evaluation examples of a dataset."""
        tokens, last = query_tokens(dataset.histories, dataset.history_offsets, ex.user,
                                    ex.task, ex.req_hour, self.cfg.seq_len)
        return self.scores(self.user_states(tokens, last), cand_ids)

    # -- training -----------------------------------------------------------

    def loss_and_grads(self, batch: TrainBatch, decoder: DecoderConfig = DecoderConfig(),
                       rng: np.random.Generator | None = None,
                       masking: MaskingConfig | None = None):
        """Mean loss over positions with a non-empty label set, plus gradients."""
        params, cfg = self.params, self.cfg
        if masking is not None and masking.p_mask > 0:
            if rng is None:
                raise ConfigError("masking needs an rng")
            batch = apply_masking(batch, masking, rng)
        tokens = batch.tokens
        h, (ecache, bcache) = self.encode(tokens)
        rows = (batch.weights > 0).any(axis=-1)
        hs = h[rows]
        T = batch.targets[rows]
        W = batch.weights[rows].astype(h.dtype)
        O = batch.target_oov[rows] & (T >= 0)
        if (T >= 0).any() and (self.id_to_row[np.maximum(T[T >= 0], 0)] < 0).any():
            raise InternalError("training target outside the vocabulary")
        T_rows = np.where(T >= 0, self.id_to_row[np.maximum(T, 0)], -1)
        iv, icache = item_tower(params, self.train_ids, self.features, self.in_vocab)
        cand = None
        if decoder.sampling == "uniform":
            if rng is None:
                raise ConfigError("sampled softmax needs an rng")
            n_in = self.train_ids.size
            m = min(n_sampled(n_in, decoder.fraction), n_in - T.shape[1])
            neg = sample_negatives_batch(rng, n_in, m, T_rows)
            cand, _ = build_candidates(T_rows, neg)
        kw = {}
        tcache = None
        if O.any():
            tv_m, tcache = item_tower(params, T[O], self.features, self.in_vocab,
                                      force_oov=np.ones(int(O.sum()), dtype=bool))
            tv = np.zeros(T.shape + (iv.shape[1],), dtype=iv.dtype)
            tv[O] = tv_m
            kw = dict(target_vectors=tv, target_override=O)
        loss, g = softmax_loss(hs, T_rows, W, cand, iv, params, **kw)
        grads = bb.zeros_like(params)
        if "head.proj" in g:
            grads["head.proj"] += g["head.proj"]
        item_tower_backward(g["item_vectors"], icache, params, grads)
        if tcache is not None:
            item_tower_backward(g["target_vectors"][O], tcache, params, grads)
        dh = np.zeros_like(h)
        dh[rows] = g["h"]
        dtok = bb.backward(params, bcache, dh, cfg, grads)
        bb.add_request_context_backward(dtok, tokens, grads)
        bb.embed_events_backward(dtok, tokens, ecache, grads)
        return loss, grads
