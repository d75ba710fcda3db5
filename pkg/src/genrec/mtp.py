"""Multi-token prediction: time-decayed weighted label sets over future targets.

For a request at ``t_context`` the label set holds the first ``K`` future
high-value events inside the horizon. Each target ``i`` carries weight
``w_i = r_i * 2 ** (-(t_i - t_context) / half_life)``, unnormalized, and the
loss is ``-sum_i w_i log p(y_i | x)`` over one shared candidate scoring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import softmax_loss
from .errors import ConfigError, InternalError
from .world import HOUR, EventLog

REWARD_WEIGHTING = ("unit", "reward")


@dataclass(frozen=True)
class MtpConfig:
    window: int = 5
    half_life: float = 3600.0
    horizon: float = 48 * HOUR
    reward_weighting: str = "unit"
    same_task: bool = True

    def __post_init__(self):
        if not 1 <= self.window <= 5:
            raise ConfigError(f"MTP window must lie in [1, 5], got {self.window}")
        if not self.half_life > 0:
            raise ConfigError("half_life must be > 0")
        if not self.horizon >= 0:
            raise ConfigError("horizon must be >= 0")
        if self.reward_weighting not in REWARD_WEIGHTING:
            raise ConfigError(f"unknown reward weighting {self.reward_weighting!r}")


def decay_weight(reward, t, t_context, half_life):
    """``reward * 2 ** (-(t - t_context) / half_life)``; exact at whole half-lives."""
    dt = np.asarray(t, dtype=np.float64) - float(t_context)
    return np.asarray(reward, dtype=np.float64) * np.exp2(-dt / float(half_life))


@dataclass(frozen=True)
class MtpLabelSet:
    items: np.ndarray
    times: np.ndarray
    rewards: np.ndarray
    weights: np.ndarray
    t_context: int

    def __post_init__(self):
        if len(self.times) and (self.times < self.t_context).any():
            raise InternalError("label time precedes the request time")

    def __len__(self):
        return len(self.items)


def build_label_set(future: EventLog, t_context: int, config: MtpConfig, task=None) -> MtpLabelSet:
    """First ``K`` high-value events at or after ``t_context`` within the horizon.

    ``future`` must be time-sorted. ``task`` restricts targets to one task
    category when given.
    """
    if len(future) > 1 and (np.diff(future.timestamp) < 0).any():
        raise InternalError("future events must be time-sorted")
    m = future.high_value & (future.timestamp >= t_context)
    m &= future.timestamp - t_context <= config.horizon
    if task is not None:
        m &= future.task == int(task)
    idx = np.flatnonzero(m)[: config.window]
    items = future.item[idx].astype(np.int64)
    times = future.timestamp[idx].astype(np.int64)
    r = future.reward[idx].astype(np.float64) if config.reward_weighting == "reward" else np.ones(idx.size)
    w = decay_weight(r, times, t_context, config.half_life)
    return MtpLabelSet(items, times, r, w, int(t_context))


def build_label_arrays(log: EventLog, config: MtpConfig):
    """Label arrays for every request position of a ``(user, time)``-sorted log.

    Request ``j`` is the event at global index ``j``; labels are searched from
    ``j`` onward within the same user. Returns ``(items, weights)`` of shape
    ``(len(log), K)`` padded with ``-1`` / ``0``, equal row-wise to
    :func:`build_label_set` applied to the user's events from ``j`` on.
    """
    n, K = len(log), config.window
    items = np.full((n, K), -1, dtype=np.int64)
    weights = np.zeros((n, K), dtype=np.float64)
    if n == 0:
        return items, weights
    j = np.arange(n)
    groups = [None] if not config.same_task else sorted(set(log.task.tolist()))
    for g in groups:
        sel = log.high_value.copy()
        rows = j
        if g is not None:
            sel &= log.task == g
            rows = j[log.task == g]
        hv = np.flatnonzero(sel)
        if hv.size == 0 or rows.size == 0:
            continue
        start = np.searchsorted(hv, rows, side="left")
        for k in range(K):
            pos = start + k
            ok = pos < hv.size
            src = hv[np.minimum(pos, hv.size - 1)]
            ok &= log.user_id[src] == log.user_id[rows]
            dt = log.timestamp[src] - log.timestamp[rows]
            ok &= dt <= config.horizon
            r = log.reward[src] if config.reward_weighting == "reward" else np.ones(rows.size)
            w = decay_weight(r, dt, 0, config.half_life)
            items[rows[ok], k] = log.item[src[ok]]
            weights[rows[ok], k] = w[ok]
    return items, weights


def mtp_loss(h, label_set, candidates, item_vectors, params, **kw):
    """Weighted multi-label cross-entropy for one or many contexts.

    ``label_set`` is an :class:`MtpLabelSet` (single context, ``h`` of shape
    ``(d,)``) or a pair ``(items, weights)`` of ``(n, K)`` arrays. Contexts
    whose label set is empty are skipped.
    """
    single = np.ndim(h) == 1
    if isinstance(label_set, MtpLabelSet):
        items = label_set.items.reshape(1, -1)
        weights = label_set.weights.reshape(1, -1)
    else:
        items, weights = (np.asarray(a) for a in label_set)
    h2 = np.atleast_2d(h)
    weights = weights.astype(h2.dtype)
    cand = None if candidates is None else np.atleast_2d(np.asarray(candidates, dtype=np.int64))
    if items.shape[1] == 0:
        items = np.full((items.shape[0], 1), -1, dtype=np.int64)
        weights = np.zeros(items.shape, dtype=h2.dtype)
    loss, grads = softmax_loss(h2, items, weights, cand, item_vectors, params, **kw)
    if single:
        grads["h"] = grads["h"][0]
    return loss, grads
