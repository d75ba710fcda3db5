"""Item scoring and softmax cross-entropy over full or sampled candidate sets.

Scores are inner products between the (optionally projected) user vector and
item-side vectors. Sampled softmax draws a uniform subset of negatives per
position, without replacement and never equal to a positive; logits are used
as-is (no log-Q correction, no temperature, no bias).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cost import n_sampled
from .errors import ConfigError, InternalError


@dataclass(frozen=True)
class DecoderConfig:
    mode: str = "full"  # full | projected
    sampling: str = "none"  # none | uniform
    fraction: float = 0.01

    def __post_init__(self):
        if self.mode not in ("full", "projected"):
            raise ConfigError(f"unknown decoder mode {self.mode!r}")
        if self.sampling not in ("none", "uniform"):
            raise ConfigError(f"unknown sampling {self.sampling!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"sample fraction must lie in (0, 1], got {self.fraction}")


def project_head(h, params):
    """Shared linear map d -> d/8 (identity when the model has no projection)."""
    W = params.get("head.proj")
    return h if W is None else h @ W


def project_head_backward(du, h, params, grads):
    W = params.get("head.proj")
    if W is None:
        return du
    grads["head.proj"] += h.reshape(-1, h.shape[-1]).T @ du.reshape(-1, du.shape[-1])
    return du @ W.T


def sample_negatives(V: int, fraction: float, target: int, seed: int) -> np.ndarray:
    """``ceil(fraction * V)`` ids drawn without replacement from ``range(V)`` minus ``target``.

    Partial Fisher-Yates over the ascending non-target population; the draw
    sequence is ``rng.integers(i, n)`` for ``i = 0, 1, ...``.
    """
    if V < 2:
        raise ConfigError("need V >= 2 to sample negatives")
    m = n_sampled(V, fraction)
    pop = np.array([i for i in range(V) if i != target], dtype=np.int64)
    m = min(m, pop.size)
    rng = np.random.default_rng(seed)
    n = pop.size
    for i in range(m):
        j = int(rng.integers(i, n))
        pop[i], pop[j] = pop[j], pop[i]
    return pop[:m].copy()


def sample_negatives_batch(rng: np.random.Generator, V: int, m: int, positives: np.ndarray) -> np.ndarray:
    """Per-row uniform negatives without replacement, rejecting that row's positives.

    ``positives`` is ``(n, K)`` with ``-1`` padding. Uses random-key selection,
    which is uniform over m-subsets of the allowed ids.
    """
    n = positives.shape[0]
    keys = rng.random((n, V))
    rows = np.repeat(np.arange(n), positives.shape[1])
    cols = positives.reshape(-1)
    ok = cols >= 0
    keys[rows[ok], cols[ok]] = np.inf
    allowed = V - (np.isfinite(keys) == False).sum(axis=1)  # noqa: E712
    if allowed.min() < m:
        raise ConfigError("not enough non-target ids to draw the requested negatives")
    idx = np.argpartition(keys, m - 1, axis=1)[:, :m] if m < V else np.argsort(keys, axis=1)[:, :m]
    return np.sort(idx, axis=1).astype(np.int64)


def build_candidates(positives: np.ndarray, negatives: np.ndarray):
    """Row-wise candidate ids ``[unique positives..., negatives...]``.

    Returns ``(cand, pos_index)`` where ``pos_index[r, k]`` locates positive
    ``k`` of row ``r`` inside ``cand[r]`` (``-1`` for padding). Every row has
    ``K`` leading positive slots; slots left over by duplicates or padding hold
    ``-1`` and score ``-inf``.
    """
    n, K = positives.shape
    cand = np.full((n, K + negatives.shape[1]), -1, dtype=np.int64)
    pos_index = np.full((n, K), -1, dtype=np.int64)
    for r in range(n):
        slot = 0
        seen: dict[int, int] = {}
        for k in range(K):
            y = int(positives[r, k])
            if y < 0:
                continue
            if y not in seen:
                seen[y] = slot
                cand[r, slot] = y
                slot += 1
            pos_index[r, k] = seen[y]
    cand[:, K:] = negatives
    return cand, pos_index


def candidate_logits(u, item_vectors, candidates=None):
    """Logits ``(n, C)`` for rows of ``u`` against candidate item vectors.

    ``candidates=None`` scores every row of ``item_vectors``. Entries of
    ``candidates`` equal to ``-1`` are placeholders and get ``-inf``.
    """
    if candidates is None:
        return u @ item_vectors.T
    safe = np.maximum(candidates, 0)
    logits = np.einsum("np,ncp->nc", u, item_vectors[safe])
    return np.where(candidates < 0, -np.inf, logits)


def weighted_xent(logits, pos_index, weights):
    """Per-row ``-sum_k w_k log softmax(logits)[pos_k]`` and its logit gradient."""
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    se = e.sum(axis=1, keepdims=True)
    valid = pos_index >= 0
    safe = np.where(valid, pos_index, 0)
    w = np.where(valid, weights, 0.0).astype(logits.dtype, copy=False)
    logp = np.take_along_axis(logits, safe, axis=1) - m - np.log(se)
    loss = -(w * logp).sum(axis=1)
    e *= w.sum(axis=1, keepdims=True) / se
    rows = np.repeat(np.arange(logits.shape[0]), pos_index.shape[1])
    np.subtract.at(e, (rows, safe.reshape(-1)), w.reshape(-1))
    return loss, e


def _as_rows(h, targets, weights):
    single = np.ndim(h) == 1
    h = np.atleast_2d(h)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim == 0:
        targets = targets.reshape(1, 1)
    elif targets.ndim == 1:
        targets = targets.reshape(-1, 1) if not single else targets.reshape(1, -1)
    if weights is None:
        weights = (targets >= 0).astype(h.dtype)
    weights = np.asarray(weights, dtype=h.dtype).reshape(targets.shape)
    return single, h, targets, weights


def softmax_loss(h, targets, weights, candidates, item_vectors, params,
                 target_vectors=None, target_override=None):
    """Shared core of :func:`ntp_loss` and MTP: one candidate scoring per row.

    ``targets``: ``(n, K)`` item ids (``-1`` pad). ``candidates``: ``None`` for
    the full item table, or ``(n, C)`` ids that must contain every target.
    ``target_vectors``/``target_override`` replace the item-side vector of
    selected targets (used by OOV masking on the output side).

    Returns ``(loss, grads)``: ``loss`` is the mean over rows with nonzero total
    weight; ``grads`` holds ``h``, ``item_vectors`` (dense), optional
    ``target_vectors`` and ``head.proj``.
    """
    n, K = targets.shape
    u = project_head(h, params)
    if candidates is None:
        pos_index = targets.copy()
        if (targets >= item_vectors.shape[0]).any():
            raise InternalError("target outside the item table")
    else:
        pos_index = np.full_like(targets, -1)
        for k in range(K):
            hit = candidates == targets[:, k:k + 1]
            found = hit.any(axis=1)
            if ((targets[:, k] >= 0) & ~found).any():
                raise InternalError("target absent from candidate set")
            pos_index[:, k] = np.where(targets[:, k] >= 0, hit.argmax(axis=1), -1)
    logits = candidate_logits(u, item_vectors, candidates)
    if target_override is not None and target_override.any():
        r, k = np.nonzero(target_override)
        override = np.einsum("np,np->n", u[r], target_vectors[r, k])
        logits[r, pos_index[r, k]] = override
    active = weights.sum(axis=1) > 0
    n_active = max(int(active.sum()), 1)
    # skipped rows get zero weight, so they contribute neither loss nor gradient
    w_eff = np.where(active[:, None], weights, 0.0)
    row_loss, dlogits = weighted_xent(logits, pos_index, w_eff)
    loss = float(row_loss[active].sum() / n_active)
    dlogits /= n_active
    grads = {}
    if target_override is not None and target_override.any():
        r, k = np.nonzero(target_override)
        cols = pos_index[r, k]
        # each overridden logit owns its gradient; zero it for the table path
        g_over = np.zeros_like(dlogits)
        first = {}
        for i, (rr, cc) in enumerate(zip(r, cols)):
            first.setdefault((rr, cc), i)
        keep = np.array([first[(rr, cc)] == i for i, (rr, cc) in enumerate(zip(r, cols))], dtype=bool)
        g_over[r[keep], cols[keep]] = dlogits[r[keep], cols[keep]]
        dtv = np.zeros((n, K, u.shape[1]), dtype=u.dtype)
        dtv[r[keep], k[keep]] = g_over[r[keep], cols[keep], None] * u[r[keep]]
        grads["target_vectors"] = dtv
        du_over = np.zeros_like(u)
        np.add.at(du_over, r[keep], g_over[r[keep], cols[keep], None] * target_vectors[r[keep], k[keep]])
        dlogits_tab = dlogits.copy()
        dlogits_tab[r[keep], cols[keep]] = 0.0
    else:
        du_over = None
        dlogits_tab = dlogits
    if candidates is None:
        du = dlogits_tab @ item_vectors
        dV = dlogits_tab.T @ u
    else:
        safe = np.maximum(candidates, 0)
        du = np.einsum("nc,ncp->np", dlogits_tab, item_vectors[safe])
        dV = np.zeros_like(item_vectors)
        contrib = dlogits_tab[..., None] * u[:, None, :]
        mask = candidates >= 0
        np.add.at(dV, safe[mask], contrib[mask])
    if du_over is not None:
        du = du + du_over
    g_proj = {"head.proj": np.zeros_like(params["head.proj"])} if "head.proj" in params else {}
    grads["h"] = project_head_backward(du, h, params, g_proj)
    grads.update(g_proj)
    grads["item_vectors"] = dV
    return loss, grads


def ntp_loss(h, target, candidates, item_vectors, params, **kw):
    """Next-token cross-entropy over one candidate scoring per context."""
    single, h2, t2, w2 = _as_rows(h, target, None)
    if t2.shape[1] != 1:
        raise InternalError("ntp_loss takes exactly one target per context")
    cand = None
    if candidates is not None:
        cand = np.atleast_2d(np.asarray(candidates, dtype=np.int64))
    loss, grads = softmax_loss(h2, t2, w2, cand, item_vectors, params, **kw)
    if single:
        grads["h"] = grads["h"][0]
    return loss, grads


def full_softmax_reference(h, target, item_vectors, params) -> float:
    """Textbook dense cross-entropy, computed independently of the candidate path."""
    u = project_head(np.atleast_2d(h), params)[0]
    z = item_vectors @ u
    zmax = z.max()
    return float(-(z[target] - zmax - np.log(np.exp(z - zmax).sum())))
