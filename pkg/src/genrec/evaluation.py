"""Time-split ranking evaluation, cold-start slices and staleness replay.

For each user and task the target is the first high-value event of that task
after ``cutoff + delay``; the context is always the history up to the cutoff.
Targets that are out-of-vocabulary titles form the ``cold_start`` slice and
are ranked against the whole catalog (OOV titles through the OOV path); all
other targets form the ``warm`` slice and are ranked against in-vocabulary
titles. Ties are broken by ascending item id.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .world import TASKS, Dataset, hour_bucket, task_a_distribution, task_b_distribution, \
    task_c_distribution, taste_logits

SLICES = ("warm", "cold_start")
METRICS = ("mrr", "hit", "ndcg")
ALL = "ALL"
REPORT_FIELDS = ("task", "slice", "delay", "metric", "value", "count")


# ---------------------------------------------------------------------------
# metrics


def ranks_from_scores(scores: np.ndarray, target_cols: np.ndarray) -> np.ndarray:
    """1-based ranks of target columns; candidate columns must be in ascending id order."""
    scores = np.atleast_2d(scores)
    rows = np.arange(scores.shape[0])
    st = scores[rows, target_cols][:, None]
    higher = (scores > st).sum(axis=1)
    cols = np.arange(scores.shape[1])[None, :]
    tied_before = ((scores == st) & (cols < target_cols[:, None])).sum(axis=1)
    return 1 + higher + tied_before


def metrics_from_ranks(ranks, k: int = 10) -> dict[str, np.ndarray]:
    ranks = np.asarray(ranks, dtype=np.float64)
    hit = ranks <= k
    return {"mrr": 1.0 / ranks, "hit": hit.astype(np.float64),
            "ndcg": np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)}


def rank_metrics(scores, candidate_ids, target, k: int = 10) -> tuple[float, float, float]:
    """(reciprocal rank, hit@k, NDCG@k) of one target among scored candidates."""
    ids = np.asarray(candidate_ids)
    scores = np.asarray(scores, dtype=np.float64)
    if len(np.unique(ids)) != len(ids):
        raise InputError("duplicate candidate ids")
    if scores.shape != ids.shape:
        raise InputError("scores and candidate ids differ in length")
    hits = np.flatnonzero(ids == target)
    if hits.size != 1:
        raise InputError(f"target {target} not among candidates")
    if not 1 <= k <= len(ids):
        raise InputError(f"k={k} outside [1, {len(ids)}]")
    order = np.argsort(ids, kind="stable")
    col = int(np.flatnonzero(ids[order] == target)[0])
    r = int(ranks_from_scores(scores[order][None, :], np.array([col]))[0])
    m = metrics_from_ranks([r], k)
    return float(m["mrr"][0]), float(m["hit"][0]), float(m["ndcg"][0])


# ---------------------------------------------------------------------------
# examples


@dataclass
class ExampleSet:
    user: np.ndarray
    task: np.ndarray
    item: np.ndarray
    time: np.ndarray
    req_hour: np.ndarray
    cold: np.ndarray
    skipped: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.user)

    def subset(self, mask) -> "ExampleSet":
        return ExampleSet(self.user[mask], self.task[mask], self.item[mask], self.time[mask],
                          self.req_hour[mask], self.cold[mask], dict(self.skipped))


def build_examples(dataset: Dataset, delay: int = 0, cutoff: int | None = None) -> ExampleSet:
    """First high-value event per (user, task) strictly after ``cutoff + delay``."""
    if dataset.split != "validation" or len(dataset.labels) == 0:
        raise InputError("evaluation needs a validation split with labels")
    cutoff = dataset.cutoff if cutoff is None else int(cutoff)
    if cutoff != dataset.cutoff:
        raise ConfigError("evaluation cutoff must equal the dataset cutoff")
    lab = dataset.labels
    hist_counts = np.diff(dataset.history_offsets)
    sel = lab.high_value & (lab.timestamp > cutoff + delay)
    cols = {k: [] for k in ("user", "task", "item", "time")}
    skipped = {}
    for c in TASKS:
        m = sel & (lab.task == int(c))
        idx = np.flatnonzero(m)
        users, first = np.unique(lab.user_id[idx], return_index=True)
        idx = idx[first]
        keep = hist_counts[users] > 0
        skipped[c.name] = int(dataset.n_users - keep.sum())
        idx = idx[keep]
        cols["user"].append(lab.user_id[idx])
        cols["task"].append(np.full(idx.size, int(c), dtype=np.int64))
        cols["item"].append(lab.item[idx])
        cols["time"].append(lab.timestamp[idx])
    user, task, item, time = (np.concatenate(cols[k]) for k in ("user", "task", "item", "time"))
    order = np.lexsort((task, user))
    user, task, item, time = user[order], task[order], item[order], time[order]
    cold = ~dataset.catalog.in_vocab[item]
    return ExampleSet(user, task, item, time, hour_bucket(time, dataset.config).astype(np.int64),
                      cold, skipped)


# ---------------------------------------------------------------------------
# scorers


class UniformScorer:
    """Scores every candidate equally; ranks then follow the id tie-break."""

    def score_queries(self, dataset, ex: ExampleSet, cand_ids):
        return np.zeros((len(ex), len(cand_ids)))


class BayesOracleScorer:
    """Generator-truth probabilities of each title for the example's task and time."""

    def score_queries(self, dataset, ex: ExampleSet, cand_ids):
        cfg, cat, plan = dataset.config, dataset.catalog, dataset.plan
        out = np.zeros((len(ex), len(cand_ids)))
        hist = dataset.histories
        off = dataset.history_offsets
        for r in range(len(ex)):
            u, c, t = int(ex.user[r]), int(ex.task[r]), int(ex.time[r])
            truth = dataset.truth[u]
            launched = cat.launch_time <= t
            if c == 0:
                p = task_a_distribution(taste_logits(truth.taste, cat, cfg), launched, cfg)
            elif c == 1:
                lo, hi = off[u], off[u + 1]
                m = hist.high_value[lo:hi] & (hist.task[lo:hi] == 1)
                state = int(hist.item[lo:hi][m][-1]) if m.any() else truth.b_state0
                p = task_b_distribution(state, launched, plan, cfg)
            else:
                p = task_c_distribution(int(ex.req_hour[r]), launched, plan, cfg)
            out[r] = p[cand_ids]
        return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    seed: int = 0
    config_digest: str = ""
    skipped: dict = field(default_factory=dict)

    def add(self, task, slice_, delay, metric, value, count):
        self.rows.append({"task": task, "slice": slice_, "delay": int(delay), "metric": metric,
                          "value": float(value), "count": int(count)})

    def get(self, task, slice_="warm", delay=0, metric="mrr") -> float:
        for r in self.rows:
            if (r["task"], r["slice"], r["delay"], r["metric"]) == (task, slice_, int(delay), metric):
                return r["value"]
        raise KeyError((task, slice_, delay, metric))

    def count(self, task, slice_="warm", delay=0) -> int:
        for r in self.rows:
            if (r["task"], r["slice"], r["delay"]) == (task, slice_, int(delay)):
                return r["count"]
        raise KeyError((task, slice_, delay))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({**r, "value": repr(r["value"])})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "config_digest": self.config_digest,
                           "skipped": self.skipped, "rows": self.rows}, indent=1, sort_keys=True)

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rep = cls()
        for r in csv.DictReader(io.StringIO(text)):
            rep.add(r["task"], r["slice"], int(r["delay"]), r["metric"], float(r["value"]), int(r["count"]))
        return rep


def _score_examples(model, dataset, ex: ExampleSet, chunk: int = 512):
    """Ranks of each example's target within its slice's candidate set."""
    in_vocab = dataset.catalog.in_vocab
    warm_ids = np.flatnonzero(in_vocab)
    all_ids = np.arange(len(in_vocab))
    ranks = np.zeros(len(ex), dtype=np.int64)
    for cold, cand in ((False, warm_ids), (True, all_ids)):
        rows = np.flatnonzero(ex.cold == cold)
        lookup = np.full(len(in_vocab), -1, dtype=np.int64)
        lookup[cand] = np.arange(cand.size)
        for s in range(0, rows.size, chunk):
            r = rows[s:s + chunk]
            sub = ex.subset(r)
            sc = model.score_queries(dataset, sub, cand)
            ranks[r] = ranks_from_scores(sc, lookup[sub.item])
    return ranks


def _add_metric_rows(report, ex, ranks, delay, k):
    m = metrics_from_ranks(ranks, k)
    for tname, tmask in [(c.name, ex.task == int(c)) for c in TASKS] + [(ALL, np.ones(len(ex), bool))]:
        for sl, smask in (("warm", ~ex.cold), ("cold_start", ex.cold)):
            sel = tmask & smask
            n = int(sel.sum())
            for name in METRICS:
                report.add(tname, sl, delay, name, m[name][sel].mean() if n else float("nan"), n)


def evaluate(model, dataset: Dataset, cutoff: int | None = None, *, delay: int = 0, k: int = 10,
             seed: int = 0) -> EvalReport:
    """Per-(task, slice) MRR, hit@k and NDCG@k at a single delay."""
    ex = build_examples(dataset, delay, cutoff)
    ranks = _score_examples(model, dataset, ex)
    report = EvalReport(seed=seed, config_digest=dataset.config.digest(), skipped={str(delay): ex.skipped})
    _add_metric_rows(report, ex, ranks, delay, k)
    return report


@dataclass(frozen=True)
class StalenessConfig:
    delays: tuple = (0, 24 * 3600, 48 * 3600)

    def __post_init__(self):
        d = tuple(int(x) for x in self.delays)
        object.__setattr__(self, "delays", d)
        if not d or d[0] != 0:
            raise ConfigError("delay list must start at 0")
        if any(x < 0 for x in d) or list(d) != sorted(set(d)):
            raise ConfigError("delays must be non-negative and strictly ascending")


def replay_staleness(model, dataset: Dataset, config: StalenessConfig = StalenessConfig(), *,
                     k: int = 10, seed: int = 0) -> EvalReport:
    """Evaluate at each serving delay with the context frozen at the cutoff.

    Each delay's regular rows use every example available at that delay (the
    zero-delay rows equal :func:`evaluate`). ``mrr_rel`` rows compare MRR on
    the fixed population of (user, task) pairs that have a warm target at every
    delay, relative to that population's zero-delay MRR.
    """
    horizon = dataset.config.horizon
    if dataset.cutoff + config.delays[-1] > horizon:
        raise ConfigError("largest delay runs past the dataset horizon")
    report = EvalReport(seed=seed, config_digest=dataset.config.digest())
    per_delay = []
    for delay in config.delays:
        ex = build_examples(dataset, delay)
        ranks = _score_examples(model, dataset, ex)
        _add_metric_rows(report, ex, ranks, delay, k)
        report.skipped[str(delay)] = ex.skipped
        per_delay.append((ex, ranks))
    key = lambda ex: ex.user * len(TASKS) + ex.task  # noqa: E731
    common = None
    for ex, _ in per_delay:
        keys = set(key(ex)[~ex.cold].tolist())
        common = keys if common is None else common & keys
    base = {}
    for delay, (ex, ranks) in zip(config.delays, per_delay):
        sel = np.isin(key(ex), np.fromiter(common, dtype=np.int64, count=len(common))) & ~ex.cold
        rr = 1.0 / ranks
        for c in TASKS:
            m = sel & (ex.task == int(c))
            mrr = rr[m].mean() if m.any() else float("nan")
            base.setdefault(c.name, mrr)
            rel = mrr / base[c.name] if base[c.name] and not math.isnan(base[c.name]) else float("nan")
            report.add(c.name, "warm", delay, "mrr_fixed", mrr, int(m.sum()))
            report.add(c.name, "warm", delay, "mrr_rel", rel, int(m.sum()))
    return report
