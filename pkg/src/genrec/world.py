"""Seeded synthetic behavior worlds.

A world is a title catalog plus per-user event streams produced by three
generator families with designed predictability:

* Task A, long-horizon taste: high-value draws come from a softmax over the
  user's hidden taste vector against each title's hidden latent, diluted by a
  uniform noise component.
* Task B, short-horizon engagement: a sparse first-order Markov chain whose
  state is the user's last high-value B title; successors stay inside a
  cluster, with rare random jumps.
* Task C, time/availability: a daily schedule of small title windows keyed by
  the hour-of-day bucket.

Every task also emits low-value "browse" events drawn from a small billboard
pool with Zipf weights. Semantic feature vectors are noisy linear images of the
hidden title latent, so semantics carry taste signal without exposing it.

All randomness flows from ``(config, seed)``: each user draws from an
independent stream keyed by ``(seed, user_id)``, so results do not depend on
generation order or thread count.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError

DAY = 86_400
HOUR = 3_600

N_CONTEXT_FIELDS = 4  # action (high-value flag), hour bucket, page, country


class TaskCategory(enum.IntEnum):
    A = 0
    B = 1
    C = 2

    @property
    def tag(self) -> str:
        return self.name


TASKS = tuple(TaskCategory)


class DatasetShapeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class WorldConfig:
    vocab_size: int = 1000
    cold_start_fraction: float = 0.05
    graph_dim: int = 8
    lang_dim: int = 8
    ann_dim: int = 4
    latent_dim: int = 8
    semantic_noise: float = 0.3
    n_users: int = 1000
    horizon: int = 10 * DAY
    cutoff: int = 7 * DAY
    sessions_per_day: float = 2.5
    mean_session_events: float = 6.0
    mean_event_gap: float = 360.0
    task_mix: tuple = (0.4, 0.3, 0.3)
    task_mix_concentration: float = 20.0
    low_value_prob: tuple = (0.5, 0.5, 0.55)
    billboard_size: int = 8
    billboard_zipf: float = 2.0
    taste_temperature: float = 2.5
    a_noise: float = 0.3
    b_pool_size: int = 240
    b_cluster_size: int = 12
    b_successor_probs: tuple = (0.4, 0.3, 0.2, 0.1)
    b_jump: float = 0.1
    c_buckets: int = 8
    c_window_probs: tuple = (0.75, 0.2, 0.05)
    c_noise: float = 0.05
    cold_launch_window: int = 6 * HOUR
    cold_boost: float = 1.5
    high_value_threshold: float = 0.5
    n_pages: int = 4
    n_countries: int = 3

    def __post_init__(self):
        for name in ("task_mix", "low_value_prob", "b_successor_probs", "c_window_probs"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if not 0.0 <= self.cold_start_fraction < 1.0:
            raise ConfigError("cold_start_fraction must lie in [0, 1)")
        if min(self.graph_dim, self.lang_dim, self.ann_dim, self.latent_dim) < 1:
            raise ConfigError("semantic and latent dims must be >= 1")
        if self.n_users < 1:
            raise ConfigError("n_users must be >= 1")
        if self.horizon <= 0:
            raise ConfigError("horizon must be > 0")
        if not 0 < self.cutoff <= self.horizon:
            raise ConfigError(f"cutoff {self.cutoff} outside (0, horizon={self.horizon}]")
        if self.n_in_vocab < 1:
            raise ConfigError("cold_start_fraction leaves no in-vocabulary titles")
        if len(self.task_mix) != 3 or len(self.low_value_prob) != 3:
            raise ConfigError("task_mix and low_value_prob need one entry per task")
        for name in ("a_noise", "b_jump", "c_noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for p in self.low_value_prob:
            if not 0.0 <= p < 1.0:
                raise ConfigError("low_value_prob entries must lie in [0, 1)")
        for name in ("b_successor_probs", "c_window_probs"):
            probs = getattr(self, name)
            if not probs or abs(sum(probs) - 1.0) > 1e-9 or min(probs) < 0:
                raise ConfigError(f"{name} must be a probability vector")
        if self.b_pool_size < 1:
            raise ConfigError("b_pool_size must be >= 1")
        if len(self.b_successor_probs) > self.b_cluster_size:
            raise ConfigError("more B successors than cluster members")
        if not 0.0 <= self.high_value_threshold <= 1.0:
            raise ConfigError("high_value_threshold must lie in [0, 1]")
        if DAY % self.c_buckets:
            raise ConfigError("c_buckets must divide a day evenly")
        if self.sessions_per_day <= 0 or self.mean_session_events < 1 or self.mean_event_gap <= 0:
            raise ConfigError("session parameters must be positive")

    @property
    def n_cold(self) -> int:
        return int(round(self.vocab_size * self.cold_start_fraction))

    @property
    def n_in_vocab(self) -> int:
        return self.vocab_size - self.n_cold

    @property
    def semantic_dims(self) -> tuple[int, int, int]:
        return (self.graph_dim, self.lang_dim, self.ann_dim)

    @property
    def bucket_seconds(self) -> int:
        return DAY // self.c_buckets

    def replace(self, **kw) -> "WorldConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def hour_bucket(timestamp, config: WorldConfig):
    return (np.asarray(timestamp) % DAY) // config.bucket_seconds


# ---------------------------------------------------------------------------
# catalog


@dataclass(frozen=True)
class Title:
    id: int
    launch_time: int
    in_vocab: bool
    graph_vec: np.ndarray
    lang_vec: np.ndarray
    ann_vec: np.ndarray
    latent_taste: np.ndarray = field(repr=False)


@dataclass
class TitleCatalog:
    """Column-oriented title table. ``latent`` is generator-only state."""

    launch_time: np.ndarray
    in_vocab: np.ndarray
    graph: np.ndarray
    lang: np.ndarray
    ann: np.ndarray
    latent: np.ndarray
    seed: int = 0

    def __len__(self):
        return len(self.launch_time)

    def __getitem__(self, i) -> Title:
        return Title(int(i), int(self.launch_time[i]), bool(self.in_vocab[i]),
                     self.graph[i], self.lang[i], self.ann[i], self.latent[i])

    def __iter__(self) -> Iterator[Title]:
        return (self[i] for i in range(len(self)))

    @property
    def n_in_vocab(self) -> int:
        return int(self.in_vocab.sum())

    @cached_property
    def features(self) -> np.ndarray:
        """Concatenated (graph, lang, ann) features, shape (V, g + l + m)."""
        return np.concatenate([self.graph, self.lang, self.ann], axis=1)

    @property
    def semantic_dims(self) -> tuple[int, int, int]:
        return (self.graph.shape[1], self.lang.shape[1], self.ann.shape[1])

    def tobytes(self) -> bytes:
        parts = [self.launch_time, self.in_vocab, self.graph, self.lang, self.ann, self.latent]
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), *key]))


def generate_catalog(config: WorldConfig, seed: int) -> TitleCatalog:
    config.validate()
    rng = _stream(seed, 0)
    V, k = config.vocab_size, config.latent_dim
    latent = rng.standard_normal((V, k))
    feats = []
    for dim in config.semantic_dims:
        proj = rng.standard_normal((k, dim)) / math.sqrt(k)
        feats.append(latent @ proj + config.semantic_noise * rng.standard_normal((V, dim)))
    # cold titles take the tail ids: ids follow launch order
    n_in = config.n_in_vocab
    in_vocab = np.zeros(V, dtype=bool)
    in_vocab[:n_in] = True
    launch = np.zeros(V, dtype=np.int64)
    if config.n_cold:
        offsets = np.sort(rng.integers(1, config.cold_launch_window + 1, size=config.n_cold))
        launch[n_in:] = config.cutoff + offsets
    return TitleCatalog(launch, in_vocab, feats[0], feats[1], feats[2], latent, seed=int(seed))


@dataclass
class WorldPlan:
    """Population-level generator state shared by all users."""

    billboard: np.ndarray
    billboard_cdf: np.ndarray
    successors: np.ndarray  # (n_in_vocab, n_successors); rows outside the pool are unused
    cluster: np.ndarray
    b_pool: np.ndarray
    windows: np.ndarray  # (c_buckets, window size)


def build_plan(catalog: TitleCatalog, config: WorldConfig) -> WorldPlan:
    rng = _stream(catalog.seed, 1)
    n_in = config.n_in_vocab
    perm = rng.permutation(n_in)
    n_bb = min(config.billboard_size, n_in)
    billboard = perm[:n_bb]
    w = 1.0 / np.arange(1, n_bb + 1) ** config.billboard_zipf
    bb_cdf = np.cumsum(w / w.sum())

    n_win = len(config.c_window_probs)
    pool = perm[n_bb:]
    if pool.size < config.c_buckets * n_win:
        pool = perm
    windows = pool[: config.c_buckets * n_win].reshape(config.c_buckets, n_win)
    if windows.size < config.c_buckets * n_win:
        windows = rng.integers(0, n_in, size=(config.c_buckets, n_win))

    # Task B walks a fixed pool of episodic titles, split into clusters
    b_pool = np.sort(rng.permutation(n_in)[: min(config.b_pool_size, n_in)])
    cperm = rng.permutation(b_pool.size)
    cluster = np.full(n_in, -1, dtype=np.int64)
    cluster[b_pool[cperm]] = np.arange(b_pool.size) // config.b_cluster_size
    n_succ = len(config.b_successor_probs)
    successors = np.empty((n_in, n_succ), dtype=np.int64)
    successors[:] = b_pool[: n_succ] if b_pool.size >= n_succ else b_pool[0]
    for c in range(cluster.max() + 1):
        members = np.flatnonzero(cluster == c)
        for i in members:
            others = members[members != i]
            if others.size >= n_succ:
                successors[i] = rng.choice(others, size=n_succ, replace=False)
            else:
                successors[i] = rng.choice(members, size=n_succ, replace=members.size < n_succ)
    return WorldPlan(billboard, bb_cdf, successors, cluster, b_pool, windows)


# ---------------------------------------------------------------------------
# events


@dataclass(frozen=True)
class Event:
    user_id: int
    item: int
    timestamp: int
    reward: float
    high_value: bool
    context: tuple
    task: TaskCategory


@dataclass
class EventLog:
    """Column-oriented events, sorted by (user_id, timestamp)."""

    user_id: np.ndarray
    item: np.ndarray
    timestamp: np.ndarray
    reward: np.ndarray
    high_value: np.ndarray
    context: np.ndarray
    task: np.ndarray

    COLUMNS = ("user_id", "item", "timestamp", "reward", "high_value", "context", "task")

    @classmethod
    def empty(cls) -> "EventLog":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64),
                   np.zeros(0, np.float64), np.zeros(0, bool),
                   np.zeros((0, N_CONTEXT_FIELDS), np.int64), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, logs: Sequence["EventLog"]) -> "EventLog":
        logs = [lg for lg in logs if len(lg)]
        if not logs:
            return cls.empty()
        return cls(*(np.concatenate([getattr(lg, c) for lg in logs]) for c in cls.COLUMNS))

    def __len__(self):
        return len(self.item)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return Event(int(self.user_id[i]), int(self.item[i]), int(self.timestamp[i]),
                         float(self.reward[i]), bool(self.high_value[i]),
                         tuple(int(c) for c in self.context[i]), TaskCategory(int(self.task[i])))
        return EventLog(*(getattr(self, c)[i] for c in self.COLUMNS))

    def __iter__(self) -> Iterator[Event]:
        return (self[i] for i in range(len(self)))

    def select(self, mask) -> "EventLog":
        return self[np.asarray(mask)]

    def user_offsets(self, n_users: int) -> np.ndarray:
        return np.searchsorted(self.user_id, np.arange(n_users + 1), side="left")

    def tobytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(getattr(self, c)).tobytes() for c in self.COLUMNS)


@dataclass
class UserTruth:
    taste: np.ndarray
    task_mix: np.ndarray
    country: int
    b_state0: int


def user_seed(seed: int, user_id: int) -> int:
    return int(np.random.SeedSequence([int(seed) & (2**63 - 1), 2, int(user_id)]).generate_state(1, np.uint64)[0])


def taste_logits(taste: np.ndarray, catalog: TitleCatalog, config: WorldConfig) -> np.ndarray:
    z = config.taste_temperature * (catalog.latent @ taste) / math.sqrt(config.latent_dim)
    return z + config.cold_boost * (~catalog.in_vocab)


def _softmax_masked(logits, mask):
    z = np.where(mask, logits, -np.inf)
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def task_a_distribution(logits, launched, config: WorldConfig) -> np.ndarray:
    """Probability of each title for a high-value Task-A draw."""
    taste = _softmax_masked(logits, launched)
    uniform = launched / launched.sum()
    return (1.0 - config.a_noise) * taste + config.a_noise * uniform


def task_b_distribution(state, launched, plan: WorldPlan, config: WorldConfig) -> np.ndarray:
    p = np.zeros(len(launched))
    p[plan.b_pool] += config.b_jump / plan.b_pool.size
    np.add.at(p, plan.successors[state], (1.0 - config.b_jump) * np.asarray(config.b_successor_probs))
    return p


def task_c_distribution(bucket, launched, plan: WorldPlan, config: WorldConfig) -> np.ndarray:
    p = config.c_noise * launched / launched.sum()
    np.add.at(p, plan.windows[bucket], (1.0 - config.c_noise) * np.asarray(config.c_window_probs))
    return p


def _draw(rng, cdf):
    return min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(cdf) - 1)


def generate_history(user_seed_: int, catalog: TitleCatalog, horizon: int, config: WorldConfig,
                     *, user_id: int = 0, plan: WorldPlan | None = None,
                     return_truth: bool = False):
    """One user's event stream over ``[0, horizon)``."""
    if horizon <= 0:
        raise ConfigError("horizon must be > 0")
    plan = plan or build_plan(catalog, config)
    rng = np.random.default_rng(user_seed_)
    k = config.latent_dim
    truth = UserTruth(
        taste=rng.standard_normal(k),
        task_mix=rng.dirichlet(config.task_mix_concentration * np.asarray(config.task_mix)),
        country=int(rng.integers(config.n_countries)),
        b_state0=int(plan.b_pool[rng.integers(plan.b_pool.size)]),
    )
    logits = taste_logits(truth.taste, catalog, config)
    base_launched = catalog.launch_time <= 0
    a_cdf_base = np.cumsum(task_a_distribution(logits, base_launched, config))
    n_launched_base = int(base_launched.sum())
    lv = np.asarray(config.low_value_prob)
    thr = config.high_value_threshold

    rate = config.sessions_per_day / DAY
    n_sessions = rng.poisson(rate * horizon)
    starts = np.sort(rng.integers(0, horizon, size=n_sessions))
    p_more = 1.0 - 1.0 / config.mean_session_events

    rows = []
    state = truth.b_state0
    last_t = -1
    for s0 in starts:
        task = int(_draw(rng, np.cumsum(truth.task_mix)))
        n_ev = 1 + (rng.geometric(1.0 - p_more) - 1 if p_more > 0 else 0)
        t = max(int(s0), last_t + 1)
        for j in range(n_ev):
            if j:
                t += 1 + int(rng.exponential(config.mean_event_gap))
            if t >= horizon:
                break
            bucket = int(t % DAY) // config.bucket_seconds
            if rng.random() < lv[task]:
                item = int(plan.billboard[_draw(rng, plan.billboard_cdf)])
                reward = thr * rng.random()
            else:
                reward = thr + (1.0 - thr) * rng.random()
                if task == TaskCategory.A:
                    if t > config.cutoff and config.n_cold:
                        launched = catalog.launch_time <= t
                        cdf = np.cumsum(task_a_distribution(logits, launched, config))
                    else:
                        cdf = a_cdf_base
                    item = _draw(rng, cdf)
                elif task == TaskCategory.B:
                    if rng.random() < config.b_jump:
                        item = int(plan.b_pool[rng.integers(plan.b_pool.size)])
                    else:
                        item = int(plan.successors[state, _draw(rng, np.cumsum(config.b_successor_probs))])
                    state = item
                else:
                    if rng.random() < config.c_noise:
                        if t > config.cutoff and config.n_cold:
                            launched_ids = np.flatnonzero(catalog.launch_time <= t)
                            item = int(launched_ids[rng.integers(launched_ids.size)])
                        else:
                            item = int(rng.integers(n_launched_base))
                    else:
                        item = int(plan.windows[bucket, _draw(rng, np.cumsum(config.c_window_probs))])
            page = int(rng.integers(config.n_pages))
            hv = reward >= thr
            rows.append((item, t, reward, hv, int(hv), bucket, page, truth.country, task))
            last_t = t
    n = len(rows)
    if n:
        arr = np.array(rows, dtype=np.float64)
        log = EventLog(
            user_id=np.full(n, user_id, dtype=np.int64),
            item=arr[:, 0].astype(np.int64),
            timestamp=arr[:, 1].astype(np.int64),
            reward=arr[:, 2],
            high_value=arr[:, 3].astype(bool),
            context=arr[:, 4:8].astype(np.int64),
            task=arr[:, 8].astype(np.int64),
        )
    else:
        log = EventLog.empty()
    return (log, truth) if return_truth else log


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    catalog: TitleCatalog
    histories: EventLog  # events with timestamp <= cutoff
    labels: EventLog  # events with timestamp > cutoff (validation only)
    cutoff: int
    split: str
    config: WorldConfig
    seed: int
    n_users: int
    truth: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.split not in ("train", "validation"):
            raise ConfigError(f"unknown split {self.split!r}")

    @cached_property
    def history_offsets(self) -> np.ndarray:
        return self.histories.user_offsets(self.n_users)

    @cached_property
    def label_offsets(self) -> np.ndarray:
        return self.labels.user_offsets(self.n_users)

    def user_history(self, u: int) -> EventLog:
        o = self.history_offsets
        return self.histories[o[u]:o[u + 1]]

    def user_labels(self, u: int) -> EventLog:
        o = self.label_offsets
        return self.labels[o[u]:o[u + 1]]

    @cached_property
    def plan(self) -> WorldPlan:
        return build_plan(self.catalog, self.config)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.catalog.tobytes())
        h.update(self.histories.tobytes())
        h.update(self.labels.tobytes())
        h.update(f"{self.cutoff}:{self.split}".encode())
        return h.hexdigest()[:16]


def generate_dataset(config: WorldConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Train/validation pair sharing one catalog and one cutoff."""
    config.validate()
    catalog = generate_catalog(config, seed)
    plan = build_plan(catalog, config)
    logs, truth = [], {}
    for u in range(config.n_users):
        log, tr = generate_history(user_seed(seed, u), catalog, config.horizon, config,
                                   user_id=u, plan=plan, return_truth=True)
        logs.append(log)
        truth[u] = tr
    events = EventLog.concat(logs)
    before = events.timestamp <= config.cutoff
    hist = events.select(before)
    labels = events.select(~before)
    if len(labels) == 0:
        warnings.warn("validation split has no labels (cutoff at or past the last event)",
                      DatasetShapeWarning, stacklevel=2)
    common = dict(catalog=catalog, histories=hist, cutoff=config.cutoff, config=config,
                  seed=seed, n_users=config.n_users, truth=truth)
    train = Dataset(labels=EventLog.empty(), split="train", **common)
    valid = Dataset(labels=labels, split="validation", **common)
    train.__dict__["plan"] = plan
    valid.__dict__["plan"] = plan
    return train, valid


def label_entropy(labels: EventLog, task: TaskCategory, high_value_only: bool = True) -> float:
    """Empirical entropy (nats) of the held-out item distribution for one task."""
    m = labels.task == int(task)
    if high_value_only:
        m &= labels.high_value
    items = labels.item[m]
    if items.size == 0:
        return float("nan")
    _, counts = np.unique(items, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())
