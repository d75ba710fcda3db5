"""Deterministic mini-batch training, checkpoints and backbone-size sweeps."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import ModelConfig, init_params, param_count
from .cold_start import MaskingConfig
from .decoder import DecoderConfig
from .errors import ConfigError, GenrecError, NumericError
from .evaluation import ALL, evaluate
from .io import load_checkpoint, rows_to_csv, save_checkpoint
from .model import OBJECTIVES, Recommender, SequenceData
from .mtp import MtpConfig
from .scaling import ScalingPoint
from .world import TASKS, Dataset

LOG_FIELDS = ("step", "split", "task", "metric", "value")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup: int = 20
    clip: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0 or self.clip <= 0:
            raise ConfigError("lr, eps and clip must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.warmup < 0:
            raise ConfigError("weight_decay and warmup must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "ntp"
    mtp: MtpConfig = MtpConfig()
    decoder: DecoderConfig = DecoderConfig()
    masking: MaskingConfig = MaskingConfig()
    optim: OptimConfig = OptimConfig()
    batch_size: int = 32
    steps: int = 600
    eval_every: int = 200
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.batch_size < 1 or self.steps < 0 or self.eval_every < 0 or self.log_every < 1:
            raise ConfigError("batch_size >= 1, steps >= 0, eval_every >= 0, log_every >= 1 required")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for g in dataclasses.fields(v):
                    out[f"{f.name}.{g.name}"] = getattr(v, g.name)
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        """Build from ``section.key`` -> value strings or typed values."""
        top = {f.name: f for f in dataclasses.fields(cls)}
        nested: dict[str, dict] = {}
        plain = {}
        for k, v in flat.items():
            head, _, sub = k.partition(".")
            if head not in top:
                raise ConfigError(f"unknown training key {k!r}")
            if sub:
                nested.setdefault(head, {})[sub] = v
            else:
                plain[head] = _coerce(top[head].default, v)
        kw = dict(plain)
        for head, sub in nested.items():
            base = top[head].default
            names = {g.name: g for g in dataclasses.fields(base)}
            for s in sub:
                if s not in names:
                    raise ConfigError(f"unknown training key {head}.{s}")
            kw[head] = dataclasses.replace(base, **{s: _coerce(getattr(base, s), v) for s, v in sub.items()})
        return cls(**kw)


def _coerce(default, v):
    if not isinstance(v, str):
        return v
    try:
        if isinstance(default, bool):
            if v.lower() not in ("true", "false", "1", "0"):
                raise ValueError(v)
            return v.lower() in ("true", "1")
        if isinstance(default, int):
            return int(float(v)) if float(v).is_integer() else int(v)
        if isinstance(default, float):
            return float(v)
    except ValueError:
        raise ConfigError(f"cannot parse {v!r} as {type(default).__name__}") from None
    return v


@dataclass
class MetricLog:
    rows: list = field(default_factory=list)

    def add(self, step, split, task, metric, value):
        self.rows.append({"step": int(step), "split": split, "task": task, "metric": metric,
                          "value": repr(float(value))})

    def to_csv(self) -> str:
        return rows_to_csv(self.rows, LOG_FIELDS)

    def values(self, split, task, metric) -> list[tuple[int, float]]:
        return [(r["step"], float(r["value"])) for r in self.rows
                if (r["split"], r["task"], r["metric"]) == (split, task, metric)]


@dataclass
class TrainResult:
    model: Recommender
    log: MetricLog
    best: dict
    checkpoint: Path | None = None


def lr_at(step: int, total: int, cfg: OptimConfig) -> float:
    """Linear warmup then cosine decay to zero."""
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(total - cfg.warmup, 1)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * min(step - cfg.warmup, span) / span))


class AdamW:
    """Adaptive moments with decoupled weight decay on matrices."""

    def __init__(self, params: dict, cfg: OptimConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        c = self.cfg
        self.t += 1
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        scale = min(1.0, c.clip / norm) if norm > 0 else 1.0
        b1t, b2t = 1.0 - c.beta1 ** self.t, 1.0 - c.beta2 ** self.t
        for k in params:  # fixed key order keeps updates deterministic
            g = grads[k] * scale
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            upd = (m / b1t) / (np.sqrt(v / b2t) + c.eps)
            if c.weight_decay and params[k].ndim == 2:
                params[k] *= 1.0 - lr * c.weight_decay
            params[k] -= (lr * upd).astype(params[k].dtype, copy=False)
        return norm


def checkpoint_header(model_cfg: ModelConfig, train_cfg: TrainConfig, step: int, extra=None) -> dict:
    h = {"model": model_cfg.to_dict(), "train": {k: v for k, v in train_cfg.to_flat().items()}, "step": step}
    if extra:
        h.update(extra)
    return h


def save_model(path, model: Recommender, train_cfg: TrainConfig, step: int, extra=None):
    save_checkpoint(path, model.params, checkpoint_header(model.cfg, train_cfg, step, extra))


def load_model(path, catalog) -> tuple[Recommender, dict]:
    params, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model"])
    return Recommender(cfg, params, catalog.features, catalog.in_vocab), meta


def _eval_rows(log: MetricLog, best: dict, model, validation, step):
    rep = evaluate(model, validation)
    for c in TASKS:
        v = rep.get(c.name, "warm", 0, "mrr")
        log.add(step, "validation", c.name, "mrr", v)
        if not math.isnan(v):
            best[c.name] = max(best.get(c.name, -math.inf), v)
    v = rep.get(ALL, "cold_start", 0, "mrr")
    log.add(step, "validation", "cold_start", "mrr", v)
    if not math.isnan(v):
        best["cold_start"] = max(best.get("cold_start", -math.inf), v)
    return rep


def train(config: TrainConfig, dataset: Dataset, model_cfg: ModelConfig, validation: Dataset | None = None,
          *, out_dir=None, data: SequenceData | None = None) -> TrainResult:
    """Train from a fresh initialization; deterministic given ``config.seed``."""
    if data is None:
        data = SequenceData(dataset.histories, dataset.n_users, model_cfg.seq_len, config.objective, config.mtp)
    elif data.objective != config.objective or data.seq_len != model_cfg.seq_len:
        raise ConfigError("prepared sequence data does not match the training config")
    model = Recommender(model_cfg, init_params(model_cfg, config.seed), dataset.catalog.features,
                        dataset.catalog.in_vocab)
    opt = AdamW(model.params, config.optim)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    log, best = MetricLog(), {}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    last_good = {k: v.copy() for k, v in model.params.items()}
    last_good_step = 0
    for step in range(config.steps):
        batch = data.batch(rng.integers(0, data.n_windows, size=config.batch_size))
        try:
            loss, grads = model.loss_and_grads(batch, config.decoder, rng, config.masking)
        except NumericError as e:
            loss, err = float("nan"), e
        else:
            err = None
        if err is not None or not math.isfinite(loss):
            ref = None
            if out is not None:
                ref = out / "last_good.ckpt"
                save_checkpoint(ref, last_good, checkpoint_header(model_cfg, config, last_good_step))
            raise NumericError(f"non-finite loss at step {step}; last good step {last_good_step}",
                               layer=getattr(err, "layer", None), last_good=str(ref) if ref else last_good_step)
        logging = step % config.log_every == 0 or step == config.steps - 1
        if logging:
            # these params just produced a finite loss; the update below may not
            last_good = {k: v.copy() for k, v in model.params.items()}
            last_good_step = step
        gnorm = opt.step(model.params, grads, lr_at(step, config.steps, config.optim))
        if logging:
            log.add(step, "train", ALL, "loss", loss)
            log.add(step, "train", ALL, "grad_norm", gnorm)
        if validation is not None and config.eval_every and (step + 1) % config.eval_every == 0 \
                and step + 1 != config.steps:
            _eval_rows(log, best, model, validation, step + 1)
    if validation is not None:
        _eval_rows(log, best, model, validation, config.steps)
    ckpt = None
    if out is not None:
        ckpt = out / "model.ckpt"
        save_model(ckpt, model, config, config.steps)
        (out / "metrics.csv").write_text(log.to_csv())
    return TrainResult(model, log, best, ckpt)


@dataclass
class LadderSpec:
    """Backbone sizes to sweep; everything outside the backbone stays fixed."""

    rungs: list

    def __post_init__(self):
        if len(self.rungs) < 3:
            raise ConfigError("a ladder needs at least 3 rungs")
        base = self.rungs[0]
        fixed = ("d", "vocab", "n_in_vocab", "seq_len", "semantic_dims", "d_z", "head_mode", "item_tower",
                 "context_sizes", "n_tasks", "precision")
        for r in self.rungs[1:]:
            for f in fixed:
                if getattr(r, f) != getattr(base, f):
                    raise ConfigError(f"ladder rungs must share {f}")
        ns = [param_count(r, "backbone_only") for r in self.rungs]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ConfigError("ladder rungs must strictly increase in backbone size")

    @property
    def sizes(self) -> list[int]:
        return [param_count(r, "backbone_only") for r in self.rungs]


@dataclass
class SweepResult:
    points: list
    failures: list
    logs: list


def sweep(ladder: LadderSpec, config: TrainConfig, dataset: Dataset, validation: Dataset,
          seeds=(0,)) -> SweepResult:
    """Best validation MRR per task and rung (median over seeds), keyed by backbone size."""
    points, failures, logs = [], [], []
    cache: dict = {}
    for i, rung in enumerate(ladder.rungs):
        N = param_count(rung, "backbone_only")
        per_task: dict[str, list[float]] = {}
        for s in seeds:
            key = rung.seq_len
            if key not in cache:
                cache[key] = SequenceData(dataset.histories, dataset.n_users, rung.seq_len, config.objective,
                                          config.mtp)
            try:
                res = train(config.replace(seed=s), dataset, rung, validation, data=cache[key])
            except GenrecError as e:
                failures.append({"rung": i, "N": N, "seed": s, "error": str(e)})
                continue
            logs.append({"rung": i, "N": N, "seed": s, "log": res.log})
            for t, v in res.best.items():
                per_task.setdefault(t, []).append(v)
        for t in sorted(per_task):
            points.append(ScalingPoint(float(N), float(np.median(per_task[t])), t))
    return SweepResult(points, failures, logs)
