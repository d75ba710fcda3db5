"""File formats: checkpoints, key=value configs, NDJSON datasets and CSV tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .world import (EventLog, Dataset, TitleCatalog, WorldConfig, build_plan, generate_history,
                    user_seed)

CKPT_MAGIC = b"GENREC-CKPT\x00"
CKPT_VERSION = 1
EVENTS_SCHEMA = "genrec.events"
CATALOG_SCHEMA = "genrec.catalog"
SCHEMA_VERSION = 1
EVENT_FIELDS = ("user_id", "item", "timestamp", "reward", "high_value", "context", "task")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict, header: dict) -> None:
    """Magic, version, JSON header length + header, then raw little-endian tensors."""
    names = list(params)
    meta = dict(header)
    meta["tensors"] = [{"name": n, "shape": list(params[n].shape), "dtype": params[n].dtype.str.lstrip("<>=|")}
                       for n in names]
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            arr = np.ascontiguousarray(params[n])
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise InputError(f"{path}: not a checkpoint file")
    off = len(CKPT_MAGIC)
    version, n = struct.unpack_from("<IQ", data, off)
    if version != CKPT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<IQ")
    meta = json.loads(data[off:off + n])
    off += n
    params = {}
    for t in meta.pop("tensors"):
        dt = np.dtype("<" + t["dtype"])
        size = int(np.prod(t["shape"])) * dt.itemsize
        if off + size > len(data):
            raise InputError(f"{path}: truncated tensor {t['name']}")
        params[t["name"]] = np.frombuffer(data, dtype=dt, count=int(np.prod(t["shape"])),
                                          offset=off).reshape(t["shape"]).astype(dt.newbyteorder("="))
        off += size
    if off != len(data):
        raise InputError(f"{path}: trailing bytes after last tensor")
    return params, meta


# ---------------------------------------------------------------------------
# key=value configs


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"line {lineno}: empty key")
        out[k] = v
    return out


def format_kv(d: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in d.items())


# ---------------------------------------------------------------------------
# datasets


def _fixed(arr) -> list[str]:
    return [f"{x:+.17e}" for x in np.asarray(arr, dtype=np.float64)]


def write_catalog(path, catalog: TitleCatalog) -> None:
    with open(path, "w") as f:
        f.write(json.dumps({"schema": CATALOG_SCHEMA, "version": SCHEMA_VERSION, "seed": catalog.seed,
                            "dims": list(catalog.semantic_dims), "latent_dim": catalog.latent.shape[1]}) + "\n")
        for i in range(len(catalog)):
            rec = {"id": i, "launch_time": int(catalog.launch_time[i]), "in_vocab": bool(catalog.in_vocab[i]),
                   "graph_vec": _fixed(catalog.graph[i]), "lang_vec": _fixed(catalog.lang[i]),
                   "ann_vec": _fixed(catalog.ann[i]), "latent": _fixed(catalog.latent[i])}
            f.write(json.dumps(rec) + "\n")


def _check_header(line: str, schema: str, path) -> dict:
    try:
        head = json.loads(line)
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: bad header line ({e})") from None
    if head.get("schema") != schema or head.get("version") != SCHEMA_VERSION:
        raise InputError(f"{path}: expected schema {schema} v{SCHEMA_VERSION}, got {head}")
    return head


def read_catalog(path) -> TitleCatalog:
    with open(path) as f:
        head = _check_header(f.readline(), CATALOG_SCHEMA, path)
        recs = [json.loads(line) for line in f if line.strip()]
    if [r["id"] for r in recs] != list(range(len(recs))):
        raise InputError(f"{path}: title ids must be 0..V-1 in order")
    col = lambda k: np.array([[float(x) for x in r[k]] for r in recs], dtype=np.float64)  # noqa: E731
    return TitleCatalog(np.array([r["launch_time"] for r in recs], dtype=np.int64),
                        np.array([r["in_vocab"] for r in recs], dtype=bool),
                        col("graph_vec"), col("lang_vec"), col("ann_vec"), col("latent"), seed=int(head["seed"]))


def write_events(path, log: EventLog) -> None:
    with open(path, "w") as f:
        f.write(json.dumps({"schema": EVENTS_SCHEMA, "version": SCHEMA_VERSION, "fields": list(EVENT_FIELDS)}) + "\n")
        for i in range(len(log)):
            f.write(json.dumps({
                "user_id": int(log.user_id[i]), "item": int(log.item[i]), "timestamp": int(log.timestamp[i]),
                "reward": repr(float(log.reward[i])), "high_value": bool(log.high_value[i]),
                "context": [int(c) for c in log.context[i]], "task": "ABC"[int(log.task[i])],
            }) + "\n")


def read_events(path) -> EventLog:
    with open(path) as f:
        _check_header(f.readline(), EVENTS_SCHEMA, path)
        recs = [json.loads(line) for line in f if line.strip()]
    if not recs:
        return EventLog.empty()
    try:
        log = EventLog(
            user_id=np.array([r["user_id"] for r in recs], dtype=np.int64),
            item=np.array([r["item"] for r in recs], dtype=np.int64),
            timestamp=np.array([r["timestamp"] for r in recs], dtype=np.int64),
            reward=np.array([float(r["reward"]) for r in recs], dtype=np.float64),
            high_value=np.array([r["high_value"] for r in recs], dtype=bool),
            context=np.array([r["context"] for r in recs], dtype=np.int64).reshape(len(recs), -1),
            task=np.array(["ABC".index(r["task"]) for r in recs], dtype=np.int64),
        )
    except (KeyError, ValueError) as e:
        raise InputError(f"{path}: malformed event record ({e})") from None
    key = log.user_id * (1 << 40) + log.timestamp
    if len(log) > 1 and (np.diff(key) <= 0).any():
        raise InputError(f"{path}: events must be sorted by user and strictly increasing in time")
    return log


def write_dataset(directory, train: Dataset, valid: Dataset) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"catalog": d / "catalog.ndjson", "events": d / "events.ndjson", "world": d / "world.json"}
    write_catalog(paths["catalog"], train.catalog)
    write_events(paths["events"], EventLog.concat([valid.histories, valid.labels])
                 [np.lexsort((np.concatenate([valid.histories.timestamp, valid.labels.timestamp]),
                              np.concatenate([valid.histories.user_id, valid.labels.user_id])))])
    paths["world"].write_text(json.dumps({"config": train.config.to_dict(), "seed": train.seed,
                                          "digest": valid.digest()}, indent=1, sort_keys=True))
    return paths


def read_dataset(directory) -> tuple[Dataset, Dataset]:
    """Load a dataset directory; generator truth is rebuilt from the stored seed."""
    d = Path(directory)
    try:
        meta = json.loads((d / "world.json").read_text())
    except FileNotFoundError:
        raise InputError(f"{d}: missing world.json") from None
    config = WorldConfig.from_dict(meta["config"])
    seed = int(meta["seed"])
    catalog = read_catalog(d / "catalog.ndjson")
    events = read_events(d / "events.ndjson")
    if len(catalog) != config.vocab_size:
        raise InputError("catalog size does not match the world config")
    if len(events) and (events.item.max() >= len(catalog) or events.item.min() < 0):
        raise InputError("event references an unknown title")
    before = events.timestamp <= config.cutoff
    truth = _LazyTruth(catalog, config, seed)
    common = dict(catalog=catalog, histories=events.select(before), cutoff=config.cutoff, config=config,
                  seed=seed, n_users=config.n_users, truth=truth)
    train = Dataset(labels=EventLog.empty(), split="train", **common)
    valid = Dataset(labels=events.select(~before), split="validation", **common)
    if meta.get("digest") and valid.digest() != meta["digest"]:
        raise InputError(f"{d}: dataset digest mismatch")
    return train, valid


class _LazyTruth(dict):
    """Generator-side user state, regenerated on first access (oracle scoring only)."""

    def __init__(self, catalog, config, seed):
        super().__init__()
        self._args = (catalog, config, seed)
        self._plan = None

    def __missing__(self, u):
        catalog, config, seed = self._args
        if self._plan is None:
            self._plan = build_plan(catalog, config)
        _, tr = generate_history(user_seed(seed, u), catalog, config.horizon, config, user_id=u,
                                 plan=self._plan, return_truth=True)
        self[u] = tr
        return tr


# ---------------------------------------------------------------------------
# CSV


def rows_to_csv(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    try:
        with open(path, newline="") as f:
            return list(csv.DictReader(f))
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
