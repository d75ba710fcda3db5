"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import re
import sys
import time
from importlib import resources
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .backbone import ModelConfig
from .cost import MODES, emit_sweep, sweep_csv
from .errors import ConfigError, GenrecError, InputError
from .evaluation import BayesOracleScorer, EvalReport, StalenessConfig, UniformScorer, evaluate, replay_staleness
from .io import format_kv, parse_kv, read_csv, read_dataset, rows_to_csv, sha256_file, write_dataset
from .model import model_config_for
from .scaling import ScalingPoint, compare_fits, group_by_task
from .training import LadderSpec, TrainConfig, load_model, sweep, train
from .world import TASKS, WorldConfig, generate_dataset

COMMANDS = ("gen-data", "train", "sweep", "eval", "replay", "fit-scaling", "cost-model", "report")
FIT_FIELDS = ("task", "P0", "N0", "a", "rmse_offset", "rmse_log", "reduction")
POINT_FIELDS = ("task", "N", "P")
THREADS_ENV = "GENREC_THREADS"


class UsageError(GenrecError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_help()}")


# ---------------------------------------------------------------------------
# value parsing

_DURATION = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)\s*([smhd]?)\s*$")
_UNIT = {"": 1, "s": 1, "m": 60, "h": 3600, "d": 86400}


def parse_duration(text: str) -> int:
    """Seconds from ``90``, ``30m``, ``24h`` or ``2d``."""
    m = _DURATION.match(text)
    if not m:
        raise argparse.ArgumentTypeError(f"bad duration {text!r} (use e.g. 3600, 30m, 24h, 2d)")
    v = float(m.group(1)) * _UNIT[m.group(2)]
    if v != int(v):
        raise argparse.ArgumentTypeError(f"duration {text!r} is not a whole number of seconds")
    return int(v)


def parse_count(text: str) -> int:
    """Integer from ``1000``, ``1e6`` or ``2.5e5``."""
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad count {text!r}") from None
    if not math.isfinite(v) or v != int(v):
        raise argparse.ArgumentTypeError(f"count {text!r} is not an integer")
    return int(v)


def parse_list(conv):
    def parse(text: str):
        return [conv(t) for t in text.split(",") if t.strip()]
    return parse


def parse_rungs(text: str) -> list[tuple[int, int]]:
    """``8x2,16x2`` -> [(backbone width, layers), ...]."""
    out = []
    for tok in text.split(","):
        m = re.fullmatch(r"\s*(\d+)x(\d+)\s*", tok)
        if not m:
            raise argparse.ArgumentTypeError(f"bad rung {tok!r} (use WIDTHxLAYERS)")
        out.append((int(m.group(1)), int(m.group(2))))
    return out


# ---------------------------------------------------------------------------
# manifests


def write_manifest(out_dir: Path, command: str, config: dict, seed, inputs, outputs, started: float):
    manifest = {
        "command": command, "version": __version__, "config": config, "seed": seed,
        "inputs": [str(p) for p in inputs], "outputs": {str(p): sha256_file(p) for p in outputs},
        "duration_seconds": round(time.time() - started, 3),
    }
    path = out_dir / f"manifest-{command}.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")
    return path


# ---------------------------------------------------------------------------
# shared option groups


def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--d", type=int, default=32, help="embedding / decoder width")
    g.add_argument("--d-backbone", type=int, default=None, help="backbone width (default: --d)")
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--heads", type=int, default=2)
    g.add_argument("--seq-len", type=int, default=32)
    g.add_argument("--head-mode", choices=("full", "projected"), default="full")
    g.add_argument("--item-tower", choices=("semantic", "table"), default="semantic")
    g.add_argument("--precision", choices=("f32", "f64"), default="f32")


def _add_train_args(p):
    g = p.add_argument_group("training")
    g.add_argument("--config", type=Path, help="key=value training config file")
    g.add_argument("--objective", choices=("ntp", "mtp"))
    g.add_argument("--mtp-window", type=int, help="max future targets K (1..5)")
    g.add_argument("--half-life-seconds", type=parse_duration)
    g.add_argument("--mtp-horizon", type=parse_duration)
    g.add_argument("--reward-weighting", choices=("unit", "reward"))
    g.add_argument("--mask-prob", type=float)
    g.add_argument("--mask-side", choices=("input", "output", "either"))
    g.add_argument("--sampling", choices=("none", "uniform"))
    g.add_argument("--sample-fraction", type=float)
    g.add_argument("--steps", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--eval-every", type=int)


def _train_config(args) -> TrainConfig:
    flat = {}
    if args.config is not None:
        try:
            flat.update(parse_kv(args.config.read_text()))
        except FileNotFoundError:
            raise InputError(f"{args.config}: no such file") from None
    overrides = {
        "objective": args.objective, "mtp.window": args.mtp_window, "mtp.half_life": args.half_life_seconds,
        "mtp.horizon": args.mtp_horizon, "mtp.reward_weighting": args.reward_weighting,
        "masking.p_mask": args.mask_prob, "masking.side": args.mask_side, "decoder.sampling": args.sampling,
        "decoder.fraction": args.sample_fraction, "steps": args.steps, "batch_size": args.batch_size,
        "optim.lr": args.lr, "eval_every": args.eval_every, "seed": args.seed,
    }
    flat.update({k: v for k, v in overrides.items() if v is not None})
    if "decoder.mode" not in flat:
        flat["decoder.mode"] = args.head_mode
    elif flat["decoder.mode"] != args.head_mode:
        raise ConfigError("decoder.mode in the config file disagrees with --head-mode")
    return TrainConfig.from_flat(flat)


def _model_config(args, catalog, d_backbone=None, layers=None) -> ModelConfig:
    return model_config_for(catalog, d=args.d, d_backbone=d_backbone or args.d_backbone,
                            layers=layers or args.layers, heads=args.heads, seq_len=args.seq_len,
                            head_mode=args.head_mode, item_tower=args.item_tower, precision=args.precision)


# ---------------------------------------------------------------------------
# commands


def world_overrides(raw: dict) -> dict:
    """Typed WorldConfig keyword arguments from key=value strings."""
    base = WorldConfig()
    out = {}
    for k, v in raw.items():
        if not hasattr(base, k):
            raise ConfigError(f"unknown world key {k!r}")
        cur = getattr(base, k)
        try:
            if isinstance(cur, tuple):
                out[k] = tuple(float(x) for x in v.split(","))
            elif isinstance(cur, int):
                out[k] = parse_count(v)
            else:
                out[k] = float(v)
        except (ValueError, argparse.ArgumentTypeError):
            raise ConfigError(f"bad value for {k}: {v!r}") from None
    return out


def cmd_gen_data(args, started):
    kw = {}
    if args.config is not None:
        kw = world_overrides(parse_kv(args.config.read_text()))
    if args.users is not None:
        kw["n_users"] = args.users
    if args.vocab is not None:
        kw["vocab_size"] = args.vocab
    if args.horizon is not None:
        kw["horizon"] = args.horizon
    if args.cutoff is not None:
        kw["cutoff"] = args.cutoff
    config = WorldConfig(**kw)
    train_ds, valid_ds = generate_dataset(config, args.seed)
    paths = write_dataset(args.out, train_ds, valid_ds)
    print(f"wrote {len(valid_ds.histories)} history events and {len(valid_ds.labels)} labels "
          f"for {config.n_users} users to {args.out}")
    write_manifest(args.out, "gen-data", config.to_dict(), args.seed, [], paths.values(), started)


def cmd_train(args, started):
    train_ds, valid_ds = read_dataset(args.data)
    tcfg = _train_config(args)
    mcfg = _model_config(args, train_ds.catalog)
    res = train(tcfg, train_ds, mcfg, valid_ds, out_dir=args.out)
    for t, v in sorted(res.best.items()):
        print(f"best validation MRR {t}: {v:.4f}")
    (args.out / "train.cfg").write_text(format_kv(tcfg.to_flat()))
    write_manifest(args.out, "train", {"train": tcfg.to_flat(), "model": mcfg.to_dict()}, tcfg.seed,
                   [args.data], [res.checkpoint, args.out / "metrics.csv", args.out / "train.cfg"], started)


def cmd_sweep(args, started):
    train_ds, valid_ds = read_dataset(args.data)
    tcfg = _train_config(args)
    rungs = [_model_config(args, train_ds.catalog, d_backbone=w, layers=n) for w, n in args.rungs]
    ladder = LadderSpec(rungs)
    res = sweep(ladder, tcfg, train_ds, valid_ds, seeds=args.seeds)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = [{"task": p.task, "N": int(p.N), "P": repr(p.P)} for p in res.points]
    out = args.out / "points.csv"
    out.write_text(rows_to_csv(rows, POINT_FIELDS))
    for f in res.failures:
        print(f"rung {f['rung']} (N={f['N']}, seed {f['seed']}) failed: {f['error']}", file=sys.stderr)
    print(format_points(res.points))
    write_manifest(args.out, "sweep", {"train": tcfg.to_flat(), "rungs": [r.to_dict() for r in rungs],
                                       "seeds": list(args.seeds)}, tcfg.seed, [args.data], [out], started)


def _scorer(args, catalog):
    if args.scorer == "oracle":
        return BayesOracleScorer()
    if args.scorer == "uniform":
        return UniformScorer()
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required with --scorer model")
    model, _ = load_model(args.checkpoint, catalog)
    return model


def cmd_eval(args, started):
    _, valid_ds = read_dataset(args.data)
    rep = evaluate(_scorer(args, valid_ds.catalog), valid_ds, k=args.k, seed=args.seed)
    _emit_report(args, rep, "eval", started)


def cmd_replay(args, started):
    _, valid_ds = read_dataset(args.data)
    try:
        cfg = StalenessConfig(tuple(args.delays))
    except ConfigError as e:
        raise UsageError(str(e)) from None
    rep = replay_staleness(_scorer(args, valid_ds.catalog), valid_ds, cfg, k=args.k, seed=args.seed)
    _emit_report(args, rep, "replay", started)


def _emit_report(args, rep: EvalReport, command, started):
    print(render_eval(rep))
    if args.out is None:
        return
    args.out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = args.out / f"{command}.csv", args.out / f"{command}.json"
    csv_path.write_text(rep.to_csv())
    json_path.write_text(rep.to_json())
    inputs = [args.data] + ([args.checkpoint] if args.checkpoint else [])
    write_manifest(args.out, command, {"scorer": args.scorer, "k": args.k,
                                       "delays": getattr(args, "delays", [0])}, args.seed, inputs,
                   [csv_path, json_path], started)


def load_points(path) -> list[ScalingPoint]:
    rows = read_csv(path)
    if not rows or not {"N", "P"} <= set(rows[0]):
        raise InputError(f"{path}: expected columns task,N,P")
    try:
        return [ScalingPoint(float(r["N"]), float(r["P"]), r.get("task", "") or "") for r in rows]
    except ValueError as e:
        raise InputError(f"{path}: {e}") from None


def fixture_path(name: str = "synthetic_recovery.csv") -> Path:
    return Path(str(resources.files("genrec") / "data" / name))


def fit_rows(points) -> list[dict]:
    rows = []
    for task, pts in group_by_task(points).items():
        fc = compare_fits(pts)
        rows.append({"task": task, "P0": fc.offset.P0, "N0": fc.offset.N0, "a": fc.offset.a,
                     "rmse_offset": fc.offset.rmse, "rmse_log": fc.log.rmse, "reduction": fc.reduction})
    return rows


def cmd_fit_scaling(args, started):
    path = fixture_path() if args.bundled_fixture else args.points
    if path is None:
        raise UsageError("give --points CSV or --bundled-fixture")
    rows = fit_rows(load_points(path))
    print(render_fits(rows))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        out = args.out / "fits.csv"
        out.write_text(rows_to_csv([{k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()}
                                    for r in rows], FIT_FIELDS))
        write_manifest(args.out, "fit-scaling", {"points": str(path)}, None, [path], [out], started)


def cmd_cost_model(args, started):
    modes = MODES if args.mode == ["all"] else args.mode
    for m in modes:
        if m not in MODES:
            raise UsageError(f"unknown mode {m!r}; choose from {', '.join(MODES)} or all")
    rows = emit_sweep(args.vocab, modes, layers=args.layers, d=args.d, seq_len=args.seq,
                      fraction=args.fraction, n_positives=args.positives)
    print(render_cost(rows, args))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        out = args.out / "cost.csv"
        out.write_text(sweep_csv(rows))
        write_manifest(args.out, "cost-model", {"d": args.d, "layers": args.layers, "seq": args.seq,
                                                "vocab": args.vocab, "modes": list(modes),
                                                "fraction": args.fraction}, None, [], [out], started)


def cmd_report(args, started):
    blocks = []
    for path in args.inputs:
        rows = read_csv(path)
        if not rows:
            raise InputError(f"{path}: empty table")
        cols = set(rows[0])
        if set(FIT_FIELDS) <= cols:
            blocks.append(render_fits([{k: (v if k == "task" else float(v)) for k, v in r.items()} for r in rows]))
        elif {"vocab", "mode", "flops_per_token"} <= cols:
            blocks.append(render_cost([{"vocab": int(r["vocab"]), "mode": r["mode"],
                                        "flops_per_token": float(r["flops_per_token"])} for r in rows]))
        elif set(POINT_FIELDS) <= cols:
            blocks.append(format_points(load_points(path)))
        elif {"task", "slice", "delay", "metric", "value"} <= cols:
            blocks.append(render_eval(EvalReport.from_csv(Path(path).read_text())))
        else:
            raise InputError(f"{path}: unrecognised table columns {sorted(cols)}")
        if len(args.inputs) > 1:
            blocks[-1] = f"{path}\n{blocks[-1]}"
    if len(args.inputs) == 2 and all(_is_report(p) for p in args.inputs):
        a, b = (EvalReport.from_csv(Path(p).read_text()) for p in args.inputs)
        blocks.append(render_comparison(a, b, [str(p) for p in args.inputs]))
    print("\n\n".join(blocks))


def _is_report(path) -> bool:
    rows = read_csv(path)
    return bool(rows) and "slice" in rows[0]


# ---------------------------------------------------------------------------
# text rendering


def _table(header, rows) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    line = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))  # noqa
    return "\n".join([line(cells[0]), "  ".join("-" * w for w in widths)] + [line(r) for r in cells[1:]])


def render_fits(rows) -> str:
    body = [(r["task"], f"{r['P0']:.4f}", f"{r['N0']:.4g}", f"{r['a']:.4f}", f"{r['rmse_offset']:.4f}",
             f"{r['rmse_log']:.4f}", f"{100 * r['reduction']:.1f}%") for r in rows]
    return _table(("task", "P0", "N0", "a", "rmse offset", "rmse log", "reduction"), body)


def render_cost(rows, args=None) -> str:
    body = [(f"{r['vocab']:.0e}", r["mode"], f"{r['flops_per_token']:.3e}") for r in rows]
    out = _table(("vocab", "mode", "FLOPs/token"), body)
    by = {(r["vocab"], r["mode"]): r["flops_per_token"] for r in rows}
    ratios = [(f"{v:.0e}", f"{by[(v, 'full')] / by[(v, 'sampled+projected')]:.1f}x")
              for v in sorted({r["vocab"] for r in rows})
              if (v, "full") in by and (v, "sampled+projected") in by]
    if ratios:
        out += "\n\n" + _table(("vocab", "full / sampled+projected"), ratios)
    return out


def format_points(points) -> str:
    return _table(("task", "N", "best MRR"), [(p.task, int(p.N), f"{p.P:.4f}") for p in points])


def _hours(delay: int) -> str:
    return f"{delay // 3600}h" if delay % 3600 == 0 else f"{delay}s"


def render_eval(rep: EvalReport, title: str | None = None) -> str:
    delays = sorted({r["delay"] for r in rep.rows})
    tasks = [t.name for t in TASKS]
    head = ["task"] + [f"MRR@{_hours(d)}" for d in delays]
    has_rel = any(r["metric"] == "mrr_rel" for r in rep.rows)
    if has_rel and len(delays) > 1:
        head += [f"fixed-pop change@{_hours(d)}" for d in delays[1:]]
    body = []
    for t in tasks:
        row = [t] + [f"{rep.get(t, 'warm', d):.4f}" for d in delays]
        if has_rel and len(delays) > 1:
            row += [f"{100 * (rep.get(t, 'warm', d, 'mrr_rel') - 1):+.1f}%" for d in delays[1:]]
        body.append(row)
    cold = ["cold_start"] + [f"{rep.get('ALL', 'cold_start', d):.4f}" for d in delays]
    if has_rel and len(delays) > 1:
        cold += [""] * (len(delays) - 1)
    body.append(cold)
    out = _table(head, body)
    return f"{title}\n{out}" if title else out


def render_comparison(a: EvalReport, b: EvalReport, names) -> str:
    delays = sorted({r["delay"] for r in a.rows} & {r["delay"] for r in b.rows})
    body = []
    for t in [t.name for t in TASKS]:
        for d in delays:
            va, vb = a.get(t, "warm", d), b.get(t, "warm", d)
            body.append((t, _hours(d), f"{va:.4f}", f"{vb:.4f}", f"{100 * (vb / va - 1):+.1f}%"))
    d0 = delays[0]
    va, vb = a.get("ALL", "cold_start", d0), b.get("ALL", "cold_start", d0)
    body.append(("cold_start", _hours(d0), f"{va:.4f}", f"{vb:.4f}", f"{100 * (vb / va - 1):+.1f}%"))
    return _table(("task", "delay", Path(names[0]).name, Path(names[1]).name, "relative"), body)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="genrec", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--threads", type=int, default=None, help=f"BLAS threads (or env {THREADS_ENV})")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("gen-data", help="generate a synthetic world")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--config", type=Path, help="key=value world config file")
    s.add_argument("--users", type=parse_count)
    s.add_argument("--vocab", type=parse_count)
    s.add_argument("--horizon", type=parse_duration)
    s.add_argument("--cutoff", type=parse_duration)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int)
    _add_model_args(s)
    _add_train_args(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="train a ladder of backbone sizes")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--rungs", type=parse_rungs, default=parse_rungs("8x2,16x2,32x2,64x2,64x4"),
                   help="comma list of WIDTHxLAYERS")
    s.add_argument("--seeds", type=parse_list(int), default=[0])
    s.add_argument("--seed", type=int)
    _add_model_args(s)
    _add_train_args(s)
    s.set_defaults(func=cmd_sweep)

    for name, func, helptext in (("eval", cmd_eval, "evaluate at the cutoff"),
                                 ("replay", cmd_replay, "evaluate at increasing serving delays")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--data", type=Path, required=True)
        s.add_argument("--checkpoint", type=Path)
        s.add_argument("--scorer", choices=("model", "oracle", "uniform"), default="model")
        s.add_argument("--out", type=Path)
        s.add_argument("--k", type=int, default=10)
        s.add_argument("--seed", type=int, default=0)
        if name == "replay":
            s.add_argument("--delays", type=parse_list(parse_duration), default=[0, 86400, 172800],
                           help="comma list starting at 0, e.g. 0,24h,48h")
        s.set_defaults(func=func)

    s = sub.add_parser("fit-scaling", help="fit offset power law and log law per task")
    s.add_argument("--points", type=Path, help="CSV with columns task,N,P")
    s.add_argument("--bundled-fixture", action="store_true", help="use the bundled recovery fixture")
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_fit_scaling)

    s = sub.add_parser("cost-model", help="output-layer FLOPs per token")
    s.add_argument("--d", type=int, default=1024)
    s.add_argument("--layers", type=int, default=6)
    s.add_argument("--seq", type=int, default=512)
    s.add_argument("--vocab", type=parse_list(parse_count), default=[10**6])
    s.add_argument("--mode", type=parse_list(str), default=["all"])
    s.add_argument("--fraction", type=float, default=0.01)
    s.add_argument("--positives", type=int, default=1)
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_cost_model)

    s = sub.add_parser("report", help="render emitted CSVs as plain-text tables")
    s.add_argument("inputs", type=Path, nargs="+")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
        threads = args.threads or int(os.environ.get(THREADS_ENV, "0") or 0) or None
        if threads is not None and threads < 1:
            raise UsageError("--threads must be >= 1")
        with threadpool_limits(threads):
            args.func(args, started)
        return 0
    except GenrecError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, TypeError) as e:
        # config dataclasses raise these for malformed values from files
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FloatingPointError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
