import json

import numpy as np
import pytest

from genrec.cli import main, parse_count, parse_duration, parse_rungs

TINY_WORLD = "vocab_size=120\nn_users=40\nb_pool_size=40\nb_cluster_size=8\n"
TINY_MODEL = ["--d", "16", "--layers", "1", "--seq-len", "8"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A generated world plus a briefly trained model, shared across the module."""
    root = tmp_path_factory.mktemp("cli")
    (root / "world.cfg").write_text(TINY_WORLD)
    assert main(["gen-data", "--out", str(root / "data"), "--config", str(root / "world.cfg"), "--seed", "4"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--steps", "12",
                 "--eval-every", "0", *TINY_MODEL]) == 0
    return root


def manifest(directory, command):
    return json.loads((directory / f"manifest-{command}.json").read_text())


def test_value_parsers():
    assert parse_duration("90") == 90 and parse_duration("30m") == 1800
    assert parse_duration("24h") == 86400 and parse_duration("2d") == 172800
    assert parse_count("1e6") == 10**6 and parse_count("2.5e5") == 250000
    assert parse_rungs("8x2, 16x4") == [(8, 2), (16, 4)]
    for bad, fn in (("1.5s", parse_duration), ("x", parse_duration), ("1.5", parse_count), ("8-2", parse_rungs)):
        with pytest.raises(Exception):
            fn(bad)


def test_gen_data_and_train_outputs(workdir):
    data, run_dir = workdir / "data", workdir / "run"
    assert {p.name for p in data.iterdir()} >= {"catalog.ndjson", "events.ndjson", "world.json",
                                              "manifest-gen-data.json"}
    m = manifest(data, "gen-data")
    assert m["seed"] == 4 and m["config"]["n_users"] == 40 and len(m["outputs"]) == 3
    assert {p.name for p in run_dir.iterdir()} >= {"model.ckpt", "metrics.csv", "train.cfg", "manifest-train.json"}
    assert (run_dir / "metrics.csv").read_text().splitlines()[0] == "step,split,task,metric,value"
    assert manifest(run_dir, "train")["config"]["train"]["steps"] == 12


def test_eval_and_replay(workdir, capsys):
    args = ["--data", workdir / "data", "--checkpoint", workdir / "run" / "model.ckpt"]
    code, out, _ = run(capsys, "eval", *args, "--out", workdir / "ev")
    assert code == 0 and "MRR" in out.upper()
    assert (workdir / "ev" / "eval.csv").read_text().splitlines()[0] == "task,slice,delay,metric,value,count"
    assert manifest(workdir / "ev", "eval")["config"]["scorer"] == "model"
    code, out, _ = run(capsys, "replay", *args, "--delays", "0,24h,48h", "--out", workdir / "rp")
    assert code == 0 and "fixed-pop change@48h" in out
    assert json.loads((workdir / "rp" / "replay.json").read_text())
    # delay-0 rows of replay equal the standard evaluation
    ev = [l for l in (workdir / "ev" / "eval.csv").read_text().splitlines()[1:]]
    rp = set((workdir / "rp" / "replay.csv").read_text().splitlines()[1:])
    assert all(l in rp for l in ev)
    code, out, _ = run(capsys, "eval", "--data", workdir / "data", "--scorer", "oracle")
    assert code == 0


def test_report_renders_tables(workdir, capsys):
    code, out, _ = run(capsys, "report", workdir / "ev" / "eval.csv", workdir / "rp" / "replay.csv")
    assert code == 0 and "eval.csv" in out and "replay.csv" in out


def test_exit_codes(workdir, tmp_path, capsys):
    assert run(capsys, "bogus")[0] == 1
    assert run(capsys, "train", "--data", tmp_path / "missing", "--out", tmp_path / "o")[0] == 2
    assert run(capsys, "eval", "--data", workdir / "data")[0] == 1  # model scorer without checkpoint
    assert run(capsys, "replay", "--data", workdir / "data", "--scorer", "uniform", "--delays", "24h,48h")[0] == 1
    assert run(capsys, "cost-model", "--mode", "nonsense")[0] == 1
    assert run(capsys, "cost-model", "--vocab", "100", "--fraction", "0.001")[0] == 1
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n1,2\n")
    assert run(capsys, "fit-scaling", "--points", bad)[0] == 2
    assert run(capsys, "fit-scaling")[0] == 1
    with np.errstate(all="ignore"):
        code, _, err = run(capsys, "train", "--data", workdir / "data", "--out", tmp_path / "boom",
                           "--steps", "30", "--lr", "1e9", *TINY_MODEL)
    assert code == 3 and "non-finite" in err
    assert (tmp_path / "boom" / "last_good.ckpt").exists()


def test_cost_model_table_has_reduction_row(tmp_path, capsys):
    code, out, _ = run(capsys, "cost-model", "--d", "1024", "--layers", "6", "--seq", "512", "--vocab", "1e6",
                       "--mode", "all", "--out", tmp_path)
    assert code == 0
    ratio_lines = [l for l in out.splitlines() if l.rstrip().endswith("x")]
    assert len(ratio_lines) == 1
    ratio = float(ratio_lines[0].split()[-1].rstrip("x"))
    assert abs(ratio - 35.5) <= 0.1 * 35.5
    assert (tmp_path / "cost.csv").read_text().splitlines()[0] == "vocab,mode,flops_per_token"
    assert len((tmp_path / "cost.csv").read_text().splitlines()) == 5
    assert manifest(tmp_path, "cost-model")["config"]["modes"] == ["full", "sampled", "projected",
                                                                  "sampled+projected"]


def test_fit_scaling_bundled_fixture(tmp_path, capsys):
    code, out, _ = run(capsys, "fit-scaling", "--bundled-fixture", "--out", tmp_path)
    assert code == 0
    lines = (tmp_path / "fits.csv").read_text().splitlines()
    assert lines[0] == "task,P0,N0,a,rmse_offset,rmse_log,reduction"
    row = dict(zip(lines[0].split(","), lines[1].split(",")))
    # the fixture was drawn from an offset law with ceiling 0.5
    assert abs(float(row["P0"]) - 0.5) <= 0.02
    assert float(row["rmse_offset"]) < float(row["rmse_log"])
    assert "fits.csv" in "".join(manifest(tmp_path, "fit-scaling")["outputs"])


def test_train_config_file_and_flag_precedence(workdir, tmp_path, capsys):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("objective=mtp\nmtp.window=3\nsteps=50\n")
    code, _, _ = run(capsys, "train", "--data", workdir / "data", "--out", tmp_path / "r", "--config", cfg,
                     "--steps", "3", "--eval-every", "0", *TINY_MODEL)
    assert code == 0
    saved = (tmp_path / "r" / "train.cfg").read_text()
    assert "objective=mtp" in saved and "mtp.window=3" in saved and "steps=3" in saved
    cfg.write_text("decoder.mode=projected\n")
    assert run(capsys, "train", "--data", workdir / "data", "--out", tmp_path / "r2", "--config", cfg,
               *TINY_MODEL)[0] == 1
