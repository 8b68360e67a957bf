import json

import numpy as np
import pytest

from hrcf import cli
from hrcf.evaluation import read_csv_raster
from hrcf.grid_ingest import load_dataset
from hrcf.subdivision import Partition

SMALL = ["--rows", "6", "--cols", "6"]
FAST = ["--widths", "4,3", "--cheb-k", "2", "--mlp-hidden", "5", "--window", "3", "--epochs", "2"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def syn(tmp_path):
    path = tmp_path / "syn.bin"
    assert run("synth", "--slots", 80, "--seed", 7, "--out", path, *SMALL) == 0
    return path


@pytest.mark.parametrize("command", sorted(cli.COMMANDS))
def test_help_documents_every_flag(command, capsys):
    with pytest.raises(SystemExit) as exit_:
        run(command, "--help")
    assert exit_.value.code == 0
    text = capsys.readouterr().out
    for opt in cli.COMMANDS[command][2]:
        assert "--" + opt.replace("_", "-") in text
    assert "--config" in text


def test_top_level_help_and_usage_errors(capsys):
    with pytest.raises(SystemExit) as exit_:
        run("--help")
    assert exit_.value.code == 0
    with pytest.raises(SystemExit) as exit_:
        run("bogus")
    assert exit_.value.code == 1
    with pytest.raises(SystemExit) as exit_:
        run("synth", "--no-such-flag")
    assert exit_.value.code == 1
    assert run() == 1
    assert "usage" in capsys.readouterr().err


def test_missing_input_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.bin"
    assert run("subdivide", "--data", missing, "--out", tmp_path / "p.txt") == 2
    assert str(missing) in capsys.readouterr().err


def test_missing_required_option_is_usage_error(capsys):
    assert run("train") == 1
    assert "--data" in capsys.readouterr().err


def test_synth_writes_dataset_and_metadata(syn):
    grid = cli.load_data(syn)
    assert grid.counts.shape == (80, 6, 6, 4)
    meta = (syn.parent / "syn.bin.meta").read_text()
    assert "start = 2015-01-01" in meta and meta.count("location ") == 40
    assert grid.categories == ("GROUP1", "GROUP2", "GROUP3", "GROUP4")


def test_synth_is_byte_identical(tmp_path):
    for name in ("a.bin", "b.bin"):
        assert run("synth", "--slots", 30, "--seed", 3, "--out", tmp_path / name, *SMALL) == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("slots = 20\nseed = 5\nrows = 4\ncols = 4\n")
    assert run("synth", "--config", cfg, "--slots", 12, "--out", tmp_path / "d.bin") == 0
    grid = load_dataset(tmp_path / "d.bin")
    assert grid.counts.shape[:3] == (12, 4, 4)
    parsed = cli.merge_config(cli.build_parser().parse_args(["synth", "--config", str(cfg)]))
    assert parsed.slots == 20 and parsed.seed == 5 and parsed.lr == 0.003


def test_subdivide_reports_and_writes(syn, tmp_path, capsys):
    part_path, graph_path = tmp_path / "part.txt", tmp_path / "g.txt"
    assert run("subdivide", "--data", syn, "--tau", 300, "--window", 3, "--out", part_path,
               "--graph-out", graph_path) == 0
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    part = Partition.load(part_path)
    assert report["regions"] == len(part) > 1
    assert report["partition_zero_fraction"] <= report["grid_zero_fraction"]
    assert graph_path.read_text().startswith("# nodes")


def test_train_eval_raster_pipeline(syn, tmp_path, capsys):
    ckpt, log = tmp_path / "m.ckpt", tmp_path / "train.log"
    assert run("train", "--data", syn, "--tau", 300, "--out", ckpt, "--log", log, *FAST) == 0
    assert len(log.read_text().splitlines()) == 2
    report = tmp_path / "metrics.jsonl"
    assert run("eval", "--ckpt", ckpt, "--data", syn, "--report", report) == 0
    lines = [json.loads(l) for l in report.read_text().splitlines()]
    assert [(l["model"], l["split"]) for l in lines] == [("hrcf", "val"), ("hrcf", "test"),
                                                         ("frequency", "val"), ("frequency", "test")]
    assert lines[1]["threshold"] == lines[0]["threshold"]
    out = tmp_path / "pred.pgm"
    assert run("raster", "--ckpt", ckpt, "--data", syn, "--rows", 100, "--cols", 66, "--out", out,
               "--date", "2015-03-10") == 0
    header = out.read_text().split()[:4]
    assert header == ["P2", "66", "100", "255"]
    csv = tmp_path / "pred.csv"
    assert run("raster", "--ckpt", ckpt, "--data", syn, "--rows", 12, "--cols", 12, "--out", csv, "--slot", 40) == 0
    arr = read_csv_raster(csv)
    assert arr.shape == (12, 12) and arr.min() >= 1e-6 and arr.max() <= 1 - 1e-6
    assert run("raster", "--ckpt", ckpt, "--data", syn, "--out", csv, "--slot", 1) == 1


def test_train_is_reproducible(syn, tmp_path):
    outs = []
    for k in range(2):
        ckpt, log = tmp_path / f"m{k}.ckpt", tmp_path / f"t{k}.log"
        assert run("train", "--data", syn, "--tau", 300, "--out", ckpt, "--log", log, "--seed", 2, *FAST) == 0
        outs.append((ckpt.read_bytes(), log.read_text()))
    assert outs[0] == outs[1]


def test_eval_rejects_mismatched_grid(syn, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    assert run("train", "--data", syn, "--tau", 300, "--out", ckpt, *FAST) == 0
    other = tmp_path / "other.bin"
    assert run("synth", "--slots", 80, "--rows", 5, "--cols", 5, "--out", other) == 0
    assert run("eval", "--ckpt", ckpt, "--data", other) == 1


def test_corrupt_checkpoint_is_io_error(syn, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE")
    assert run("eval", "--ckpt", bad, "--data", syn) == 2


def test_prepare_from_csv(tmp_path, capsys):
    src = tmp_path / "events.csv"
    src.write_text(
        "Date,Primary Type,Latitude,Longitude\n"
        "01/01/2015 10:00:00 AM,THEFT,41.70,-87.70\n"
        "01/02/2015 11:00:00 PM,ASSAULT,41.90,-87.60\n"
        "01/02/2015 11:00:00 PM,HOMICIDE,41.90,-87.60\n"
        "01/03/2015 01:00:00 AM,BATTERY,45.00,-87.60\n"
    )
    conf = tmp_path / "data.cfg"
    conf.write_text("rows = 5\ncols = 4\nstart = 2015-01-01\nn_slots = 3\n")
    out = tmp_path / "chi.bin"
    assert run("prepare", "--input", src, "--data-config", conf, "--out", out) == 0
    summary = json.loads(capsys.readouterr().out.strip())
    assert summary["accepted"] == 2 and summary["rejected"] == {"non-whitelisted": 1, "out-of-bbox": 1}
    grid = cli.load_data(out)
    assert grid.counts.shape == (3, 5, 4, 8) and grid.counts.sum() == 2
    assert np.all(grid.totals.sum(axis=(1, 2)) == [1, 1, 0])
