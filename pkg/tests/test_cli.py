"""End-to-end tests for the command-line interface.

A module-scoped fixture drives the whole pipeline once on a tiny synthetic
scene (synth -> features -> labels -> tile -> split -> train -> infer ->
evaluate -> grid); the individual tests then assert on the files and the
captured output of each stage.
"""
import contextlib
import csv
import io
import json
import os
import re

import numpy as np
import pytest
import tomli as tomllib

from sarseg.cli import main
from sarseg.model import TopologyConfig, count_params, load_weights
from sarseg.raster import (ComplexRaster, LabelRaster, Plane, PlaneStack,
                           read_raster, write_raster)

NET_TOML = """\
[topology]
input_channels = 1
num_classes = 3
width = 2
encoder_levels = 1
dilations = [1, 2]
bottleneck_blocks = 1
decoder_refine = ["conv3"]

[train]
epochs = 2
batch_size = 2
lr = 0.01
seed = 0
balance_classes = false
"""

SCENE_TOML = """\
[scene]
height = 64
width = 64
building_count = 3
road_count = 2
building_size_range = [10, 18]
shadow_length_range = [3, 6]
looks = 4
jitter_sigma_px = 0.0
dropout_prob = 0.0
resolution_m = 1.0
seed = 7

[train]
epochs = 1
batch_size = 2
"""

TINY_TOPOLOGY = TopologyConfig(input_channels=1, num_classes=3, width=2,
                               encoder_levels=1, dilations=(1, 2),
                               bottleneck_blocks=1, decoder_refine=("conv3",))


def run_cli(argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


def run_ok(argv):
    code, out, err = run_cli(argv)
    assert code == 0, f"{argv} failed ({code}): {err or out}"
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    p = lambda name: str(root / name)
    (root / "scene.toml").write_text(SCENE_TOML)
    (root / "net.toml").write_text(NET_TOML)

    logs = {}
    logs["synth"] = run_ok(["synth", "--spec", p("scene.toml"),
                            "--out-dir", p("scene")])
    logs["features"] = run_ok(["features", "--in", p("scene/flight_1.srf"),
                               "--out", p("feat.srf"), "--flights", "1",
                               "--channels", "1", "--mag"])
    logs["labels"] = run_ok(["labels", "--osm", p("scene/osm.geojson"),
                             "--swisstopo", p("scene/swisstopo.geojson"),
                             "--size", "64x64", "--resolution", "1.0",
                             "--out", p("labels.srf"), "--png", p("labels.png")])
    logs["tile_f"] = run_ok(["tile", "--input", p("feat.srf"), "--size", "32",
                             "--out-dir", p("ftiles")])
    logs["tile_l"] = run_ok(["tile", "--input", p("labels.srf"), "--size", "32",
                             "--out-dir", p("ltiles")])

    ids = sorted(f[:-4] for f in os.listdir(p("ftiles")) if f.endswith(".srf"))
    (root / "ids.txt").write_text("\n".join(ids) + "\n")
    logs["split"] = run_ok(["split", "--ids", p("ids.txt"), "--fraction",
                            "0.75", "--seed", "0", "--out", p("split.txt")])
    logs["train"] = run_ok(["train", "--features-dir", p("ftiles"),
                            "--labels-dir", p("ltiles"), "--split", p("split.txt"),
                            "--config", p("net.toml"), "--out", p("w.wts")])
    logs["infer"] = run_ok(["infer", "--config", p("net.toml"),
                            "--weights", p("w.wts"), "--features", p("feat.srf"),
                            "--out", p("pred.srf"), "--png", p("pred.png")])
    logs["evaluate"] = run_ok(["evaluate", "--pred", p("pred.srf"),
                               "--target", p("labels.srf"),
                               "--report", p("report.csv")])
    logs["grid"] = run_ok(["grid", "--spec", p("scene.toml"),
                           "--out-dir", p("grid"), "--rows", "1,3",
                           "--tile-size", "32"])
    return root, logs


# --------------------------------------------------------------------------
# per-stage outputs
# --------------------------------------------------------------------------

def test_synth_outputs(pipeline):
    root, logs = pipeline
    rec = read_raster(root / "scene" / "flight_1.srf")
    assert isinstance(rec, ComplexRaster)
    assert (rec.height, rec.width, rec.channels) == (64, 64, 4)
    assert isinstance(read_raster(root / "scene" / "flight_2.srf"), ComplexRaster)
    for src in ("osm", "swisstopo"):
        doc = json.loads((root / "scene" / f"{src}.geojson").read_text())
        assert doc["type"] == "FeatureCollection"
    with open(root / "scene" / "scene.resolved.toml", "rb") as f:
        resolved = tomllib.load(f)
    assert resolved["scene"]["height"] == 64
    assert resolved["scene"]["resolution_m"] == 1.0
    assert "wrote 2 flight raster(s)" in logs["synth"]


def test_synth_dimension_overrides(tmp_path):
    run_ok(["synth", "--out-dir", str(tmp_path / "s"), "--seed", "9",
            "--height", "32", "--width", "48"])
    rec = read_raster(tmp_path / "s" / "flight_1.srf")
    assert (rec.height, rec.width) == (32, 48)


def test_features_output(pipeline):
    root, logs = pipeline
    # a single-plane stack reads back as a bare plane
    plane = read_raster(root / "feat.srf")
    assert isinstance(plane, Plane)
    assert plane.values.shape == (64, 64)
    assert plane.values.dtype == np.float32
    with open(root / "feat.srf.resolved.toml", "rb") as f:
        resolved = tomllib.load(f)
    assert resolved["features"]["flights"] == [1]
    assert resolved["features"]["use_magnitude"] is True
    assert "wrote 1 feature plane(s)" in logs["features"]


def test_features_merges_config_and_flags(pipeline, tmp_path):
    root, _ = pipeline
    cfg = tmp_path / "feat.toml"
    cfg.write_text("[features]\nflights = [1]\nchannels = [1]\n"
                   "use_magnitude = true\n")
    out = run_ok(["features", "--config", str(cfg),
                  "--in", str(root / "scene" / "flight_1.srf"),
                  "--out", str(tmp_path / "f.srf"), "--phase-cossin"])
    assert "wrote 3 feature plane(s)" in out
    assert read_raster(tmp_path / "f.srf").values.shape == (3, 64, 64)


def test_features_rejects_input_flight_mismatch(pipeline, tmp_path):
    root, _ = pipeline
    flight = str(root / "scene" / "flight_1.srf")
    code, _, err = run_cli(["features", "--in", flight, flight,
                            "--out", str(tmp_path / "x.srf"), "--flights", "1"])
    assert code == 2
    assert err.startswith("error:")
    assert "pass one per flight" in err


def test_labels_output(pipeline):
    root, logs = pipeline
    lbl = read_raster(root / "labels.srf")
    assert isinstance(lbl, LabelRaster)
    assert lbl.labels.shape == (64, 64)
    present = set(np.unique(lbl.labels).tolist())
    assert present <= {0, 1, 2, 255}
    assert {1, 2} <= present
    assert "pixel counts" in logs["labels"]

    from PIL import Image

    img = Image.open(root / "labels.png")
    assert img.mode == "L" and img.size == (64, 64)
    shades = set(np.asarray(img).ravel().tolist())
    assert shades <= {0, 64, 128, 255}


def test_tile_outputs(pipeline):
    root, logs = pipeline
    fnames = sorted(os.listdir(root / "ftiles"))
    lnames = sorted(os.listdir(root / "ltiles"))
    assert fnames == lnames
    assert len(fnames) == 4
    assert re.fullmatch(r"tile_\d{3}_\d{3}\.srf", fnames[0])
    t = read_raster(root / "ftiles" / fnames[0])
    assert t.values.shape == (32, 32)
    lt = read_raster(root / "ltiles" / lnames[0])
    assert lt.labels.shape == (32, 32)
    assert "wrote 4 tile(s)" in logs["tile_f"]


def test_split_file_format(pipeline):
    root, _ = pipeline
    lines = (root / "split.txt").read_text().splitlines()
    assert len(lines) == 4
    parsed = [line.split("\t") for line in lines]
    assert all(len(p) == 2 for p in parsed)
    subsets = [p[0] for p in parsed]
    assert subsets.count("train") == 3 and subsets.count("test") == 1
    ids = {p[1] for p in parsed}
    assert ids == {f[:-4] for f in os.listdir(root / "ftiles")}


def test_split_stdout_and_determinism(pipeline):
    root, _ = pipeline
    a = run_ok(["split", "--ids", str(root / "ids.txt"), "--seed", "3"])
    b = run_ok(["split", "--ids", str(root / "ids.txt"), "--seed", "3"])
    assert a == b
    assert all(line.split("\t")[0] in ("train", "test")
               for line in a.strip().splitlines())


def test_train_outputs(pipeline):
    root, logs = pipeline
    w = load_weights(root / "w.wts", TINY_TOPOLOGY)
    assert w.total_scalars() == count_params(TINY_TOPOLOGY)
    assert "epoch 1: loss" in logs["train"]
    assert "trained 3 tile(s) for 2 epoch(s)" in logs["train"]

    with open(root / "history.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert all(float(r["loss"]) > 0 for r in rows)

    with open(root / "w.wts.resolved.toml", "rb") as f:
        resolved = tomllib.load(f)
    assert resolved["topology"]["width"] == 2
    assert resolved["train"]["epochs"] == 2
    assert resolved["train"]["balance_classes"] is False


def test_train_without_config_uses_data_channels(pipeline, tmp_path):
    root, _ = pipeline
    out = tmp_path / "d" / "w.wts"
    out.parent.mkdir()
    run_ok(["train", "--features-dir", str(root / "ftiles"),
            "--labels-dir", str(root / "ltiles"),
            "--split", str(root / "split.txt"),
            "--epochs", "1", "--out", str(out)])
    w = load_weights(out)
    assert w["stem.conv.w"].shape[1] == 1     # input channels from the tiles
    assert w.total_scalars() == count_params(TopologyConfig(input_channels=1))


def test_train_creates_output_directory(pipeline, tmp_path):
    root, _ = pipeline
    out = tmp_path / "fresh" / "run" / "w.wts"
    run_ok(["train", "--features-dir", str(root / "ftiles"),
            "--labels-dir", str(root / "ltiles"),
            "--split", str(root / "split.txt"),
            "--epochs", "1", "--out", str(out)])
    assert out.exists()
    assert (out.parent / "history.csv").exists()


def test_train_determinism(pipeline, tmp_path):
    root, _ = pipeline
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name / "w.wts"
        out.parent.mkdir()
        run_ok(["train", "--features-dir", str(root / "ftiles"),
                "--labels-dir", str(root / "ltiles"),
                "--split", str(root / "split.txt"),
                "--config", str(root / "net.toml"), "--out", str(out)])
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_infer_outputs(pipeline):
    root, logs = pipeline
    pred = read_raster(root / "pred.srf")
    assert isinstance(pred, LabelRaster)
    assert pred.labels.shape == (64, 64)
    assert set(np.unique(pred.labels).tolist()) <= {0, 1, 2}
    assert (root / "pred.png").exists()
    assert "wrote 64x64 prediction" in logs["infer"]


def test_infer_pads_non_multiple_input(pipeline, tmp_path):
    root, _ = pipeline
    rng = np.random.default_rng(0)
    odd = PlaneStack(rng.random((1, 25, 25)).astype(np.float32))
    write_raster(odd, tmp_path / "odd.srf")
    run_ok(["infer", "--config", str(root / "net.toml"),
            "--weights", str(root / "w.wts"),
            "--features", str(tmp_path / "odd.srf"),
            "--out", str(tmp_path / "pred.srf")])
    assert read_raster(tmp_path / "pred.srf").labels.shape == (25, 25)


def test_evaluate_report(pipeline):
    root, logs = pipeline
    m = re.search(r"PA (\d\.\d{4})\s+MA (\d\.\d{4})\s+mIoU (\d\.\d{4})",
                  logs["evaluate"])
    assert m, logs["evaluate"]
    assert all(0.0 <= float(g) <= 1.0 for g in m.groups())
    with open(root / "report.csv") as f:
        rows = list(csv.reader(f))
    assert rows, "report.csv is empty"
    flat = "\n".join(",".join(r) for r in rows)
    assert "PA" in flat and "mIoU" in flat


def test_grid_outputs(pipeline):
    root, logs = pipeline
    with open(root / "grid" / "results.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["experiment"] for r in rows] == ["1", "3"]
    assert [r["planes"] for r in rows] == ["1", "2"]
    for r in rows:
        assert r["error"] == ""
        assert 0.0 <= float(r["PA"]) <= 1.0
    assert "wrote 2 row(s)" in logs["grid"]
    assert "(0 failed)" in logs["grid"]
    with open(root / "grid" / "grid.resolved.toml", "rb") as f:
        resolved = tomllib.load(f)
    assert resolved["scene"]["seed"] == 7
    assert resolved["train"]["epochs"] == 1


def test_grid_failing_row_exits_nonzero(tmp_path):
    # a 2-channel scene cannot feed experiment 5 (channels 1..4)
    spec = tmp_path / "scene.toml"
    spec.write_text(SCENE_TOML.replace("looks = 4", "looks = 4\nchannels = 2"))
    code, out, _ = run_cli(["grid", "--spec", str(spec),
                            "--out-dir", str(tmp_path / "g"),
                            "--rows", "5", "--tile-size", "32"])
    assert code == 1
    assert "(1 failed)" in out
    with open(tmp_path / "g" / "results.csv") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["error"].startswith("ValueError:")


# --------------------------------------------------------------------------
# budget / bench
# --------------------------------------------------------------------------

def test_budget_default_topology():
    out = run_ok(["budget"])
    assert "parameters: 61667" in out
    assert "macs_per_px: 14340.0" in out
    assert "reference_gpu_mpx_per_s: 515.4" in out


def test_budget_with_config(pipeline):
    root, _ = pipeline
    out = run_ok(["budget", "--config", str(root / "net.toml")])
    assert f"parameters: {count_params(TINY_TOPOLOGY)}" in out


def test_bench_reports_throughput(pipeline):
    root, _ = pipeline
    out = run_ok(["bench", "--config", str(root / "net.toml"),
                  "--size", "16", "--reps", "2"])
    mpx = float(re.search(r"mpx_per_s: ([\d.]+)", out).group(1))
    mac = float(re.search(r"mac_per_s: ([\d.e+]+)", out).group(1))
    assert mpx > 0 and mac > 0
    assert "2 rep(s) of 16x16" in out


# --------------------------------------------------------------------------
# parser behaviour
# --------------------------------------------------------------------------

def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("synth", "features", "labels", "tile", "split", "train",
                "infer", "evaluate", "budget", "bench", "grid"):
        assert cmd in out


def test_missing_subcommand_exits_two(capsys):
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2
    assert "error" in capsys.readouterr().err


def test_bad_variant_rejected_by_parser(capsys):
    with pytest.raises(SystemExit) as e:
        main(["labels", "--osm", "a", "--swisstopo", "b", "--size", "8x8",
              "--out", "x.srf", "--variant", "bogus"])
    assert e.value.code == 2
    assert "invalid choice" in capsys.readouterr().err


def test_runtime_error_returns_two(tmp_path):
    code, _, err = run_cli(["evaluate", "--pred", str(tmp_path / "no.srf"),
                            "--target", str(tmp_path / "no.srf"),
                            "--report", str(tmp_path / "r.csv")])
    assert code == 2
    assert err.startswith("error:")


def test_bad_int_list_rejected(capsys):
    with pytest.raises(SystemExit) as e:
        main(["features", "--in", "x.srf", "--out", "y.srf",
              "--flights", "1,two"])
    assert e.value.code == 2
    assert "comma-separated integers" in capsys.readouterr().err
