"""Command-line entry point: every pipeline stage plus the experiment grid.

Each run that produces files also writes a resolved-config copy next to its
outputs, so any result directory records the exact settings that made it.
Errors surface as a one-line diagnostic and a nonzero exit code.
"""
from __future__ import annotations

import argparse
import os
import sys
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import config as cfgmod
from . import experiments as exp
from . import metrics as ev
from .features import build_feature_stack
from .labels import (RoadVariant, SOURCE_OSM, SOURCE_SWISSTOPO,
                     default_width_table, fuse_labels, load_annotations,
                     annotations_to_geojson, parse_width_table,
                     rasterize_buildings, rasterize_roads)
from .model import (bench_throughput, count_macs_per_pixel, count_params,
                    forward, gpu_reference_throughput, init_weights,
                    load_weights, logits_to_labels, pad_to_multiple, crop_to)
from .raster import (ComplexRaster, LabelRaster, Plane, PlaneStack,
                     read_raster, split_dataset, tile, write_raster)
from .synth import SceneSpec, generate_scene
from .train import TrainConfig, train, write_history_csv
from .weights import save_wts


def _int_list(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(",") if p.strip() != "")
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _size_wh(text: str) -> Tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}")


def _load_doc(path: Optional[str]) -> dict:
    return cfgmod.load_toml(path) if path else {}


def _write_resolved(path: str, **sections) -> None:
    cfgmod.write_toml(cfgmod.resolved_doc(**sections), path)


def _labels_png(labels: np.ndarray, path: str) -> None:
    """Grayscale dump: other 0, building 128, road 255, unlabeled 64."""
    from PIL import Image

    lut = np.zeros(256, dtype=np.uint8)
    lut[1] = 128
    lut[2] = 255
    lut[255] = 64
    Image.fromarray(lut[labels]).save(path)


def _read_features_chw(path: str) -> np.ndarray:
    r = read_raster(path)
    if isinstance(r, Plane):
        return r.values[None]
    if isinstance(r, PlaneStack):
        return r.values
    raise ValueError(f"{path}: expected an f32 feature raster, got {type(r).__name__}")


def _read_labels(path: str) -> LabelRaster:
    r = read_raster(path)
    if not isinstance(r, LabelRaster):
        raise ValueError(f"{path}: expected a label raster, got {type(r).__name__}")
    return r


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    doc = _load_doc(args.spec)
    overrides = {"seed": args.seed, "height": args.height, "width": args.width}
    spec = cfgmod.scene_spec_from(doc, overrides)
    os.makedirs(args.out_dir, exist_ok=True)
    recordings, osm, swiss = generate_scene(spec)
    import json

    for flight, rec in recordings.items():
        write_raster(rec, os.path.join(args.out_dir, f"flight_{flight}.srf"))
    with open(os.path.join(args.out_dir, "osm.geojson"), "w") as f:
        json.dump(annotations_to_geojson(osm), f)
    with open(os.path.join(args.out_dir, "swisstopo.geojson"), "w") as f:
        json.dump(annotations_to_geojson(swiss), f)
    _write_resolved(os.path.join(args.out_dir, "scene.resolved.toml"), scene=spec)
    print(f"wrote {len(recordings)} flight raster(s), 2 annotation sources to {args.out_dir}")
    return 0


def cmd_features(args) -> int:
    doc = _load_doc(args.config)
    overrides = {
        "flights": args.flights,
        "channels": args.channels,
        "use_magnitude": args.mag,
        "use_phase_cos_sin": args.phase_cossin,
        "use_phase_re_im": args.phase_reim,
        "use_phase_diff": args.phase_diff,
        "diff_pair": args.diff_pair,
        "percentile": args.percentile,
        "range_db": args.range_db,
    }
    fcfg = cfgmod.feature_config_from(doc, overrides)
    if len(args.inputs) != len(fcfg.flights):
        raise ValueError(f"{len(args.inputs)} input raster(s) for "
                         f"{len(fcfg.flights)} flight(s); pass one per flight")
    recordings: Dict[int, ComplexRaster] = {}
    for flight, path in zip(fcfg.flights, args.inputs):
        r = read_raster(path)
        if not isinstance(r, ComplexRaster):
            raise ValueError(f"{path}: expected a complex raster")
        recordings[flight] = r
    stack = build_feature_stack(recordings, fcfg)
    write_raster(stack.to_plane_stack(), args.out)
    _write_resolved(f"{args.out}.resolved.toml", features=fcfg)
    print(f"wrote {len(stack)} feature plane(s) to {args.out}")
    return 0


def cmd_labels(args) -> int:
    osm = load_annotations(args.osm, SOURCE_OSM)
    swiss = load_annotations(args.swisstopo, SOURCE_SWISSTOPO)
    if args.widths:
        with open(args.widths) as f:
            widths = parse_width_table(f.read(), args.resolution)
    else:
        widths = default_width_table(args.resolution)
    variant = RoadVariant(args.variant)
    w, h = args.size
    grid = (h, w)
    buildings = rasterize_buildings(osm, swiss, grid)
    road_sets = [osm, swiss] if variant is RoadVariant.OSM_AND_SWISSTOPO_AGREE else [osm]
    roads = rasterize_roads(road_sets, grid, widths, variant)
    fused = fuse_labels(buildings, roads)
    write_raster(fused, args.out)
    if args.png:
        _labels_png(fused.labels, args.png)
    counts = {int(k): int(v) for k, v in zip(*np.unique(fused.labels, return_counts=True))}
    print(f"wrote {w}x{h} label raster to {args.out} (pixel counts {counts})")
    return 0


def cmd_tile(args) -> int:
    r = read_raster(args.input)
    tiles, index = tile(r, args.size)
    if not tiles:
        raise ValueError(f"raster smaller than tile size {args.size}")
    os.makedirs(args.out_dir, exist_ok=True)
    for i, t in enumerate(tiles):
        write_raster(t, os.path.join(args.out_dir, f"{index.tile_id(i)}.srf"))
    print(f"wrote {len(tiles)} tile(s) of {args.size}x{args.size} to {args.out_dir}")
    return 0


def cmd_split(args) -> int:
    with open(args.ids) as f:
        ids = [line.strip() for line in f if line.strip()]
    train_ids, test_ids = split_dataset(ids, args.fraction, args.seed)
    lines = [f"train\t{t}" for t in train_ids] + [f"test\t{t}" for t in test_ids]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        print(f"split {len(ids)} ids into {len(train_ids)} train / {len(test_ids)} test")
    else:
        sys.stdout.write(text)
    return 0


def _read_split(path: str) -> Tuple[List[str], List[str]]:
    train_ids: List[str] = []
    test_ids: List[str] = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                part, tid = line.split(None, 1)
            except ValueError:
                raise ValueError(f"{path}:{ln}: expected '<train|test> <id>'")
            if part == "train":
                train_ids.append(tid)
            elif part == "test":
                test_ids.append(tid)
            else:
                raise ValueError(f"{path}:{ln}: unknown subset {part!r}")
    return train_ids, test_ids


def _load_tile_set(ids: List[str], features_dir: str, labels_dir: str):
    xs, ys = [], []
    for tid in ids:
        xs.append(_read_features_chw(os.path.join(features_dir, f"{tid}.srf")))
        ys.append(_read_labels(os.path.join(labels_dir, f"{tid}.srf")).labels)
    return np.stack(xs), np.stack(ys)


def cmd_train(args) -> int:
    doc = _load_doc(args.config)
    tcfg = cfgmod.train_config_from(doc, {"seed": args.seed, "epochs": args.epochs})
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)   # fail here, not after training
    train_ids, _ = _read_split(args.split)
    if not train_ids:
        raise ValueError(f"split file {args.split} lists no training tiles")
    x, y = _load_tile_set(train_ids, args.features_dir, args.labels_dir)
    topo = cfgmod.topology_from(doc, {"input_channels": x.shape[1]}
                                if "topology" not in doc else None)
    weights, history = train(topo, x, y, tcfg,
                             log=lambda s: print(f"epoch {s.epoch}: loss {s.loss:.4f} lr {s.lr:g}"))
    save_wts(weights, args.out)
    write_history_csv(history, os.path.join(out_dir, "history.csv"))
    _write_resolved(f"{args.out}.resolved.toml", topology=topo, train=tcfg)
    print(f"trained {len(train_ids)} tile(s) for {tcfg.epochs} epoch(s); "
          f"final loss {history[-1].loss:.4f}; weights -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    doc = _load_doc(args.config)
    x = _read_features_chw(args.features)[None].astype(np.float32)
    topo = cfgmod.topology_from(doc, {"input_channels": x.shape[1]}
                                if "topology" not in doc else None)
    weights = load_weights(args.weights, topo)
    xp, hw = pad_to_multiple(x, topo.downsample_factor)
    logits = forward(topo, weights, xp)
    pred = logits_to_labels(crop_to(logits, hw))[0]
    write_raster(LabelRaster(pred), args.out)
    if args.png:
        _labels_png(pred, args.png)
    _write_resolved(f"{args.out}.resolved.toml", topology=topo)
    print(f"wrote {pred.shape[1]}x{pred.shape[0]} prediction to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    pred = _read_labels(args.pred)
    target = _read_labels(args.target)
    m = ev.confusion(pred.labels, target.labels)
    summary = ev.write_report_csv(m, args.report)
    print(f"PA {summary['PA']:.4f}  MA {summary['MA']:.4f}  mIoU {summary['mIoU']:.4f} "
          f"({m.total} labeled px) -> {args.report}")
    return 0


def cmd_budget(args) -> int:
    doc = _load_doc(args.config)
    topo = cfgmod.topology_from(doc)
    params = count_params(topo)
    macs = count_macs_per_pixel(topo)
    ref = gpu_reference_throughput()
    print(f"parameters: {params}")
    print(f"macs_per_px: {macs:.1f}")
    print(f"reference_gpu_mpx_per_s: {ref['mpx_per_s']:.1f} "
          f"({ref['mac_per_s']:.3g} MAC/s at nominal 13.0e3 MACs/px)")
    return 0


def cmd_bench(args) -> int:
    doc = _load_doc(args.config)
    topo = cfgmod.topology_from(doc)
    w = init_weights(topo, seed=args.seed)
    rep = bench_throughput(topo, w, tile_size=args.size, repetitions=args.reps,
                           seed=args.seed)
    print(f"mpx_per_s: {rep['mpx_per_s']:.3f}")
    print(f"mac_per_s: {rep['mac_per_s']:.6g}")
    print(f"wall_s: {rep['wall_s']:.3f} ({args.reps} rep(s) of {args.size}x{args.size})")
    return 0


def cmd_grid(args) -> int:
    doc = _load_doc(args.spec)
    spec = cfgmod.scene_spec_from(doc, {"seed": args.seed})
    tcfg = cfgmod.train_config_from(doc, {"seed": args.seed, "epochs": args.epochs})
    grid = exp.table1_grid()
    if args.rows:
        grid = grid.select(list(args.rows))
    os.makedirs(args.out_dir, exist_ok=True)
    recordings, osm, swiss = generate_scene(spec)
    csv_path = os.path.join(args.out_dir, "results.csv")

    def log(rec):
        state = rec["error"] or f"PA {rec['PA']} MA {rec['MA']} mIoU {rec['mIoU']}"
        print(f"experiment {rec['experiment']} ({rec['planes']} plane(s)): {state}")

    results = exp.run_experiment_grid(grid, recordings, osm, swiss, tcfg,
                                      tile_size=args.tile_size,
                                      train_fraction=args.fraction,
                                      resolution_m=spec.resolution_m,
                                      csv_path=csv_path, log=log)
    _write_resolved(os.path.join(args.out_dir, "grid.resolved.toml"),
                    scene=spec, train=tcfg)
    failures = sum(1 for r in results if r["error"])
    print(f"wrote {len(results)} row(s) to {csv_path} ({failures} failed)")
    return 0 if failures == 0 else 1


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sarseg",
                                description="SAR urban segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    B = argparse.BooleanOptionalAction

    sp = sub.add_parser("synth", help="generate a synthetic scene")
    sp.add_argument("--spec", help="TOML scene spec")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--height", type=int)
    sp.add_argument("--width", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("features", help="build the feature stack from complex rasters")
    sp.add_argument("--in", dest="inputs", nargs="+", required=True,
                    help="one complex SRF per flight, paired with ascending flight ids")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="TOML with a [features] section")
    sp.add_argument("--flights", type=_int_list)
    sp.add_argument("--channels", type=_int_list)
    sp.add_argument("--mag", action=B, default=None)
    sp.add_argument("--phase-cossin", action=B, default=None)
    sp.add_argument("--phase-reim", action=B, default=None)
    sp.add_argument("--phase-diff", action=B, default=None)
    sp.add_argument("--diff-pair", type=_int_list)
    sp.add_argument("--percentile", type=float)
    sp.add_argument("--range-db", type=float)
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("labels", help="rasterize and fuse annotation sources")
    sp.add_argument("--osm", required=True)
    sp.add_argument("--swisstopo", required=True)
    sp.add_argument("--variant", default="main-osm",
                    choices=[v.value for v in RoadVariant])
    sp.add_argument("--widths", help="road width table (rank = min_m, max_m lines)")
    sp.add_argument("--resolution", type=float, default=0.15)
    sp.add_argument("--size", type=_size_wh, required=True, metavar="WxH")
    sp.add_argument("--out", required=True)
    sp.add_argument("--png")
    sp.set_defaults(func=cmd_labels)

    sp = sub.add_parser("tile", help="cut a raster into square tiles")
    sp.add_argument("--input", required=True)
    sp.add_argument("--size", type=int, default=1024)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_tile)

    sp = sub.add_parser("split", help="deterministic train/test split of tile ids")
    sp.add_argument("--ids", required=True, help="file with one tile id per line")
    sp.add_argument("--fraction", type=float, default=0.8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("train", help="train on feature/label tiles")
    sp.add_argument("--features-dir", required=True)
    sp.add_argument("--labels-dir", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--config", help="TOML with [topology]/[train] sections")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", required=True, help="output WTS weight file")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="segment a feature raster")
    sp.add_argument("--config", help="TOML with a [topology] section")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--png")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("evaluate", help="confusion metrics of a prediction")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--report", required=True, help="output CSV")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("budget", help="parameter and MAC accounting")
    sp.add_argument("--config", help="TOML with a [topology] section")
    sp.set_defaults(func=cmd_budget)

    sp = sub.add_parser("bench", help="forward-pass throughput")
    sp.add_argument("--config", help="TOML with a [topology] section")
    sp.add_argument("--size", type=int, default=1024)
    sp.add_argument("--reps", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("grid", help="run the feature-selection experiment grid")
    sp.add_argument("--spec", help="TOML scene spec (plus optional [train])")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--rows", type=_int_list, help="subset of experiment ids")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--tile-size", type=int, default=256)
    sp.add_argument("--fraction", type=float, default=0.8)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_grid)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:   # noqa: BLE001 - single-line CLI diagnostics
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
