"""Feature-selection experiment grid and the desk-scale pipeline runner.

The grid enumerates the published 17 input-feature combinations: which
flights and channels feed the network, which encodings (magnitude, phase
cos/sin, phase re/im, inter-channel phase difference) are stacked, whether
class balancing is on, and which road annotation variant labels the ground
truth. Rows 14 and 15 add the second road source (agreement fusion); rows
16 and 17 disable class balancing.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import metrics as ev
from .features import FeatureConfig, build_feature_stack
from .labels import (AnnotationSet, RoadVariant, default_width_table,
                     fuse_labels, rasterize_buildings, rasterize_roads)
from .model import TopologyConfig, forward, logits_to_labels
from .raster import ComplexRaster, LabelRaster, PlaneStack, split_dataset, tile
from .synth import SceneSpec, generate_scene
from .train import EpochStats, TrainConfig, train
from .weights import WeightStore


@dataclass(frozen=True)
class ExperimentRow:
    exp_id: int
    features: FeatureConfig
    balanced: bool = True
    road_variant: RoadVariant = RoadVariant.MAIN_ROADS_OSM


@dataclass(frozen=True)
class ExperimentGrid:
    rows: Tuple[ExperimentRow, ...]

    def __post_init__(self) -> None:
        ids = [r.exp_id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise ValueError("experiment ids must be unique")

    def __iter__(self):
        return iter(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def select(self, ids: Sequence[int]) -> "ExperimentGrid":
        by_id = {r.exp_id: r for r in self.rows}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise ValueError(f"unknown experiment ids: {missing}")
        return ExperimentGrid(tuple(by_id[i] for i in ids))


def _fc(flights, channels, mag=False, cossin=False, reim=False, diff=False) -> FeatureConfig:
    return FeatureConfig(flights=flights, channels=channels, use_magnitude=mag,
                         use_phase_cos_sin=cossin, use_phase_re_im=reim,
                         use_phase_diff=diff)


F1, F12 = (1,), (1, 2)
C1, C14 = (1,), (1, 2, 3, 4)


def table1_grid() -> ExperimentGrid:
    """The 17 published input-feature experiments."""
    agree = RoadVariant.OSM_AND_SWISSTOPO_AGREE
    rows = (
        ExperimentRow(1, _fc(F1, C1, mag=True)),
        ExperimentRow(2, _fc(F1, C1, mag=True, cossin=True)),
        ExperimentRow(3, _fc(F1, C1, reim=True)),
        ExperimentRow(4, _fc(F1, C1, mag=True, diff=True)),
        ExperimentRow(5, _fc(F1, C14, mag=True)),
        ExperimentRow(6, _fc(F1, C14, mag=True, cossin=True)),
        ExperimentRow(7, _fc(F1, C14, reim=True)),
        ExperimentRow(8, _fc(F1, C14, mag=True, diff=True)),
        ExperimentRow(9, _fc(F12, C1, mag=True)),
        ExperimentRow(10, _fc(F12, C1, mag=True, cossin=True)),
        ExperimentRow(11, _fc(F12, C1, reim=True)),
        ExperimentRow(12, _fc(F12, C14, mag=True)),
        ExperimentRow(13, _fc(F12, C14, reim=True)),
        ExperimentRow(14, _fc(F12, C14, mag=True), road_variant=agree),
        ExperimentRow(15, _fc(F12, C14, reim=True), road_variant=agree),
        ExperimentRow(16, _fc(F12, C14, mag=True), balanced=False),
        ExperimentRow(17, _fc(F12, C14, reim=True), balanced=False),
    )
    return ExperimentGrid(rows)


def full_feature_config() -> FeatureConfig:
    """Every encoding on for both flights and all four channels (44 planes)."""
    return _fc(F12, C14, mag=True, cossin=True, reim=True, diff=True)


# --------------------------------------------------------------------------
# Desk-scale pipeline
# --------------------------------------------------------------------------

def scene_label_raster(osm: AnnotationSet, swiss: AnnotationSet,
                       grid: Tuple[int, int], variant: RoadVariant,
                       resolution_m: float = 0.15) -> LabelRaster:
    """Fused building/road ground truth for one scene."""
    widths = default_width_table(resolution_m)
    buildings = rasterize_buildings(osm, swiss, grid)
    road_sets = [osm, swiss] if variant is RoadVariant.OSM_AND_SWISSTOPO_AGREE else [osm]
    roads = rasterize_roads(road_sets, grid, widths, variant)
    return fuse_labels(buildings, roads)


@dataclass
class PipelineResult:
    weights: WeightStore
    history: List[EpochStats]
    scores: Dict[str, float]
    confusion: ev.ConfusionMatrix
    train_ids: List[str]
    test_ids: List[str]
    topology: TopologyConfig


def evaluate_tiles(cfg: TopologyConfig, weights: WeightStore,
                   features: np.ndarray, labels: np.ndarray) -> ev.ConfusionMatrix:
    """Merged confusion matrix over (N, C, H, W) feature tiles."""
    m = ev.ConfusionMatrix(np.zeros((cfg.num_classes, cfg.num_classes), dtype=np.int64))
    for i in range(features.shape[0]):
        logits = forward(cfg, weights, features[i: i + 1])
        pred = logits_to_labels(logits)[0]
        m = ev.merge(m, ev.confusion(pred, labels[i], cfg.num_classes))
    return m


def run_pipeline(recordings: Dict[int, ComplexRaster], osm: AnnotationSet,
                 swiss: AnnotationSet, fcfg: FeatureConfig,
                 variant: RoadVariant = RoadVariant.MAIN_ROADS_OSM,
                 tcfg: TrainConfig = TrainConfig(),
                 tile_size: int = 256, train_fraction: float = 0.8,
                 topology: Optional[TopologyConfig] = None,
                 resolution_m: float = 0.15, log=None) -> PipelineResult:
    """features -> labels -> tile -> split -> train -> evaluate, in memory."""
    stack = build_feature_stack(recordings, fcfg)
    planes = stack.to_plane_stack()
    grid = (planes.height, planes.width)
    label_raster = scene_label_raster(osm, swiss, grid, variant, resolution_m)

    f_tiles, index = tile(planes, tile_size)
    l_tiles, _ = tile(label_raster, tile_size)
    ids = index.ids()
    train_ids, test_ids = split_dataset(ids, train_fraction, tcfg.seed)
    pos = {tid: i for i, tid in enumerate(ids)}

    def gather(subset):
        x = np.stack([f_tiles[pos[t]].values for t in subset])
        y = np.stack([l_tiles[pos[t]].labels for t in subset])
        return x, y

    x_train, y_train = gather(train_ids)
    x_test, y_test = gather(test_ids)

    if topology is None:
        topology = TopologyConfig(input_channels=len(stack))
    elif topology.input_channels != len(stack):
        raise ValueError(f"topology expects {topology.input_channels} input "
                         f"channels but the feature stack has {len(stack)}")

    weights, history = train(topology, x_train, y_train, tcfg, log=log)
    confusion = evaluate_tiles(topology, weights, x_test, y_test)
    scores = ev.metrics(confusion)
    return PipelineResult(weights=weights, history=history, scores=scores,
                          confusion=confusion, train_ids=train_ids,
                          test_ids=test_ids, topology=topology)


GRID_CSV_COLUMNS = ["experiment", "planes", "flights", "channels", "magnitude",
                    "phase_cossin", "phase_reim", "phase_diff", "balanced",
                    "road_variant", "PA", "MA", "mIoU", "error"]


def run_experiment_grid(grid: ExperimentGrid,
                        recordings: Dict[int, ComplexRaster],
                        osm: AnnotationSet, swiss: AnnotationSet,
                        tcfg: TrainConfig = TrainConfig(),
                        tile_size: int = 256, train_fraction: float = 0.8,
                        resolution_m: float = 0.15,
                        csv_path=None, log=None) -> List[Dict[str, object]]:
    """One metrics row per experiment; a failing row is recorded and the
    remaining rows still run."""
    results: List[Dict[str, object]] = []
    for row in grid:
        fc = row.features
        rec: Dict[str, object] = {
            "experiment": row.exp_id,
            "planes": fc.plane_count(),
            "flights": ",".join(map(str, fc.flights)),
            "channels": ",".join(map(str, fc.channels)),
            "magnitude": fc.use_magnitude,
            "phase_cossin": fc.use_phase_cos_sin,
            "phase_reim": fc.use_phase_re_im,
            "phase_diff": fc.use_phase_diff,
            "balanced": row.balanced,
            "road_variant": row.road_variant.value,
            "PA": "", "MA": "", "mIoU": "", "error": "",
        }
        try:
            row_tcfg = TrainConfig(epochs=tcfg.epochs, batch_size=tcfg.batch_size,
                                   lr=tcfg.lr, seed=tcfg.seed,
                                   plateau_factor=tcfg.plateau_factor,
                                   plateau_patience=tcfg.plateau_patience,
                                   plateau_threshold=tcfg.plateau_threshold,
                                   balance_classes=row.balanced)
            res = run_pipeline(recordings, osm, swiss, fc, row.road_variant,
                               row_tcfg, tile_size, train_fraction,
                               resolution_m=resolution_m)
            rec["PA"] = f"{res.scores['PA']:.4f}"
            rec["MA"] = f"{res.scores['MA']:.4f}"
            rec["mIoU"] = f"{res.scores['mIoU']:.4f}"
        except Exception as exc:        # noqa: BLE001 - per-row isolation
            rec["error"] = f"{type(exc).__name__}: {exc}"
        results.append(rec)
        if log is not None:
            log(rec)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=GRID_CSV_COLUMNS)
            wr.writeheader()
            wr.writerows(results)
    return results
