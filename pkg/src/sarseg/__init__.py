"""Urban-scene segmentation toolkit for high-resolution SAR rasters.

Pipeline stages: complex-raster I/O and tiling (raster), real-valued
feature planes (features), dual-source ground-truth fusion (labels), a
small dilated encoder-decoder network with from-scratch training (ops,
model, train, weights), metrics (metrics), a deterministic synthetic
scene generator (synth), the experiment grid (experiments), and a CLI
covering every stage (cli).
"""

__version__ = "1.0.0"

from .features import FeatureConfig, build_feature_stack
from .labels import RoadVariant, default_width_table, fuse_labels
from .metrics import confusion, merge
from .model import (TopologyConfig, bench_throughput, count_macs_per_pixel,
                    count_params, forward, init_weights, load_weights)
from .raster import (ComplexRaster, LabelRaster, Plane, PlaneStack,
                     read_raster, split_dataset, tile, untile, write_raster)
from .synth import SceneSpec, generate_scene
from .train import TrainConfig, class_weights, ce_loss, train
from .weights import WeightStore, load_wts, save_wts

__all__ = [
    "__version__",
    "FeatureConfig", "build_feature_stack",
    "RoadVariant", "default_width_table", "fuse_labels",
    "confusion", "merge",
    "TopologyConfig", "bench_throughput", "count_macs_per_pixel",
    "count_params", "forward", "init_weights", "load_weights",
    "ComplexRaster", "LabelRaster", "Plane", "PlaneStack",
    "read_raster", "split_dataset", "tile", "untile", "write_raster",
    "SceneSpec", "generate_scene",
    "TrainConfig", "class_weights", "ce_loss", "train",
    "WeightStore", "load_wts", "save_wts",
]
