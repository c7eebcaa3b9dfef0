"""Small dilated encoder-decoder segmentation network.

The network is described by a flat plan of steps (convolutions, dilated
blocks, skip push/pop markers). The same plan drives parameter counting,
MAC accounting, initialization, the forward pass, and manual backprop in
the training module, so the numbers reported by the budget tools always
refer to the network that actually runs.

MAC accounting counts real multiply-accumulates: k*k*cin*cout per output
pixel for direct convolutions, and k*k*cin*cout per *input* pixel for
transposed convolutions (each input pixel touches k*k taps), normalized
by the network input resolution.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .weights import WeightStore, load_wts

REF_GPU_MAC_PER_S = 6.7e12
REF_NET_MACS_PER_PX = 13.0e3

REFINE_KINDS = ("block", "conv3", "none")


@dataclass(frozen=True)
class ConvSpec:
    """Shape/stride description of one convolution."""

    cin: int
    cout: int
    kernel: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    transposed: bool = False

    def __post_init__(self) -> None:
        if self.cin < 1 or self.cout < 1:
            raise ValueError(f"channel counts must be positive, got {self.cin}->{self.cout}")
        if self.kernel < 1 or self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("kernel/stride/dilation must be >= 1 and padding >= 0")
        if self.transposed and self.dilation != 1:
            raise ValueError("transposed convolutions do not support dilation")

    def weight_shape(self) -> Tuple[int, int, int, int]:
        if self.transposed:
            return (self.cin, self.cout, self.kernel, self.kernel)
        return (self.cout, self.cin, self.kernel, self.kernel)

    def param_count(self) -> int:
        return self.kernel * self.kernel * self.cin * self.cout + self.cout

    def macs_per_px(self, out_area: float) -> float:
        per_px = self.kernel * self.kernel * self.cin * self.cout
        if self.transposed:
            return per_px * out_area / (self.stride * self.stride)
        return per_px * out_area


@dataclass(frozen=True)
class ConvStep:
    name: str
    spec: ConvSpec
    relu: bool
    norm: bool
    area: float


@dataclass(frozen=True)
class BlockStep:
    """Parallel dilated 3x3 branches concatenated and fused by a 1x1."""

    name: str
    branches: Tuple[ConvSpec, ...]
    fuse: ConvSpec
    norm: bool
    area: float


@dataclass(frozen=True)
class PushSkip:
    pass


@dataclass(frozen=True)
class PopConcat:
    pass


Step = Union[ConvStep, BlockStep, PushSkip, PopConcat]


@dataclass(frozen=True)
class TopologyConfig:
    input_channels: int = 8
    num_classes: int = 3
    width: int = 16
    encoder_levels: int = 3
    dilations: Tuple[int, ...] = (1, 2, 4)
    bottleneck_blocks: int = 2
    decoder_refine: Tuple[str, ...] = ("block", "conv3", "none")
    use_norm: bool = False

    def __post_init__(self) -> None:
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.encoder_levels < 1:
            raise ValueError("encoder_levels must be >= 1")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ValueError("dilations must be a non-empty tuple of positive ints")
        if self.bottleneck_blocks < 1:
            raise ValueError("bottleneck_blocks must be >= 1")
        if len(self.decoder_refine) != self.encoder_levels:
            raise ValueError("decoder_refine needs one entry per encoder level "
                             f"({self.encoder_levels}), got {len(self.decoder_refine)}")
        for r in self.decoder_refine:
            if r not in REFINE_KINDS:
                raise ValueError(f"unknown decoder refine kind {r!r}, expected one of {REFINE_KINDS}")

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.encoder_levels


def _block(name: str, cfg: TopologyConfig, area: float) -> BlockStep:
    w = cfg.width
    branches = tuple(
        ConvSpec(w, w, 3, dilation=d, padding=d) for d in cfg.dilations
    )
    fuse = ConvSpec(len(cfg.dilations) * w, w, 1)
    return BlockStep(name, branches, fuse, cfg.use_norm, area)


def build_plan(cfg: TopologyConfig) -> List[Step]:
    w, nl = cfg.width, cfg.encoder_levels
    steps: List[Step] = []
    steps.append(ConvStep("stem.conv", ConvSpec(cfg.input_channels, w, 3, padding=1),
                          relu=True, norm=cfg.use_norm, area=1.0))
    steps.append(_block("stem.block", cfg, 1.0))
    area = 1.0
    for lvl in range(1, nl + 1):
        steps.append(PushSkip())
        area /= 4.0
        steps.append(ConvStep(f"enc{lvl}.down", ConvSpec(w, w, 3, stride=2, padding=1),
                              relu=True, norm=cfg.use_norm, area=area))
        nblocks = cfg.bottleneck_blocks if lvl == nl else 1
        for bi in range(nblocks):
            tag = f"enc{lvl}.block" if bi == 0 else f"enc{lvl}.block{bi + 1}"
            steps.append(_block(tag, cfg, area))
    for lvl in range(nl, 0, -1):
        area *= 4.0
        steps.append(ConvStep(f"dec{lvl}.up", ConvSpec(w, w, 2, stride=2, transposed=True),
                              relu=True, norm=cfg.use_norm, area=area))
        steps.append(PopConcat())
        steps.append(ConvStep(f"dec{lvl}.fuse", ConvSpec(2 * w, w, 1),
                              relu=True, norm=cfg.use_norm, area=area))
        refine = cfg.decoder_refine[nl - lvl]
        if refine == "block":
            steps.append(_block(f"dec{lvl}.refine", cfg, area))
        elif refine == "conv3":
            steps.append(ConvStep(f"dec{lvl}.refine", ConvSpec(w, w, 3, padding=1),
                                  relu=True, norm=cfg.use_norm, area=area))
    steps.append(ConvStep("head", ConvSpec(w, cfg.num_classes, 1),
                          relu=False, norm=False, area=1.0))
    return steps


def _block_param_specs(step: BlockStep) -> List[Tuple[str, ConvSpec]]:
    out = [(f"{step.name}.b{k}", spec) for k, spec in enumerate(step.branches)]
    out.append((f"{step.name}.fuse", step.fuse))
    return out


def param_specs(cfg: TopologyConfig) -> List[Tuple[str, ConvSpec]]:
    """Flat (prefix, spec) list; tensors are '<prefix>.w' and '<prefix>.b'."""
    out: List[Tuple[str, ConvSpec]] = []
    for step in build_plan(cfg):
        if isinstance(step, ConvStep):
            out.append((step.name, step.spec))
        elif isinstance(step, BlockStep):
            out.extend(_block_param_specs(step))
    return out


def weight_shapes(cfg: TopologyConfig) -> Dict[str, tuple]:
    shapes: Dict[str, tuple] = {}
    for prefix, spec in param_specs(cfg):
        shapes[f"{prefix}.w"] = spec.weight_shape()
        shapes[f"{prefix}.b"] = (spec.cout,)
    return shapes


def count_params(cfg: TopologyConfig) -> int:
    return sum(spec.param_count() for _, spec in param_specs(cfg))


def count_macs_per_pixel(cfg: TopologyConfig) -> float:
    total = 0.0
    for step in build_plan(cfg):
        if isinstance(step, ConvStep):
            total += step.spec.macs_per_px(step.area)
        elif isinstance(step, BlockStep):
            for b in step.branches:
                total += b.macs_per_px(step.area)
            total += step.fuse.macs_per_px(step.area)
    return total


def init_weights(cfg: TopologyConfig, seed: int = 0) -> WeightStore:
    """Kaiming-uniform weights (bound sqrt(6/fan_in), fan_in = cin*k*k), zero biases.

    Draws come from one counter-based Philox stream in plan order, so a
    given (config, seed) pair always produces the same tensors.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    store = WeightStore()
    for prefix, spec in param_specs(cfg):
        fan_in = spec.cin * spec.kernel * spec.kernel
        bound = math.sqrt(6.0 / fan_in)
        store[f"{prefix}.w"] = rng.uniform(-bound, bound, spec.weight_shape()).astype(np.float32)
        store[f"{prefix}.b"] = np.zeros(spec.cout, dtype=np.float32)
    return store


def load_weights(path, cfg: Optional[TopologyConfig] = None) -> WeightStore:
    expected = weight_shapes(cfg) if cfg is not None else None
    return load_wts(path, expected)


def _param(params: Mapping[str, np.ndarray], name: str, dtype) -> np.ndarray:
    t = params[name]
    return t if t.dtype == dtype else t.astype(dtype)


def _run_conv(step: ConvStep, params: Mapping[str, np.ndarray], x: np.ndarray):
    s = step.spec
    w = _param(params, f"{step.name}.w", x.dtype)
    b = _param(params, f"{step.name}.b", x.dtype)
    if s.transposed:
        pre = ops.conv2d_transposed(x, w, b, stride=s.stride, padding=s.padding)
    else:
        pre = ops.conv2d(x, w, b, stride=s.stride, dilation=s.dilation, padding=s.padding)
    pre_act = ops.plane_norm(pre) if step.norm else pre
    out = ops.relu(pre_act) if step.relu else pre_act
    return out, (x, pre, pre_act)


def dilated_block(x: np.ndarray, params: Mapping[str, np.ndarray],
                  dilations: Sequence[int] = (1, 2, 4), use_norm: bool = False,
                  prefix: str = "") -> np.ndarray:
    """Standalone dilated block: parallel 3x3 convs (one per dilation, padding
    equal to dilation, so all branches keep the input resolution) -> ReLU ->
    channel concat -> 1x1 fuse -> ReLU.

    ``params`` holds '<prefix>b{k}.w/.b' per branch and '<prefix>fuse.w/.b'.
    """
    out, _ = _run_block_named(x, params, dilations, use_norm, prefix.rstrip(".") or None)
    return out


def _run_block_named(x, params, dilations, use_norm, prefix):
    dot = "" if prefix is None else prefix + "."
    dtype = x.dtype
    branch_pre, branch_pre_act, branch_act = [], [], []
    for k, d in enumerate(dilations):
        w = _param(params, f"{dot}b{k}.w", dtype)
        b = _param(params, f"{dot}b{k}.b", dtype)
        pre = ops.conv2d(x, w, b, dilation=d, padding=d)
        pre_act = ops.plane_norm(pre) if use_norm else pre
        branch_pre.append(pre)
        branch_pre_act.append(pre_act)
        branch_act.append(ops.relu(pre_act))
    cat = np.concatenate(branch_act, axis=1)
    wf = _param(params, f"{dot}fuse.w", dtype)
    bf = _param(params, f"{dot}fuse.b", dtype)
    fuse_pre = ops.conv2d(cat, wf, bf)
    fuse_pre_act = ops.plane_norm(fuse_pre) if use_norm else fuse_pre
    out = ops.relu(fuse_pre_act)
    return out, (x, branch_pre, branch_pre_act, cat, fuse_pre, fuse_pre_act)


def _run_block(step: BlockStep, params: Mapping[str, np.ndarray], x: np.ndarray):
    dil = tuple(b.dilation for b in step.branches)
    return _run_block_named(x, params, dil, step.norm, step.name)


def check_input(cfg: TopologyConfig, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ValueError(f"expected input of shape (N, C, H, W), got ndim={x.ndim}")
    if x.shape[1] != cfg.input_channels:
        raise ValueError(f"input has {x.shape[1]} channels, network expects "
                         f"{cfg.input_channels}")
    f = cfg.downsample_factor
    if x.shape[2] % f or x.shape[3] % f:
        raise ValueError(f"input height/width {x.shape[2]}x{x.shape[3]} must be "
                         f"multiples of {f}; pad first (see pad_to_multiple)")


def forward_cached(cfg: TopologyConfig, params: Mapping[str, np.ndarray],
                   x: np.ndarray, plan: Optional[List[Step]] = None):
    """Run the network keeping per-step caches for backprop.

    Returns (logits, caches). caches[i] belongs to plan[i].
    """
    check_input(cfg, x)
    if plan is None:
        plan = build_plan(cfg)
    a = x
    skips: List[np.ndarray] = []
    caches: List[object] = []
    for step in plan:
        if isinstance(step, PushSkip):
            skips.append(a)
            caches.append(None)
        elif isinstance(step, PopConcat):
            skip = skips.pop()
            caches.append(a.shape[1])
            a = np.concatenate([a, skip], axis=1)
        elif isinstance(step, ConvStep):
            a, cache = _run_conv(step, params, a)
            caches.append(cache)
        else:
            a, cache = _run_block(step, params, a)
            caches.append(cache)
    return a, caches


def forward(cfg: TopologyConfig, params: Mapping[str, np.ndarray],
            x: np.ndarray) -> np.ndarray:
    """Class logits of shape (N, num_classes, H, W)."""
    logits, _ = forward_cached(cfg, params, x)
    return logits


def logits_to_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax class index per pixel as uint8 (ties resolved to lowest index)."""
    return np.argmax(logits, axis=1).astype(np.uint8)


def pad_to_multiple(x: np.ndarray, multiple: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Edge-pad the trailing two dims up to a multiple; returns (padded, orig_hw)."""
    h, w = x.shape[-2], x.shape[-1]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(x, pad, mode="edge"), (h, w)


def crop_to(x: np.ndarray, hw: Tuple[int, int]) -> np.ndarray:
    return x[..., : hw[0], : hw[1]]


def gpu_reference_throughput() -> Dict[str, float]:
    """Throughput of the reference accelerator implied by its MAC rate and the
    nominal per-pixel cost of the published network."""
    mpx = REF_GPU_MAC_PER_S / REF_NET_MACS_PER_PX / 1e6
    return {"mpx_per_s": mpx, "mac_per_s": REF_GPU_MAC_PER_S}


def bench_throughput(cfg: TopologyConfig, params: Mapping[str, np.ndarray],
                     tile_size: int = 1024, repetitions: int = 10,
                     seed: int = 0) -> Dict[str, float]:
    """Wall-clock forward throughput on square tiles.

    One untimed warm-up pass runs first. Mpx/s counts network input pixels;
    MAC/s scales it by this topology's MACs-per-pixel figure.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    f = cfg.downsample_factor
    if tile_size < f or tile_size % f:
        raise ValueError(f"tile_size must be a positive multiple of {f}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    x = rng.standard_normal((1, cfg.input_channels, tile_size, tile_size)).astype(np.float32)
    plan = build_plan(cfg)
    forward_cached(cfg, params, x, plan)  # warm-up, excluded from timing
    t0 = time.perf_counter()
    for _ in range(repetitions):
        forward_cached(cfg, params, x, plan)
    wall = time.perf_counter() - t0
    px = repetitions * tile_size * tile_size
    mpx = px / wall / 1e6
    return {
        "mpx_per_s": mpx,
        "mac_per_s": mpx * 1e6 * count_macs_per_pixel(cfg),
        "wall_s": wall,
    }
