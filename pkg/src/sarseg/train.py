"""Loss, manual backprop, Adam, LR schedule, and the training loop."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .model import (BlockStep, ConvStep, PopConcat, PushSkip, Step,
                    TopologyConfig, build_plan, forward_cached, init_weights)
from .weights import WeightStore

# Per-parameter gradients, same names and shapes as the WeightStore.
GradStore = Dict[str, np.ndarray]

IGNORE_LABEL = 255


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency class weights rescaled so their mean is 1.

    w_c = N_labeled / (C * N_c), then divided by the mean weight. Example:
    counts (800, 100, 100) -> (0.17647, 1.41176, 1.41176).
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("counts must be a non-empty 1-D sequence")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    if np.any(counts == 0):
        zero = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"class(es) {zero} have no labeled pixels; "
                         "train without class balancing instead")
    w = counts.sum() / (counts.size * counts)
    return (w / w.mean()).astype(np.float64)


def label_counts(labels: np.ndarray, num_classes: int = 3,
                 ignore: int = IGNORE_LABEL) -> np.ndarray:
    """Pixel count per class over one or more label rasters, skipping ignore."""
    flat = np.asarray(labels).ravel()
    flat = flat[flat != ignore]
    if flat.size and int(flat.max()) >= num_classes:
        raise ValueError(f"label code {int(flat.max())} outside 0..{num_classes - 1}")
    return np.bincount(flat.astype(np.int64), minlength=num_classes)


def ce_loss(logits: np.ndarray, target: np.ndarray,
            weights: Optional[np.ndarray] = None,
            ignore: int = IGNORE_LABEL) -> Tuple[float, np.ndarray]:
    """Class-weighted softmax cross-entropy with an ignore label.

    Returns (loss, dloss/dlogits). The loss is the weighted mean over labeled
    pixels (sum of per-pixel weighted NLL divided by the sum of the weights of
    those pixels), so the returned gradient is already batch-normalized.
    """
    if logits.ndim != 4:
        raise ValueError(f"logits must be (N, C, H, W), got ndim={logits.ndim}")
    n, c, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ValueError(f"target shape {target.shape} does not match logits {(n, h, w)}")
    if weights is None:
        weights = np.ones(c, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (c,):
        raise ValueError(f"weights must have shape ({c},), got {weights.shape}")

    valid = target != ignore
    t = np.where(valid, target, 0).astype(np.int64)
    if valid.any() and int(target[valid].max()) >= c:
        raise ValueError("target contains class codes outside the logit range")

    x = logits.astype(np.float64)
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse                                    # (N, C, H, W)

    px_w = weights[t] * valid                         # (N, H, W)
    denom = px_w.sum()
    if denom == 0.0:
        raise ValueError("no labeled pixels in batch (all targets are the ignore code)")

    nll = -np.take_along_axis(logp, t[:, None], axis=1)[:, 0]
    loss = float((px_w * nll).sum() / denom)

    p = np.exp(logp)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, t[:, None], 1.0, axis=1)
    dlogits = (p - onehot) * (px_w / denom)[:, None]
    return loss, dlogits.astype(logits.dtype)


def _conv_backward_step(step: ConvStep, params: Mapping[str, np.ndarray],
                        cache, g: np.ndarray, grads: GradStore) -> np.ndarray:
    x_in, pre, pre_act = cache
    s = step.spec
    if step.relu:
        g = ops.relu_backward(pre_act, g)
    if step.norm:
        g = ops.plane_norm_backward(pre, g)
    w = params[f"{step.name}.w"]
    if w.dtype != g.dtype:
        w = w.astype(g.dtype)
    if s.transposed:
        dx, dw, db = ops.conv2d_transposed_backward(x_in, w, g, stride=s.stride,
                                                    padding=s.padding)
    else:
        dx, dw, db = ops.conv2d_backward(x_in, w, g, stride=s.stride,
                                         dilation=s.dilation, padding=s.padding)
    grads[f"{step.name}.w"] = dw
    grads[f"{step.name}.b"] = db
    return dx


def _block_backward_step(step: BlockStep, params: Mapping[str, np.ndarray],
                         cache, g: np.ndarray, grads: GradStore) -> np.ndarray:
    x_in, branch_pre, branch_pre_act, cat, fuse_pre, fuse_pre_act = cache
    g = ops.relu_backward(fuse_pre_act, g)
    if step.norm:
        g = ops.plane_norm_backward(fuse_pre, g)
    wf = params[f"{step.name}.fuse.w"]
    if wf.dtype != g.dtype:
        wf = wf.astype(g.dtype)
    dcat, dwf, dbf = ops.conv2d_backward(cat, wf, g)
    grads[f"{step.name}.fuse.w"] = dwf
    grads[f"{step.name}.fuse.b"] = dbf
    dx = np.zeros_like(x_in)
    width = step.branches[0].cout
    for k, spec in enumerate(step.branches):
        gk = dcat[:, k * width: (k + 1) * width]
        gk = ops.relu_backward(branch_pre_act[k], gk)
        if step.norm:
            gk = ops.plane_norm_backward(branch_pre[k], gk)
        wk = params[f"{step.name}.b{k}.w"]
        if wk.dtype != gk.dtype:
            wk = wk.astype(gk.dtype)
        dxk, dwk, dbk = ops.conv2d_backward(x_in, wk, gk, dilation=spec.dilation,
                                            padding=spec.padding)
        grads[f"{step.name}.b{k}.w"] = dwk
        grads[f"{step.name}.b{k}.b"] = dbk
        dx += dxk
    return dx


def backward(cfg: TopologyConfig, params: Mapping[str, np.ndarray],
             plan: List[Step], caches: List[object],
             dlogits: np.ndarray) -> Tuple[GradStore, np.ndarray]:
    """Backprop dlogits through the cached forward pass.

    Returns (parameter gradients, gradient w.r.t. the network input).
    """
    if len(plan) != len(caches):
        raise ValueError("plan and caches have different lengths")
    grads: GradStore = {}
    pending: List[np.ndarray] = []   # gradients owed to skip branches
    g = dlogits
    for step, cache in zip(reversed(plan), reversed(caches)):
        if isinstance(step, PopConcat):
            main_c = cache
            pending.append(g[:, main_c:])
            g = g[:, :main_c]
        elif isinstance(step, PushSkip):
            g = g + pending.pop()
        elif isinstance(step, ConvStep):
            g = _conv_backward_step(step, params, cache, g, grads)
        else:
            g = _block_backward_step(step, params, cache, g, grads)
    if pending:
        raise RuntimeError("unbalanced skip connections in plan")
    return grads, g


def loss_and_grads(cfg: TopologyConfig, params: Mapping[str, np.ndarray],
                   x: np.ndarray, target: np.ndarray,
                   weights: Optional[np.ndarray] = None,
                   plan: Optional[List[Step]] = None) -> Tuple[float, GradStore]:
    if plan is None:
        plan = build_plan(cfg)
    logits, caches = forward_cached(cfg, params, x, plan)
    loss, dlogits = ce_loss(logits, target, weights)
    grads, _ = backward(cfg, params, plan, caches, dlogits)
    return loss, grads


@dataclass
class OptimState:
    """Adam moments; step counts applied updates."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: GradStore = field(default_factory=dict)
    v: GradStore = field(default_factory=dict)


def adam_init(w: WeightStore, lr: float) -> OptimState:
    state = OptimState(lr=lr)
    for name, t in w.items():
        state.m[name] = np.zeros_like(t, dtype=np.float64)
        state.v[name] = np.zeros_like(t, dtype=np.float64)
    return state


def adam_step(w: WeightStore, grads: GradStore, state: OptimState) -> None:
    """One bias-corrected Adam update, in place on the weight store."""
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in w.names():
        if name not in grads:
            raise ValueError(f"missing gradient for tensor {name!r}")
        g = grads[name].astype(np.float64)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in tensor {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        w.tensors[name] = (w[name].astype(np.float64) - state.lr * upd).astype(np.float32)


@dataclass
class PlateauState:
    """Reduce-on-plateau schedule over a minimized metric.

    The LR is multiplied by ``factor`` once the metric has failed to improve
    on the best seen value by a relative ``threshold`` for more than
    ``patience`` consecutive observations.
    """

    lr: float
    factor: float = 0.1
    patience: int = 10
    threshold: float = 1e-4
    min_lr: float = 0.0
    best: float = float("inf")
    num_bad: int = 0

    def update(self, value: float) -> float:
        if value < self.best * (1.0 - self.threshold):
            self.best = value
            self.num_bad = 0
        else:
            self.num_bad += 1
            if self.num_bad > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.num_bad = 0
        return self.lr


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 8
    lr: float = 1e-2
    seed: int = 0
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    plateau_threshold: float = 1e-4
    balance_classes: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    lr: float


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=[seed, epoch]))
    return rng.permutation(n)


def train(cfg: TopologyConfig, samples: np.ndarray, labels: np.ndarray,
          tcfg: TrainConfig, weights: Optional[WeightStore] = None,
          log=None) -> Tuple[WeightStore, List[EpochStats]]:
    """Train on an in-memory sample set.

    samples: (N, C, H, W) float32 feature tensors.
    labels:  (N, H, W) uint8 targets (255 = unlabeled, skipped by the loss).
    Sample order is reshuffled per epoch from a counter-based stream keyed by
    (seed, epoch), so a fixed seed gives a bit-identical run.
    """
    samples = np.asarray(samples, dtype=np.float32)
    labels = np.asarray(labels)
    if samples.ndim != 4 or labels.shape != (samples.shape[0],) + samples.shape[2:]:
        raise ValueError("samples must be (N, C, H, W) with labels (N, H, W)")
    n = samples.shape[0]
    if n == 0:
        raise ValueError("empty training set")

    if tcfg.balance_classes:
        cw = class_weights(label_counts(labels, cfg.num_classes))
    else:
        cw = np.ones(cfg.num_classes, dtype=np.float64)

    if weights is None:
        weights = init_weights(cfg, seed=tcfg.seed)
    plan = build_plan(cfg)
    opt = adam_init(weights, tcfg.lr)
    sched = PlateauState(lr=tcfg.lr, factor=tcfg.plateau_factor,
                         patience=tcfg.plateau_patience,
                         threshold=tcfg.plateau_threshold)
    history: List[EpochStats] = []
    for epoch in range(1, tcfg.epochs + 1):
        order = _epoch_order(tcfg.seed, epoch, n)
        loss_sum = 0.0
        seen = 0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start: start + tcfg.batch_size]
            x = samples[idx]
            t = labels[idx]
            logits, caches = forward_cached(cfg, weights, x, plan)
            loss, dlogits = ce_loss(logits, t, cw)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            grads, _ = backward(cfg, weights, plan, caches, dlogits)
            opt.lr = sched.lr
            adam_step(weights, grads, opt)
            loss_sum += loss * len(idx)
            seen += len(idx)
        mean_loss = loss_sum / seen
        lr_next = sched.update(mean_loss)
        history.append(EpochStats(epoch=epoch, loss=mean_loss, lr=lr_next))
        if log is not None:
            log(history[-1])
    return weights, history


def write_history_csv(history: List[EpochStats], path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["epoch", "loss", "lr"])
        for row in history:
            wr.writerow([row.epoch, f"{row.loss:.6f}", f"{row.lr:.6g}"])
