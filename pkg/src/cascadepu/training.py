"""End-to-end training of the cascade with per-stage Chamfer supervision."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geometry import PointCloud, chamfer_distance
from .network import (
    NetworkParams,
    StageConfig,
    cascade_forward,
    default_stage_configs,
    init_network,
    save_checkpoint,
)
from .tensor import DimensionError, Tensor, backward, no_grad

log = logging.getLogger(__name__)

SUPERVISION_MODES = ("all_stages", "last_stage")

# Reference schedule: ~107,800 iterations with a decay every 50,000.
_REFERENCE_DECAY_FRACTION = 50_000 / 107_800


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 1
    lr0: float = 1e-3
    lr_decay: float = 0.7
    decay_interval_iters: int = 0  # 0 = scale to the run length
    patch_gt_size: int = 1024
    patch_input_size: int = 256
    seed: int = 0
    supervision_mode: str = "all_stages"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables clipping
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.supervision_mode not in SUPERVISION_MODES:
            raise ValueError(f"supervision_mode must be one of {SUPERVISION_MODES}, got {self.supervision_mode!r}")
        if self.patch_input_size * 4 != self.patch_gt_size:
            raise ValueError(
                f"x4 training needs patch_gt_size = 4 * patch_input_size "
                f"({self.patch_gt_size} vs {self.patch_input_size})")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def resolved_decay_interval(self, iters_per_epoch: int) -> int:
        if self.decay_interval_iters > 0:
            return self.decay_interval_iters
        total = self.epochs * iters_per_epoch
        return max(1, round(total * _REFERENCE_DECAY_FRACTION))


@dataclass
class EpochRecord:
    epoch: int
    stage_losses: tuple[float, ...]
    lr: float
    seconds: float


@dataclass
class TrainReport:
    stage_names: list[str]
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def final_losses(self) -> list[float]:
        """Last stage's mean Chamfer per epoch."""
        return [e.stage_losses[-1] for e in self.epochs]

    def column(self, stage: int) -> list[float]:
        return [e.stage_losses[stage] for e in self.epochs]

    def to_text(self) -> str:
        header = "\t".join(["epoch", *self.stage_names, "lr", "seconds"])
        rows = [header]
        for e in self.epochs:
            cells = [str(e.epoch)] + [repr(v) for v in e.stage_losses] + [repr(e.lr), f"{e.seconds:.3f}"]
            rows.append("\t".join(cells))
        return "\n".join(rows) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "TrainReport":
        lines = [l for l in text.splitlines() if l.strip()]
        head = lines[0].split("\t")
        if head[0] != "epoch" or head[-2:] != ["lr", "seconds"]:
            raise ValueError("not a training report: unexpected header")
        report = cls(stage_names=head[1:-2])
        for line in lines[1:]:
            cells = line.split("\t")
            report.epochs.append(EpochRecord(
                int(cells[0]), tuple(float(c) for c in cells[1:-2]), float(cells[-2]), float(cells[-1])))
        return report

    @classmethod
    def read(cls, path) -> "TrainReport":
        return cls.from_text(Path(path).read_text())


def stage_column_names(configs: Sequence[StageConfig]) -> list[str]:
    names = [f"loss_stage{i + 1}" for i in range(len(configs))]
    if len(configs) > 1 and configs[-1].r == 1:
        names[-1] = "loss_refined"
    return names


class TrainingDiverged(RuntimeError):
    pass


# ----------------------------------------------------------------- objective

def stage_chamfers(outputs: Sequence[Tensor], gt) -> list[Tensor]:
    return [chamfer_distance(o, gt) for o in outputs]


def combine_stage_losses(chamfers: Sequence[Tensor], supervision_mode: str = "all_stages") -> Tensor:
    if supervision_mode == "last_stage":
        return chamfers[-1]
    if supervision_mode != "all_stages":
        raise ValueError(f"unknown supervision mode {supervision_mode!r}")
    total = chamfers[0]
    for c in chamfers[1:]:
        total = total + c
    return total


def total_loss(outputs: Sequence[Tensor], gt, supervision_mode: str = "all_stages") -> Tensor:
    """Sum of the per-stage Chamfer distances to ``gt`` (or only the last one)."""
    return combine_stage_losses(stage_chamfers(outputs, gt), supervision_mode)


# ----------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError("adam_step: parameter, gradient and state counts differ")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape or p.shape != v.shape:
            raise DimensionError(f"adam_step: shapes differ: param {p.shape}, grad {g.shape}, state {m.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_at(iteration: int, cfg: TrainConfig, decay_interval: int | None = None) -> float:
    """Step schedule: ``lr0 * lr_decay ** floor(iteration / interval)``."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    interval = decay_interval or cfg.decay_interval_iters
    if interval <= 0:
        raise ValueError("decay interval must be positive")
    return cfg.lr0 * cfg.lr_decay ** (iteration // interval)


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if max_norm > 0 and norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


# ----------------------------------------------------------------- data

def sample_training_pair(gt_patch: PointCloud, cfg: TrainConfig,
                         rng: np.random.Generator) -> tuple[PointCloud, PointCloud]:
    """Uniform random subset (without replacement) of a ground-truth patch as the sparse input."""
    n = len(gt_patch)
    if n != cfg.patch_gt_size:
        raise ValueError(f"ground-truth patch has {n} points, expected {cfg.patch_gt_size}")
    idx = np.sort(rng.choice(n, size=cfg.patch_input_size, replace=False))
    return PointCloud(gt_patch.points[idx]), gt_patch


# ----------------------------------------------------------------- loop

def train(dataset, cfg: TrainConfig, configs: Sequence[StageConfig] | None = None,
          net: NetworkParams | None = None, checkpoint_dir=None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[NetworkParams, TrainReport]:
    """Optimise a cascade on ground-truth patches.

    Patches are shuffled globally every epoch; each batch averages the
    per-patch objective. Runs are deterministic for a fixed seed.
    """
    patches = list(dataset)
    if not patches:
        raise ValueError("train: empty dataset")
    configs = list(configs) if configs is not None else default_stage_configs(3)
    net = net if net is not None else init_network(configs, seed=cfg.seed)
    params = net.parameters()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    iters_per_epoch = math.ceil(len(patches) / cfg.batch_size)
    interval = cfg.resolved_decay_interval(iters_per_epoch)
    report = TrainReport(stage_column_names(net.configs))
    iteration = 0

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(patches))
        sums = np.zeros(len(net.stages))
        lr = lr_at(iteration, cfg, interval)
        for b, first in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[first:first + cfg.batch_size]
            lr = lr_at(iteration, cfg, interval)
            net.zero_grad()
            for i in batch:
                inp, target = sample_training_pair(patches[i], cfg, rng)
                outputs = cascade_forward(inp.points, net)
                if all(np.isfinite(o.data).all() for o in outputs):
                    cds = stage_chamfers(outputs, target.points)
                    values = [float(c.data) for c in cds]
                else:
                    cds, values = None, [math.nan] * len(outputs)
                if not all(math.isfinite(v) for v in values):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch {b} (patch {int(i)}): stage losses {values}")
                sums += values
                loss = combine_stage_losses(cds, cfg.supervision_mode) * (1.0 / len(batch))
                backward(loss)
            if cfg.grad_clip > 0:
                clip_gradients(params, cfg.grad_clip)
            adam_step(params, [p.grad for p in params], state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            iteration += 1
        record = EpochRecord(epoch, tuple(float(v) for v in sums / len(patches)), lr,
                             time.perf_counter() - start)
        report.epochs.append(record)
        log.info("epoch %d  %s  lr=%.3g  %.1fs", epoch,
                 " ".join(f"{v:.3e}" for v in record.stage_losses), lr, record.seconds)
        if on_epoch is not None:
            on_epoch(record)
        if checkpoint_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(net, Path(checkpoint_dir) / f"checkpoint_epoch{epoch:04d}.bin")
    return net, report


# ----------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class PatchEvaluation:
    """Mean Chamfer distance per stage output, and for the input simply
    repeated up to the output count (the do-nothing baseline)."""

    stage_cd: tuple[float, ...]
    baseline_cd: float

    @property
    def final_cd(self) -> float:
        return self.stage_cd[-1]

    @property
    def baseline_ratio(self) -> float:
        return self.baseline_cd / self.final_cd if self.final_cd > 0 else math.inf


def evaluate_patches(net: NetworkParams, patches, cfg: TrainConfig, seed: int = 0,
                     use_refiner: bool = True) -> PatchEvaluation:
    """Score a network on ground-truth patches with seed-fixed sparse inputs."""
    rng = np.random.default_rng(seed)
    stage, base = [], []
    with no_grad():
        for patch in patches:
            inp, target = sample_training_pair(patch, cfg, rng)
            outputs = cascade_forward(inp.points, net, use_refiner=use_refiner)
            stage.append([float(chamfer_distance(o, target.points).data) for o in outputs])
            repeated = np.repeat(inp.points, net.rate, axis=0)
            base.append(float(chamfer_distance(repeated, target.points).data))
    if not stage:
        raise ValueError("evaluate_patches: no patches")
    return PatchEvaluation(tuple(float(v) for v in np.mean(stage, axis=0)), float(np.mean(base)))
