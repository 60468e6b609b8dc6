"""SGD with classical momentum, polynomial learning-rate decay and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .model import LayerGraph, MNetConfig, decode_arrays, encode_arrays, forward
from .objective import LossReport, side_output_objective

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    momentum: float = 0.9
    iterations: int = 100          # passes over the training set
    max_steps: Optional[int] = None
    decay_power: float = 0.9
    lr_floor: float = 0.01         # fraction of lr0
    seed: int = 0
    batch_size: int = 1
    fused_weight: float = 0.0

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")

    def total_steps(self, n_samples: int) -> int:
        steps = self.iterations * math.ceil(n_samples / self.batch_size)
        return min(steps, self.max_steps) if self.max_steps else steps


@dataclass
class OptState:
    velocity: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptState":
        return cls({name: np.zeros_like(p.data) for name, p in params.items()})


def lr_schedule(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """lr0 * (1 - step/total)^power, never below lr_floor * lr0."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    frac = min(step / max(total_steps, 1), 1.0)
    return max(cfg.lr0 * (1.0 - frac) ** cfg.decay_power, cfg.lr0 * cfg.lr_floor)


def sgd_momentum_step(params: dict, state: OptState, lr: float, momentum: float) -> None:
    """v <- mu*v - lr*g ; theta <- theta + v, in place. Missing grads count as zero."""
    for name, p in params.items():
        v = state.velocity[name]
        if v.shape != p.shape:
            raise ValueError(f"velocity shape {v.shape} does not match parameter {name} {p.shape}")
        g = p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        v *= momentum
        if g is not None:
            v -= lr * g
        p.data += v
    state.step += 1


@dataclass
class TrainResult:
    graph: LayerGraph
    state: OptState
    losses: list = field(default_factory=list)

    @property
    def curve(self) -> list:
        return [r.total for r in self.losses]


def _batch_indices(n: int, step: int, cfg: TrainConfig) -> np.ndarray:
    per_epoch = math.ceil(n / cfg.batch_size)
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    return perm[k * cfg.batch_size:(k + 1) * cfg.batch_size]


def train_step(graph: LayerGraph, images: np.ndarray, targets: np.ndarray, state: OptState,
               lr: float, cfg: TrainConfig) -> LossReport:
    mcfg = graph.config
    graph.zero_grad()
    sides, fused = forward(graph, images)
    total, report = side_output_objective(sides, targets, mcfg.side_weights, mcfg.class_weights,
                                          fused=fused, fused_weight=cfg.fused_weight)
    total.backward()
    sgd_momentum_step(graph.params, state, lr, cfg.momentum)
    return report


def train(
    graph: LayerGraph,
    dataset: Sequence,
    cfg: TrainConfig,
    state: Optional[OptState] = None,
    stop_at: Optional[int] = None,
    callback: Optional[Callable[[int, LossReport], None]] = None,
) -> TrainResult:
    """Train ``graph`` in place on ``dataset`` = sequence of (image CHW, target KHW).

    ``state`` resumes from a checkpointed optimizer state; ``stop_at`` halts
    early at that global step (the schedule still uses the full length).
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("training set is empty")
    state = state or OptState.zeros_like(graph.params)
    total_steps = cfg.total_steps(n)
    end = total_steps if stop_at is None else min(stop_at, total_steps)
    result = TrainResult(graph, state)
    while state.step < end:
        step = state.step
        idx = _batch_indices(n, step, cfg)
        images = np.stack([dataset[i][0] for i in idx]).astype(np.float32)
        targets = np.stack([dataset[i][1] for i in idx]).astype(np.float32)
        report = train_step(graph, images, targets, state, lr_schedule(step, cfg, total_steps), cfg)
        result.losses.append(report)
        if callback is not None:
            callback(step, report)
        if step % 100 == 0:
            log.info("step %d/%d loss %.4f", step, total_steps, report.total)
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

WEIGHTS_FILE = "weights.mnetw"
VELOCITY_FILE = "velocity.mnetw"
STATE_FILE = "state.json"


def save_checkpoint(directory, graph: LayerGraph, state: OptState, cfg: TrainConfig, extra=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / WEIGHTS_FILE).write_bytes(encode_arrays(graph.state_dict()))
    (directory / VELOCITY_FILE).write_bytes(encode_arrays(state.velocity))
    meta = {
        "step": state.step,
        "train": dataclasses.asdict(cfg),
        "model": dataclasses.asdict(graph.config),
    }
    if extra:
        meta["extra"] = extra
    (directory / STATE_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory, build: Callable[[MNetConfig], LayerGraph]):
    """Returns (graph, state, train config, metadata)."""
    directory = Path(directory)
    meta = json.loads((directory / STATE_FILE).read_text())
    graph = build(MNetConfig(**meta["model"]))
    graph.load_state_dict(decode_arrays((directory / WEIGHTS_FILE).read_bytes()))
    velocity = decode_arrays((directory / VELOCITY_FILE).read_bytes())
    state = OptState(velocity=velocity, step=int(meta["step"]))
    return graph, state, TrainConfig(**meta["train"]), meta
