"""Training loop: decoupled-weight-decay Adam with parameter averaging.

The loop pushes the primal dataset through the mirror map exactly once up
front, then optimizes the noise-regression loss on dual-space batches. An
exponential moving average of the parameters (decay 0.99) is maintained for
sampling, and the learning rate is multiplied by 0.99 every 1000 steps.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .batch import PRIMAL, SampleBatch
from .diffusion import NoiseSchedule
from .errors import ConfigError
from .network import Architecture, NetworkParams, init_params, loss_and_grad
from .rng import stream
from .threads import blas_limit


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 256
    n_steps: int = 4_000
    ema_decay: float = 0.99
    lr_decay: float = 0.99
    lr_decay_every: int = 1000
    trace_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in (0, 1)")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.batch_size < 1 or self.n_steps < 0:
            raise ConfigError("batch_size must be >= 1 and n_steps >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)


class AdamW:
    """Adam moments with weight decay applied directly to the parameters."""

    def __init__(self, n: int, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def update(self, values: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return values - lr * (mhat / (np.sqrt(vhat) + self.eps)
                              + self.weight_decay * values)


@dataclass
class TrainResult:
    params: NetworkParams
    ema_params: NetworkParams
    trace: list[tuple[int, float, float]]          # (step, loss, lr)
    final_step: int
    snapshots: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def train(arch: Architecture, config: TrainConfig, data: SampleBatch,
          constraint: geometry.ConstraintSet, schedule: NoiseSchedule,
          snapshot_steps: tuple[int, ...] = (),
          init: NetworkParams | None = None, start_step: int = 0) -> TrainResult:
    """Fit the noise predictor to a primal dataset.

    ``snapshot_steps`` captures (params, ema) copies after the given global
    step counts, which is how intermediate checkpoints are produced without a
    second run. Passing ``init``/``start_step`` resumes a previous run (Adam
    moments start fresh; the step counter and learning-rate decay continue).
    """
    if data.space != PRIMAL:
        raise ConfigError("training data must live in the primal space")
    if data.n == 0:
        raise ConfigError("training data is empty")

    y0 = geometry.mirror_forward(constraint, data.data)
    if y0.shape[1] != arch.input_dim:
        raise ConfigError(f"data dimension {y0.shape[1]} does not match "
                          f"architecture input_dim {arch.input_dim}")

    params = init if init is not None else init_params(arch, seed=config.seed)
    values = params.values.copy()
    ema = values.copy()
    opt = AdamW(values.shape[0], weight_decay=config.weight_decay)
    batch_rng = stream(config.seed, "batches", start_step)
    snapshots: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    wanted = set(int(s) for s in snapshot_steps)
    trace: list[tuple[int, float, float]] = []

    with blas_limit():
        for s in range(config.n_steps):
            gstep = start_step + s
            lr = config.learning_rate * config.lr_decay ** (gstep // config.lr_decay_every)
            idx = batch_rng.integers(0, data.n, size=config.batch_size)
            loss, grad = loss_and_grad(params.replace_values(values), y0[idx],
                                       schedule, stream(config.seed, "loss", gstep))
            values = opt.update(values, grad, lr)
            ema = config.ema_decay * ema + (1.0 - config.ema_decay) * values
            done = gstep + 1
            if s % config.trace_every == 0 or s == config.n_steps - 1:
                trace.append((done, loss, lr))
            if done in wanted:
                snapshots[done] = (values.copy(), ema.copy())

    return TrainResult(params=params.replace_values(values),
                       ema_params=params.replace_values(ema),
                       trace=trace, final_step=start_step + config.n_steps,
                       snapshots=snapshots)


def write_loss_trace(path: str, trace: list[tuple[int, float, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,loss,lr\n")
        for step, loss, lr in trace:
            fh.write(f"{step},{loss:.17g},{lr:.17g}\n")


def read_loss_trace(path: str) -> list[tuple[int, float, float]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            step, loss, lr = line.strip().split(",")
            out.append((int(step), float(loss), float(lr)))
    return out
