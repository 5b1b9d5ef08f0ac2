"""Optimizer, EMA, spike detection and the multi-stage training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from canvas.conditions import ConditionSet
from canvas.errors import InvalidArgument, NumericDivergence, SpikeAbort
from canvas.model import ModelConfig, ModelParams, init_params, loss_and_grad
from canvas.rng import stream

log = logging.getLogger(__name__)

Grads = dict[str, np.ndarray]


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    step: int = 0
    m: dict[str, np.ndarray] | None = None
    v: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        if not 0.0 < self.beta2 < 1.0:
            raise InvalidArgument("beta2 must lie in (0, 1)")
        if not 0.0 <= self.beta1 < 1.0:
            raise InvalidArgument("beta1 must lie in [0, 1)")

    def hyperparams(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "weight_decay": self.weight_decay,
                "eps": self.eps, "clip_norm": self.clip_norm, "step": self.step}

    def init_moments(self, params: ModelParams) -> "OptimizerState":
        zeros = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        return replace(self, m=zeros, v={k: z.copy() for k, z in zeros.items()})


def adamw_step(state: OptimizerState, params: ModelParams, g: Grads) -> tuple[OptimizerState, ModelParams]:
    """One decoupled-weight-decay Adam update with bias correction."""
    if state.m is None:
        state = state.init_moments(params)
    for k, v in g.items():
        if v.shape != params.arrays[k].shape:
            raise InvalidArgument(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(v)):
            raise NumericDivergence(f"non-finite gradient in {k}", step=state.step)
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_m, new_v, new_p = {}, {}, {}
    for k, p in params.arrays.items():
        dt = p.dtype.type
        gk = g[k].astype(p.dtype)
        m = dt(b1) * state.m[k] + dt(1.0 - b1) * gk
        v = dt(b2) * state.v[k] + dt(1.0 - b2) * gk * gk
        update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        new_p[k] = p - dt(state.lr * state.weight_decay) * p - dt(state.lr) * update
        new_m[k], new_v[k] = m, v
    return replace(state, step=step, m=new_m, v=new_v), ModelParams(params.config, new_p)


def global_norm(g: Grads) -> float:
    return math.sqrt(sum(float(np.sum(v.astype(np.float64) ** 2)) for v in g.values()))


def clip_gradients(g: Grads, max_norm: float) -> Grads:
    if not max_norm > 0:
        raise InvalidArgument("max_norm must be positive")
    norm = global_norm(g)
    if norm <= max_norm:
        return g
    scale = max_norm / norm
    return {k: (v * scale).astype(v.dtype) for k, v in g.items()}


# ---------------------------------------------------------------------------
# EMA and spike detection
# ---------------------------------------------------------------------------

@dataclass
class EmaState:
    shadow: ModelParams
    decay: float = 0.995

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise InvalidArgument("EMA decay must lie in (0, 1)")


def ema_update(e: EmaState, p: ModelParams) -> EmaState:
    new = {}
    for k, s in e.shadow.arrays.items():
        if s.shape != p.arrays[k].shape:
            raise InvalidArgument(f"EMA shape mismatch for {k}")
        # incremental form: a shadow equal to the parameters stays bit-identical
        new[k] = s + s.dtype.type(1.0 - e.decay) * (p.arrays[k] - s)
    return EmaState(ModelParams(e.shadow.config, new), e.decay)


def detect_loss_spike(history: Sequence[float], current: float, ratio: float = 3.0) -> bool:
    if len(history) == 0:
        raise InvalidArgument("spike detection needs a non-empty history")
    return bool(current > ratio * float(np.median(history)))


def condition_dropout(c: ConditionSet, p_text: float, p_image: float, rng: np.random.Generator) -> ConditionSet:
    """Drop text to NULL and/or all references, independently."""
    if not (0.0 <= p_text <= 1.0 and 0.0 <= p_image <= 1.0):
        raise InvalidArgument("dropout probabilities must lie in [0, 1]")
    u_text, u_image = rng.random(2)
    if u_text < p_text:
        c = c.with_text(None)
    if u_image < p_image:
        c = c.without_images()
    return c


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainStageConfig:
    stage_id: str
    resolution: tuple[int, int]
    steps: int
    shift: float = 1.0
    batch_size: int = 8
    mixture: dict[str, float] | None = None

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise InvalidArgument("steps must be >= 0 and batch_size >= 1")
        if self.shift <= 0:
            raise InvalidArgument("shift must be positive")
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))


def validate_stages(stages: Sequence[TrainStageConfig]) -> None:
    for a, b in zip(stages, stages[1:]):
        if b.resolution[0] < a.resolution[0] or b.resolution[1] < a.resolution[1]:
            raise InvalidArgument("stage resolutions must be non-decreasing")


class BatchSource(Protocol):
    """Supplies model-space training pairs; must be a pure function of its arguments."""

    def batch(self, stage: TrainStageConfig, step: int, size: int,
              seed: int) -> list[tuple[np.ndarray, ConditionSet]]:
        ...


@dataclass
class TrainSettings:
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    ema_decay: float = 0.995
    p_text: float = 0.1
    p_image: float = 0.1
    spike_ratio: float = 3.0
    spike_window: int = 100
    spike_min_history: int = 10
    max_consecutive_spikes: int = 5

    def optimizer(self) -> OptimizerState:
        return OptimizerState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, weight_decay=self.weight_decay,
                              eps=self.eps, clip_norm=self.clip_norm)


@dataclass
class TrainState:
    params: ModelParams
    opt: OptimizerState
    ema: EmaState
    stage_index: int = 0
    stage_step: int = 0
    history: list[float] = field(default_factory=list)
    consecutive_spikes: int = 0

    @classmethod
    def fresh(cls, settings: TrainSettings) -> "TrainState":
        params = init_params(settings.model, settings.seed)
        return cls(params, settings.optimizer().init_moments(params), EmaState(params.copy(), settings.ema_decay))


@dataclass
class TrainResult:
    params: ModelParams
    ema: EmaState
    state: TrainState
    log: list[dict]
    finished: bool


def _train_step(state: TrainState, stage: TrainStageConfig, data: BatchSource, settings: TrainSettings) -> dict:
    k = state.stage_step
    raw = data.batch(stage, k, stage.batch_size, settings.seed)
    batch = [
        (x0, condition_dropout(c, settings.p_text, settings.p_image,
                               stream(settings.seed, "dropout", stage.stage_id, k, i)))
        for i, (x0, c) in enumerate(raw)
    ]
    loss, g = loss_and_grad(state.params, batch, key=(settings.seed, "noise", stage.stage_id, k), shift=stage.shift)
    if not math.isfinite(loss):
        raise NumericDivergence("non-finite loss", step=state.opt.step)
    gnorm = global_norm(g)
    hist = state.history[-settings.spike_window:]
    spike = len(hist) >= settings.spike_min_history and detect_loss_spike(hist, loss, settings.spike_ratio)
    record = {"stage": stage.stage_id, "step": state.opt.step, "stage_step": k,
              "loss": loss, "grad_norm": gnorm, "spike": spike}
    if spike:
        # a spiking batch is logged and skipped; the weights are left untouched
        state.consecutive_spikes += 1
    else:
        state.consecutive_spikes = 0
        if settings.clip_norm is not None:
            g = clip_gradients(g, settings.clip_norm)
        state.opt, state.params = adamw_step(state.opt, state.params, g)
        state.ema = ema_update(state.ema, state.params)
        state.history = (state.history + [loss])[-settings.spike_window:]
    state.stage_step += 1
    return record


def train(stages: Sequence[TrainStageConfig], data: BatchSource, settings: TrainSettings | None = None,
          state: TrainState | None = None, max_steps: int | None = None) -> TrainResult:
    """Run the stages in order, optionally resuming from ``state``.

    ``max_steps`` bounds the number of steps taken in this call so a run can be
    checkpointed and continued; continuing gives the same result as an
    uninterrupted run because every draw is addressed by (stage, step).
    """
    settings = settings or TrainSettings()
    validate_stages(stages)
    state = state or TrainState.fresh(settings)
    records: list[dict] = []
    taken = 0
    while state.stage_index < len(stages):
        stage = stages[state.stage_index]
        while state.stage_step < stage.steps:
            if max_steps is not None and taken >= max_steps:
                return TrainResult(state.ema.shadow, state.ema, state, records, False)
            rec = _train_step(state, stage, data, settings)
            records.append(rec)
            taken += 1
            if state.consecutive_spikes > settings.max_consecutive_spikes:
                log.error("aborting: %d consecutive loss spikes", state.consecutive_spikes)
                raise SpikeAbort(f"{state.consecutive_spikes} consecutive loss spikes in stage {stage.stage_id}",
                                 records)
        state.stage_index += 1
        state.stage_step = 0
        state.history = []
        state.consecutive_spikes = 0
    audit = getattr(data, "audit_records", None)
    if callable(audit):
        records.extend(audit())
    return TrainResult(state.ema.shadow, state.ema, state, records, True)
