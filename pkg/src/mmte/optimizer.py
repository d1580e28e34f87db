"""Adafactor with momentum and factored second moments, plus the
warmup / inverse-sqrt learning-rate schedule and per-parameter RMS clipping.

The schedule value is used as the absolute update step: the clipped,
momentum-smoothed update has RMS <= 1, so a parameter never moves by more
than ``lr(step)`` RMS per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class Schedule:
    """(peak, warmup) pair: linear ramp to ``peak``, then inverse-sqrt decay."""

    peak: float
    warmup: int

    def __post_init__(self):
        if self.peak <= 0:
            raise ValueError("schedule peak must be positive")
        if self.warmup < 1:
            raise ValueError("schedule warmup must be a positive step count")


# downstream presets mirror the published task schedules, scaled by the same
# desk factor as the pretraining schedule (lr / 60, warmup / 40)
SCHEDULE_PRESETS: dict[str, Schedule] = {
    "pretrain": Schedule(0.05, 1000),
    "pretrain_paper": Schedule(3.0, 40_000),
    "nli": Schedule(0.2 / 60, 90_000 // 40),
    "doc": Schedule(0.2 / 60, 5_000 // 40),
    "intent": Schedule(0.1 / 60, 100_000 // 40),
    "tagging": Schedule(0.1 / 60, 40_000 // 40),
}


def lr(schedule: Schedule, step: int) -> float:
    """Learning rate at 1-based ``step``."""
    if step < 1:
        raise ValueError(f"schedule step must be >= 1, got {step}")
    if step <= schedule.warmup:
        return schedule.peak * step / schedule.warmup
    return schedule.peak * math.sqrt(schedule.warmup / step)


def clip(grad: np.ndarray, threshold: float = 1.0) -> np.ndarray:
    """Scale ``grad`` so its RMS norm (||g||_2 / sqrt(n)) is <= threshold."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    rms = math.sqrt(float(np.mean(np.square(grad))))
    if rms > threshold:
        return grad * (threshold / rms)
    return grad


@dataclass
class AdafactorState:
    """Per-parameter accumulators keyed by parameter name.

    Matrices keep a row accumulator R and column accumulator C of the
    running second moment; vectors and scalars keep the full accumulator V.
    Every parameter keeps a momentum tensor m.
    """

    m: dict[str, np.ndarray] = field(default_factory=dict)
    row: dict[str, np.ndarray] = field(default_factory=dict)
    col: dict[str, np.ndarray] = field(default_factory=dict)
    full: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


BETA1 = 0.9
DECAY_EXPONENT = 0.8
EPS1 = 1e-30


def adafactor_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdafactorState,
    schedule: Schedule,
) -> None:
    """Apply one update in place and advance the state's step counter.

    Second-moment decay is beta2(t) = 1 - t^-0.8 (no bias correction needed:
    beta2(1) = 0). The preconditioned update g/sqrt(vhat) is clipped to RMS 1
    before momentum, so the applied step RMS never exceeds lr(t).
    """
    state.t += 1
    t = state.t
    beta2 = 1.0 - t ** (-DECAY_EXPONENT)
    step_size = lr(schedule, t)
    for name in params:
        p = params[name]
        # accumulators run in float64 regardless of the model dtype
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        g2 = g * g + EPS1
        if g.ndim == 2:
            r = state.row.get(name)
            c = state.col.get(name)
            row_mean = g2.mean(axis=1)
            col_mean = g2.mean(axis=0)
            if r is None:
                r = np.zeros_like(row_mean)
                c = np.zeros_like(col_mean)
            r = beta2 * r + (1.0 - beta2) * row_mean
            c = beta2 * c + (1.0 - beta2) * col_mean
            state.row[name] = r
            state.col[name] = c
            vhat = np.outer(r, c) / r.mean()
        elif g.ndim <= 1:
            v = state.full.get(name)
            if v is None:
                v = np.zeros_like(g2)
            v = beta2 * v + (1.0 - beta2) * g2
            state.full[name] = v
            vhat = v
        else:
            raise ValueError(f"parameter {name!r} has rank {g.ndim}; only rank <= 2 is supported")
        u = g / np.sqrt(vhat)
        u_rms = math.sqrt(float(np.mean(u * u)))
        if u_rms > 1.0:
            u = u / u_rms
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(u)
        m = BETA1 * m + (1.0 - BETA1) * u
        state.m[name] = m
        p.data -= (step_size * m).astype(p.data.dtype, copy=False)


class Adafactor:
    """Stateful wrapper binding a parameter dict to an AdafactorState."""

    def __init__(self, params: dict[str, Tensor], schedule: Schedule, clip_threshold: float = 1.0):
        self.params = params
        self.schedule = schedule
        self.clip_threshold = clip_threshold
        self.state = AdafactorState()

    def step(self) -> float:
        """Clip each parameter's ``.grad`` and apply one update; returns lr used."""
        grads = {}
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            grads[name] = clip(p.grad, self.clip_threshold)
        adafactor_step(self.params, grads, self.state, self.schedule)
        return lr(self.schedule, self.state.t)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Flatten the state for checkpoint serialization."""
        out: dict[str, np.ndarray] = {}
        for kind, table in (("m", self.state.m), ("row", self.state.row), ("col", self.state.col), ("full", self.state.full)):
            for name, arr in table.items():
                out[f"{kind}|{name}"] = arr
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        self.state = AdafactorState(t=t)
        tables = {"m": self.state.m, "row": self.state.row, "col": self.state.col, "full": self.state.full}
        for key, arr in tensors.items():
            kind, _, name = key.partition("|")
            if kind not in tables or not name:
                raise ValueError(f"malformed optimizer state key {key!r}")
            tables[kind][name] = arr.astype(np.float64)
