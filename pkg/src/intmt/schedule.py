"""Training schedule: the FP32 warm start is followed by six phases that
alternate between adapting parameters and learning thresholds.

  1. weights/biases quantized range-preservingly, parameters train
     through the straight-through estimate; activations stay float
  2. parameters frozen; forward passes only measure per-site max-abs
     activation ranges (calibration)
  3. activations quantized against thresholds initialized from the
     calibrated ranges; thresholds train, parameters stay frozen
  4. more threshold training (optional)
  5. thresholds frozen at their learned values; parameters fine-tune
  6. more parameter fine-tuning (optional)

The loss is expected to jump at the first phase-3 step (activations
snap onto a coarse grid) and recover as thresholds adapt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DivergenceError, MissingStatsError, SequencingError
from .model import EOS_ID, PAD_ID, Transformer, init_thresholds_from_stats
from .quant import ThresholdScalar


def lr_factor(t: int, t_w: int) -> float:
    """Inverse-square-root decay with a flat warmup ceiling."""
    if t < 1 or t_w < 1:
        raise ValueError(f"steps must be >= 1, got t={t}, t_w={t_w}")
    return 1.0 / math.sqrt(max(t, t_w))


class CalibrationStats:
    """Running per-site activation ranges gathered during phase 2."""

    def __init__(self):
        self.ranges: dict[str, float] = {}
        self.batches_seen = 0

    def observe(self, site_name: str, value: float) -> None:
        prev = self.ranges.get(site_name, 0.0)
        if value > prev:
            self.ranges[site_name] = float(value)
        elif site_name not in self.ranges:
            self.ranges[site_name] = float(value)

    def get(self, site_name: str):
        return self.ranges.get(site_name)

    def __len__(self):
        return len(self.ranges)


class Adam:
    """Adam on both Parameters and ThresholdScalars, with the shared
    inverse-sqrt learning-rate factor."""

    def __init__(self, params: Sequence[T.Parameter],
                 thresholds: Sequence[ThresholdScalar] = (),
                 base_rate: float = 0.05, warmup: int = 1000,
                 beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = list(params)
        self.thresholds = list(thresholds)
        self.base_rate = base_rate
        self.warmup = warmup
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {id(p): np.zeros_like(p.data) for p in self.params}
        self._v = {id(p): np.zeros_like(p.data) for p in self.params}
        self._tm = {id(th): 0.0 for th in self.thresholds}
        self._tv = {id(th): 0.0 for th in self.thresholds}

    def rate(self) -> float:
        return self.base_rate * lr_factor(max(self.t, 1), self.warmup)

    def step(self) -> None:
        self.t += 1
        lr = self.base_rate * lr_factor(self.t, self.warmup)
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            if p.frozen or not p.trainable or p.grad is None:
                continue
            m = self._m[id(p)]
            v = self._v[id(p)]
            m += (1 - self.beta1) * (p.grad - m)
            v += (1 - self.beta2) * (p.grad * p.grad - v)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(np.float32)
        for th in self.thresholds:
            if th.frozen or th.grad == 0.0:
                continue
            m = self._tm[id(th)] = self.beta1 * self._tm[id(th)] + (1 - self.beta1) * th.grad
            v = self._tv[id(th)] = self.beta2 * self._tv[id(th)] + (1 - self.beta2) * th.grad ** 2
            th.z -= lr * (m / c1) / (math.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
        for th in self.thresholds:
            th.zero_grad()


@dataclass(frozen=True)
class PhaseMask:
    """What a phase trains and what it quantizes."""
    params_trainable: bool
    thresholds_trainable: bool
    weights_quantized: bool
    acts_quantized: bool
    calibrate: bool = False


PHASE_MASKS: dict[int, PhaseMask] = {
    1: PhaseMask(True, False, True, False),
    2: PhaseMask(False, False, True, False, calibrate=True),
    3: PhaseMask(False, True, True, True),
    4: PhaseMask(False, True, True, True),
    5: PhaseMask(True, False, True, True),
    6: PhaseMask(True, False, True, True),
}
MANDATORY_PHASES = (1, 2, 3)
ALL_PHASES = (1, 2, 3, 4, 5, 6)


@dataclass
class PhasePlan:
    """Step budget per phase; phases 4-6 can be switched off."""

    steps_per_phase: Sequence[int] = (300, 100, 300, 300, 300, 300)
    run_phase_4: bool = True
    run_phase_5: bool = True
    run_phase_6: bool = True

    def __post_init__(self):
        if len(self.steps_per_phase) != 6:
            raise ConfigurationError(
                f"steps_per_phase needs 6 entries, got {len(self.steps_per_phase)}")
        if any(s < 0 for s in self.steps_per_phase):
            raise ConfigurationError("phase step counts must be >= 0")
        self.steps_per_phase = tuple(int(s) for s in self.steps_per_phase)

    def enabled(self, phase: int) -> bool:
        if phase in MANDATORY_PHASES:
            return True
        return {4: self.run_phase_4, 5: self.run_phase_5, 6: self.run_phase_6}[phase]

    def steps(self, phase: int) -> int:
        return self.steps_per_phase[phase - 1]


def batch_loss(model: Transformer, src: np.ndarray, tgt: np.ndarray) -> T.Tensor:
    """Teacher-forced mean cross entropy; tgt feeds shifted by one.

    The decoder starts from the end-of-sequence symbol: reusing it as
    the start symbol keeps the vocabulary at two reserved ids.
    """
    tgt_in = np.concatenate(
        [np.full((tgt.shape[0], 1), EOS_ID, dtype=tgt.dtype), tgt[:, :-1]], axis=1)
    logits = model.forward(src, tgt_in)
    flat = T.reshape(logits, (-1, model.cfg.vocab_size))
    return T.cross_entropy(flat, tgt.reshape(-1), pad_id=PAD_ID)


def train_step(model: Transformer, optimizer: Adam,
               src: np.ndarray, tgt: np.ndarray) -> float:
    loss = batch_loss(model, src, tgt)
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError(f"loss became {value} at optimizer step {optimizer.t + 1}")
    T.backward(loss)
    optimizer.step()
    optimizer.zero_grad()
    return value


class QatSchedule:
    """Drives the six phases in order over a stream of batches.

    `run_phase` returns the per-step losses; a log callback receives
    (step, phase, loss, lr_factor) rows for the metrics file.
    """

    def __init__(self, model: Transformer, plan: PhasePlan, optimizer: Adam):
        self.model = model
        self.plan = plan
        self.optimizer = optimizer
        self.stats = CalibrationStats()
        self.last_phase_run = 0
        self.global_step = 0

    def _check_order(self, phase: int) -> None:
        if phase not in ALL_PHASES:
            raise SequencingError(f"unknown phase {phase}")
        if not self.plan.enabled(phase):
            raise SequencingError(f"phase {phase} is disabled in this plan")
        if phase <= self.last_phase_run:
            raise SequencingError(
                f"phase {phase} cannot run after phase {self.last_phase_run}")
        for skipped in range(self.last_phase_run + 1, phase):
            if self.plan.enabled(skipped):
                raise SequencingError(
                    f"phase {phase} requested but enabled phase {skipped} has not run")

    def _apply_mask(self, mask: PhaseMask) -> None:
        for p in self.model.parameters():
            p.frozen = not mask.params_trainable
        for th in self.model.registry.scalars():
            th.frozen = not mask.thresholds_trainable
        self.model.quantize_weights = mask.weights_quantized
        self.model.quantize_acts = mask.acts_quantized
        self.model.calibration = self.stats if mask.calibrate else None

    def run_phase(self, phase: int, batches: Iterator[tuple[np.ndarray, np.ndarray]],
                  log: Callable[[int, int, float, float], None] | None = None
                  ) -> list[float]:
        self._check_order(phase)
        if phase == 3:
            if len(self.stats) == 0:
                raise MissingStatsError(
                    "phase 3 needs calibrated ranges; run phase 2 first")
            init_thresholds_from_stats(self.model, self.stats)
        mask = PHASE_MASKS[phase]
        self._apply_mask(mask)
        trains = mask.params_trainable or mask.thresholds_trainable

        losses = []
        for _ in range(self.plan.steps(phase)):
            src, tgt = next(batches)
            if trains:
                value = train_step(self.model, self.optimizer, src, tgt)
            else:
                with T.no_grad():
                    value = float(batch_loss(self.model, src, tgt).data)
                if mask.calibrate:
                    self.stats.batches_seen += 1
            self.global_step += 1
            losses.append(value)
            if log is not None:
                log(self.global_step, phase, value,
                    lr_factor(max(self.optimizer.t, 1), self.optimizer.warmup))
        self.last_phase_run = phase
        self.model.calibration = None
        return losses


def select_checkpoint(history: Sequence[tuple[object, float]]):
    """Pick the candidate with the highest score; ties go to the later one."""
    if not history:
        raise ValueError("no candidate checkpoints to select from")
    best_id, best_score = history[0]
    for cand_id, score in history[1:]:
        if score >= best_score:
            best_id, best_score = cand_id, score
    return best_id
