"""Training objectives: feature self-distillation, pixel-averaged binary
cross-entropy, and their weighted combination.

The self-distillation term pulls the bridge-path features toward both the
optical and the SAR features per encoder level with L1 distances; the scalar
objective is ce + lambda_sd * sd.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import Tensor

from .errors import ConfigurationError, DataError, ShapeError, TrainingInstabilityError

STOP_GRADIENT_MODES = ("none", "detach_o2sp", "detach_op_sp")
SD_REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class LossConfig:
    lambda_sd: float = 1e-4
    sd_enabled: bool = True
    stop_gradient_mode: str = "none"
    epsilon: float = 1e-7
    # "mean" divides each level's L1 by its element count so lambda_sd stays
    # meaningful across feature sizes; "sum" is the unnormalized distance.
    sd_reduction: str = "mean"

    def __post_init__(self):
        if self.lambda_sd < 0:
            raise ConfigurationError(f"lambda_sd must be >= 0, got {self.lambda_sd}")
        if not (0 < self.epsilon <= 1e-3):
            raise ConfigurationError(f"epsilon must be in (0, 1e-3], got {self.epsilon}")
        if self.stop_gradient_mode not in STOP_GRADIENT_MODES:
            raise ConfigurationError(f"unknown stop_gradient_mode {self.stop_gradient_mode!r}")
        if self.sd_reduction not in SD_REDUCTIONS:
            raise ConfigurationError(f"unknown sd_reduction {self.sd_reduction!r}")


def _levels(pyramid) -> Sequence[Tensor]:
    return pyramid.levels if hasattr(pyramid, "levels") else pyramid


def sd_loss(op, sp, o2sp, config: LossConfig) -> tuple[Tensor, list[Tensor]]:
    """Self-distillation loss between the three feature pyramids.

    Per level: L1(o2sp, op) + L1(o2sp, sp), reduced per config, summed over
    levels. Returns the total and the per-level terms. Gradient flow follows
    ``config.stop_gradient_mode``.
    """
    op_l, sp_l, o2sp_l = _levels(op), _levels(sp), _levels(o2sp)
    if not (len(op_l) == len(sp_l) == len(o2sp_l)):
        raise ShapeError(
            f"pyramids must have equal depth, got {len(op_l)}/{len(sp_l)}/{len(o2sp_l)}"
        )
    per_level = []
    for i, (a, b, t) in enumerate(zip(op_l, sp_l, o2sp_l)):
        if a.shape != b.shape or a.shape != t.shape:
            raise ShapeError(
                f"pyramid shape mismatch at level {i}: op {tuple(a.shape)}, "
                f"sp {tuple(b.shape)}, o2sp {tuple(t.shape)}"
            )
        if config.stop_gradient_mode == "detach_o2sp":
            t = t.detach()
        elif config.stop_gradient_mode == "detach_op_sp":
            a, b = a.detach(), b.detach()
        if config.sd_reduction == "mean":
            term = (t - a).abs().mean() + (t - b).abs().mean()
        else:
            term = (t - a).abs().sum() + (t - b).abs().sum()
        per_level.append(term)
    total = torch.stack(per_level).sum()
    return total, per_level


def ce_loss(pred: Tensor, target: Tensor, config: LossConfig) -> Tensor:
    """Binary cross-entropy on probabilities, averaged over all pixels (and batch).

    ``pred`` holds probabilities in [0, 1]; values are clamped to
    [epsilon, 1 - epsilon] before the logs. ``target`` must be 0/1.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    target = target.to(pred.dtype)
    bad = ((target != 0) & (target != 1)).any()
    if bool(bad):
        raise DataError("target mask contains values outside {0, 1}")
    p = pred.clamp(config.epsilon, 1.0 - config.epsilon)
    return -(target * p.log() + (1.0 - target) * (1.0 - p).log()).mean()


@dataclass
class LossReport:
    ce: float
    sd: float
    total: float
    per_level_sd: list[float]
    # Differentiable total for backward; excluded from equality comparisons.
    total_tensor: Tensor = field(compare=False, repr=False, default=None)


def total_loss(
    ce: Tensor,
    sd: Tensor | float | None,
    config: LossConfig,
    per_level_sd: Sequence[Tensor] | None = None,
) -> LossReport:
    """Combine the supervised and distillation terms: total = ce + lambda_sd * sd.

    With ``sd_enabled`` false the distillation term is forced to zero and
    contributes no gradient. Non-finite components abort the iteration.
    """
    ce_f = float(ce.detach()) if isinstance(ce, Tensor) else float(ce)
    sd_f = 0.0 if sd is None else (float(sd.detach()) if isinstance(sd, Tensor) else float(sd))
    if not (math.isfinite(ce_f) and math.isfinite(sd_f)):
        raise TrainingInstabilityError(f"non-finite loss component: ce={ce_f}, sd={sd_f}")
    if per_level_sd is not None:
        levels = [float(v.detach()) if isinstance(v, Tensor) else float(v) for v in per_level_sd]
    else:
        levels = []
    if not config.sd_enabled or sd is None:
        sd_f = 0.0
        levels = [0.0 for _ in levels]
        total_t = ce if isinstance(ce, Tensor) else torch.tensor(ce_f)
    elif isinstance(sd, Tensor):
        total_t = ce + config.lambda_sd * sd
    else:
        total_t = ce + config.lambda_sd * sd_f
    return LossReport(
        ce=ce_f,
        sd=sd_f,
        total=ce_f + config.lambda_sd * sd_f,
        per_level_sd=levels,
        total_tensor=total_t,
    )
