"""Training objectives.

All losses take :class:`~earlyproto.model.ForwardOutputs` (single sample or
batched) and labels, and return scalar tensors averaged over the batch.
Time indices ``t`` are 1-based, matching observation step numbering.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ConfigError, Tensor

TEMPORAL_MODES = ("only_last", "all", "dynamic_hard", "dynamic_soft")
REG_MODES = ("prototypes", "pred_next", "pred_final", "none")


@dataclass(frozen=True)
class LossConfig:
    mode_temporal: str = "dynamic_hard"
    e_star: int = 15
    alpha: float = 1.0
    epsilon_smooth: float = 0.1
    reg_mode: str = "prototypes"
    proto_loss: bool = True

    def validate(self):
        if self.mode_temporal not in TEMPORAL_MODES:
            raise ConfigError(f"mode_temporal must be one of {TEMPORAL_MODES}, got {self.mode_temporal!r}")
        if self.reg_mode not in REG_MODES:
            raise ConfigError(f"reg_mode must be one of {REG_MODES}, got {self.reg_mode!r}")
        if self.e_star < 0:
            raise ConfigError(f"e_star must be >= 0, got {self.e_star}")
        if self.mode_temporal == "dynamic_soft" and not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0 for dynamic_soft, got {self.alpha}")
        if not 0.0 <= self.epsilon_smooth < 1.0:
            raise ConfigError(f"epsilon_smooth must be in [0, 1), got {self.epsilon_smooth}")
        return self


@dataclass
class LossBreakdown:
    l_dyn: Tensor
    l_proto: Tensor
    l_reg: Tensor
    l_tot: Tensor

    def as_floats(self):
        return {k: float(getattr(self, k).data) for k in ("l_dyn", "l_proto", "l_reg", "l_tot")}


def _labels(y, outputs):
    lead = outputs.logits.shape[:-2]
    y = np.asarray(y)
    if y.shape != lead:
        raise dc.ShapeError(f"labels shape {y.shape} does not match batch shape {lead}")
    return y


def _zero(like):
    return Tensor(np.zeros((), dtype=like.dtype))


def loss_clf(outputs, y, t, epsilon=0.0):
    T = outputs.T
    if not 1 <= t <= T:
        raise IndexError(f"observation step t={t} outside [1, {T}]")
    return dc.cross_entropy_smoothed(outputs.logits[..., t - 1, :], _labels(y, outputs), epsilon)


def loss_ol(outputs, y, epsilon=0.0):
    return loss_clf(outputs, y, outputs.T, epsilon)


def loss_all(outputs, y, epsilon=0.0):
    # mean over every token equals the mean over t of per-step batch means
    y = _labels(y, outputs)
    yt = np.broadcast_to(y[..., None], outputs.logits.shape[:-1])
    return dc.cross_entropy_smoothed(outputs.logits, yt, epsilon)


def switch_weight(epoch, cfg: LossConfig):
    """Weight on the last-step loss for the soft schedule."""
    return 1.0 / (1.0 + math.exp(cfg.alpha * (epoch - cfg.e_star)))


def loss_dyn(outputs, y, epoch, cfg: LossConfig):
    eps = cfg.epsilon_smooth
    mode = cfg.mode_temporal
    if mode == "only_last" or (mode == "dynamic_hard" and epoch <= cfg.e_star):
        return loss_ol(outputs, y, eps)
    if mode in ("all", "dynamic_hard"):
        return loss_all(outputs, y, eps)
    if mode == "dynamic_soft":
        w = switch_weight(epoch, cfg)
        return loss_ol(outputs, y, eps) * w + loss_all(outputs, y, eps) * (1.0 - w)
    raise ConfigError(f"unknown temporal mode {mode!r}")


def loss_proto(outputs, y):
    """Cross-entropy of the prototype similarity distribution; updates only P."""
    return dc.cross_entropy_smoothed(outputs.s_proto, _labels(y, outputs), 0.0)


def loss_reg(outputs, y, cfg: LossConfig):
    mode = cfg.reg_mode
    y = _labels(y, outputs)
    if mode == "none":
        return _zero(outputs.logits)
    if mode == "prototypes":
        yt = np.broadcast_to(y[..., None], outputs.s_reg.shape[:-1])
        return dc.cross_entropy_smoothed(outputs.s_reg, yt, 0.0)
    T = outputs.T
    if mode == "pred_next":
        if T == 1:
            return _zero(outputs.logits)
        target = dc.stop_grad(outputs.z[..., 1:, :])
        return dc.mse(outputs.z_pred[..., : T - 1, :], target)
    if mode == "pred_final":
        zT = dc.stop_grad(outputs.z[..., T - 1 : T, :])
        target = Tensor(np.broadcast_to(zT.data, outputs.z.shape).copy())
        return dc.mse(outputs.z_pred, target)
    raise ConfigError(f"unknown reg mode {mode!r}")


def loss_total(outputs, y, epoch, cfg: LossConfig) -> LossBreakdown:
    """Unweighted sum of the dynamic, prototype and regularisation losses."""
    l_dyn = loss_dyn(outputs, y, epoch, cfg)
    l_proto = loss_proto(outputs, y) if cfg.proto_loss else _zero(outputs.logits)
    l_reg = loss_reg(outputs, y, cfg)
    return LossBreakdown(l_dyn, l_proto, l_reg, l_dyn + l_proto + l_reg)
