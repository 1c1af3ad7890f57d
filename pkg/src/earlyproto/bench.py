"""Desk-scale synthetic benchmark: one training run per (seed, temporal mode, reg mode)."""

from dataclasses import dataclass, field, replace

from .dataio import SynthSpec, gen_synthetic
from .losses import LossConfig
from .model import ModelConfig, init_params
from .trainer import TrainConfig, fit


@dataclass(frozen=True)
class BenchResult:
    seed: int
    mode_temporal: str
    reg_mode: str
    e_star: int
    auc: float
    acc: tuple
    ratios: tuple

    @property
    def full_acc(self):
        return self.acc[-1]


@dataclass(frozen=True)
class Benchmark:
    """K=6, T=10, ambiguity depth 4, 30 epochs with the switch at epoch 15."""

    spec: SynthSpec = field(default_factory=SynthSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def run(self, seed, mode_temporal="dynamic_hard", reg_mode="prototypes", e_star=None):
        """Train on seed-specific data and weights; metrics come from the final epoch."""
        spec = replace(self.spec, seed=seed)
        train_set, val_set = gen_synthetic(spec)
        mcfg = replace(self.model, seed=seed, d_enc=spec.d_enc, k_classes=spec.k_classes,
                       t_max=max(self.model.t_max, spec.t_segments))
        e_star = self.train.e_star if e_star is None else e_star
        loss = replace(self.train.loss, mode_temporal=mode_temporal, reg_mode=reg_mode, e_star=e_star)
        tcfg = replace(self.train, seed=seed, e_star=e_star, loss=loss, eval_every=self.train.epochs)
        _, rep = fit(init_params(mcfg), train_set, val_set, tcfg)
        last = rep.epochs[-1]
        return BenchResult(seed, mode_temporal, reg_mode, e_star, last["auc"],
                           tuple(last["acc"]), tuple(last["ratios"]))
