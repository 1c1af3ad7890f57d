"""Training loop: per-step forward / loss / backward / AdamW, epoch schedule,
evaluation and best-AUC checkpointing."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .diffcore import ConfigError, NumericError
from .losses import LossConfig, loss_total
from .metrics import auc, eval_curve
from .model import ModelParams, forward_full, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    e_star: int = 15
    batch_size: int = 32
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float | None = 1.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    eval_every: int = 1

    def __post_init__(self):
        # the switch epoch lives here; keep the loss config in step with it
        if self.loss.e_star != self.e_star:
            object.__setattr__(self, "loss", replace(self.loss, e_star=self.e_star))

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        self.loss.validate()
        return self


# ---------------------------------------------------------------- optimiser


def decays(name: str) -> bool:
    """Decoupled weight decay only touches weight matrices."""
    return name.endswith((".w", ".w1", ".w2")) or ".attn.w" in name


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adamw_update(param: np.ndarray, grad: np.ndarray, state: AdamState, lr, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.0) -> np.ndarray:
    """One AdamW step; returns the new parameter array and advances ``state``."""
    b1, b2 = betas
    state.step += 1
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    return param * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.cfg = cfg
        self.state = {n: AdamState(np.zeros_like(t.data), np.zeros_like(t.data))
                      for n, t in params.trainable().items()}

    def step(self, params: ModelParams):
        cfg = self.cfg
        grads = {n: params[n].grad for n in self.state}
        if cfg.grad_clip is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / norm
                grads = {n: g * scale for n, g in grads.items()}
        for n, st in self.state.items():
            t = params[n]
            t.data = adamw_update(t.data, grads[n], st, cfg.lr, cfg.betas, cfg.eps,
                                  cfg.weight_decay if decays(n) else 0.0)


# --------------------------------------------------------------------- steps


def _as_batch(batch):
    if isinstance(batch, tuple):
        feats, labels = batch
        return np.asarray(feats, dtype=np.float64), np.asarray(labels, dtype=np.int64)
    lengths = {s.T for s in batch}
    if len(lengths) != 1:
        raise ConfigError(f"batch has mixed sequence lengths {sorted(lengths)}")
    return (np.stack([s.features for s in batch]),
            np.array([s.label for s in batch], dtype=np.int64))


def compute_loss(params, batch, epoch, loss_cfg: LossConfig):
    feats, labels = _as_batch(batch)
    return loss_total(forward_full(params, feats), labels, epoch, loss_cfg)


def train_step(params: ModelParams, batch, epoch: int, cfg: TrainConfig, opt: AdamW | None = None):
    """Forward every sample, sum the three losses (batch mean), backprop, update.

    Returns ``(params, LossBreakdown)``; ``params`` is updated in place.
    """
    if opt is None:
        opt = AdamW(params, cfg)
    params.zero_grad()
    br = compute_loss(params, batch, epoch, cfg.loss)
    for name, v in br.as_floats().items():
        if not np.isfinite(v):
            raise NumericError(f"non-finite loss component {name}={v} at epoch {epoch}")
    dc.backward(br.l_tot)
    opt.step(params)
    return params, br


# ---------------------------------------------------------------------- fit


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_auc: float | None = None

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(rec) + "\n")

    @staticmethod
    def read_jsonl(path):
        with open(path) as fh:
            return TrainReport([json.loads(line) for line in fh if line.strip()])

    def without_timing(self):
        return [{k: v for k, v in r.items() if k != "seconds"} for r in self.epochs]


def fit(params: ModelParams, train_set, val_set, cfg: TrainConfig,
        checkpoint_path=None, report_path=None):
    """Run ``cfg.epochs`` epochs (1-based) and return ``(params, TrainReport)``."""
    cfg.validate()
    if train_set is None or len(train_set) == 0:
        raise ConfigError("training set is empty")
    feats, labels = train_set.stacked()
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(params, cfg)
    report = TrainReport()
    n = len(labels)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        sums = dict.fromkeys(("l_dyn", "l_proto", "l_reg", "l_tot"), 0.0)
        steps = 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            _, br = train_step(params, (feats[idx], labels[idx]), epoch, cfg, opt)
            for k, v in br.as_floats().items():
                sums[k] += v
            steps += 1
        rec = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        if val_set is not None and len(val_set) and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            curve = eval_curve(params, val_set)
            rec["ratios"] = curve.ratios.tolist()
            rec["acc"] = curve.acc.tolist()
            rec["auc"] = auc(curve) if len(curve.ratios) > 1 else float(curve.acc[0])
            if report.best_auc is None or rec["auc"] > report.best_auc:
                report.best_auc, report.best_epoch = rec["auc"], epoch
                if checkpoint_path is not None:
                    save_checkpoint(params, checkpoint_path)
        rec["seconds"] = time.perf_counter() - t0
        report.epochs.append(rec)
        log.info("epoch %d l_tot=%.4f auc=%s", epoch, rec["l_tot"], rec.get("auc"))
    if checkpoint_path is not None and report.best_epoch is None:
        save_checkpoint(params, checkpoint_path)
    if report_path is not None:
        report.to_jsonl(report_path)
    return params, report


def config_dict(cfg: TrainConfig):
    return asdict(cfg)
