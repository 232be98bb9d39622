"""Stochastic tail-drop training of the codec."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import codec as codec_mod
from .codec import Codec, LossBreakdown, LossWeights, Scaffold
from .density import RHO_MAX, RHO_MIN, NormalizationState, composite_score, ema_update
from .nn import autograd as ag
from .nn.optim import Adam, lr_schedule
from .taildrop import BETA, build_mask, channel_importance, sample_training_drop

STRATEGIES = ("combined", "feature_only")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    lr_step: int = 15
    lr_factor: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    rho_min: float = RHO_MIN
    rho_max: float = RHO_MAX
    beta: float = BETA
    gamma: float = 0.1
    mix: float = 0.5
    seed: int = 0
    strategy: str = "combined"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"drop strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class StepRecord:
    epoch: int
    step: int
    lr: float
    loss: LossBreakdown
    rho: float


def cloud_loss(model: Codec, sc: Scaffold, rho: float, rng: np.random.Generator,
               weights: LossWeights, strategy: str = "combined", beta: float = BETA) -> LossBreakdown:
    """Composite loss of one cloud under drop ratio ``rho`` with noisy quantization."""
    z, z_xyz = model.encoder(sc)
    imp_z = channel_importance(z.data.T, beta)
    mz = build_mask(imp_z, rho, training=True).bits.astype(np.float64)
    if strategy == "feature_only":
        mx = np.ones(model.cfg.C_xyz)
    else:
        imp_x = channel_importance(z_xyz.data.T, beta)
        mx = build_mask(imp_x, rho, training=True).bits.astype(np.float64)
    z_kept = z * mz
    x_kept = z_xyz * mx
    z_hat = (z_kept + rng.uniform(-0.5, 0.5, size=z.shape)) * mz
    x_hat = (x_kept + rng.uniform(-0.5, 0.5, size=z_xyz.shape)) * mx
    bits = model.bottleneck_z.bits(z_hat, mz) + model.bottleneck_xyz.bits(x_hat, mx)
    out = model.decoder(z_hat, x_hat, sc.stats.d_num, codec_mod._gain(sc.m))
    cd = codec_mod.chamfer_loss(out.points, sc.coords)
    dens = ag.reduce_mean(ag.square(out.counts - sc.stats.d_num))
    coord = ag.reduce_mean(ag.square(x_kept - x_hat))
    points = ag.abs(ag.reduce_sum(out.counts) - float(sc.n)) * (1.0 / sc.n)
    bpp = bits * (1.0 / sc.n)
    return codec_mod.total_loss(cd, dens, coord, points, bpp, weights)


class Trainer:
    """Owns the model, optimizer, EMA state and RNG of one training run."""

    def __init__(self, model: Codec, cfg: TrainConfig, norm: Optional[NormalizationState] = None):
        self.model = model
        self.cfg = cfg
        self.opt = Adam(model.parameters(), lr=cfg.lr)
        self.norm = norm or NormalizationState(gamma=cfg.gamma)
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.step_count = 0

    def scene_delta(self, sc: Scaffold) -> float:
        return float(np.mean(composite_score(sc.stats, self.norm)))

    def train_step(self, batch: Sequence[Scaffold], lr: float) -> tuple:
        cfg = self.cfg
        if not self.norm.initialized:
            self._ema(batch)
        self.opt.zero_grad()
        parts, rhos = [], []
        for sc in batch:
            rho = sample_training_drop(self.scene_delta(sc), self.rng, self.model.cfg.C, cfg.mix,
                                       cfg.rho_min, cfg.rho_max)
            lb = cloud_loss(self.model, sc, rho, self.rng, cfg.weights, cfg.strategy, cfg.beta)
            (lb.tensor * (1.0 / len(batch))).backward()
            lb.tensor = None
            parts.append(lb)
            rhos.append(rho)
        self.opt.step(lr)
        self._ema(batch)
        self.step_count += 1
        return _mean_breakdown(parts, cfg.weights), float(np.mean(rhos))

    def _ema(self, batch):
        self.norm = ema_update(self.norm, np.concatenate([sc.stats.d_num for sc in batch]),
                               np.concatenate([sc.stats.d_dist for sc in batch]))

    def fit(self, scaffolds: Sequence[Scaffold], epochs: Optional[int] = None,
            on_step: Optional[Callable[[StepRecord], None]] = None,
            on_epoch: Optional[Callable[[int, list], None]] = None) -> list:
        cfg = self.cfg
        epochs = cfg.epochs if epochs is None else epochs
        history = []
        for _ in range(epochs):
            lr = lr_schedule(self.epoch, cfg.lr, cfg.lr_step, cfg.lr_factor)
            order = self.rng.permutation(len(scaffolds))
            records = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [scaffolds[i] for i in order[start:start + cfg.batch_size]]
                loss, rho = self.train_step(batch, lr)
                if not math.isfinite(loss.total):
                    raise codec_mod.LossError(f"loss diverged at step {self.step_count}")
                rec = StepRecord(self.epoch, self.step_count, lr, loss, rho)
                records.append(rec)
                if on_step:
                    on_step(rec)
            history.extend(records)
            if on_epoch:
                on_epoch(self.epoch, records)
            self.epoch += 1
        return history


def _mean_breakdown(parts: list, weights: LossWeights) -> LossBreakdown:
    vals = {k: float(np.mean([getattr(p, k) for p in parts])) for k in ("cd", "dens", "coord", "points", "bpp")}
    out = LossBreakdown(weights=weights, **vals)
    out.total = float(np.mean([p.total for p in parts]))
    return out
