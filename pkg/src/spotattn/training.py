"""Optimization loop and evaluation metrics.

A slide is the optimization batch: every epoch takes one Adam step per slide
in a fixed order, with the learning rate following cosine annealing from the
base rate toward zero over the total step count. Weight decay is decoupled
(a multiplicative shrink of the weight matrices, never routed through the
gradients) and skips layer-norm gains and shifts.

Evaluation pools all (spot, gene) entries across slides for MSE/MAE and
computes the Pearson correlation per gene across all pooled spots, averaging
over the genes whose prediction and target vectors both have variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import SlideRecord
from .errors import ConfigError, MetricsError, OptimizerError, ShapeError
from .model import ModelConfig, ModelParams, forward, init_params, prepare_geometry
from .numerics import Tape, Tensor, mse_loss

Array = np.ndarray


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 1500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 3927  # reserved for stochastic trainer components; the
    # current loop is deterministic given the model seed

    @classmethod
    def desk_profile(cls, **overrides) -> "TrainConfig":
        base = dict(learning_rate=3e-3, epochs=120)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")


@dataclass
class OptimizerState:
    m: dict[str, Array]
    v: dict[str, Array]
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
        )


def cosine_lr(step: int, total_steps: int, base: float) -> float:
    """Cosine annealing from base at step 0 to 0 at step == total_steps."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Array],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """Bias-corrected Adam update in place; decay shrinks matrices only.

    Layer-norm gains/shifts are the 1-D parameters and are exempt from the
    decoupled weight decay.
    """
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    state.step += 1
    t = state.step
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name} {p.data.shape}")
        if not np.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        if cfg.weight_decay > 0 and p.data.ndim == 2:
            p.data -= lr * cfg.weight_decay * p.data
        p.data -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    mean_loss: float


def train(
    train_slides: list[SlideRecord],
    cfg: TrainConfig,
    mcfg: ModelConfig,
    params: ModelParams | None = None,
) -> tuple[ModelParams, list[EpochStats]]:
    """Fit the model; returns the trained parameters and per-epoch history.

    Initial parameters come from ``init_params(mcfg)`` unless supplied. One
    optimizer step per slide per epoch, slides in input order; the recorded
    lr is the one used at that epoch's last step.
    """
    cfg.validate()
    if not train_slides:
        raise ConfigError("need at least one training slide")
    d = train_slides[0].d
    n_genes = train_slides[0].n_genes
    for s in train_slides:
        if s.d != d or s.n_genes != n_genes:
            raise ShapeError(
                f"slide {s.slide_id}: dims ({s.d}, {s.n_genes}) != first slide ({d}, {n_genes})"
            )
    if params is None:
        params = init_params(mcfg)
    registry = params.named()
    geometries = [prepare_geometry(s, mcfg) for s in train_slides]
    state = OptimizerState.init(registry)
    total_steps = max(cfg.epochs * len(train_slides), 1)
    history: list[EpochStats] = []
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        lr = cfg.learning_rate
        for slide, geo in zip(train_slides, geometries):
            lr = cosine_lr(step, total_steps, cfg.learning_rate)
            tape = Tape()
            preds, _ = forward(slide, params, mcfg, geometry=geo, tape=tape)
            loss = mse_loss(preds, slide.targets, tape)
            tape.backward(loss)
            grads = {name: t.grad for name, t in registry.items()}
            adam_step(registry, grads, state, lr, cfg)
            losses.append(float(loss.data))
            step += 1
        history.append(EpochStats(epoch=epoch, lr=lr, mean_loss=float(np.mean(losses))))
    return params, history


@dataclass
class MetricsReport:
    mse: float
    mae: float
    pcc: float
    per_gene_pcc: Array  # NaN where a gene was excluded
    excluded_genes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mse": self.mse,
            "mae": self.mae,
            "pcc": self.pcc,
            "per_gene_pcc": [None if math.isnan(v) else float(v) for v in self.per_gene_pcc],
            "excluded_genes": list(self.excluded_genes),
        }


def pearson(a: Array, b: Array) -> float:
    """Pearson correlation of two 1-D vectors; NaN if either is constant."""
    da = a - a.mean()
    db = b - b.mean()
    denom = math.sqrt(float((da * da).sum()) * float((db * db).sum()))
    if denom == 0.0:
        return math.nan
    return float((da * db).sum() / denom)


def evaluate(params: ModelParams, slides: list[SlideRecord], mcfg: ModelConfig) -> MetricsReport:
    """Pooled error metrics plus per-gene-then-averaged correlation."""
    if not slides:
        raise ConfigError("need at least one slide to evaluate")
    preds = []
    targets = []
    for slide in slides:
        p, _ = forward(slide, params, mcfg)
        preds.append(p.data)
        targets.append(slide.targets)
    pred = np.concatenate(preds, axis=0)
    target = np.concatenate(targets, axis=0)
    diff = pred - target
    per_gene = np.array([pearson(pred[:, g], target[:, g]) for g in range(pred.shape[1])])
    defined = ~np.isnan(per_gene)
    if not defined.any():
        raise MetricsError("every gene has zero variance; correlation undefined")
    return MetricsReport(
        mse=float((diff * diff).mean()),
        mae=float(np.abs(diff).mean()),
        pcc=float(per_gene[defined].mean()),
        per_gene_pcc=per_gene,
        excluded_genes=np.flatnonzero(~defined).tolist(),
    )
