"""Threshold and pointwise-scale fine-tuning on unlabeled data.

The float network is a frozen teacher; the student is the same network under
fake quantization. Only threshold scales (and optionally pointwise weight/bias
scale factors) receive optimizer state; weights are never touched. The loss is
the RMSE between teacher and student pre-softmax logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import NonFiniteGradient, ShapeMismatch
from .model import Graph
from .quant import ASYMMETRIC, SYMMETRIC, QuantParams
from .simulate import PointwiseScales, QuantizedNet

GROUP_THRESHOLDS = "thresholds"
GROUP_POINTWISE = "pointwise"
GROUP_BOTH = "both"


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    lr_min: float = 0.0
    cosine_period: Optional[int] = None  # None: one epoch of steps
    seed: int = 0
    train_groups: str = GROUP_THRESHOLDS
    loss_gamma: float = 1.0
    # labeled-loss weights; only zero is supported (training is label-free)
    loss_alpha: float = 0.0
    loss_beta: float = 0.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.cosine_period is not None and self.cosine_period < 1:
            raise ValueError("cosine period must be >= 1")
        if self.train_groups not in (GROUP_THRESHOLDS, GROUP_POINTWISE, GROUP_BOTH):
            raise ValueError(f"unknown train_groups {self.train_groups!r}")
        if self.loss_alpha != 0.0 or self.loss_beta != 0.0:
            raise ValueError("labeled loss terms are not supported; "
                             "loss_alpha and loss_beta must stay 0")


def distillation_loss(z_t: np.ndarray, z_a: np.ndarray, gamma: float = 1.0) -> float:
    """RMSE between teacher and student logits, normalized by batch size."""
    z_t = np.asarray(z_t, dtype=np.float64)
    z_a = np.asarray(z_a, dtype=np.float64)
    if z_t.shape != z_a.shape:
        raise ShapeMismatch(f"logit shapes differ: {z_t.shape} vs {z_a.shape}")
    n = z_t.shape[0]
    return gamma * math.sqrt(float(((z_t - z_a) ** 2).sum()) / n)


def _loss_and_grad(z_t, z_a, gamma: float):
    n = z_t.shape[0]
    diff = z_a - z_t
    h = math.sqrt(float((diff**2).sum()) / n)
    if h == 0.0:
        return 0.0, np.zeros_like(diff)
    return gamma * h, gamma * diff / (n * h)


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Cosine-annealed learning rate with period cfg.cosine_period."""
    if cfg.cosine_period is None:
        raise ValueError("cosine_period must be resolved before scheduling")
    phase = step % cfg.cosine_period
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (
        1.0 + math.cos(math.pi * phase / cfg.cosine_period))


def is_restart(step: int, cfg: TrainConfig) -> bool:
    return step % cfg.cosine_period == 0


@dataclass
class OptimizerState:
    """Adam moments per trainable; cleared at every cosine restart."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    restarts: int = 0

    @classmethod
    def init_for(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})

    def reset(self) -> None:
        for k in self.m:
            self.m[k][...] = 0.0
            self.v[k][...] = 0.0
        self.step = 0
        self.restarts += 1


def adam_step(
    state: OptimizerState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    cfg: TrainConfig,
) -> OptimizerState:
    """One Adam update, in place on the parameter arrays."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for key, p in params.items():
        g = grads.get(key)
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {key!r}")
        m = state.m[key]
        v = state.v[key]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_opt)
    return state


def trainable_params(
    params: dict[str, QuantParams],
    scales: Optional[PointwiseScales],
    groups: str,
) -> dict[str, np.ndarray]:
    """Live views of the arrays the optimizer may update."""
    out: dict[str, np.ndarray] = {}
    if groups in (GROUP_THRESHOLDS, GROUP_BOTH):
        for site, p in params.items():
            if p.mode == SYMMETRIC:
                out[f"alpha:{site}"] = p.alpha
            elif p.mode == ASYMMETRIC:
                out[f"alpha_t:{site}"] = p.alpha_t
                out[f"alpha_r:{site}"] = p.alpha_r
    if groups in (GROUP_POINTWISE, GROUP_BOTH):
        if scales is None:
            raise ValueError("pointwise group enabled but no scales provided")
        for lid, arr in scales.weight.items():
            out[f"pw:{lid}"] = arr
        for lid, arr in scales.bias.items():
            out[f"pb:{lid}"] = arr
    if not out:
        raise ValueError("no trainable parameters for the requested groups")
    return out


def finetune(
    g_float: Graph,
    params: dict[str, QuantParams],
    scales: Optional[PointwiseScales],
    data: Dataset,
    cfg: TrainConfig,
) -> tuple[dict[str, QuantParams], Optional[PointwiseScales], dict]:
    """Distillation fine-tune of the enabled parameter groups.

    Returns the (mutated) params and scales plus a log with one record per
    step ({step, lr, loss, restart}) and per-epoch mean losses.
    """
    student = QuantizedNet(g_float, params, scales)
    trainables = trainable_params(params, scales, cfg.train_groups)
    state = OptimizerState.init_for(trainables)

    n = len(data)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    period = cfg.cosine_period if cfg.cosine_period is not None else steps_per_epoch
    sched = replace(cfg, cosine_period=period)

    rng = np.random.default_rng(cfg.seed)
    log: dict = {"steps": [], "epochs": []}
    t = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            x = data.images[order[start : start + cfg.batch_size]]
            restart = is_restart(t, sched)
            if restart:
                state.reset()
            lr = cosine_lr(t, sched)

            z_t = g_float.forward(x)
            trace = student.forward(x)
            loss, gz = _loss_and_grad(z_t, trace.logits, cfg.loss_gamma)
            grads = student.backward(trace, gz)
            adam_step(state, trainables, grads, lr, cfg)

            log["steps"].append(
                {"step": t, "lr": lr, "loss": loss, "restart": bool(restart)})
            epoch_losses.append(loss)
            t += 1
        log["epochs"].append(
            {"epoch": epoch, "mean_loss": float(np.mean(epoch_losses))})
    return params, scales, log
