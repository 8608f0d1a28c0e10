"""Cross-entropy, the paired distillation terms, and the distillation weight."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import LOG_FLOOR, Tensor

CE_TARGETS = ("both-branches", "fused-only")


@dataclass(frozen=True)
class LossConfig:
    """Distillation weight mode plus softmax temperature.

    Each KL term trains only the branch named first in it; the other
    branch's logits enter that term as constants.
    """

    alpha_mode: str = "fixed"
    alpha: float = 1.0
    alpha_max: float = 1.0
    tau: float = 10.0
    temperature: float = 1.0
    ce_target: str = "both-branches"
    bkd: bool = True

    def __post_init__(self):
        if self.alpha_mode not in ("fixed", "dynamic"):
            raise ConfigError(f"unknown alpha_mode {self.alpha_mode!r}", field="loss.alpha_mode")
        if self.alpha < 0 or self.alpha_max < 0:
            raise ConfigError("distillation weights must be nonnegative", field="loss.alpha")
        if self.tau <= 0:
            raise ConfigError("tau must be positive", field="loss.tau")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive", field="loss.temperature")
        if self.ce_target not in CE_TARGETS:
            raise ConfigError(f"ce_target must be one of {CE_TARGETS}", field="loss.ce_target")

    def alpha_at(self, t: float) -> float:
        if not self.bkd:
            return 0.0
        if self.alpha_mode == "fixed":
            return self.alpha
        return alpha_schedule(t, self.alpha_max, self.tau)


def alpha_schedule(t: float, alpha_max: float, tau: float) -> float:
    """``alpha_max * (1 - exp(-t / tau))``; zero at ``t = 0``."""
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}", field="loss.tau")
    if t < 0:
        raise ContractError(f"alpha_schedule: t must be nonnegative, got {t}")
    return alpha_max * -math.expm1(-t / tau)


def _onehot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or (labels.size and (labels.min() < 0 or labels.max() >= n_classes)):
        raise ContractError(f"labels must be class indices in [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels.astype(int)] = 1.0
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]`` with a 1e-12 log floor."""
    logits = T.as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (batch, C), got {logits.shape}")
    onehot = _onehot(labels, logits.shape[1])
    if onehot.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: {onehot.shape[0]} labels for logits {logits.shape}")
    logp = T.log(T.softmax(logits, axis=1), floor=LOG_FLOOR)
    return -T.mean(T.sum_(logp * Tensor(onehot), axis=1))


def kl_divergence(p_logits: Tensor, q_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Batch mean of ``sum_c p_c (log p_c - log q_c)`` over temperature softmaxes."""
    p_logits, q_logits = T.as_tensor(p_logits), T.as_tensor(q_logits)
    if p_logits.shape != q_logits.shape or p_logits.ndim != 2:
        raise ShapeError(f"kl_divergence: incompatible shapes {p_logits.shape} and {q_logits.shape}")
    inv_t = 1.0 / temperature
    if temperature != 1.0:
        p_logits, q_logits = p_logits * inv_t, q_logits * inv_t
    p = T.softmax(p_logits, axis=1)
    q = T.softmax(q_logits, axis=1)
    diff = T.log(p, floor=LOG_FLOOR) - T.log(q, floor=LOG_FLOOR)
    return T.mean(T.sum_(p * diff, axis=1))


@dataclass
class BKDLoss:
    total: Tensor
    ce: float
    kl_di: float
    kl_dw: float
    alpha: float


def bkd_loss(z_di: Tensor, z_dw: Tensor, labels, cfg: LossConfig, t: float = 0.0, *,
             z_fused: Tensor | None = None, di_active: bool = True, dw_active: bool = True) -> BKDLoss:
    """``CE + alpha_t (KL(z_di || sg z_dw) + KL(z_dw || sg z_di))``.

    CE is averaged over the active branches (or taken on ``z_fused`` when
    ``cfg.ce_target == "fused-only"``). When ``alpha_t == 0`` the KL terms are
    evaluated on detached logits for logging only and never enter the graph.
    """
    z_di, z_dw = T.as_tensor(z_di), T.as_tensor(z_dw)
    if z_di.shape != z_dw.shape or z_di.ndim != 2:
        raise ShapeError(f"bkd_loss: incompatible shapes {z_di.shape} and {z_dw.shape}")
    alpha = cfg.alpha_at(t)
    shared = cfg.temperature == 1.0
    if shared:
        # one softmax/log per branch, reused by its CE and both KL terms
        onehot = Tensor(_onehot(labels, z_di.shape[1]))
        p_di, p_dw = T.softmax(z_di, axis=1), T.softmax(z_dw, axis=1)
        lp_di, lp_dw = T.log(p_di, floor=LOG_FLOOR), T.log(p_dw, floor=LOG_FLOOR)

    if cfg.ce_target == "fused-only":
        if z_fused is None:
            raise ContractError("bkd_loss: fused-only CE needs z_fused")
        ce = cross_entropy(z_fused, labels)
    else:
        terms = []
        if shared:
            if di_active:
                terms.append(-T.mean(T.sum_(lp_di * onehot, axis=1)))
            if dw_active:
                terms.append(-T.mean(T.sum_(lp_dw * onehot, axis=1)))
        else:
            if di_active:
                terms.append(cross_entropy(z_di, labels))
            if dw_active:
                terms.append(cross_entropy(z_dw, labels))
        if not terms:
            raise ContractError("bkd_loss: no active branch to supervise")
        ce = terms[0] if len(terms) == 1 else (terms[0] + terms[1]) * 0.5

    if shared:
        if alpha == 0.0:
            p_di, p_dw, lp_di, lp_dw = (v.detach() for v in (p_di, p_dw, lp_di, lp_dw))
        kl_di = T.mean(T.sum_(p_di * (lp_di - lp_dw.detach()), axis=1))
        kl_dw = T.mean(T.sum_(p_dw * (lp_dw - lp_di.detach()), axis=1))
    elif alpha == 0.0:
        kl_di = kl_divergence(z_di.detach(), z_dw.detach(), cfg.temperature)
        kl_dw = kl_divergence(z_dw.detach(), z_di.detach(), cfg.temperature)
    else:
        kl_di = kl_divergence(z_di, z_dw.detach(), cfg.temperature)
        kl_dw = kl_divergence(z_dw, z_di.detach(), cfg.temperature)
    total = ce if alpha == 0.0 else ce + (kl_di + kl_dw) * alpha
    return BKDLoss(total, ce.item(), kl_di.item(), kl_dw.item(), alpha)
