"""Snow-mask training losses and their uncertainty-weighted combination.

The five terms, in order: intensity consistency (BCE against the final
pseudo-label), reflectivity discrimination (same BCE, optionally scoped to
the pixels the reflectivity test decided), edge suppression (BCE-with-logits
against 0 on edge pixels), density-aware sparsity (a detached statistical
prior) and threshold penalty (smoothed physical-violation penalty).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nnet import autograd as ag
from .nnet.autograd import Tensor
from .pseudolabel import PseudoLabelConfig, intensity_threshold

PROB_EPS = 1e-7
DIST_FLOOR_M = 1e-3
N_TERMS = 5
TERM_NAMES = ("intensity", "reflectivity", "edge", "sparsity", "penalty")

FIXED = "fixed"
LEARNED = "learned"


@dataclass(frozen=True)
class LossConfig:
    lambdas: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    d_max: float = 71.235
    s_I: float = 1.0
    s_d: float = 1.0
    s_z: float = 1.0
    sparsity_k: int = 8
    uncertainty_mode: str = FIXED
    uncertainty_start_epoch: int = 0
    reflectivity_scoped: bool = False
    pseudolabel: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)

    def __post_init__(self):
        lam = tuple(float(v) for v in self.lambdas)
        if len(lam) != N_TERMS or min(lam) < 0 or max(lam) <= 0:
            raise ValueError("need five non-negative lambdas with at least one positive")
        object.__setattr__(self, "lambdas", lam)
        if min(self.s_I, self.s_d, self.s_z) <= 0:
            raise ValueError("sigmoid scales must be positive")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("penalty coefficients must be non-negative")
        if self.sparsity_k < 1:
            raise ValueError("sparsity_k must be >= 1")
        if self.uncertainty_mode not in (FIXED, LEARNED):
            raise ValueError(f"uncertainty_mode must be {FIXED!r} or {LEARNED!r}")


def _masked_mean(values: Tensor, weights) -> Tensor:
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total == 0:
        return ag.Tensor(0.0)
    return ag.tsum(values * w) * (1.0 / total)


def bce(pred_probs, target, valid=None) -> Tensor:
    """Mean binary cross-entropy over ``valid`` entries, probabilities clamped to [eps, 1-eps]."""
    pred_probs = ag.as_tensor(pred_probs)
    target = np.asarray(target, dtype=np.float64)
    if pred_probs.shape != target.shape:
        raise ValueError(f"prediction shape {pred_probs.shape} != target shape {target.shape}")
    valid = np.ones(target.shape) if valid is None else np.asarray(valid, dtype=np.float64)
    if valid.shape != target.shape:
        raise ValueError(f"valid mask shape {valid.shape} != target shape {target.shape}")
    p = ag.clip(pred_probs, PROB_EPS, 1.0 - PROB_EPS)
    per = -(ag.log(p) * target + ag.log(1.0 - p) * (1.0 - target))
    return _masked_mean(per, valid)


def intensity_loss(pred_probs, target, valid=None) -> Tensor:
    return bce(pred_probs, target, valid)


def reflectivity_loss(pred_probs, target, valid=None, region=None) -> Tensor:
    """Same BCE as :func:`intensity_loss`; ``region`` narrows it to reflectivity-decided pixels."""
    mask = np.ones(np.shape(target)) if valid is None else np.asarray(valid, dtype=np.float64)
    if region is not None:
        mask = mask * np.asarray(region, dtype=np.float64)
    return bce(pred_probs, target, mask)


def edge_loss(pred_logits, edge_mask) -> Tensor:
    """Mean ``softplus(logit)`` over edge pixels (BCE-with-logits against 0)."""
    pred_logits = ag.as_tensor(pred_logits)
    edge_mask = np.asarray(edge_mask, dtype=np.float64)
    if pred_logits.shape != edge_mask.shape:
        raise ValueError(f"logit shape {pred_logits.shape} != edge mask shape {edge_mask.shape}")
    return _masked_mean(ag.softplus(pred_logits), edge_mask)


def sparsity_loss(pred_probs_detached, candidates, knn_dists) -> Tensor:
    """``(1/N) sum w_i / dist_k(p_i)`` over candidate points.

    ``knn_dists`` is the mean k-NN distance per point (floored at 1 mm). The
    weights are read as plain values, so the result carries no gradient.
    """
    w = np.asarray(ag.as_tensor(pred_probs_detached).data, dtype=np.float64).reshape(-1)
    cand = np.asarray(candidates, dtype=bool).reshape(-1)
    dist = np.asarray(knn_dists, dtype=np.float64).reshape(-1)
    n = int(cand.sum())
    if n == 0:
        return ag.Tensor(0.0)
    d = np.maximum(dist[cand], DIST_FLOOR_M)
    return ag.Tensor(float(np.sum(w[cand] / d) / n))


def violations(intensity, range_m, z, mount_height_m, cfg: LossConfig):
    """Signed violation margins ``(dI, dd, dz)``; positive means the rule is broken."""
    intensity = np.asarray(intensity, dtype=np.float64)
    rng = np.maximum(np.asarray(range_m, dtype=np.float64), 1e-9)
    z = np.asarray(z, dtype=np.float64)
    d_I = intensity - intensity_threshold(rng, cfg.pseudolabel)
    d_d = rng - cfg.d_max
    d_z = -mount_height_m - z
    return d_I, d_d, d_z


def penalty_loss(pred_probs, intensity, range_m, z, mount_height_m, cfg: LossConfig,
                 valid=None) -> Tensor:
    """Mean over valid points of ``w_p * (alpha*v_I + beta*v_d + gamma*v_z)``.

    Each violation enters as ``sigmoid(margin/scale) - 1/2`` when the margin
    is non-negative and 0 otherwise, so rule-abiding points cost nothing and
    the gradient only ever pushes violating predictions down.
    """
    pred = ag.as_tensor(pred_probs)
    d_I, d_d, d_z = violations(intensity, range_m, z, mount_height_m, cfg)
    per = (cfg.alpha * ag.hinge_sigmoid(d_I / cfg.s_I).data
           + cfg.beta * ag.hinge_sigmoid(d_d / cfg.s_d).data
           + cfg.gamma * ag.hinge_sigmoid(d_z / cfg.s_z).data)
    if per.shape != pred.shape:
        raise ValueError(f"geometry shape {per.shape} != prediction shape {pred.shape}")
    mask = np.ones(pred.shape) if valid is None else np.asarray(valid, dtype=np.float64)
    return _masked_mean(pred * per, mask)


def total_loss(terms, lambdas, log_sigma=None) -> Tensor:
    """``sum_i lambda_i * (L_i / (2 exp(s_i)) + s_i / 2)``.

    ``log_sigma`` is a length-5 tensor (learned mode) or None (all zero).
    Terms with ``lambda_i == 0`` are skipped entirely.
    """
    total = ag.Tensor(0.0)
    for i, (lam, term) in enumerate(zip(lambdas, terms)):
        if lam == 0:
            continue
        term = ag.as_tensor(term)
        if log_sigma is None:
            total = total + term * (0.5 * lam)
        else:
            s = ag.take(log_sigma, [i]).reshape(())
            total = total + (term / (ag.exp(s) * 2.0) + s * 0.5) * lam
    return total
