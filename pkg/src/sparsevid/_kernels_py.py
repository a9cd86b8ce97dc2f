"""Numpy reference implementation of the policy-gradient kernels."""
from __future__ import annotations

import numpy as np


def policy_logp(phi: np.ndarray, mask: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Log-softmax of ``phi @ theta`` over the allowed actions of each state."""
    logits = phi @ theta
    logits = np.where(mask, logits, -np.inf)
    top = logits.max(axis=1, keepdims=True)
    z = top + np.log(np.exp(logits - top).sum(axis=1, keepdims=True))
    return logits - z


def surrogate_grad(phi: np.ndarray, mask: np.ndarray, actions: np.ndarray, theta: np.ndarray,
                   old_logp: np.ndarray, adv: np.ndarray, weight: np.ndarray, eps: float,
                   kl_coef: float) -> tuple[float, float, np.ndarray]:
    """Weighted clipped surrogate, KL(old || new), and the gradient of
    ``surrogate - kl_coef * kl`` with respect to ``theta``."""
    S = phi.shape[0]
    logp = policy_logp(phi, mask, theta)
    p = np.where(mask, np.exp(logp), 0.0)
    rows = np.arange(S)
    ratio = np.exp(logp[rows, actions] - old_logp[rows, actions])
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    obj = float(np.sum(weight * np.minimum(ratio * adv, clipped * adv)))
    # The unclipped branch carries gradient only when it is the active minimum.
    active = np.where(adv >= 0, ratio <= 1.0 + eps, ratio >= 1.0 - eps)
    coef = np.where(active, weight * ratio * adv, 0.0)

    mean_phi = np.einsum("sa,sad->sd", p, phi)
    score = phi[rows, actions] - mean_phi
    p_old = np.where(mask, np.exp(old_logp), 0.0)
    safe_old = np.where(mask, old_logp, 0.0)
    safe_new = np.where(mask, logp, 0.0)
    kl = float(np.sum(weight * np.sum(p_old * (safe_old - safe_new), axis=1)))
    old_phi = np.einsum("sa,sad->sd", p_old, phi)
    grad = coef @ score - kl_coef * (weight @ (mean_phi - old_phi))
    return obj, kl, grad


def discounted_return(rewards: np.ndarray, gamma: float) -> float:
    total = 0.0
    scale = 1.0
    for r in rewards:
        total += scale * float(r)
        scale *= gamma
    return total
