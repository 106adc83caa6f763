"""Latent objective terms, token cross-entropy, and their analytic gradients.

All batch arguments are 2-D arrays with one row per supervised latent step.
Each ``*_grad`` function returns gradients of the corresponding loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ltt import LttParams, SparseCode


@dataclass(frozen=True)
class LossBreakdown:
    fvu: float
    skip: float
    ghost: float
    token_ce: float
    total: float
    lambdas: tuple[float, float, float]

    def as_dict(self) -> dict[str, float]:
        return {"fvu": self.fvu, "skip": self.skip, "ghost": self.ghost, "token_ce": self.token_ce, "total": self.total}


def target_variance(z_star: np.ndarray, per_dimension: bool = False):
    var = np.var(z_star, axis=0)
    return var if per_dimension else float(var.mean())


def fvu_loss(z_hat: np.ndarray, z_star: np.ndarray, per_dimension: bool = False) -> float:
    if z_star.shape[0] < 2:
        raise ValueError("FVU needs a batch of at least two targets")
    var = target_variance(z_star, per_dimension)
    if np.any(np.asarray(var) <= 0):
        raise ValueError("degenerate batch: target variance is zero")
    sq = (z_hat - z_star) ** 2
    if per_dimension:
        return float(np.mean(sq.mean(axis=0) / var))
    return float(sq.mean() / var)


def fvu_grad(z_hat: np.ndarray, z_star: np.ndarray, per_dimension: bool = False) -> np.ndarray:
    var = target_variance(z_star, per_dimension)
    return 2.0 * (z_hat - z_star) / (z_hat.size * var)


def skip_residual(H: np.ndarray, z_star: np.ndarray, params: LttParams) -> np.ndarray:
    return H @ params.W_skip.T + params.b_dec - z_star


def skip_loss(H: np.ndarray, z_star: np.ndarray, params: LttParams) -> float:
    res = skip_residual(H, z_star, params)
    return float(np.sum(res**2) / H.shape[0])


def skip_grad(H: np.ndarray, z_star: np.ndarray, params: LttParams) -> dict[str, np.ndarray]:
    g = 2.0 * skip_residual(H, z_star, params) / H.shape[0]
    return {"W_skip": g.T @ H, "b_dec": g.sum(axis=0), "H": g @ params.W_skip}


def _ghost_acts(preacts: np.ndarray, dead_mask: np.ndarray, params: LttParams) -> np.ndarray:
    dead = np.asarray(dead_mask, dtype=bool)
    if dead.shape != (params.d_feat,):
        raise ValueError(f"dead mask has length {dead.shape}, expected {params.d_feat}")
    return np.where((preacts > 0) & dead, preacts, 0.0)


def ghost_loss(preacts: np.ndarray, dead_mask, residual: np.ndarray, params: LttParams) -> float:
    """Decode the dead features' ReLU activations (no Top-k) onto the frozen residual."""
    A = _ghost_acts(preacts, dead_mask, params)
    diff = A @ params.W_dec.T - residual
    return float(np.sum(diff**2) / preacts.shape[0])


def ghost_grad(preacts: np.ndarray, centered: np.ndarray, dead_mask, residual: np.ndarray, params: LttParams):
    """Gradients of the ghost term.

    ``centered`` is ``h - mu`` for each row and is treated as a constant along
    with ``residual``: nothing flows back into the backbone or the main path.
    """
    A = _ghost_acts(preacts, dead_mask, params)
    g = 2.0 * (A @ params.W_dec.T - residual) / preacts.shape[0]
    dA = np.where(A > 0, g @ params.W_dec, 0.0)
    return {"W_dec": g.T @ A, "W_enc": dA.T @ centered, "b_enc": dA.sum(axis=0)}


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def token_ce_loss(logits: np.ndarray, targets) -> float:
    logits = np.atleast_2d(logits)
    targets = np.atleast_1d(np.asarray(targets))
    if np.any(targets >= logits.shape[-1]) or np.any(targets < 0):
        raise ValueError("target token outside vocabulary")
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(targets)), targets].mean())


def token_ce_grad(logits: np.ndarray, targets) -> np.ndarray:
    squeeze = np.ndim(logits) == 1
    logits = np.atleast_2d(logits)
    targets = np.atleast_1d(np.asarray(targets))
    p = np.exp(log_softmax(logits))
    p[np.arange(len(targets)), targets] -= 1.0
    p /= len(targets)
    return p[0] if squeeze else p


def composite_loss(fvu: float, skip: float, ghost: float, token_ce: float,
                   lambda_skip: float, lambda_ghost: float, lambda_tok: float) -> LossBreakdown:
    if min(lambda_skip, lambda_ghost, lambda_tok) < 0:
        raise ValueError("loss weights must be non-negative")
    total = fvu + lambda_skip * skip + lambda_ghost * ghost + lambda_tok * token_ce
    return LossBreakdown(fvu, skip, ghost, token_ce, total, (lambda_skip, lambda_ghost, lambda_tok))


def backward_through_topk(grad_s: np.ndarray, code: SparseCode, mode: str = "masked") -> np.ndarray:
    """Straight-through gradient from the sparse code to the encoder pre-activations.

    ``masked`` passes the gradient only through retained entries; ``passthrough``
    ignores the Top-k selection and keeps only the ReLU gate.
    """
    if mode == "masked":
        keep = np.zeros(grad_s.shape, dtype=bool)
        keep[code.active_indices] = True
    elif mode == "passthrough":
        keep = code.preacts > 0
    else:
        raise ValueError(f"unknown STE mode {mode!r}")
    return np.where(keep, grad_s, 0.0)
