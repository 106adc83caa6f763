"""Latent Transition Transcoder.

Predicts the next latent from a backbone hidden state ``h`` as the sum of a
bias-free linear transport path and a Top-k sparse innovation path::

    s     = TopK(relu(W_enc (h - mu) + b_enc))
    z_hat = W_skip h + W_dec s + b_dec
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .numerics import Rng, gaussian_init, orthogonal_init

log = logging.getLogger(__name__)

MIN_COLUMN_NORM = 1e-12


@dataclass
class LttParams:
    W_enc: np.ndarray  # F x d
    b_enc: np.ndarray  # F
    W_dec: np.ndarray  # d x F
    b_dec: np.ndarray  # d
    W_skip: np.ndarray  # d x d
    mu: np.ndarray  # d, frozen calibration mean
    k: int
    temperature: float = 1.0  # kept for completeness; identity at 1.0

    @property
    def d_model(self) -> int:
        return self.W_skip.shape[0]

    @property
    def d_feat(self) -> int:
        return self.W_enc.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "W_enc": self.W_enc,
            "b_enc": self.b_enc,
            "W_dec": self.W_dec,
            "b_dec": self.b_dec,
            "W_skip": self.W_skip,
            "mu": self.mu,
        }

    def copy(self) -> "LttParams":
        return LttParams(**{k: v.copy() for k, v in self.tensors().items()}, k=self.k, temperature=self.temperature)


@dataclass(frozen=True)
class CalibrationStats:
    hidden_mean: np.ndarray
    target_mean: np.ndarray
    embed_variance: float


@dataclass
class SparseCode:
    active_indices: np.ndarray  # sorted feature ids
    active_values: np.ndarray  # strictly positive
    preacts: np.ndarray  # full pre-ReLU encoder output

    @property
    def k_eff(self) -> int:
        return len(self.active_indices)

    def dense(self) -> np.ndarray:
        s = np.zeros_like(self.preacts)
        s[self.active_indices] = self.active_values
        return s

    def as_dict(self) -> dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.active_indices, self.active_values)}


def estimate_calibration_stats(hidden_samples, target_samples, embed_variance: float = 1.0) -> CalibrationStats:
    H = np.asarray(hidden_samples, dtype=np.float64)
    Z = np.asarray(target_samples, dtype=np.float64)
    if H.size == 0 or Z.size == 0:
        raise ValueError("calibration needs at least one hidden and one target sample")
    H = H.reshape(-1, H.shape[-1])
    Z = Z.reshape(-1, Z.shape[-1])
    return CalibrationStats(H.mean(axis=0), Z.mean(axis=0), float(embed_variance))


def init_params(
    d_model: int,
    alpha: int,
    k: int,
    calib: CalibrationStats,
    rng: Rng,
    b_dec_init: str = "target",
) -> LttParams:
    if alpha < 1:
        raise ValueError("expansion factor must be >= 1")
    d_feat = alpha * d_model
    if not 0 <= k <= d_feat:
        raise ValueError(f"k={k} must lie in [0, {d_feat}]")
    W_dec = gaussian_init(d_model, d_feat, 1.0, rng)
    W_dec /= np.linalg.norm(W_dec, axis=0, keepdims=True)
    if b_dec_init == "target":
        b_dec = calib.target_mean.copy()
    elif b_dec_init == "hidden":
        b_dec = calib.hidden_mean.copy()
    else:
        raise ValueError(f"unknown b_dec_init {b_dec_init!r}")
    return LttParams(
        W_enc=orthogonal_init(d_feat, d_model, rng),
        b_enc=np.zeros(d_feat),
        W_dec=W_dec,
        b_dec=b_dec,
        W_skip=np.zeros((d_model, d_model)),
        mu=calib.hidden_mean.copy(),
        k=k,
    )


def encode_preacts(params: LttParams, h: np.ndarray) -> np.ndarray:
    return (h - params.mu) @ params.W_enc.T + params.b_enc


def topk_mask(preacts: np.ndarray, k: int | None) -> np.ndarray:
    """Boolean mask of retained entries along the last axis.

    Keeps the ``k`` largest strictly positive entries, lowest index first on
    ties. ``k=None`` keeps every positive entry (dense ReLU).
    """
    pre = np.atleast_2d(preacts)
    positive = pre > 0
    F = pre.shape[-1]
    if k is None or k >= F:
        mask = positive
    elif k <= 0:
        mask = np.zeros_like(positive)
    else:
        relu = np.where(positive, pre, 0.0)
        kth = np.partition(relu, F - k, axis=-1)[..., F - k : F - k + 1]
        above = relu > kth
        ties = relu == kth
        room = k - above.sum(axis=-1, keepdims=True)
        mask = (above | (ties & (np.cumsum(ties, axis=-1) <= room))) & positive
    return mask.reshape(np.shape(preacts))


def topk_relu(preacts: np.ndarray, k: int | None) -> SparseCode:
    if k is not None and k < 0:
        raise ValueError("k must be >= 0")
    pre = np.asarray(preacts, dtype=np.float64)
    idx = np.flatnonzero(topk_mask(pre, k))
    return SparseCode(idx, pre[idx].copy(), pre)


def dense_mode(dense) -> str | None:
    """Normalize a ``dense`` flag: False/None -> None, True -> "linear", or "linear"/"relu"."""
    if dense is None or dense is False:
        return None
    if dense is True:
        return "linear"
    if dense in ("linear", "relu"):
        return dense
    raise ValueError(f"unknown dense mode {dense!r}")


def dense_code(preacts: np.ndarray) -> SparseCode:
    """Every feature kept with its raw pre-activation (the no-bottleneck linear path).

    Values here may be zero or negative, unlike a Top-k code.
    """
    pre = np.asarray(preacts, dtype=np.float64)
    return SparseCode(np.arange(pre.size), pre.copy(), pre)


def decode(params: LttParams, h: np.ndarray, code: SparseCode) -> np.ndarray:
    """Transport path plus the decoded innovation of ``code``."""
    innovation = params.W_dec[:, code.active_indices] @ code.active_values
    return params.W_skip @ h + innovation + params.b_dec


def forward(params: LttParams, h: np.ndarray, k: int | None = None, dense=False):
    """Single-vector forward; ``k`` defaults to the trained budget.

    ``dense`` selects the ablation without a bottleneck: ``"linear"`` (or
    True) keeps every pre-activation as is, ``"relu"`` keeps every positive one.
    ``k`` is ignored in both cases.
    """
    mode = dense_mode(dense)
    pre = encode_preacts(params, h)
    if mode == "linear":
        code = dense_code(pre)
    else:
        code = topk_relu(pre, None if mode == "relu" else (params.k if k is None else k))
    return decode(params, h, code), code


@dataclass
class BatchCache:
    H: np.ndarray  # N x d
    centered: np.ndarray  # N x d
    pre: np.ndarray  # N x F
    mask: np.ndarray  # N x F retained entries
    S: np.ndarray  # N x F dense sparse code
    z_hat: np.ndarray  # N x d


def forward_batch(params: LttParams, H: np.ndarray, k: int | None = None, dense=False) -> BatchCache:
    mode = dense_mode(dense)
    k = params.k if k is None else k
    centered = H - params.mu
    pre = centered @ params.W_enc.T + params.b_enc
    if mode == "linear":
        mask = np.ones(pre.shape, dtype=bool)
    else:
        mask = topk_mask(pre, None if mode == "relu" else k)
    S = np.where(mask, pre, 0.0)
    z_hat = H @ params.W_skip.T + S @ params.W_dec.T + params.b_dec
    return BatchCache(H, centered, pre, mask, S, z_hat)


def project_decoder_columns(params: LttParams, rng: Rng | None = None) -> list[int]:
    """Rescale every decoder column to unit norm in place.

    Columns with vanishing norm are redrawn from a Gaussian; their indices are
    returned and logged.
    """
    norms = np.linalg.norm(params.W_dec, axis=0)
    bad = np.flatnonzero(norms < MIN_COLUMN_NORM)
    if bad.size:
        rng = rng or Rng(0)
        params.W_dec[:, bad] = rng.normal((params.d_model, bad.size))
        norms[bad] = np.linalg.norm(params.W_dec[:, bad], axis=0)
        log.warning("re-initialized %d degenerate decoder columns: %s", bad.size, bad.tolist())
    # columns already unit to rounding are left alone so projection is exactly idempotent
    off = np.abs(norms - 1.0) > 4 * np.finfo(np.float64).eps
    params.W_dec[:, off] /= norms[off]
    return bad.tolist()


def remove_parallel_decoder_grad(W_dec: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Drop the component of each column gradient along its (unit) column."""
    return grad - W_dec * np.sum(W_dec * grad, axis=0, keepdims=True)
