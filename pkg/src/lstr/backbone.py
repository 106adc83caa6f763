"""Single-layer gated recurrent backbone with hand-written backprop.

The cell has an update gate and a tanh candidate::

    z  = sigmoid(x W_xz + h U_z + b_z)
    c  = tanh(x W_xc + h U_c + b_c)
    h' = (1 - z) * h + z * c

Gate weights are stored stacked along the output axis: ``W_x`` is
``d x 2d`` with the update gate in the first ``d`` columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng, gaussian_init, orthogonal_init

HIDDEN_NORM_GUARD = 1e3


@dataclass
class BackboneParams:
    embed: np.ndarray  # V x d
    W_x: np.ndarray  # d x 2d
    U: np.ndarray  # d x 2d
    b: np.ndarray  # 2d
    head_W: np.ndarray  # d x V
    head_b: np.ndarray  # V

    @property
    def d_model(self) -> int:
        return self.embed.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "embed": self.embed,
            "W_x": self.W_x,
            "U": self.U,
            "b": self.b,
            "head_W": self.head_W,
            "head_b": self.head_b,
        }

    def copy(self) -> "BackboneParams":
        return BackboneParams(**{k: v.copy() for k, v in self.tensors().items()})


def init_backbone(vocab_size: int, d_model: int, rng: Rng, embed_std: float = 1.0) -> BackboneParams:
    d = d_model
    W_x = np.concatenate([orthogonal_init(d, d, rng), orthogonal_init(d, d, rng)], axis=1)
    U = np.concatenate([orthogonal_init(d, d, rng), orthogonal_init(d, d, rng)], axis=1)
    return BackboneParams(
        embed=gaussian_init(vocab_size, d, embed_std, rng),
        W_x=W_x,
        U=U,
        b=np.zeros(2 * d),
        head_W=gaussian_init(d, vocab_size, 1.0 / np.sqrt(d), rng),
        head_b=np.zeros(vocab_size),
    )


def embed(params: BackboneParams, token_id: int) -> np.ndarray:
    if not 0 <= token_id < params.vocab_size:
        raise IndexError(f"token id {token_id} outside vocabulary of size {params.vocab_size}")
    return params.embed[token_id]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def step(params: BackboneParams, h_prev: np.ndarray, x: np.ndarray) -> np.ndarray:
    d = params.d_model
    if h_prev.shape[-1] != d or x.shape[-1] != d:
        raise ValueError(f"expected vectors of size {d}")
    a = x @ params.W_x + h_prev @ params.U + params.b
    z = _sigmoid(a[..., :d])
    c = np.tanh(a[..., d:])
    return (1.0 - z) * h_prev + z * c


def lm_logits(params: BackboneParams, h: np.ndarray) -> np.ndarray:
    return h @ params.head_W + params.head_b


@dataclass
class SequenceCache:
    X: np.ndarray  # B x T x d inputs
    H_prev: np.ndarray  # B x T x d state entering each position
    Z: np.ndarray  # update gates
    C: np.ndarray  # candidates
    H: np.ndarray  # B x T x d outputs


def forward_sequence(params: BackboneParams, X: np.ndarray) -> SequenceCache:
    """Run the cell over a batch of input sequences ``X`` (B x T x d) from h=0."""
    B, T, d = X.shape
    XW = X @ params.W_x + params.b  # B x T x 2d, input part of both gates
    H_prev = np.empty((B, T, d))
    Z = np.empty((B, T, d))
    C = np.empty((B, T, d))
    H = np.empty((B, T, d))
    h = np.zeros((B, d))
    U = params.U
    for t in range(T):
        H_prev[:, t] = h
        a = XW[:, t] + h @ U
        z = _sigmoid(a[:, :d])
        c = np.tanh(a[:, d:])
        h = (1.0 - z) * h + z * c
        Z[:, t] = z
        C[:, t] = c
        H[:, t] = h
    return SequenceCache(X, H_prev, Z, C, H)


def backward_sequence(params: BackboneParams, cache: SequenceCache, dH: np.ndarray):
    """Backprop through time.

    ``dH`` holds the direct loss gradient at every output position. Returns
    ``(grads, dX)`` where ``grads`` has keys ``W_x``, ``U``, ``b``.
    """
    B, T, d = dH.shape
    dA = np.empty((B, T, 2 * d))
    UT = params.U.T
    carry = np.zeros((B, d))
    for t in range(T - 1, -1, -1):
        dh = dH[:, t] + carry
        z = cache.Z[:, t]
        c = cache.C[:, t]
        hp = cache.H_prev[:, t]
        da_z = dh * (c - hp) * z * (1.0 - z)
        da_c = dh * z * (1.0 - c * c)
        dA[:, t, :d] = da_z
        dA[:, t, d:] = da_c
        carry = dh * (1.0 - z) + dA[:, t] @ UT
    flatA = dA.reshape(B * T, 2 * d)
    grads = {
        "W_x": cache.X.reshape(B * T, d).T @ flatA,
        "U": cache.H_prev.reshape(B * T, d).T @ flatA,
        "b": flatA.sum(axis=0),
    }
    dX = dA @ params.W_x.T
    return grads, dX
