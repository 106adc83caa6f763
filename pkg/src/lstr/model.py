"""The full LSTR model and the batched teacher-forced loss with hand-written backprop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import ltt
from .config import TrainConfig
from .losses import (
    LossBreakdown,
    composite_loss,
    fvu_grad,
    fvu_loss,
    ghost_grad,
    ghost_loss,
    skip_grad,
    skip_loss,
    token_ce_grad,
    token_ce_loss,
)
from .numerics import Rng
from .taskgen import VOCAB, Problem, Vocab
from .trajectory import (
    LatentTrajectory,
    TrainingSequence,
    build_training_sequence,
    build_trajectory,
    embedding_variance,
    standardize_targets,
)

BACKBONE_KEYS = ("embed", "W_x", "U", "b", "head_W", "head_b")
LTT_KEYS = ("W_enc", "b_enc", "W_dec", "b_dec", "W_skip")


@dataclass
class LstrModel:
    backbone: bb.BackboneParams
    ltt: ltt.LttParams
    target_embed: np.ndarray  # frozen snapshot used to build latent targets
    embed_variance: float | np.ndarray
    r: int
    dense: bool | str = False  # "w/o Sparse" variant: False, "linear" or "relu"
    vocab: Vocab = field(default_factory=lambda: VOCAB)

    def trajectory(self, p: Problem) -> LatentTrajectory:
        traj = build_trajectory(p.reasoning_tokens, self.target_embed, self.r)
        return standardize_targets(traj, self.embed_variance)

    def params(self) -> dict[str, np.ndarray]:
        """All trainable tensors by name (live references)."""
        out = {k: getattr(self.backbone, k) for k in BACKBONE_KEYS}
        out.update({k: getattr(self.ltt, k) for k in LTT_KEYS})
        return out

    def copy(self) -> "LstrModel":
        return LstrModel(
            self.backbone.copy(),
            self.ltt.copy(),
            self.target_embed.copy(),
            np.copy(self.embed_variance) if np.ndim(self.embed_variance) else self.embed_variance,
            self.r,
            self.dense,
            self.vocab,
        )


@dataclass
class Batch:
    tokens: np.ndarray  # B x T token ids, -1 at latent or padded positions
    latent_inputs: np.ndarray  # B x T x d, nonzero at latent positions
    lat_pos: tuple[np.ndarray, np.ndarray]  # (b, t) positions with a latent target
    lat_targets: np.ndarray  # N x d
    tok_pos: tuple[np.ndarray, np.ndarray]
    tok_targets: np.ndarray  # M
    slot_mask: np.ndarray  # B x T, True where a latent is fed in


def make_batch(seqs: list[TrainingSequence], d_model: int) -> Batch:
    B = len(seqs)
    T = max(s.length for s in seqs)
    tokens = np.full((B, T), -1, dtype=np.int64)
    lat_in = np.zeros((B, T, d_model))
    slot_mask = np.zeros((B, T), dtype=bool)
    lb, lt, lz, tb, tt, ty = [], [], [], [], [], []
    for i, s in enumerate(seqs):
        n = s.length
        tokens[i, :n] = s.input_tokens
        slots = np.flatnonzero(s.latent_slot >= 0)
        lat_in[i, slots] = s.latents[s.latent_slot[slots]]
        slot_mask[i, slots] = True
        ls = np.flatnonzero(s.latent_target >= 0)
        lb.append(np.full(len(ls), i))
        lt.append(ls)
        lz.append(s.latents[s.latent_target[ls]])
        ts = np.flatnonzero(s.token_target >= 0)
        tb.append(np.full(len(ts), i))
        tt.append(ts)
        ty.append(s.token_target[ts])
    return Batch(
        tokens,
        lat_in,
        (np.concatenate(lb), np.concatenate(lt)),
        np.concatenate(lz),
        (np.concatenate(tb), np.concatenate(tt)),
        np.concatenate(ty),
        slot_mask,
    )


@dataclass
class BatchResult:
    loss: LossBreakdown
    grads: dict[str, np.ndarray] | None
    mask: np.ndarray  # N x F retained features
    ghost_relu: np.ndarray  # N x F positive pre-activations of dead features
    H_lat: np.ndarray
    residual: np.ndarray


def batch_loss(
    model: LstrModel,
    batch: Batch,
    cfg: TrainConfig,
    dead_mask: np.ndarray | None = None,
    want_grads: bool = True,
    ghost_constants: tuple[np.ndarray, np.ndarray] | None = None,
) -> BatchResult:
    """Teacher-forced composite loss over a batch, optionally with gradients.

    The ghost term sees ``h - mu`` and the residual ``z* - z_hat`` as
    constants. ``ghost_constants`` pins them to given values, which lets a
    finite-difference check perturb parameters without moving them.
    """
    p = model.backbone
    q = model.ltt
    d = p.d_model
    tok_mask = batch.tokens >= 0
    X = np.where(tok_mask[..., None], p.embed[np.maximum(batch.tokens, 0)], batch.latent_inputs)
    cache = bb.forward_sequence(p, X)

    H_lat = cache.H[batch.lat_pos]
    Z = batch.lat_targets
    lc = ltt.forward_batch(q, H_lat, dense=model.dense)
    fvu = fvu_loss(lc.z_hat, Z, cfg.fvu_per_dimension)
    lam_s = 0.0 if cfg.disable_skip else cfg.lambda_skip
    skip = skip_loss(H_lat, Z, q) if lam_s > 0 else 0.0

    if ghost_constants is None:
        centered_c, residual = lc.centered, Z - lc.z_hat
    else:
        centered_c, residual = ghost_constants
    use_ghost = dead_mask is not None and cfg.lambda_ghost > 0 and np.any(dead_mask)
    if use_ghost:
        pre_g = centered_c @ q.W_enc.T + q.b_enc
        ghost = ghost_loss(pre_g, dead_mask, residual, q)
        ghost_relu = (pre_g > 0) & dead_mask
    else:
        ghost, ghost_relu = 0.0, np.zeros_like(lc.mask)

    H_tok = cache.H[batch.tok_pos]
    logits = H_tok @ p.head_W + p.head_b
    ce = token_ce_loss(logits, batch.tok_targets)
    loss = composite_loss(fvu, skip, ghost, ce, lam_s, cfg.lambda_ghost if use_ghost else 0.0, cfg.lambda_tok)
    if not want_grads:
        return BatchResult(loss, None, lc.mask, ghost_relu, H_lat, residual)

    grads = {k: np.zeros_like(v) for k, v in model.params().items()}
    dH = np.zeros_like(cache.H)

    # main latent path: FVU through the LTT with a straight-through Top-k
    g = fvu_grad(lc.z_hat, Z, cfg.fvu_per_dimension)
    grads["W_skip"] += g.T @ H_lat
    grads["b_dec"] += g.sum(axis=0)
    grads["W_dec"] += g.T @ lc.S
    dS = g @ q.W_dec
    keep = lc.mask if (cfg.ste_mode == "masked" or ltt.dense_mode(model.dense) == "linear") else lc.pre > 0
    dpre = np.where(keep, dS, 0.0)
    grads["W_enc"] += dpre.T @ lc.centered
    grads["b_enc"] += dpre.sum(axis=0)
    dH_lat = g @ q.W_skip + dpre @ q.W_enc

    if lam_s > 0:
        sg = skip_grad(H_lat, Z, q)
        grads["W_skip"] += lam_s * sg["W_skip"]
        grads["b_dec"] += lam_s * sg["b_dec"]
        dH_lat += lam_s * sg["H"]
    if use_ghost:
        gg = ghost_grad(pre_g, centered_c, dead_mask, residual, q)
        for key in ("W_dec", "W_enc", "b_enc"):
            grads[key] += cfg.lambda_ghost * gg[key]
    dH[batch.lat_pos] += dH_lat

    gl = cfg.lambda_tok * token_ce_grad(logits, batch.tok_targets)
    grads["head_W"] += H_tok.T @ gl
    grads["head_b"] += gl.sum(axis=0)
    dH[batch.tok_pos] += gl @ p.head_W.T

    bgrads, dX = bb.backward_sequence(p, cache, dH)
    for key, val in bgrads.items():
        grads[key] += val
    np.add.at(grads["embed"], batch.tokens[tok_mask], dX[tok_mask])
    if cfg.disable_skip:
        grads["W_skip"][...] = 0.0
    return BatchResult(loss, grads, lc.mask, ghost_relu, H_lat, residual)


def self_fed_inputs(model: LstrModel, batch: Batch, rows: np.ndarray) -> np.ndarray:
    """Latent inputs with the chosen ``rows`` switched to the model's own predictions.

    Runs the backbone forward once and feeds each predicted latent back into
    the next slot, as a rollout would, while questions and answers stay
    teacher-forced. The result is used as a constant input, so no gradient
    flows through the feedback.
    """
    p, q = model.backbone, model.ltt
    B, T = batch.tokens.shape
    d = p.d_model
    slot = batch.slot_mask & np.isin(np.arange(B), rows)[:, None]
    out = batch.latent_inputs.copy()
    emb = p.embed[np.maximum(batch.tokens, 0)]
    h = np.zeros((B, d))
    z_prev = np.zeros((B, d))
    for t in range(T):
        x = np.where((batch.tokens[:, t] >= 0)[:, None], emb[:, t], batch.latent_inputs[:, t])
        if slot[:, t].any():
            out[slot[:, t], t] = z_prev[slot[:, t]]
            x = np.where(slot[:, t][:, None], z_prev, x)
        h = bb.step(p, h, x)
        if t + 1 < T and slot[:, t + 1].any():
            z_prev = ltt.forward_batch(q, h, dense=model.dense).z_hat
    return out


def teacher_forced_states(model: LstrModel, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Hidden states at latent-target positions and the matching targets."""
    p = model.backbone
    tok_mask = batch.tokens >= 0
    X = np.where(tok_mask[..., None], p.embed[np.maximum(batch.tokens, 0)], batch.latent_inputs)
    H = bb.forward_sequence(p, X).H
    return H[batch.lat_pos], batch.lat_targets


def build_model(problems: list[Problem], cfg: TrainConfig, rng: Rng, vocab: Vocab = VOCAB) -> LstrModel:
    """Initialize the backbone, freeze target statistics, calibrate and initialize the LTT."""
    backbone = bb.init_backbone(len(vocab), cfg.d_model, rng, cfg.embed_std)
    target_embed = backbone.embed.copy()
    var = embedding_variance(target_embed, cfg.standardize_per_dimension)
    placeholder = ltt.LttParams(
        np.zeros((cfg.d_feat, cfg.d_model)), np.zeros(cfg.d_feat), np.zeros((cfg.d_model, cfg.d_feat)),
        np.zeros(cfg.d_model), np.zeros((cfg.d_model, cfg.d_model)), np.zeros(cfg.d_model), cfg.k,
    )
    dense = cfg.dense_activation if cfg.disable_sparse else False
    model = LstrModel(backbone, placeholder, target_embed, var, cfg.r, dense, vocab)
    calib_set = problems[: cfg.calibration_size]
    seq_rng = rng.spawn(1)
    seqs = [build_training_sequence(p, model.trajectory(p), seq_rng, vocab) for p in calib_set]
    H, Z = teacher_forced_states(model, make_batch(seqs, cfg.d_model))
    stats = ltt.estimate_calibration_stats(H, Z, float(np.mean(var)))
    model.ltt = ltt.init_params(cfg.d_model, cfg.alpha, cfg.k, stats, rng, cfg.b_dec_init)
    return model
