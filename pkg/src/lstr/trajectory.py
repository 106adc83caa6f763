"""Compressed latent targets and supervised sequence assembly.

Reasoning tokens are cut into contiguous blocks of ``r`` tokens (the last one
may be shorter). Each block is pooled into one latent target with
``sum(e_j) / sqrt(r)`` and the targets are standardized by the embedding
variance measured once at backbone initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .numerics import Rng
from .taskgen import VOCAB, Problem, Vocab


@dataclass(frozen=True)
class LatentTrajectory:
    targets: np.ndarray  # L_c x d
    r: int
    blocks: tuple[tuple[int, ...], ...]  # source token indices per target
    block_tokens: tuple[tuple[int, ...], ...]  # token ids per target
    scale: float | np.ndarray = 1.0

    @property
    def length(self) -> int:
        return len(self.blocks)

    def unstandardized(self) -> np.ndarray:
        return self.targets * self.scale


def block_partition(reasoning_length: int, r: int) -> list[list[int]]:
    if r < 1:
        raise ValueError("compression ratio must be >= 1")
    return [list(range(s, min(s + r, reasoning_length))) for s in range(0, reasoning_length, r)]


def sqrt_pool(block_embeddings, r: int) -> np.ndarray:
    block = np.asarray(block_embeddings, dtype=np.float64)
    if block.ndim != 2 or block.shape[0] == 0:
        raise ValueError("cannot pool an empty block")
    if block.shape[0] > r:
        raise ValueError(f"block of size {block.shape[0]} exceeds ratio {r}")
    # nominal r in the divisor, also for a short final block
    return block.sum(axis=0) / math.sqrt(r)


def build_trajectory(reasoning_tokens, embed_table: np.ndarray, r: int) -> LatentTrajectory:
    tokens = list(reasoning_tokens)
    if not tokens:
        raise ValueError("empty reasoning chain")
    blocks = block_partition(len(tokens), r)
    targets = np.stack([sqrt_pool(embed_table[[tokens[j] for j in b]], r) for b in blocks])
    return LatentTrajectory(
        targets=targets,
        r=r,
        blocks=tuple(tuple(b) for b in blocks),
        block_tokens=tuple(tuple(tokens[j] for j in b) for b in blocks),
    )


def embedding_variance(embed_table: np.ndarray, per_dimension: bool = False):
    if per_dimension:
        return np.var(embed_table, axis=0)
    return float(np.var(embed_table))


def standardize_targets(traj: LatentTrajectory, embed_variance) -> LatentTrajectory:
    var = np.asarray(embed_variance, dtype=np.float64)
    if np.any(var <= 0):
        raise ValueError("embedding variance must be positive")
    scale = np.sqrt(var) if var.ndim else float(np.sqrt(var))
    # compose with any earlier scaling so unstandardized() always recovers raw pooled values
    return replace(traj, targets=traj.targets / scale, scale=traj.scale * scale)


def sample_block_token(block_tokens, rng: Rng) -> int:
    block = list(block_tokens)
    if not block:
        raise ValueError("cannot sample from an empty block")
    if len(block) == 1:
        return block[0]
    return block[rng.choice_index(len(block))]


@dataclass(frozen=True)
class TrainingSequence:
    """One supervised example laid out position by position.

    ``input_tokens[t]`` is a token id, or -1 where the input is the latent
    ``latent_inputs[latent_slot[t]]``. ``latent_target[t]`` indexes the latent
    the LTT must predict from the hidden state at ``t`` (-1: none) and
    ``token_target[t]`` is the LM-head target (-1: none).
    """

    input_tokens: np.ndarray
    latent_slot: np.ndarray
    latent_target: np.ndarray
    token_target: np.ndarray
    latents: np.ndarray  # L_c x d standardized targets

    @property
    def length(self) -> int:
        return len(self.input_tokens)


def build_training_sequence(
    p: Problem, traj: LatentTrajectory, rng: Rng, vocab: Vocab = VOCAB
) -> TrainingSequence:
    """Lay out ``[question, <think>, z*_1..z*_Lc, </think>, answer, <eos>]``.

    The ``<think>`` position predicts ``z*_1`` and a token of block 1; latent
    slot ``t`` predicts ``z*_{t+1}`` and a token of block ``t+1``; the last
    slot predicts ``</think>``.
    """
    L_r = p.reasoning_length
    L_c = traj.length
    if L_c != math.ceil(L_r / traj.r) or sum(len(b) for b in traj.blocks) != L_r:
        raise ValueError(f"trajectory (r={traj.r}, L_c={L_c}) does not match reasoning length {L_r}")
    if tuple(t for b in traj.block_tokens for t in b) != tuple(p.reasoning_tokens):
        raise ValueError("trajectory was built from a different reasoning chain")

    inputs: list[int] = list(p.question_tokens) + [vocab["<think>"]]
    slots = [-1] * len(inputs)
    lat_tgt = [-1] * len(inputs)
    tok_tgt = [-1] * len(inputs)
    lat_tgt[-1] = 0
    tok_tgt[-1] = sample_block_token(traj.block_tokens[0], rng)
    for t in range(L_c):
        inputs.append(-1)
        slots.append(t)
        if t + 1 < L_c:
            lat_tgt.append(t + 1)
            tok_tgt.append(sample_block_token(traj.block_tokens[t + 1], rng))
        else:
            lat_tgt.append(-1)
            tok_tgt.append(vocab["</think>"])
    tail = [vocab["</think>"]] + list(p.answer_tokens) + [vocab["<eos>"]]
    for i, tok in enumerate(tail):
        inputs.append(tok)
        slots.append(-1)
        lat_tgt.append(-1)
        tok_tgt.append(tail[i + 1] if i + 1 < len(tail) else -1)
    return TrainingSequence(
        input_tokens=np.array(inputs, dtype=np.int64),
        latent_slot=np.array(slots, dtype=np.int64),
        latent_target=np.array(lat_tgt, dtype=np.int64),
        token_target=np.array(tok_tgt, dtype=np.int64),
        latents=traj.targets,
    )
