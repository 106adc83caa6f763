"""Mechanistic metrics over rollout traces and causal feature interventions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .inference import RolloutTrace, latent_rollout, solve
from .ltt import LttParams, SparseCode
from .model import LstrModel
from .numerics import cosine
from .taskgen import Problem


# ---------------------------------------------------------------- sparsity

def effective_sparsity(trace: RolloutTrace) -> list[int]:
    """Retained-entry count per latent step."""
    if not trace.steps:
        raise ValueError("trace has no latent steps")
    return [s.code.k_eff for s in trace.steps]


def positive_preact_counts(trace: RolloutTrace) -> list[int]:
    """Alternative sparsity reading: how many encoder pre-activations were positive."""
    return [int(np.count_nonzero(s.code.preacts > 0)) for s in trace.steps]


def jaccard(a: set[int], b: set[int]) -> float:
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


def feature_persistence(trace: RolloutTrace, mode: str = "jaccard", k: int | None = None) -> list[float]:
    """Overlap between consecutive active sets.

    ``mode="overlap_k"`` divides the intersection size by ``k`` instead of the
    union size; ``k`` defaults to the largest active set in the trace.
    """
    sets = trace.active_sets()
    if len(sets) < 2:
        raise ValueError("persistence needs at least two latent steps")
    if mode == "jaccard":
        return [jaccard(a, b) for a, b in zip(sets, sets[1:])]
    if mode == "overlap_k":
        denom = k if k is not None else max(len(s) for s in sets)
        if denom <= 0:
            return [0.0] * (len(sets) - 1)
        return [min(1.0, len(a & b) / denom) for a, b in zip(sets, sets[1:])]
    raise ValueError(f"unknown persistence mode {mode!r}")


def mean_sparsity_profile(traces: Iterable[RolloutTrace]) -> list[float]:
    """Mean k_eff at each step index, over the traces long enough to reach it."""
    by_step: list[list[int]] = []
    for tr in traces:
        for t, s in enumerate(tr.steps):
            if t == len(by_step):
                by_step.append([])
            by_step[t].append(s.code.k_eff)
    return [float(np.mean(v)) for v in by_step]


# ---------------------------------------------------------------- dictionary usage

def gini(counts) -> float:
    """Mean-absolute-difference Gini coefficient, computed from the sorted counts."""
    c = np.sort(np.asarray(counts, dtype=float).ravel())
    if c.size == 0:
        raise ValueError("gini of an empty count vector")
    if np.any(c < 0):
        raise ValueError("counts must be nonnegative")
    total = c.sum()
    if total == 0:
        raise ValueError("gini undefined for all-zero counts")
    n = c.size
    ranks = np.arange(1, n + 1)
    g = float(np.sum((2 * ranks - n - 1) * c) / (n * total))
    return min(max(g, 0.0), 1.0)


@dataclass
class FeatureStats:
    activation_counts: np.ndarray
    gini: float
    rank_frequency: np.ndarray  # counts sorted descending


def feature_stats(traces: Iterable[RolloutTrace], d_feat: int) -> FeatureStats:
    counts = np.zeros(d_feat, dtype=np.int64)
    for tr in traces:
        for s in tr.steps:
            counts[s.code.active_indices] += 1
    g = gini(counts) if counts.any() else 0.0
    return FeatureStats(counts, g, np.sort(counts)[::-1])


def cosine_trajectory_matrix(trace: RolloutTrace) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise cosine of the fed-back latents.

    Returns ``(M, degenerate)`` where ``degenerate[i]`` flags a zero-norm
    latent; its row and column are 0, including the diagonal entry.
    """
    if trace.n_latent_steps < 2:
        raise ValueError("need at least two latent steps")
    Z = np.stack([s.z_hat for s in trace.steps])
    norms = np.linalg.norm(Z, axis=1)
    degenerate = norms == 0
    safe = np.where(degenerate, 1.0, norms)
    U = Z / safe[:, None]
    M = np.clip(U @ U.T, -1.0, 1.0)
    M[degenerate, :] = 0.0
    M[:, degenerate] = 0.0
    idx = np.flatnonzero(~degenerate)
    M[idx, idx] = 1.0
    return M, degenerate


def decode_feature_tokens(params: LttParams, embed_table: np.ndarray, feature_id: int,
                          top_m: int = 5) -> list[tuple[int, float]]:
    """Vocabulary tokens ranked by cosine between a decoder column and their embeddings."""
    if not 0 <= feature_id < params.d_feat:
        raise ValueError(f"feature_id {feature_id} outside [0, {params.d_feat})")
    col = params.W_dec[:, feature_id]
    sims = np.array([cosine(col, row) for row in embed_table])
    order = np.argsort(-sims, kind="stable")[:top_m]
    return [(int(i), float(sims[i])) for i in order]


# ---------------------------------------------------------------- interventions

@dataclass(frozen=True)
class InterventionSpec:
    step_index: int
    feature_id: int
    mode: str = "ablate"  # "ablate" | "amplify" | "set"
    value: float = 1.0  # gamma for amplify, the new activation for set

    def validate(self, d_feat: int) -> None:
        if self.step_index < 0:
            raise ValueError("step_index must be >= 0")
        if not 0 <= self.feature_id < d_feat:
            raise ValueError(f"feature_id {self.feature_id} outside [0, {d_feat})")
        if self.mode == "amplify" and not self.value > 0:
            raise ValueError("amplify needs gamma > 0")
        if self.mode == "set" and self.value < 0:
            raise ValueError("set value must be >= 0 (codes are ReLU outputs)")
        if self.mode not in ("ablate", "amplify", "set"):
            raise ValueError(f"unknown intervention mode {self.mode!r}")


def apply_intervention(code: SparseCode, spec: InterventionSpec) -> SparseCode:
    """Modified copy of ``code``; active indices stay sorted and values stay positive."""
    values = dict(zip(code.active_indices.tolist(), code.active_values.tolist()))
    f = spec.feature_id
    if spec.mode == "ablate":
        values.pop(f, None)
    elif spec.mode == "amplify":
        if f in values:
            values[f] = values[f] * spec.value
    else:
        if spec.value == 0:
            values.pop(f, None)
        else:
            values[f] = float(spec.value)
    idx = np.array(sorted(values), dtype=code.active_indices.dtype)
    vals = np.array([values[i] for i in idx.tolist()], dtype=float)
    return SparseCode(idx, vals, code.preacts)


def intervene_feature(model: LstrModel, question_tokens, spec: InterventionSpec,
                      k_override: int | None = None) -> tuple[RolloutTrace, RolloutTrace]:
    """Roll out once clean and once with ``spec`` applied after Top-k."""
    spec.validate(model.ltt.d_feat)
    original = latent_rollout(model, question_tokens, k_override)
    if spec.step_index >= original.n_latent_steps:
        raise IndexError(f"step_index {spec.step_index} beyond trace of length {original.n_latent_steps}")

    def hook(t, h, code):
        return apply_intervention(code, spec) if t == spec.step_index else None

    return original, latent_rollout(model, question_tokens, k_override, hook=hook)


def traces_equal(a: RolloutTrace, b: RolloutTrace) -> bool:
    """Bit-level equality of latents, codes and decoded answers."""
    if a.n_latent_steps != b.n_latent_steps or a.answer_tokens != b.answer_tokens:
        return False
    for x, y in zip(a.steps, b.steps):
        if not (np.array_equal(x.z_hat, y.z_hat) and np.array_equal(x.code.active_indices, y.code.active_indices)
                and np.array_equal(x.code.active_values, y.code.active_values) and x.lm_argmax == y.lm_argmax):
            return False
    return True


def top_feature(code: SparseCode) -> int | None:
    """Highest-value active feature (lowest index on ties)."""
    if code.k_eff == 0:
        return None
    return int(code.active_indices[int(np.argmax(code.active_values))])


# ---------------------------------------------------------------- step necessity

@dataclass(frozen=True)
class NecessityRecord:
    problem_index: int
    step: int
    n_steps: int
    position: float
    flipped: bool


def _position(t: int, L: int, normalize: bool) -> float:
    if not normalize:
        return float(t)
    return 0.0 if L <= 1 else t / (L - 1)


def stepwise_ablation(model: LstrModel, problems: Sequence[Problem], normalize_positions: bool = True,
                      mode: str = "sparse", k_override: int | None = None) -> list[NecessityRecord]:
    """Zero one latent step at a time on each correctly solved problem and record answer flips.

    ``mode="sparse"`` removes only the innovation and keeps the transport
    path; ``mode="full"`` replaces the whole fed-back latent with zeros.
    Problems the clean model gets wrong are skipped.
    """
    if mode not in ("sparse", "full"):
        raise ValueError(f"unknown ablation mode {mode!r}")
    records = []
    for i, p in enumerate(problems):
        clean = solve(model, p, k_override)
        if not clean.correct:
            continue
        L = clean.n_latent_steps
        for t in range(L):
            step = clean.steps[t]
            if mode == "sparse":
                if step.code.k_eff == 0:
                    flipped = False
                else:
                    empty = SparseCode(step.code.active_indices[:0], step.code.active_values[:0], step.code.preacts)
                    hook = (lambda tt, h, c, t=t, e=empty: e if tt == t else None)
                    flipped = not solve(model, p, k_override, hook=hook).correct
            else:
                zhook = (lambda tt, z, t=t: np.zeros_like(z) if tt == t else None)
                flipped = not solve(model, p, k_override, latent_hook=zhook).correct
            records.append(NecessityRecord(i, t, L, _position(t, L, normalize_positions), flipped))
    return records


@dataclass(frozen=True)
class ProfileBin:
    lo: float
    hi: float
    flip_rate: float
    count: int


def necessity_profile(records: Sequence[NecessityRecord], n_bins: int = 10) -> list[ProfileBin]:
    """Flip rate per normalized-position bin; position 1.0 lands in the last bin."""
    if not records:
        raise ValueError("no necessity records")
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    flips = np.zeros(n_bins)
    totals = np.zeros(n_bins, dtype=np.int64)
    for r in records:
        b = min(int(math.floor(r.position * n_bins)), n_bins - 1)
        b = max(b, 0)
        totals[b] += 1
        flips[b] += r.flipped
    rates = np.divide(flips, totals, out=np.zeros(n_bins), where=totals > 0)
    return [ProfileBin(float(edges[i]), float(edges[i + 1]), float(rates[i]), int(totals[i])) for i in range(n_bins)]


# ---------------------------------------------------------------- exports

def write_step_metrics_csv(trace: RolloutTrace, path: str | Path) -> None:
    ks = effective_sparsity(trace)
    pers = [""] + [repr(v) for v in feature_persistence(trace)] if len(ks) > 1 else [""]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "k_eff", "persistence"])
        for t, (k, pv) in enumerate(zip(ks, pers)):
            w.writerow([t, k, pv])


def write_rank_frequency_csv(stats: FeatureStats, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "count"])
        for rank, c in enumerate(stats.rank_frequency, start=1):
            w.writerow([rank, int(c)])


def write_necessity_csv(profile: Sequence[ProfileBin], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "flip_rate"])
        for b in profile:
            w.writerow([repr(b.lo), repr(b.hi), repr(b.flip_rate)])
