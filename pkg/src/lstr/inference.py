"""Autoregressive latent rollout, accuracy evaluation and k / r sweeps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import backbone as bb
from . import ltt
from .ltt import SparseCode
from .model import LstrModel
from .taskgen import TOKENS_PER_STEP, Problem, oracle_answer

MAX_ANSWER_TOKENS = 4

# (step_index, hidden, code) -> replacement code, or None to keep the original
CodeHook = Callable[[int, np.ndarray, SparseCode], "SparseCode | None"]
# (step_index, z_hat) -> replacement latent, or None; applied after any code hook
LatentHook = Callable[[int, np.ndarray], "np.ndarray | None"]


@dataclass
class StepRecord:
    hidden: np.ndarray  # state the LTT read
    z_hat: np.ndarray  # latent fed back to the backbone
    code: SparseCode
    lm_argmax: int  # LM-head argmax after consuming z_hat
    intervened: bool = False

    @property
    def k_eff(self) -> int:
        return self.code.k_eff


@dataclass
class RolloutTrace:
    steps: list[StepRecord] = field(default_factory=list)
    answer_tokens: tuple[int, ...] = ()
    stopped: bool = False  # ended on the </think> argmax
    hit_max_steps: bool = False
    diverged: bool = False
    correct: bool | None = None

    @property
    def n_latent_steps(self) -> int:
        return len(self.steps)

    def active_sets(self) -> list[set[int]]:
        return [set(int(i) for i in s.code.active_indices) for s in self.steps]

    def to_json(self) -> dict:
        return {
            "n_latent_steps": self.n_latent_steps,
            "answer": list(self.answer_tokens),
            "correct": self.correct,
            "stopped": self.stopped,
            "hit_max_steps": self.hit_max_steps,
            "diverged": self.diverged,
            "steps": [
                {
                    "k_eff": s.k_eff,
                    "active": [int(i) for i in s.code.active_indices],
                    "values": [float(v) for v in s.code.active_values],
                    "lm_argmax": int(s.lm_argmax),
                    "intervened": s.intervened,
                }
                for s in self.steps
            ],
        }


def expected_latent_steps(question_tokens, r: int) -> int:
    n_steps = max(1, (len(question_tokens) - 2) // 3)
    return math.ceil(n_steps * TOKENS_PER_STEP / r)


def default_max_steps(model: LstrModel, question_tokens, factor: int = 4) -> int:
    return factor * expected_latent_steps(question_tokens, model.r)


def latent_rollout(
    model: LstrModel,
    question_tokens,
    k_override: int | None = None,
    max_steps: int | None = None,
    hook: CodeHook | None = None,
    latent_hook: LatentHook | None = None,
) -> RolloutTrace:
    if max_steps is None:
        max_steps = default_max_steps(model, question_tokens)
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    p, q, vocab = model.backbone, model.ltt, model.vocab
    k = q.k if k_override is None else k_override
    if not 0 <= k <= q.d_feat:
        raise ValueError(f"k={k} outside [0, {q.d_feat}]")
    think_end = vocab["</think>"]

    h = np.zeros(p.d_model)
    for tok in list(question_tokens) + [vocab["<think>"]]:
        h = bb.step(p, h, bb.embed(p, tok))

    trace = RolloutTrace()
    for t in range(max_steps):
        z_hat, code = ltt.forward(q, h, k, dense=model.dense)
        intervened = False
        if hook is not None:
            new_code = hook(t, h, code)
            if new_code is not None:
                code, intervened = new_code, True
                z_hat = ltt.decode(q, h, code)
        if latent_hook is not None:
            new_z = latent_hook(t, z_hat)
            if new_z is not None:
                z_hat, intervened = np.asarray(new_z, dtype=float), True
        h_next = bb.step(p, h, z_hat)
        if not np.all(np.isfinite(h_next)) or np.linalg.norm(h_next) > bb.HIDDEN_NORM_GUARD:
            trace.diverged = True
            break
        am = int(np.argmax(bb.lm_logits(p, h_next)))
        trace.steps.append(StepRecord(h, z_hat, code, am, intervened))
        h = h_next
        if am == think_end:
            trace.stopped = True
            break
    else:
        trace.hit_max_steps = True

    answer = []
    if not trace.diverged:
        h = bb.step(p, h, bb.embed(p, think_end))
        for _ in range(MAX_ANSWER_TOKENS):
            tok = int(np.argmax(bb.lm_logits(p, h)))
            if tok == vocab["<eos>"]:
                break
            answer.append(tok)
            h = bb.step(p, h, bb.embed(p, tok))
    trace.answer_tokens = tuple(answer)
    return trace


def solve(model: LstrModel, problem: Problem, k_override: int | None = None, hook: CodeHook | None = None,
          max_steps: int | None = None, latent_hook: LatentHook | None = None) -> RolloutTrace:
    trace = latent_rollout(model, problem.question_tokens, k_override, max_steps, hook, latent_hook)
    trace.correct = trace.answer_tokens == oracle_answer(problem, model.vocab)
    return trace


def evaluate(model: LstrModel, problems: list[Problem], k_override: int | None = None,
             return_traces: bool = False):
    if not problems:
        raise ValueError("cannot evaluate on an empty dataset")
    traces = [solve(model, p, k_override) for p in problems]
    accuracy = sum(t.correct for t in traces) / len(traces)
    mean_L = float(np.mean([t.n_latent_steps for t in traces]))
    if return_traces:
        return accuracy, mean_L, traces
    return accuracy, mean_L


def run_k_sweep(model: LstrModel, problems: list[Problem], k_grid: Iterable[int]) -> list[tuple[int, float, float]]:
    grid = list(k_grid)
    if not grid:
        raise ValueError("empty k grid")
    if any(k > model.ltt.d_feat or k < 0 for k in grid):
        raise ValueError("every k must lie in [0, d_feat]")
    return [(k, *evaluate(model, problems, k)) for k in grid]


def run_r_sweep(models_by_r: dict[int, LstrModel], problems: list[Problem]) -> list[tuple[int, float, float]]:
    return [(r, *evaluate(models_by_r[r], problems)) for r in sorted(models_by_r)]


def write_sweep_csv(rows, path: str | Path, key: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([key, "accuracy", "mean_L"])
        for row in rows:
            w.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])


def write_traces_jsonl(traces: Iterable[RolloutTrace], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(json.dumps(t.to_json(), separators=(",", ":")) + "\n")
