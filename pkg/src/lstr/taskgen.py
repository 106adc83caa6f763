"""Synthetic mod-10 arithmetic chains with explicit token-level reasoning.

A problem with ``n`` steps looks like::

    question:  <q> x0 ; op1 a1 ; op2 a2 ...
    reasoning: x0 op1 a1 = x1 ; x1 op2 a2 = x2 ; ...
    answer:    xn

Every value is a single digit and every step is evaluated modulo 10.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .numerics import Rng

DIGITS = [str(d) for d in range(10)]
OPERATORS = ["+", "-", "*"]
MARKERS = ["=", ";", "<q>", "<think>", "</think>", "<ans>", "<eos>", "<pad>"]
TOKENS_PER_STEP = 6
MAX_STEPS = 16


class Vocab:
    def __init__(self, tokens: Iterable[str] | None = None):
        self.tokens = list(tokens) if tokens is not None else DIGITS + OPERATORS + MARKERS
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.ids[token]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.ids[t] for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def digit(self, token_id: int) -> int | None:
        tok = self.tokens[token_id]
        return int(tok) if tok in DIGITS else None


VOCAB = Vocab()


def apply_op(x: int, op: str, a: int) -> int:
    if op == "+":
        return (x + a) % 10
    if op == "-":
        return (x - a) % 10
    if op == "*":
        return (x * a) % 10
    raise ValueError(f"unknown operator {op!r}")


@dataclass(frozen=True)
class Problem:
    question_tokens: tuple[int, ...]
    reasoning_tokens: tuple[int, ...]
    answer_tokens: tuple[int, ...]
    n_steps: int = field(default=0)

    @property
    def reasoning_length(self) -> int:
        return len(self.reasoning_tokens)

    def to_json(self) -> dict:
        return {"q": list(self.question_tokens), "r": list(self.reasoning_tokens), "a": list(self.answer_tokens)}

    @classmethod
    def from_json(cls, obj: dict) -> "Problem":
        q = tuple(int(i) for i in obj["q"])
        r = tuple(int(i) for i in obj["r"])
        a = tuple(int(i) for i in obj["a"])
        return cls(q, r, a, len(r) // TOKENS_PER_STEP)


def make_problem(x0: int, steps: list[tuple[str, int]], vocab: Vocab = VOCAB) -> Problem:
    question = ["<q>", str(x0)]
    reasoning: list[str] = []
    x = x0
    for op, a in steps:
        question += [";", op, str(a)]
        y = apply_op(x, op, a)
        reasoning += [str(x), op, str(a), "=", str(y), ";"]
        x = y
    return Problem(
        tuple(vocab.encode(question)),
        tuple(vocab.encode(reasoning)),
        (vocab[str(x)],),
        len(steps),
    )


def generate_problem(n_steps: int, rng: Rng, vocab: Vocab = VOCAB) -> Problem:
    if not 1 <= n_steps <= MAX_STEPS:
        raise ValueError(f"n_steps must be in [1, {MAX_STEPS}], got {n_steps}")
    x0 = int(rng.integers(0, 10))
    steps = []
    for _ in range(n_steps):
        op = OPERATORS[int(rng.integers(0, len(OPERATORS)))]
        steps.append((op, int(rng.integers(0, 10))))
    return make_problem(x0, steps, vocab)


def parse_question(question_tokens: Iterable[int], vocab: Vocab = VOCAB) -> tuple[int, list[tuple[str, int]]]:
    toks = vocab.decode(question_tokens)
    if len(toks) < 2 or toks[0] != "<q>" or toks[1] not in DIGITS or (len(toks) - 2) % 3:
        raise ValueError(f"malformed question: {' '.join(toks)}")
    steps = []
    for i in range(2, len(toks), 3):
        sep, op, a = toks[i : i + 3]
        if sep != ";" or op not in OPERATORS or a not in DIGITS:
            raise ValueError(f"malformed question: {' '.join(toks)}")
        steps.append((op, int(a)))
    return int(toks[1]), steps


def oracle_answer(p: Problem, vocab: Vocab = VOCAB) -> tuple[int, ...]:
    """Answer tokens obtained by interpreting the question alone."""
    x, steps = parse_question(p.question_tokens, vocab)
    for op, a in steps:
        x = apply_op(x, op, a)
    return (vocab[str(x)],)


def generate_dataset(counts: dict[int, int], rng: Rng, vocab: Vocab = VOCAB) -> list[Problem]:
    if sum(counts.values()) < 1:
        raise ValueError("dataset must contain at least one problem")
    problems = []
    for n_steps in sorted(counts):
        problems += [generate_problem(n_steps, rng, vocab) for _ in range(counts[n_steps])]
    order = rng.permutation(len(problems))
    return [problems[i] for i in order]


def save_jsonl(problems: Iterable[Problem], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in problems:
            fh.write(json.dumps(p.to_json(), separators=(",", ":")) + "\n")


def load_jsonl(path: str | Path) -> list[Problem]:
    with open(path, encoding="utf-8") as fh:
        return [Problem.from_json(json.loads(line)) for line in fh if line.strip()]
