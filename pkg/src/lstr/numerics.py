"""Dense float64 linear algebra and seeded initializers.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Randomness goes
through :class:`Rng`, a thin wrapper over numpy's PCG64 bit generator
(PCG-XSL-RR 128/64), whose output stream is fixed by its published algorithm
and therefore identical on every platform for a given seed.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Rng:
    """Single-owner seeded random stream (PCG64)."""

    def __init__(self, seed: int = 0):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice_index(self, n: int) -> int:
        return int(self._gen.integers(0, n))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "Rng":
        """Derive an independent child stream from this seed and an integer key."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def get_state(self) -> dict:
        return {"seed": self.seed, "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._gen.bit_generator.state = state["bit_generator"]

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(int(state["seed"]))
        rng.set_state(state)
        return rng


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=DTYPE)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("matmul produced non-finite values")
    return out


def gaussian_init(rows: int, cols: int, std: float, rng: Rng) -> np.ndarray:
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    return rng.normal((rows, cols), std)


def orthogonal_init(rows: int, cols: int, rng: Rng) -> np.ndarray:
    """QR of a Gaussian draw; orthonormal columns if rows >= cols, else orthonormal rows."""
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    tall = rows >= cols
    g = rng.normal((rows, cols) if tall else (cols, rows))
    q, r = np.linalg.qr(g)
    # sign fix makes the draw Haar-distributed and the result unique
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    return q if tall else q.T


def cosine(a, b) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))
