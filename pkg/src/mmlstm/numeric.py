"""Dense kernels shared by every model in the package.

Everything is float64 numpy. Matrices are ``(rows, cols)`` arrays and
vectors are 1-d arrays; the kernels also broadcast over leading batch axes
so the recurrent code can run many sequences at once.
"""

from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "numpy.PCG64"
PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operands with incompatible dimensions."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; the algorithm name is recorded in checkpoints."""
    return np.random.Generator(np.random.PCG64(seed))


def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``W @ x + b``; ``x`` may carry leading batch axes (``(..., cols)``)."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeError(f"W must be a matrix, got shape {W.shape}")
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"W has shape {W.shape} but x has shape {x.shape}")
    if b.shape != (W.shape[0],):
        raise ShapeError(f"W has shape {W.shape} but b has shape {b.shape}")
    return x @ W.T + b


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(np.asarray(x, dtype=np.float64))


def softmax(z: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max-subtraction."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise ShapeError("softmax needs at least one entry")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p: np.ndarray, label: int) -> float:
    """``-log p[label]`` with the probability floored at ``PROB_FLOOR``."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ShapeError(f"expected a probability vector, got shape {p.shape}")
    if not 0 <= label < p.shape[0]:
        raise ValueError(f"label {label} out of range for {p.shape[0]} classes")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def argmax_first(p: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the smallest index."""
    return np.argmax(p, axis=-1)
