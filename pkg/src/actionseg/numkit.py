"""Deterministic float64 numerics shared by every loss in the package.

Everything here is a pure function on numpy arrays.  Reductions run over
the stored order, so results are bitwise reproducible for a fixed layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

NORM_EPS = 1e-12
KL_FLOOR = 1e-12


class NumericsError(ValueError):
    """Base class for invalid numeric input."""


class DegenerateNormError(NumericsError):
    pass


class DimensionMismatchError(NumericsError):
    pass


class TemperatureError(NumericsError):
    pass


class NonFiniteError(NumericsError):
    pass


@dataclass
class LossResult:
    """Scalar loss plus gradients keyed by input name."""

    loss: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    terms: dict[str, float] = field(default_factory=dict)


def _as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("vector contains NaN or Inf")
    return v


def l2_normalize(v) -> np.ndarray:
    v = _as_vector(v)
    n = float(np.sqrt(np.dot(v, v)))
    if n <= NORM_EPS:
        raise DegenerateNormError(f"cannot normalize vector with norm {n:g}")
    return v / n


def l2_normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise normalization; returns (unit rows, row norms)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    if np.any(norms <= NORM_EPS):
        raise DegenerateNormError("row with degenerate norm")
    return x / norms[:, None], norms


def l2_normalize_rows_backward(unit: np.ndarray, norms: np.ndarray,
                               grad_unit: np.ndarray) -> np.ndarray:
    """Chain rule through ``x -> x / |x|`` applied per row."""
    radial = np.einsum("ij,ij->i", grad_unit, unit)
    return (grad_unit - radial[:, None] * unit) / norms[:, None]


def cosine_sim(a, b) -> float:
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"{a.shape} vs {b.shape}")
    s = float(np.dot(l2_normalize(a), l2_normalize(b)))
    return min(1.0, max(-1.0, s))


def tempered_softmax(logits, tau: float) -> np.ndarray:
    if not tau > 0:
        raise TemperatureError(f"temperature must be positive, got {tau}")
    x = _as_vector(logits)
    if x.size == 0:
        raise NumericsError("empty logits")
    z = (x - x.max()) / tau
    e = np.exp(z)
    return e / e.sum()


def log_softmax(logits, tau: float = 1.0) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64) / tau
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_divergence(p, q) -> float:
    """KL(p || q) with ``0 log 0 = 0`` and q floored at 1e-12."""
    p = _as_vector(p)
    q = _as_vector(q)
    if p.shape != q.shape:
        raise DimensionMismatchError(f"{p.shape} vs {q.shape}")
    nz = p > 0
    qf = np.maximum(q[nz], KL_FLOOR)
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(qf))))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not eps > 0:
        raise NumericsError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)


def relative_error(a, b, floor: float = 1e-8) -> float:
    """Max-norm relative error used by the gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)
