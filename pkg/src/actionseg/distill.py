"""Contrastive distillation over a FIFO bank of anchor embeddings.

The teacher and the student each turn their embedding into a distribution
over the bank (softmax of cosine similarities at their own temperature) and
the student is pulled toward the teacher with KL(p_t || p_s).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .numkit import (
    LossResult,
    NumericsError,
    kl_divergence,
    l2_normalize,
    tempered_softmax,
)

DEFAULT_BANK_SIZE = 36


class EmptyBankError(NumericsError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    tau_teacher: float = 0.01
    tau_student: float = 0.1

    def __post_init__(self):
        if not (self.tau_teacher > 0 and self.tau_student > 0):
            raise ValueError("distillation temperatures must be positive")


class MemoryBank:
    """Fixed-capacity FIFO of unit-norm anchors.

    Anchors are normalized on insertion so a similarity against the bank is a
    plain matrix-vector product.
    """

    def __init__(self, capacity: int = DEFAULT_BANK_SIZE, dim: int | None = None):
        if capacity < 1:
            raise ValueError("bank capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._anchors: deque[np.ndarray] = deque(maxlen=capacity)

    def __len__(self):
        return len(self._anchors)

    @property
    def anchors(self) -> np.ndarray:
        if not self._anchors:
            return np.zeros((0, self.dim or 0))
        return np.stack(self._anchors)

    def update(self, new_anchors: Iterable) -> "MemoryBank":
        normalized = [l2_normalize(a) for a in new_anchors]
        for a in normalized:
            if self.dim is None:
                self.dim = a.shape[0]
            elif a.shape[0] != self.dim:
                raise ValueError(f"anchor dim {a.shape[0]} != bank dim {self.dim}")
            self._anchors.append(a)
        return self

    def snapshot(self) -> "MemoryBank":
        other = MemoryBank(self.capacity, self.dim)
        other._anchors.extend(a.copy() for a in self._anchors)
        return other

    @classmethod
    def from_array(cls, anchors: np.ndarray, capacity: int) -> "MemoryBank":
        bank = cls(capacity, anchors.shape[1] if anchors.ndim == 2 else None)
        for a in np.asarray(anchors, dtype=np.float64):
            bank._anchors.append(a.copy())
        return bank


def bank_update(bank: MemoryBank, new_anchors) -> MemoryBank:
    return bank.update(new_anchors)


def _cosines(z: np.ndarray, anchors: np.ndarray) -> tuple[np.ndarray, float]:
    z = np.asarray(z, dtype=np.float64)
    u = l2_normalize(z)
    return anchors @ u, float(np.linalg.norm(z))


def similarity_distribution(z, bank: MemoryBank, tau: float) -> np.ndarray:
    if len(bank) == 0:
        raise EmptyBankError("similarity against an empty memory bank")
    sims, _ = _cosines(z, bank.anchors)
    return tempered_softmax(sims, tau)


def distill_loss(z_teacher, z_student_pred, bank: MemoryBank,
                 cfg: DistillConfig = DistillConfig()) -> LossResult:
    """KL between teacher and student bank distributions.

    Only ``z_student_pred`` receives a gradient; the teacher embedding and the
    anchors are treated as constants.
    """
    if len(bank) == 0:
        raise EmptyBankError("distillation needs a non-empty memory bank")
    anchors = bank.anchors
    p_t = similarity_distribution(z_teacher, bank, cfg.tau_teacher)
    sims, norm = _cosines(z_student_pred, anchors)
    p_s = tempered_softmax(sims, cfg.tau_student)
    loss = kl_divergence(p_t, p_s)

    # dKL/dsim_j = (p_s - p_t) / tau_s ; dsim_j/dz = (a_j - sim_j * u) / |z|
    g_sim = (p_s - p_t) / cfg.tau_student
    u = np.asarray(z_student_pred, dtype=np.float64) / norm
    grad = (g_sim @ anchors - np.dot(g_sim, sims) * u) / norm
    return LossResult(loss, {"z_student_pred": grad})


def pool_features(feature_map) -> np.ndarray:
    """Spatial mean of an (H, W, m) or (N, m) feature map."""
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim < 2 or fm.size == 0:
        raise ValueError("cannot pool an empty feature map")
    return fm.reshape(-1, fm.shape[-1]).mean(axis=0)
