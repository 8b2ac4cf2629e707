"""Anatomical contrast: per-class InfoNCE over pixel embeddings.

Each query pixel of class ``c`` is contrasted against the class-mean
embedding (its positive key) and against pixels of other classes (negative
keys).  Embeddings are expected to be L2-normalized already; the positive
key is the plain mean of the normalized queries and is not re-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import LossResult, TemperatureError

DEFAULT_TAU_AN = 0.5


class ClassSetError(ValueError):
    pass


@dataclass
class ClassSets:
    """Query / key index sets for every class present in a mini-batch.

    ``embeddings`` is the flattened (N, m) pixel embedding array; the per-class
    entries are integer pixel indices into it.
    """

    embeddings: np.ndarray
    labels: np.ndarray
    query_idx: dict[int, np.ndarray]
    negative_idx: dict[int, np.ndarray]
    positive_keys: dict[int, np.ndarray]
    shape: tuple

    @property
    def classes(self) -> list[int]:
        return sorted(self.query_idx)

    def queries(self, c: int) -> np.ndarray:
        return self.embeddings[self.query_idx[c]]

    def negative_keys(self, c: int) -> np.ndarray:
        return self.embeddings[self.negative_idx[c]]


def _flatten(emb, labels, valid):
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    if emb.shape[:-1] != labels.shape:
        raise ClassSetError(f"embedding grid {emb.shape[:-1]} != label grid {labels.shape}")
    flat_e = emb.reshape(-1, emb.shape[-1])
    flat_l = labels.reshape(-1).astype(np.int64)
    if valid is None:
        flat_v = np.ones(flat_l.shape, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != labels.shape:
            raise ClassSetError("valid mask shape does not match labels")
        flat_v = valid.reshape(-1)
    return emb.shape, flat_e, flat_l, flat_v


def build_class_sets(emb, labels, valid=None) -> ClassSets:
    """Partition pixels by label.

    ``valid`` optionally excludes pixels (e.g. pseudo-labels that failed the
    confidence threshold) from both the queries and the negative keys.
    """
    shape, flat_e, flat_l, flat_v = _flatten(emb, labels, valid)
    query_idx, negative_idx, pos = {}, {}, {}
    present = np.unique(flat_l[flat_v])
    for c in present.tolist():
        members = np.flatnonzero(flat_v & (flat_l == c))
        query_idx[c] = members
        negative_idx[c] = np.flatnonzero(flat_v & (flat_l != c))
        pos[c] = flat_e[members].mean(axis=0)
    return ClassSets(flat_e, flat_l, query_idx, negative_idx, pos, shape)


def _class_term(Q, kp, Kn, tau):
    """Loss and gradients for the queries of one class."""
    lp = Q @ kp / tau
    ln = Q @ Kn.T / tau
    top = lp if ln.shape[1] == 0 else np.maximum(lp, ln.max(axis=1))
    ep = np.exp(lp - top)
    en = np.exp(ln - top[:, None])
    denom = ep + en.sum(axis=1)
    loss = float(np.sum(np.log(denom) - (lp - top)))
    w0 = ep / denom
    wn = en / denom[:, None]
    gQ = ((w0 - 1.0)[:, None] * kp + wn @ Kn) / tau
    gkp = (w0 - 1.0) @ Q / tau
    gKn = wn.T @ Q / tau
    return loss, gQ, gkp, gKn


def anco_from_sets(sets: ClassSets, queries: dict, keys: dict, tau_an: float,
                   reduction: str = "sum") -> LossResult:
    """Eq.-style InfoNCE over explicit query / negative-key index sets."""
    if not tau_an > 0:
        raise TemperatureError(f"AnCo temperature must be positive, got {tau_an}")
    E = sets.embeddings
    grad = np.zeros_like(E)
    total = 0.0
    n_q = 0
    for c in sorted(queries):
        qi = np.asarray(queries[c], dtype=np.int64)
        if qi.size == 0:
            continue
        if c not in sets.positive_keys:
            raise ClassSetError(f"class {c} has queries but no positive key")
        ki = np.asarray(keys.get(c, ()), dtype=np.int64)
        kp = sets.positive_keys[c]
        loss, gQ, gkp, gKn = _class_term(E[qi], kp, E[ki].reshape(-1, E.shape[1]), tau_an)
        total += loss
        n_q += qi.size
        np.add.at(grad, qi, gQ)
        members = sets.query_idx[c]
        grad[members] += gkp / members.size
        if ki.size:
            np.add.at(grad, ki, gKn)
    if reduction == "mean" and n_q:
        total /= n_q
        grad /= n_q
    elif reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    return LossResult(total, {"emb": grad.reshape(sets.shape)})


def anco_loss(sets: ClassSets, tau_an: float = DEFAULT_TAU_AN,
              reduction: str = "sum") -> LossResult:
    """InfoNCE summed over every query of every class against all negatives.

    The gradient in ``grads["emb"]`` is with respect to the (normalized) pixel
    embeddings and already includes the path through each class mean.
    """
    if not sets.query_idx:
        raise ClassSetError("no class has any query")
    return anco_from_sets(sets, sets.query_idx, sets.negative_idx, tau_an, reduction)


def anco_loss_sampled(emb, labels, queries: dict, keys: dict,
                      tau_an: float = DEFAULT_TAU_AN, valid=None,
                      reduction: str = "sum") -> LossResult:
    """AnCo over a sampled subset of queries and negative keys.

    ``queries[c]`` / ``keys[c]`` hold flat pixel indices.  Positive keys still
    come from the full class population.  Duplicate key indices (sampling with
    replacement) each count once per occurrence.
    """
    sets = build_class_sets(emb, labels, valid)
    return anco_from_sets(sets, queries, keys, tau_an, reduction)
