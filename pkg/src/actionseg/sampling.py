"""Active hard sampling of AnCo queries and negative keys.

Negative keys for a query class are spread over the other classes in
proportion to ``softmax`` of the class-relation graph row, so classes whose
mean embedding sits close to the query class receive more negatives.  Query
selection fills each class's share with low-confidence ("hard") pixels first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_NUM_QUERIES = 256
DEFAULT_NUM_KEYS = 512
DEFAULT_THETA = 0.97


class SamplingError(ValueError):
    pass


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class SamplingBudget:
    num_queries: int = DEFAULT_NUM_QUERIES
    num_keys: int = DEFAULT_NUM_KEYS

    def __post_init__(self):
        if self.num_queries < 1 or self.num_keys < 1:
            raise ValueError("sampling budgets must be >= 1")


@dataclass
class ClassRelationGraph:
    """Pairwise dot products of class-mean embeddings; diagonal is NaN."""

    classes: tuple[int, ...]
    weights: np.ndarray

    @property
    def size(self) -> int:
        return len(self.classes)

    def index(self, c: int) -> int:
        return self.classes.index(c)

    def row(self, c: int) -> dict[int, float]:
        i = self.index(c)
        return {v: float(self.weights[i, j]) for j, v in enumerate(self.classes) if v != c}


@dataclass
class QueryPartition:
    easy: np.ndarray
    hard: np.ndarray
    theta: float

    def __len__(self):
        return self.easy.size + self.hard.size


def build_graph(positive_keys: dict[int, np.ndarray]) -> ClassRelationGraph:
    if len(positive_keys) < 2:
        raise SamplingError("class-relation graph needs at least two classes")
    classes = tuple(sorted(positive_keys))
    K = np.stack([np.asarray(positive_keys[c], dtype=np.float64) for c in classes])
    G = K @ K.T
    G = 0.5 * (G + G.T)
    np.fill_diagonal(G, np.nan)
    return ClassRelationGraph(classes, G)


def largest_remainder(weights: dict[int, float], total: int) -> dict[int, int]:
    """Integer split of ``total`` proportional to ``weights``.

    Leftover units go to the largest fractional parts; ties favour the lowest
    class id.
    """
    keys = sorted(weights)
    w = np.array([weights[k] for k in keys], dtype=np.float64)
    share = w / w.sum() * total
    base = np.floor(share).astype(np.int64)
    frac = share - base
    left = total - int(base.sum())
    order = sorted(range(len(keys)), key=lambda i: (-frac[i], keys[i]))
    for i in order[:left]:
        base[i] += 1
    return {k: int(b) for k, b in zip(keys, base)}


def negative_class_distribution(graph: ClassRelationGraph, query_class: int,
                                class_counts: dict[int, int] | None = None) -> dict[int, float]:
    row = graph.row(query_class)
    if class_counts is not None:
        row = {v: g for v, g in row.items() if class_counts.get(v, 0) > 0}
    if not row:
        raise SamplingError(f"no negative class available for class {query_class}")
    vals = np.array([row[v] for v in sorted(row)])
    e = np.exp(vals - vals.max())
    e /= e.sum()
    return dict(zip(sorted(row), e.tolist()))


def allocate_negatives(graph: ClassRelationGraph, query_class: int, budget: int,
                       class_counts: dict[int, int] | None = None) -> dict[int, int]:
    """Split the negative-key budget of ``query_class`` across the other classes.

    Classes with no available pixels get zero and their probability mass is
    renormalized over the rest.
    """
    if budget < 1:
        raise SamplingError("negative budget must be >= 1")
    probs = negative_class_distribution(graph, query_class, class_counts)
    alloc = largest_remainder(probs, budget)
    for v in graph.classes:
        if v != query_class:
            alloc.setdefault(v, 0)
    return dict(sorted(alloc.items()))


def sample_negative_keys(labels, allocation: dict[int, int], rng_seed,
                         valid=None) -> np.ndarray:
    """Flat pixel indices of the sampled negative keys, grouped by class.

    Without replacement up to the class population, with replacement for any
    excess.
    """
    rng = _rng(rng_seed)
    flat = np.asarray(labels).reshape(-1)
    ok = np.ones(flat.shape, bool) if valid is None else np.asarray(valid, bool).reshape(-1)
    out = []
    for v in sorted(allocation):
        n = allocation[v]
        if n <= 0:
            continue
        pool = np.flatnonzero(ok & (flat == v))
        if pool.size == 0:
            raise SamplingError(f"class {v} has no pixels to sample")
        if n <= pool.size:
            out.append(rng.choice(pool, size=n, replace=False))
        else:
            out.append(rng.permutation(pool))
            out.append(rng.choice(pool, size=n - pool.size, replace=True))
    if not out:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def split_easy_hard(confidences, theta: float = DEFAULT_THETA, ids=None) -> QueryPartition:
    """Easy queries have confidence strictly above ``theta``; the rest are hard."""
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    if np.any(~np.isfinite(conf)) or np.any(conf < 0) or np.any(conf > 1):
        raise SamplingError("confidences must lie in [0, 1]")
    ids = np.arange(conf.size) if ids is None else np.asarray(ids).reshape(-1)
    if ids.size != conf.size:
        raise SamplingError("ids and confidences differ in length")
    easy = conf > theta
    return QueryPartition(ids[easy], ids[~easy], theta)


def class_quotas(available: dict[int, int], budget: int) -> dict[int, int]:
    """Equal split of ``budget`` across classes, water-filling around small classes.

    Remainders go to the lowest class ids.  The total is
    ``min(budget, sum(available))``.
    """
    quotas = {c: 0 for c in available}
    active = sorted(c for c, n in available.items() if n > 0)
    left = budget
    while active and left > 0:
        share, rem = divmod(left, len(active))
        want = {c: share + (1 if i < rem else 0) for i, c in enumerate(active)}
        capped = [c for c in active if available[c] < want[c]]
        if not capped:
            for c in active:
                quotas[c] = want[c]
            break
        for c in capped:
            quotas[c] = available[c]
            left -= available[c]
        active = [c for c in active if c not in capped]
    return quotas


def select_queries(partitions: dict[int, QueryPartition], budget: int,
                   rng_seed) -> dict[int, np.ndarray]:
    """Pick up to ``budget`` queries, hard ones first within each class."""
    if budget < 1:
        raise SamplingError("query budget must be >= 1")
    if sum(len(p) for p in partitions.values()) == 0:
        raise SamplingError("no queries available")
    rng = _rng(rng_seed)
    quotas = class_quotas({c: len(p) for c, p in partitions.items()}, budget)
    picked = {}
    for c in sorted(partitions):
        part, q = partitions[c], quotas[c]
        n_hard = min(q, part.hard.size)
        chosen = [rng.choice(part.hard, size=n_hard, replace=False)] if n_hard else []
        n_easy = q - n_hard
        if n_easy:
            chosen.append(rng.choice(part.easy, size=n_easy, replace=False))
        picked[c] = np.concatenate(chosen).astype(np.int64) if chosen else np.zeros(0, np.int64)
    return picked


def pseudo_label_mask(probs, theta: float = DEFAULT_THETA) -> tuple[np.ndarray, np.ndarray]:
    """Confidence-thresholded argmax labels over the last axis.

    Returns ``(mask, labels)``; ``mask`` is True where the top probability is
    strictly greater than ``theta``.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim < 1 or p.shape[-1] < 1:
        raise SamplingError("probability map needs a class axis")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1) > 1e-6):
        raise SamplingError("malformed per-pixel probability vector")
    labels = np.argmax(p, axis=-1)
    mask = np.max(p, axis=-1) > theta
    return mask, labels
