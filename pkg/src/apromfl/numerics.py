"""Deterministic numeric primitives used by every other module.

Everything operates on float64 numpy arrays and is pure. The only source of
randomness in the whole project is :func:`seeded_rng`; callers derive one
generator per purpose (init / batching / clustering / ...), so results never
depend on call ordering across purposes, threads or processes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

Rng = np.random.Generator

#: Floor applied to divergence denominators so KL stays defined at q == 0.
KL_EPS = 1e-12


def seeded_rng(*key: int | str) -> Rng:
    """PCG64 generator derived from a key path of ints and strings.

    The path is hashed with SHA-256 into SeedSequence entropy. Extending the
    key, e.g. ``seeded_rng(seed, "client", 3, "round", 7, "batches")``, yields
    an independent substream that is reproducible bit-for-bit on every
    platform and in every process.
    """
    material = ":".join(str(part) for part in key).encode("utf-8")
    entropy = int.from_bytes(hashlib.sha256(material).digest(), "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def require_finite(arr, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if not np.isfinite(arr).all():
        raise ValueError(f"{what} contains non-finite entries")
    return arr


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clipped into [-1, 1]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm input")
    return float(np.clip(float(a @ b) / (norm_a * norm_b), -1.0, 1.0))


def logsumexp(a, axis: int = -1) -> np.ndarray:
    """Stable log-sum-exp along ``axis``."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def softmax_temp(v, tau: float) -> np.ndarray:
    """Temperature softmax along the last axis, with max-subtraction.

    Output entries are non-negative and sum to 1 (within 1e-9 per row); the
    result is invariant to adding a constant to every input.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    v = np.asarray(v, dtype=float)
    z = (v - np.max(v, axis=-1, keepdims=True)) / tau
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats, with q floored at :data:`KL_EPS` and 0 log 0 = 0.

    The result is clamped at 0 so that float round-off on p == q can never
    surface as a negative divergence.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    q_floor = np.maximum(q, KL_EPS)
    mask = p > 0
    value = float(np.sum(p[mask] * np.log(p[mask] / q_floor[mask])))
    return max(value, 0.0)


@dataclass(frozen=True)
class ClusterAssignment:
    """A pseudo-label partition of a sample set.

    ``members[k]`` holds the sorted sample indices carrying pseudo-label k.
    The member sets partition ``range(len(pseudo_labels))`` and are never
    empty.
    """

    pseudo_labels: np.ndarray
    members: dict[int, np.ndarray]

    @classmethod
    def from_labels(cls, labels) -> "ClusterAssignment":
        labels = np.asarray(labels, dtype=int)
        if labels.size == 0:
            raise ValueError("cannot build an assignment from zero samples")
        members = {int(k): np.flatnonzero(labels == k) for k in np.unique(labels)}
        return cls(pseudo_labels=labels, members=members)

    def restrict(self, indices) -> "ClusterAssignment":
        """Assignment for the subset ``indices``, reindexed to 0..m-1."""
        indices = np.asarray(indices, dtype=int)
        return ClusterAssignment.from_labels(self.pseudo_labels[indices])

    def cluster_of(self, i: int) -> np.ndarray:
        return self.members[int(self.pseudo_labels[i])]

    def __len__(self) -> int:
        return int(self.pseudo_labels.size)


#: Independent k-means++ initialisations per call; the lowest-SSE run wins.
#: Tiny instances get extra restarts: they are nearly free to re-run and are
#: exactly where a single init is most likely to land in a local optimum.
KMEANS_RESTARTS = 3
KMEANS_RESTARTS_SMALL = 10
KMEANS_SMALL_N = 32


def kmeans(points, k: int, rng: Rng, max_iters: int = 100):
    """Greedy k-means++ init (best of a few restarts) plus Lloyd iterations.

    Returns ``(assignments, centroids)``. Deterministic given the generator;
    every cluster is non-empty on return. See :func:`kmeans_trace` for the
    per-iteration SSE.
    """
    assignments, centroids, _ = kmeans_trace(points, k, rng, max_iters)
    return assignments, centroids


def kmeans_trace(points, k: int, rng: Rng, max_iters: int = 100):
    """Like :func:`kmeans` but also returns the winning restart's SSE history.

    ``history[0]`` is the SSE of the k-means++ centroids under their induced
    assignment; each later entry is measured after a full Lloyd update. The
    sequence is non-increasing by construction: empty clusters are repaired
    at the assignment level (the point fitting its own cluster worst moves
    into the empty cluster) before centroids are recomputed as means, which
    can only lower the objective.
    """
    pts = require_finite(points, "kmeans points")
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    k = int(k)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(pts) < k:
        raise ValueError(f"need at least k={k} points, got {len(pts)}")

    restarts = KMEANS_RESTARTS_SMALL if len(pts) <= KMEANS_SMALL_N else KMEANS_RESTARTS
    best = None
    for _ in range(restarts):
        centroids = _kmeans_pp_init(pts, k, rng)
        result = _lloyd(pts, centroids, max_iters)
        if best is None or result[2][-1] < best[2][-1]:
            best = result
    return best


def _lloyd(pts: np.ndarray, centroids: np.ndarray, max_iters: int):
    n, k = len(pts), len(centroids)
    history: list[float] = []
    prev = None
    assignments = np.zeros(n, dtype=int)
    for iteration in range(max_iters):
        d2 = _sq_dists(pts, centroids)
        assignments = np.argmin(d2, axis=1)  # ties -> lowest centroid index
        counts = np.bincount(assignments, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            movable = counts[assignments] > 1
            candidate = np.where(movable, d2[np.arange(n), assignments], -np.inf)
            worst = int(np.argmax(candidate))
            counts[assignments[worst]] -= 1
            assignments[worst] = empty
            counts[empty] = 1
        if iteration == 0:
            history.append(float(((pts - centroids[assignments]) ** 2).sum()))
        for c in range(k):
            centroids[c] = pts[assignments == c].mean(axis=0)
        history.append(float(((pts - centroids[assignments]) ** 2).sum()))
        if prev is not None and np.array_equal(assignments, prev):
            break
        prev = assignments.copy()
    return assignments, centroids, history


def _sq_dists(pts: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = pts[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp_init(pts: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    """Greedy k-means++: each new centroid is sampled D^2-proportionally from
    a few candidates and the one shrinking the potential most is kept."""
    n = len(pts)
    n_candidates = 2 + int(np.log(k))
    centroids = np.empty((k, pts.shape[1]), dtype=float)
    centroids[0] = pts[int(rng.integers(n))]
    closest = ((pts - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            candidates = rng.choice(n, size=n_candidates, p=closest / total)
        else:
            # all remaining points coincide with a chosen centroid
            candidates = np.asarray([int(rng.integers(n))])
        best_idx, best_potential = int(candidates[0]), np.inf
        for idx in candidates:
            potential = float(
                np.minimum(closest, ((pts - pts[int(idx)]) ** 2).sum(axis=1)).sum()
            )
            if potential < best_potential:
                best_idx, best_potential = int(idx), potential
        centroids[i] = pts[best_idx]
        closest = np.minimum(closest, ((pts - centroids[i]) ** 2).sum(axis=1))
    return centroids
