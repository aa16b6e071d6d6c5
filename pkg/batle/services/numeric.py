"""
Seedable numerical kernels used by the dataset generators and the network.

Random streams use numpy's Philox-4x64 counter-based bit generator keyed by a
``SeedSequence(seed, spawn_key=stream)``; the same (seed, stream) pair yields
the same draws on every platform numpy supports.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from batle.config import MAX_SEED
from batle.errors import BatleError, RankDeficiencyError

logger = logging.getLogger(__name__)

KMEANS_MAX_ITER = 300
RANK_TOLERANCE = 1e-10


class RngStream:
    """Independent random stream identified by (seed, stream ids)."""

    def __init__(self, seed: int, stream: Sequence[int] = ()):
        seed = int(seed)
        if not 0 <= seed < MAX_SEED:
            raise BatleError(f"seed {seed} is not a 64-bit unsigned integer")
        self.seed = seed
        self.stream: Tuple[int, ...] = tuple(int(s) for s in stream)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def child(self, *ids: int) -> "RngStream":
        """Derive a stream that shares no state with this one or its siblings."""
        return RngStream(self.seed, self.stream + tuple(ids))

    def derived_seed(self) -> int:
        """A 64-bit integer summarizing this stream, for run records."""
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        return int(sequence.generate_state(1, dtype=np.uint64)[0])

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream})"


@dataclass
class PcaResult:
    components: np.ndarray  # L x V, orthonormal rows
    column_means: np.ndarray  # V
    explained_variance: np.ndarray  # L


def pca_fit(data: np.ndarray, n_components: int) -> PcaResult:
    """
    Principal components from the eigendecomposition of the sample covariance.

    When there are more columns than rows the J x J Gram matrix is decomposed
    instead; both give the same components up to sign. Each component is
    sign-normalized so that its largest-magnitude entry is positive.

    Raises:
        RankDeficiencyError: if the centered data has rank below ``n_components``.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise BatleError("pca_fit expects a 2-D matrix")
    n_rows, n_cols = data.shape
    if n_rows < 2:
        raise BatleError("pca_fit needs at least two rows")
    if not 1 <= n_components <= min(n_rows, n_cols):
        raise BatleError(f"n_components={n_components} must lie in [1, {min(n_rows, n_cols)}]")
    if not np.all(np.isfinite(data)):
        raise BatleError("pca_fit input contains non-finite values")

    means = data.mean(axis=0)
    centered = data - means
    dof = n_rows - 1

    if n_cols <= n_rows:
        covariance = centered.T @ centered / dof
        eigenvalues, eigenvectors = np.linalg.eigh(covariance)
        order = np.argsort(eigenvalues)[::-1]
        eigenvalues = np.clip(eigenvalues[order], 0.0, None)
        vectors = eigenvectors[:, order].T
    else:
        gram = centered @ centered.T / dof
        eigenvalues, eigenvectors = np.linalg.eigh(gram)
        order = np.argsort(eigenvalues)[::-1]
        eigenvalues = np.clip(eigenvalues[order], 0.0, None)
        vectors = None

    top = eigenvalues[0] if eigenvalues.size else 0.0
    rank = int(np.sum(eigenvalues > RANK_TOLERANCE * max(top, 1.0))) if top > 0 else 0
    if rank < n_components:
        raise RankDeficiencyError(rank, n_components)

    eigenvalues = eigenvalues[:n_components]
    if vectors is None:
        # right singular vectors from the left ones: v = X^T u / sqrt(dof * lambda)
        left = eigenvectors[:, order[:n_components]]
        vectors = (centered.T @ left / np.sqrt(dof * eigenvalues)).T
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    else:
        vectors = vectors[:n_components]

    pivots = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(n_components), pivots])
    signs[signs == 0] = 1.0
    vectors = vectors * signs[:, None]
    return PcaResult(components=vectors, column_means=means, explained_variance=eigenvalues)


def pca_transform(result: PcaResult, data: np.ndarray) -> np.ndarray:
    return (np.asarray(data, dtype=np.float64) - result.column_means) @ result.components.T


def pca_inverse(result: PcaResult, scores: np.ndarray) -> np.ndarray:
    return scores @ result.components + result.column_means


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    n_iter: int
    inertia_history: List[float] = field(default_factory=list)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _squared_distances(data: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    sq = (
        np.sum(data**2, axis=1)[:, None]
        - 2.0 * data @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )
    return np.clip(sq, 0.0, None)


def _kmeans_pp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centroids = np.empty((k, data.shape[1]))
    centroids[0] = data[rng.integers(n)]
    closest = _squared_distances(data, centroids[:1])[:, 0]
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            index = int(rng.integers(n))
        else:
            index = int(rng.choice(n, p=closest / total))
        centroids[c] = data[index]
        closest = np.minimum(closest, _squared_distances(data, centroids[c : c + 1])[:, 0])
    return centroids


def kmeans(data: np.ndarray, k: int, rng: RngStream, max_iter: int = KMEANS_MAX_ITER) -> KMeansResult:
    """
    Lloyd's algorithm with k-means++ seeding.

    Stops when assignments no longer change or after ``max_iter`` iterations.
    A cluster that loses all its points is re-seeded from the point farthest
    from its current centroid.
    """
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if not 1 <= k <= n:
        raise BatleError(f"kmeans needs n >= k >= 1, got n={n}, k={k}")

    generator = rng.generator
    centroids = _kmeans_pp_init(data, k, generator)
    distances = _squared_distances(data, centroids)
    assignments = np.argmin(distances, axis=1)
    history = [float(distances[np.arange(n), assignments].sum())]

    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        for c in range(k):
            members = assignments == c
            if members.any():
                centroids[c] = data[members].mean(axis=0)
            else:
                farthest = int(np.argmax(distances[np.arange(n), assignments]))
                logger.debug("kmeans: cluster %d empty, re-seeding from row %d", c, farthest)
                centroids[c] = data[farthest]
                assignments[farthest] = c
        distances = _squared_distances(data, centroids)
        updated = np.argmin(distances, axis=1)
        history.append(float(distances[np.arange(n), updated].sum()))
        if np.array_equal(updated, assignments):
            break
        assignments = updated

    return KMeansResult(assignments=assignments, centroids=centroids, n_iter=n_iter, inertia_history=history)


def sample_inv_gamma(
    shape: float, scale: float, rng: RngStream, size: Optional[int] = None
) -> np.ndarray:
    """Inverse-gamma draws as ``scale / Gamma(shape, 1)``."""
    if not shape > 0 or not scale > 0:
        raise BatleError(f"inverse-gamma parameters must be positive, got shape={shape}, scale={scale}")
    return scale / rng.generator.gamma(shape, 1.0, size=size)


def sigmoid(x):
    return expit(x)


def clip(x, lo: float, hi: float):
    if lo > hi:
        raise BatleError(f"clip bounds reversed: lo={lo} > hi={hi}")
    return np.clip(x, lo, hi)


def standardize(values, mean: float, sd: float):
    if not sd > 0:
        raise BatleError(f"standardize needs a positive standard deviation, got {sd}")
    return (np.asarray(values, dtype=np.float64) - mean) / sd
