"""
Differentiable layers around the graph convolution.

Every forward function returns its output together with a small cache; the
matching ``*_backward`` takes that cache and the upstream gradient.
"""

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from common.errors import ConfigError, DatasetError, GeometryError, ShapeError
from pointgcn.pointcloud import PointCloud, farthest_point_sample

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12

RngLike = Union[np.random.Generator, int, None]


def _as_rng(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


# ---------------------------------------------------------------- activations

@dataclass
class ReluCache:
    mask: np.ndarray


def relu(X: np.ndarray) -> Tuple[np.ndarray, ReluCache]:
    mask = X > 0
    return np.where(mask, X, np.zeros((), dtype=X.dtype)), ReluCache(mask)


def relu_backward(cache: ReluCache, dY: np.ndarray) -> np.ndarray:
    return np.where(cache.mask, dY, np.zeros((), dtype=dY.dtype))


@dataclass
class DropoutCache:
    scale: Optional[np.ndarray]


def dropout(
    X: np.ndarray,
    keep_prob: float,
    training: bool,
    rng: RngLike = None,
) -> Tuple[np.ndarray, DropoutCache]:
    """
    Inverted dropout: in training each entry survives with ``keep_prob`` and is
    scaled by 1 / keep_prob; evaluation is the identity.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ConfigError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return X, DropoutCache(None)
    keep = _as_rng(rng).random(X.shape) < keep_prob
    scale = keep.astype(X.dtype) / X.dtype.type(keep_prob)
    return X * scale, DropoutCache(scale)


def dropout_backward(cache: DropoutCache, dY: np.ndarray) -> np.ndarray:
    return dY if cache.scale is None else dY * cache.scale


# ---------------------------------------------------------------- pooling

@dataclass
class GlobalPoolCache:
    argmax: np.ndarray
    centered: np.ndarray


def global_pool(features: np.ndarray) -> Tuple[np.ndarray, GlobalPoolCache]:
    """
    Column-wise max and population variance, concatenated into a 2C vector.

    The argmax row of every column (lowest index on ties) is kept for
    active-point extraction and for the backward pass.
    """
    n = features.shape[0]
    if features.ndim != 2 or n < 2:
        raise ShapeError(f"Global pooling needs at least 2 rows, got shape {features.shape}")

    argmax = np.argmax(features, axis=0)
    maxima = features[argmax, np.arange(features.shape[1])]
    # reduce over sorted columns so the result does not depend on row order
    ordered = np.sort(features, axis=0)
    mean = ordered.mean(axis=0)
    variance = np.sort((ordered - mean) ** 2, axis=0).mean(axis=0)

    pooled = np.concatenate([maxima, variance]).astype(features.dtype, copy=False)
    return pooled, GlobalPoolCache(argmax=argmax, centered=features - mean)


def global_pool_backward(cache: GlobalPoolCache, d_pooled: np.ndarray) -> np.ndarray:
    n, C = cache.centered.shape
    d_max, d_var = d_pooled[:C], d_pooled[C:]
    d_features = (2.0 / n) * cache.centered * d_var
    d_features[cache.argmax, np.arange(C)] += d_max
    return d_features.astype(cache.centered.dtype, copy=False)


@dataclass
class MultiresPoolCache:
    source_rows: np.ndarray
    n: int
    centroid_indices: np.ndarray


def cluster_members(
    points: np.ndarray,
    centroid_indices: np.ndarray,
    cluster_k: int,
    mode: str = "overlap",
) -> List[np.ndarray]:
    """
    Point indices belonging to each centroid's cluster.

    "overlap": the cluster_k nearest points of every centroid (clusters may
    share points). "partition": every point joins its nearest centroid.
    """
    d2 = cdist(points[centroid_indices], points, "sqeuclidean")
    if mode == "overlap":
        nearest = np.argsort(d2, axis=1, kind="stable")[:, :cluster_k]
        return [row for row in nearest]
    if mode == "partition":
        owner = np.argmin(d2, axis=0)
        # a centroid always owns itself, even when duplicated points tie
        owner[centroid_indices] = np.arange(len(centroid_indices))
        return [np.flatnonzero(owner == j) for j in range(len(centroid_indices))]
    raise ConfigError(f"Unknown cluster mode '{mode}'")


def multires_pool(
    features: np.ndarray,
    cloud: PointCloud,
    m: int,
    cluster_k: int,
    seed: Optional[int] = 0,
    mode: str = "overlap",
) -> Tuple[np.ndarray, PointCloud, MultiresPoolCache]:
    """
    Downsample a feature map onto m farthest-point centroids by max-pooling
    over each centroid's cluster.

    Args:
        features: (n, C) features, one row per point of ``cloud``
        cloud: Point positions
        m: Centroid count
        cluster_k: Points per cluster in "overlap" mode
        seed: Seed of the first farthest-point pick
        mode: "overlap" or "partition"

    Returns:
        (pooled (m, C), centroid cloud, cache)
    """
    n = cloud.n
    if features.shape[0] != n:
        raise ShapeError(f"Features have {features.shape[0]} rows, cloud has {n} points")
    if m > n or cluster_k > n:
        raise GeometryError(f"Cannot pool {n} points into {m} clusters of {cluster_k}")
    if m < 1 or cluster_k < 1:
        raise GeometryError(f"Centroid count and cluster size must be positive, got {m}, {cluster_k}")

    centroids = farthest_point_sample(cloud, m, seed=seed)
    clusters = cluster_members(cloud.points.astype(np.float64), centroids, cluster_k, mode)

    C = features.shape[1]
    pooled = np.empty((m, C), dtype=features.dtype)
    source_rows = np.empty((m, C), dtype=np.int64)
    for j, members in enumerate(clusters):
        block = features[members]
        best = np.argmax(block, axis=0)
        source_rows[j] = members[best]
        pooled[j] = block[best, np.arange(C)]

    return pooled, cloud.subset(centroids), MultiresPoolCache(source_rows, n, centroids)


def multires_pool_backward(cache: MultiresPoolCache, d_pooled: np.ndarray) -> np.ndarray:
    m, C = d_pooled.shape
    d_features = np.zeros((cache.n, C), dtype=d_pooled.dtype)
    columns = np.broadcast_to(np.arange(C), (m, C))
    np.add.at(d_features, (cache.source_rows, columns), d_pooled)
    return d_features


# ---------------------------------------------------------------- classifier head

@dataclass
class FCCache:
    features: np.ndarray
    probs: np.ndarray


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def fc_softmax(
    features: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
) -> Tuple[np.ndarray, FCCache]:
    """Linear layer followed by a numerically stable softmax."""
    if weight.shape != (bias.shape[0], features.shape[0]):
        raise ShapeError(
            f"FC weight {weight.shape} does not match features {features.shape} and bias {bias.shape}"
        )
    probs = softmax(weight @ features + bias)
    return probs, FCCache(features=features, probs=probs)


def fc_backward(
    cache: FCCache,
    d_logits: np.ndarray,
    weight: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d_features, d_weight, d_bias) given the gradient at the logits."""
    d_weight = np.outer(d_logits, cache.features)
    return weight.T @ d_logits, d_weight, d_logits.copy()


@dataclass(frozen=True)
class ClassWeights:
    """Positive per-class loss weights with mean 1."""

    weights: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.ndim != 1 or len(weights) == 0 or np.any(weights <= 0):
            raise ConfigError("Class weights must be a non-empty vector of positive values")
        object.__setattr__(self, "weights", weights)

    def __getitem__(self, label: int) -> float:
        return float(self.weights[label])

    def __len__(self) -> int:
        return len(self.weights)

    @classmethod
    def uniform(cls, class_count: int) -> "ClassWeights":
        return cls(np.ones(class_count))


def class_weights_from_counts(counts: Sequence[int]) -> ClassWeights:
    """
    Loss weights inversely proportional to class frequency, normalized to
    mean 1.

    Raises:
        DatasetError: if any class has no training examples
    """
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        missing = np.flatnonzero(counts <= 0).tolist()
        raise DatasetError(f"Classes {missing} have no training examples")
    if np.all(counts == counts[0]):
        # exactly 1, not 1 up to rounding
        return ClassWeights.uniform(len(counts))
    inverse = 1.0 / counts
    return ClassWeights(inverse / inverse.mean())


def weighted_cross_entropy(
    probs: np.ndarray,
    label: int,
    class_weights: ClassWeights,
) -> Tuple[float, np.ndarray]:
    """
    Class-weighted cross-entropy of a softmax output.

    Returns:
        (loss, gradient with respect to the logits)
    """
    C = probs.shape[0]
    if not 0 <= label < C:
        raise DatasetError(f"Label {label} out of range for {C} classes")
    if len(class_weights) != C:
        raise ShapeError(f"{len(class_weights)} class weights for {C} classes")

    weight = class_weights[label]
    loss = -weight * float(np.log(probs[label] + LOG_EPS))
    d_logits = weight * probs
    d_logits[label] -= weight
    return loss, d_logits.astype(probs.dtype, copy=False)


# ---------------------------------------------------------------- introspection

class ActivePoint(NamedTuple):
    layer: int
    filter: int
    vertex: int


def active_points(argmax: np.ndarray, layer: int) -> List[ActivePoint]:
    """One (layer, filter, vertex) record per filter of a globally pooled layer."""
    return [ActivePoint(layer, f, int(v)) for f, v in enumerate(argmax)]
