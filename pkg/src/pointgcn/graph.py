"""
Gaussian-weighted k-nearest-neighbor graphs over point clouds and their
rescaled normalized Laplacians.
"""

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import shortest_path
from scipy.spatial.distance import cdist

from common.errors import GraphError
from pointgcn.pointcloud import PointCloud

logger = logging.getLogger(__name__)

# "union": edge kept if either endpoint lists the other among its k nearest.
# "mutual": both must. Union never isolates a vertex.
SYMMETRIZATION = "union"

# Graphs up to this size get an exact dense eigendecomposition.
DENSE_EIG_MAX_N = 64

LAMBDA_MAX_FALLBACK = 2.0

SigmaPolicy = Union[str, float, None]


@dataclass(frozen=True)
class WeightedGraph:
    """Symmetric sparse adjacency with Gaussian kernel weights in (0, 1]."""

    adjacency: sparse.csr_matrix
    sigma2: float
    k: int

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()


@dataclass(frozen=True)
class RescaledLaplacian:
    """L~ = 2 L / lambda_max - I for a normalized Laplacian L."""

    matrix: sparse.csr_matrix
    lambda_max: float

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    """
    Indices of the k nearest neighbors of every point, self excluded.

    Exact brute force; ties go to the lower index.
    """
    d2 = cdist(points, points, "sqeuclidean")
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def knn_graph(
    cloud: PointCloud,
    k: int,
    sigma_policy: SigmaPolicy = "adaptive",
    symmetrize: str = SYMMETRIZATION,
) -> WeightedGraph:
    """
    Build the symmetrized kNN graph with weights exp(-||xi - xj||^2 / sigma^2).

    Args:
        cloud: Points to connect
        k: Neighbors per point, 1 <= k < n
        sigma_policy: "adaptive" (or None) for sigma^2 = mean squared distance
            over the directed kNN pairs; a positive float for a fixed sigma
        symmetrize: "union" or "mutual"

    Returns:
        WeightedGraph with exactly symmetric adjacency
    """
    n = cloud.n
    if not 1 <= k < n:
        raise GraphError(f"Need 1 <= k < n, got k={k}, n={n}")

    points = cloud.points.astype(np.float64)
    neighbors = knn_indices(points, k)
    rows = np.repeat(np.arange(n), k)
    cols = neighbors.ravel()
    d2 = ((points[rows] - points[cols]) ** 2).sum(axis=1)

    if sigma_policy is None or sigma_policy == "adaptive":
        sigma2 = float(d2.mean())
        if not sigma2 > 0:
            # every neighbor coincides with its point; all weights are 1 anyway
            sigma2 = 1.0
    else:
        sigma = float(sigma_policy)
        if not sigma > 0:
            raise GraphError(f"Fixed sigma must be positive, got {sigma}")
        sigma2 = sigma * sigma

    weights = np.maximum(np.exp(-d2 / sigma2), np.finfo(np.float64).tiny)
    directed = sparse.csr_matrix((weights, (rows, cols)), shape=(n, n))

    if symmetrize == "union":
        adjacency = directed.maximum(directed.T)
    elif symmetrize == "mutual":
        adjacency = directed.minimum(directed.T)
    else:
        raise GraphError(f"Unknown symmetrization '{symmetrize}'")

    adjacency = sparse.csr_matrix(adjacency)
    adjacency.sort_indices()
    graph = WeightedGraph(adjacency=adjacency, sigma2=sigma2, k=k)
    if np.any(graph.degrees <= 0):
        raise GraphError("Graph has an isolated vertex")

    logger.debug(f"kNN graph: n={n}, k={k}, edges={adjacency.nnz}, sigma2={sigma2:.4g}")
    return graph


def normalized_laplacian(graph: WeightedGraph) -> sparse.csr_matrix:
    """
    L = I - D^-1/2 W D^-1/2.

    Raises:
        GraphError: if any vertex has zero degree
    """
    degrees = graph.degrees
    if np.any(degrees <= 0):
        raise GraphError("Normalized Laplacian undefined: graph has an isolated vertex")

    inv_sqrt = 1.0 / np.sqrt(degrees)
    coo = graph.adjacency.tocoo()
    # scale by the product of both factors so (i, j) and (j, i) round identically
    scaled = coo.data * (inv_sqrt[coo.row] * inv_sqrt[coo.col])
    normalized = sparse.csr_matrix((scaled, (coo.row, coo.col)), shape=coo.shape)
    laplacian = sparse.identity(graph.n, format="csr") - normalized
    laplacian.sort_indices()
    return laplacian


def estimate_lambda_max(
    L,
    tol: float = 1e-3,
    max_iter: int = 200,
    method: str = "lanczos",
    seed: int = 0,
) -> float:
    """
    Largest eigenvalue of a symmetric positive semidefinite matrix.

    Small matrices are solved densely. Larger ones use Lanczos (ARPACK, run to
    machine precision) or plain power iteration; if the iterative solver does
    not converge within ``max_iter`` the normalized-Laplacian bound 2 is
    returned.

    Args:
        L: Sparse or dense symmetric PSD matrix
        tol: Relative tolerance
        max_iter: Iteration cap for the iterative solvers
        method: "lanczos" or "power"
        seed: Seed of the starting vector

    Returns:
        Estimate of lambda_max
    """
    n = L.shape[0]
    if method not in ("lanczos", "power"):
        raise GraphError(f"Unknown eigensolver '{method}'")

    if method == "lanczos" and n <= DENSE_EIG_MAX_N:
        dense = L.toarray() if sparse.issparse(L) else np.asarray(L, dtype=np.float64)
        return float(np.linalg.eigvalsh(dense)[-1])

    v0 = np.random.default_rng(seed).standard_normal(n)

    if method == "lanczos":
        return _lanczos(L, v0, tol, max_iter)

    return _power_iteration(L, v0, tol, max_iter)


def _lanczos(L, v0: np.ndarray, tol: float, max_iter: int) -> float:
    # ARPACK's tol bounds the Ritz residual, not the eigenvalue error; solve to
    # machine precision and check the residual against tol ourselves
    try:
        values, vectors = spla.eigsh(L, k=1, which="LA", tol=0, maxiter=max_iter, v0=v0)
    except spla.ArpackNoConvergence:
        logger.warning(f"Lanczos did not converge in {max_iter} iterations; using lambda_max=2")
        return LAMBDA_MAX_FALLBACK

    lam = float(values[0])
    x = vectors[:, 0]
    residual = float(np.linalg.norm(L @ x - lam * x))
    if not lam > 0 or residual > tol * lam:
        logger.warning(f"Lanczos residual {residual:.3g} exceeds tolerance; using lambda_max=2")
        return LAMBDA_MAX_FALLBACK
    return lam


def _power_iteration(L, x: np.ndarray, tol: float, max_iter: int) -> float:
    x = x / np.linalg.norm(x)
    for _ in range(max_iter):
        y = L @ x
        lam = float(x @ y)
        if not lam > 0:
            break
        # residual test: an eigenvalue lies within ||Lx - lam x|| of lam
        if np.linalg.norm(y - lam * x) <= tol * lam:
            return lam
        x = y / np.linalg.norm(y)
    logger.warning(f"Power iteration did not converge in {max_iter} iterations; using lambda_max=2")
    return LAMBDA_MAX_FALLBACK


def rescale_laplacian(L, lambda_max: float) -> RescaledLaplacian:
    """
    L~ = 2 L / lambda_max - I, which maps the spectrum of L into [-1, 1].

    Raises:
        GraphError: if lambda_max is not positive
    """
    if not lambda_max > 0:
        raise GraphError(f"lambda_max must be positive, got {lambda_max}")
    L = sparse.csr_matrix(L, dtype=np.float64)
    matrix = (2.0 / lambda_max) * L - sparse.identity(L.shape[0], format="csr")
    matrix = sparse.csr_matrix(matrix)
    matrix.sort_indices()
    return RescaledLaplacian(matrix=matrix, lambda_max=float(lambda_max))


def cloud_laplacian(
    cloud: PointCloud,
    k: int,
    sigma_policy: SigmaPolicy = "adaptive",
    symmetrize: str = SYMMETRIZATION,
    eig_method: str = "lanczos",
) -> RescaledLaplacian:
    """kNN graph -> normalized Laplacian -> rescaled Laplacian for one cloud."""
    graph = knn_graph(cloud, k, sigma_policy, symmetrize)
    laplacian = normalized_laplacian(graph)
    return rescale_laplacian(laplacian, estimate_lambda_max(laplacian, method=eig_method))


def hop_distances(adjacency: sparse.spmatrix, source: int) -> np.ndarray:
    """Unweighted shortest-path hop counts from ``source`` (inf if unreachable)."""
    return shortest_path(adjacency, unweighted=True, indices=source, directed=False)
