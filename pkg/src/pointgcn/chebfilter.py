"""
Chebyshev polynomial graph filters.

A filter bank of order K maps an (n, C_in) graph signal to (n, C_out):

    Y[:, o] = sum_k sum_c theta[k, c, o] * Tbar_k[:, c] (+ bias[o])

with Tbar_0 = X, Tbar_1 = L~ X and Tbar_k = 2 L~ Tbar_{k-1} - Tbar_{k-2}.
No eigendecomposition is needed; ``cheb_spectral_oracle`` evaluates the same
map in the Laplacian eigenbasis and exists to cross-check the recursion.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import scipy.sparse as sparse

from common.errors import GraphError, ShapeError
from pointgcn.graph import RescaledLaplacian

logger = logging.getLogger(__name__)

# Dense (n, C) array, one row per vertex.
FeatureMatrix = np.ndarray

LaplacianLike = Union[RescaledLaplacian, sparse.spmatrix, np.ndarray]


@dataclass
class ChebFilterBank:
    """Learnable coefficients theta of shape (K + 1, C_in, C_out) plus optional bias."""

    theta: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.theta.ndim != 3:
            raise ShapeError(f"theta must be 3-D (K+1, C_in, C_out), got {self.theta.shape}")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias must have shape ({self.out_channels},), got {self.bias.shape}")

    @property
    def order(self) -> int:
        return self.theta.shape[0] - 1

    @property
    def in_channels(self) -> int:
        return self.theta.shape[1]

    @property
    def out_channels(self) -> int:
        return self.theta.shape[2]


def _matrix(Lt: LaplacianLike, dtype) -> Union[sparse.spmatrix, np.ndarray]:
    matrix = Lt.matrix if isinstance(Lt, RescaledLaplacian) else Lt
    return matrix.astype(dtype, copy=False)


def _check_input(Lt: LaplacianLike, X: FeatureMatrix, bank: ChebFilterBank) -> None:
    n = Lt.shape[0] if not isinstance(Lt, RescaledLaplacian) else Lt.n
    if X.ndim != 2 or X.shape[0] != n:
        raise ShapeError(f"Signal has shape {X.shape}, graph has {n} vertices")
    if X.shape[1] != bank.in_channels:
        raise ShapeError(f"Signal has {X.shape[1]} channels, filter bank expects {bank.in_channels}")


def cheb_basis(Lt: LaplacianLike, X: FeatureMatrix, order: int) -> np.ndarray:
    """
    Stack Tbar_0 .. Tbar_K of the three-term recursion.

    Returns:
        Array of shape (K + 1, n, C)
    """
    L = _matrix(Lt, X.dtype)
    basis = np.empty((order + 1,) + X.shape, dtype=X.dtype)
    basis[0] = X
    if order >= 1:
        basis[1] = L @ X
    for k in range(2, order + 1):
        basis[k] = 2 * (L @ basis[k - 1]) - basis[k - 2]
    return basis


def cheb_combine(basis: np.ndarray, bank: ChebFilterBank) -> FeatureMatrix:
    """Mix a precomputed basis with the filter coefficients."""
    K1, n, c_in = basis.shape
    flat = basis.transpose(1, 0, 2).reshape(n, K1 * c_in)
    Y = flat @ bank.theta.reshape(K1 * c_in, bank.out_channels)
    if bank.bias is not None:
        Y = Y + bank.bias
    return Y


def cheb_apply(Lt: LaplacianLike, X: FeatureMatrix, bank: ChebFilterBank) -> FeatureMatrix:
    """
    Filter a graph signal with a Chebyshev filter bank.

    Args:
        Lt: Rescaled Laplacian (n x n)
        X: Input features (n x C_in)
        bank: Filter bank with C_in input channels

    Returns:
        Output features (n x C_out)
    """
    _check_input(Lt, X, bank)
    return cheb_combine(cheb_basis(Lt, X, bank.order), bank)


def chebyshev_values(eigenvalues: np.ndarray, order: int) -> np.ndarray:
    """Scalar Chebyshev polynomials T_0..T_K evaluated at each eigenvalue."""
    values = np.empty((order + 1, len(eigenvalues)))
    values[0] = 1.0
    if order >= 1:
        values[1] = eigenvalues
    for k in range(2, order + 1):
        values[k] = 2 * eigenvalues * values[k - 1] - values[k - 2]
    return values


def cheb_spectral_oracle(Lt_dense: np.ndarray, X: FeatureMatrix, bank: ChebFilterBank) -> FeatureMatrix:
    """
    Evaluate the filter as U g(Lambda) U^T X in the eigenbasis of L~.

    Only meant for small graphs in tests.

    Raises:
        GraphError: if the matrix is not symmetric
    """
    L = np.asarray(Lt_dense, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ShapeError(f"Expected a square matrix, got {L.shape}")
    if np.max(np.abs(L - L.T), initial=0.0) > 1e-10 * max(1.0, np.abs(L).max()):
        raise GraphError("Spectral oracle needs a symmetric matrix")
    _check_input(L, X, bank)

    eigenvalues, U = np.linalg.eigh(L)
    T = chebyshev_values(eigenvalues, bank.order)
    spectral = U.T @ X.astype(np.float64)
    theta = bank.theta.astype(np.float64)

    Y = np.zeros((L.shape[0], bank.out_channels))
    for k in range(bank.order + 1):
        Y += (U * T[k]) @ (spectral @ theta[k])
    if bank.bias is not None:
        Y += bank.bias
    return Y


def cheb_backward(
    Lt: LaplacianLike,
    X: FeatureMatrix,
    bank: ChebFilterBank,
    dY: FeatureMatrix,
    basis: Optional[np.ndarray] = None,
) -> Tuple[FeatureMatrix, np.ndarray, Optional[np.ndarray]]:
    """
    Gradients of a Chebyshev filter with respect to its input and coefficients.

    dTheta[k, c, o] = <Tbar_k[:, c], dY[:, o]>, accumulated in float64.
    dX = sum_k T_k(L~) dY theta_k^T, evaluated with Clenshaw's recurrence,
    which is the transpose of the forward recursion since L~ is symmetric.

    Args:
        Lt: Rescaled Laplacian used in the forward pass
        X: Forward input
        bank: Filter bank
        dY: Upstream gradient (n x C_out)
        basis: Forward basis, recomputed if omitted

    Returns:
        (dX, dTheta, dBias); dBias is None when the bank has no bias
    """
    _check_input(Lt, X, bank)
    if dY.shape != (X.shape[0], bank.out_channels):
        raise ShapeError(f"Upstream gradient has shape {dY.shape}, expected {(X.shape[0], bank.out_channels)}")
    if basis is None:
        basis = cheb_basis(Lt, X, bank.order)

    K1, n, c_in = basis.shape
    flat = basis.transpose(1, 0, 2).reshape(n, K1 * c_in).astype(np.float64)
    d_theta = (flat.T @ dY.astype(np.float64)).reshape(bank.theta.shape).astype(bank.theta.dtype)
    d_bias = dY.sum(axis=0, dtype=np.float64).astype(bank.bias.dtype) if bank.bias is not None else None

    L = _matrix(Lt, X.dtype)
    # G[k] = dY theta_k^T, the coefficient of T_k(L~) in dX
    G = np.einsum("no,kco->knc", dY, bank.theta).astype(X.dtype)
    b1 = np.zeros_like(G[0])
    b2 = np.zeros_like(G[0])
    for k in range(bank.order, 0, -1):
        b1, b2 = G[k] + 2 * (L @ b1) - b2, b1
    d_x = G[0] + L @ b1 - b2 if bank.order >= 1 else G[0]
    return d_x, d_theta, d_bias
