"""Region graph, normalized/scaled Laplacians and Chebyshev graph filtering."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .numerics import Tensor, ops
from .subdivision import Partition, region_adjacency


@dataclass
class RegionGraph:
    centers: np.ndarray
    A: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.A.shape[0]

    def edges(self):
        i, j = np.nonzero(np.triu(self.A, 1))
        return [(int(a), int(b), float(self.A[a, b])) for a, b in zip(i, j)]

    def export(self, path):
        """Write ``node i x y`` lines followed by ``i j weight`` edge lines."""
        with open(path, "w") as fh:
            fh.write(f"# nodes {self.n_nodes}\n")
            for i, (x, y) in enumerate(self.centers):
                fh.write(f"node {i} {float(x)!r} {float(y)!r}\n")
            fh.write("# edges: i j weight\n")
            for a, b, w in self.edges():
                fh.write(f"{a} {b} {w!r}\n")


def build_graph(partition: Partition, adjacency=None, weighting: str = "distance",
                sigma: float = 0.1) -> RegionGraph:
    """Weights are center distances, or ``exp(-d^2/sigma^2)`` with ``weighting="gaussian"``."""
    if adjacency is None:
        adjacency = region_adjacency(partition)
    centers = partition.centers
    n = len(centers)
    A = np.zeros((n, n))
    for a, b in adjacency:
        d = float(np.hypot(*(centers[a] - centers[b])))
        if weighting == "distance":
            w = d
        elif weighting == "gaussian":
            w = float(np.exp(-d * d / (sigma * sigma)))
        else:
            raise ValueError(f"unknown weighting {weighting!r}")
        A[a, b] = A[b, a] = w
    return RegionGraph(centers, A)


def normalized_laplacian(A) -> np.ndarray:
    """I - D^-1/2 A D^-1/2; isolated nodes get an identity row."""
    A = np.asarray(A, dtype=float)
    deg = A.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    L = np.eye(len(A)) - inv_sqrt[:, None] * A * inv_sqrt[None, :]
    return 0.5 * (L + L.T)


GOLDEN = (1.0 + 5.0 ** 0.5) / 2.0


def estimate_lambda_max(L, tol: float = 1e-8, max_iter: int = 10_000) -> tuple[float, bool]:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Returns ``(lambda_max, converged)``; on non-convergence the upper bound 2.0
    of the normalized Laplacian is returned with ``converged=False``.
    """
    L = sp.csr_matrix(L) if not sp.issparse(L) else L.tocsr()
    n = L.shape[0]
    if n == 0:
        raise ValueError("empty matrix")
    # all-ones plus an index perturbation; the quadratic golden-ratio term avoids
    # the exact cancellations a linear ramp hits on symmetric (lattice) graphs
    idx = np.arange(1, n + 1, dtype=float)
    v = 1.0 + 0.5 * np.mod(idx * idx * GOLDEN, 1.0)
    v /= np.linalg.norm(v)
    lam = float("inf")
    for _ in range(max_iter):
        w = L @ v
        new = float(v @ w)
        # residual test bounds the eigenvalue error by ~tol^2/gap; the stagnation
        # test covers near-degenerate top pairs whose eigenvector mixes slowly
        if np.linalg.norm(w - new * v) <= tol or abs(new - lam) <= tol * tol * max(1.0, abs(new)):
            return new, True
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, True
        v = w / norm
        lam = new
    warnings.warn("power iteration did not converge; using lambda_max = 2", RuntimeWarning)
    return 2.0, False


@dataclass
class LaplacianBundle:
    L: np.ndarray
    lambda_max: float
    L_scaled: sp.csr_matrix
    converged: bool = True


def laplacian_bundle(A) -> LaplacianBundle:
    L = normalized_laplacian(A)
    lam, ok = estimate_lambda_max(L)
    if lam <= 0:
        lam = 1.0  # L is zero only for an empty graph of zero weight; keep L_scaled finite
    return LaplacianBundle(L, lam, scaled_laplacian(L, lam), ok)


def scaled_laplacian(L, lambda_max: float) -> sp.csr_matrix:
    L = sp.csr_matrix(L)
    n = L.shape[0]
    out = (2.0 / lambda_max) * L - sp.identity(n, format="csr")
    out.eliminate_zeros()
    return out.tocsr()


class CountingOperator:
    """Sparse matrix wrapper that counts the multiply-adds spent in products."""

    def __init__(self, matrix):
        self.matrix = sp.csr_matrix(matrix)
        self.shape = self.matrix.shape
        self.flops = 0

    @property
    def T(self):
        return self.matrix.T

    def __matmul__(self, x):
        self.flops += self.matrix.nnz * (x.shape[1] if x.ndim > 1 else 1)
        return self.matrix @ x


def block_diagonal(L_scaled, copies: int) -> sp.csr_matrix:
    """Batch operator: ``copies`` disconnected replicas of the graph."""
    return sp.block_diag([L_scaled] * copies, format="csr")


def chebyshev_basis(L_scaled, x, K: int) -> list:
    """[T_0 x, ..., T_{K-1} x] by the three-term recurrence, using only products with ``L_scaled``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2 or L_scaled.shape[1] != x.shape[0]:
        raise ValueError(f"signal shape {x.shape} incompatible with operator {L_scaled.shape}")
    terms = [x]
    if K > 1:
        terms.append(ops.spmm(L_scaled, x))
    for _ in range(2, K):
        terms.append(ops.spmm(L_scaled, terms[-1]) * 2.0 - terms[-2])
    return terms


def chebyshev_filter(L_scaled, x, theta, bias=None) -> Tensor:
    """sum_k T_k(L_scaled) x theta_k (+ bias); ``theta`` has shape (K, F_in, F_out)."""
    theta = theta if isinstance(theta, Tensor) else Tensor(theta)
    if theta.ndim != 3:
        raise ValueError("theta must be (K, F_in, F_out)")
    K, f_in, f_out = theta.shape
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2 or x.shape[1] != f_in:
        raise ValueError(f"signal shape {x.shape} does not match theta {theta.shape}")
    basis = ops.concat(chebyshev_basis(L_scaled, x, K)) if K > 1 else x
    y = basis @ ops.reshape(theta, (K * f_in, f_out))
    if bias is not None:
        y = y + bias
    return y


def spectral_filter_oracle(L, x, theta, K: int | None = None, lambda_max: float | None = None) -> np.ndarray:
    """Same polynomial filter evaluated through a dense eigendecomposition of L."""
    L = np.asarray(L.toarray() if sp.issparse(L) else L, dtype=float)
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    K = theta.shape[0] if K is None else K
    if L.shape[0] > 32:
        raise ValueError("oracle is for small graphs (N <= 32)")
    try:
        lam, U = np.linalg.eigh(L)
    except np.linalg.LinAlgError as err:
        raise RuntimeError(f"eigendecomposition failed: {err}") from err
    if lambda_max is None:
        lambda_max = float(lam.max())
    lam_scaled = 2.0 * lam / lambda_max - 1.0
    x_hat = U.T @ x
    y = np.zeros((x.shape[0], theta.shape[2]))
    for k in range(K):
        coeffs = np.zeros(k + 1)
        coeffs[k] = 1.0
        tk = np.polynomial.chebyshev.chebval(lam_scaled, coeffs)
        y += U @ (tk[:, None] * x_hat) @ theta[k]
    return y
