"""
Reference linear algebra for checking the training pipeline: cyclic Jacobi eigendecomposition
and the exact PSD square root. Plain numpy with einsum products; nothing here touches the
autodiff tensors.
"""

import logging
from dataclasses import dataclass

import numpy as np

from app.errors import ContractError, ConvergenceError, DimensionError, NotPSDError

logger = logging.getLogger("Oracle")

OFF_DIAGONAL_TOLERANCE = 1e-12
MAX_SWEEPS = 100
CLAMP_THRESHOLD = 1e-10
NEGATIVE_EIGENVALUE_LIMIT = -1e-6


@dataclass(frozen=True)
class EigResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        U = self.eigenvectors
        return np.einsum("ik,k,jk->ij", U, self.eigenvalues, U)


def _frobenius(matrix: np.ndarray) -> float:
    return float(np.sqrt(np.einsum("ij,ij->", matrix, matrix)))


def _max_off_diagonal(matrix: np.ndarray) -> float:
    if matrix.shape[0] < 2:
        return 0.0
    return float(np.max(np.abs(matrix[~np.eye(matrix.shape[0], dtype=bool)])))


def jacobi_eigh(S: np.ndarray, tolerance: float = OFF_DIAGONAL_TOLERANCE, max_sweeps: int = MAX_SWEEPS) -> EigResult:
    """
    Cyclic Jacobi rotations over every (p, q), p < q, until the largest off-diagonal entry is
    at most tolerance * ||S||_F.
    :return: eigenvalues in descending order with orthonormal eigenvector columns.
    :raises ConvergenceError: still above tolerance after `max_sweeps` sweeps.
    """
    S = np.array(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"jacobi_eigh needs a square matrix, got shape {S.shape}")
    if np.max(np.abs(S - S.T), initial=0.0) > 1e-8:
        raise ContractError("jacobi_eigh needs a symmetric matrix")

    dim = S.shape[0]
    A = 0.5 * (S + S.T)
    V = np.eye(dim)
    threshold = tolerance * _frobenius(S)

    sweeps = 0
    while _max_off_diagonal(A) > threshold:
        if sweeps == max_sweeps:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps (d={dim})")
        sweeps += 1
        for p in range(dim - 1):
            for q in range(p + 1, dim):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                col_p, col_q = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p, row_q = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                A[p, q] = A[q, p] = 0.0

                vec_p, vec_q = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vec_p - s * vec_q
                V[:, q] = s * vec_p + c * vec_q

    eigenvalues = np.diag(A).copy()
    order = np.argsort(-eigenvalues, kind="stable")
    logger.debug(f"Jacobi converged in {sweeps} sweeps (d={dim})")
    return EigResult(eigenvalues=eigenvalues[order], eigenvectors=V[:, order])


def matrix_sqrt_exact(S: np.ndarray) -> np.ndarray:
    """U diag(sqrt(lambda)) U^T with tiny negative eigenvalues clamped to zero."""
    eig = jacobi_eigh(S)
    smallest = float(eig.eigenvalues[-1]) if eig.eigenvalues.size else 0.0
    if smallest < NEGATIVE_EIGENVALUE_LIMIT:
        raise NotPSDError(f"matrix has eigenvalue {smallest:.3e} < {NEGATIVE_EIGENVALUE_LIMIT:g}")
    if smallest < -CLAMP_THRESHOLD:
        logger.warning(f"Clamping negative eigenvalue {smallest:.3e} to zero")
    roots = np.sqrt(np.clip(eig.eigenvalues, 0.0, None))
    U = eig.eigenvectors
    R = np.einsum("ik,k,jk->ij", U, roots, U)
    return 0.5 * (R + R.T)


def relative_frobenius_error(approx: np.ndarray, exact: np.ndarray) -> float:
    return _frobenius(np.asarray(approx) - exact) / _frobenius(np.asarray(exact))


def random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.normal(size=(dim, dim)))
    return Q * np.sign(np.diag(R))


def random_spd(dim: int, rng: np.random.Generator, low: float = 0.5, high: float = 1.5) -> np.ndarray:
    """Q diag(lambda) Q^T with lambda ~ U[low, high]."""
    Q = random_orthogonal(dim, rng)
    spectrum = rng.uniform(low, high, size=dim)
    S = np.einsum("ik,k,jk->ij", Q, spectrum, Q)
    return 0.5 * (S + S.T)


def random_symmetric(dim: int, rng: np.random.Generator) -> np.ndarray:
    G = rng.normal(size=(dim, dim))
    return 0.5 * (G + G.T)
