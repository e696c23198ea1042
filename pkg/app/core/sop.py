"""
Second-order pooling: covariance of the spatial features, pre-normalization, the coupled
Newton-Schulz square-root iteration, magnitude compensation and upper-triangle vectorization.
Every step is built from tensor ops, so the backward pass differentiates the unrolled iteration.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Optional, Tuple, Union

import numpy as np

from app.core.tensor import (
    Tensor,
    as_tensor,
    divide,
    frobenius_norm,
    hadamard,
    matmul,
    mean,
    reshape,
    scale,
    sqrt,
    sub,
    trace,
    transpose,
    triu_vec,
)
from app.errors import ConfigError, ContractError, DegenerateCovariance, DimensionError
from app.models import PreNorm, SopConfig

logger = logging.getLogger("SOP")

SYMMETRY_TOLERANCE = 1e-8


@dataclass
class FeatureMap:
    """Spatial features as an n x d matrix (n = h*w), optionally with a leading batch axis."""

    X: Tensor
    height: int
    width: int
    channels: int

    @classmethod
    def from_conv_output(cls, output: Tensor) -> "FeatureMap":
        """(d, h, w) or (b, d, h, w) -> (n, d) or (b, n, d), flattening (h, w) row-major."""
        if output.ndim not in (3, 4):
            raise DimensionError(f"expected a (b,) d x h x w map, got shape {output.shape}")
        channels, height, width = output.shape[-3:]
        flat = reshape(output, output.shape[:-2] + (height * width,))
        return cls(transpose(flat), height, width, channels)

    @property
    def n(self) -> int:
        return self.height * self.width


@dataclass
class CovarianceBundle:
    """Sigma of one map or a batch; the centering matrix and tr(Sigma) are derived on request."""

    sigma: Tensor
    n: int
    A: Optional[Tensor] = None

    @property
    def centering(self) -> np.ndarray:
        return centering_matrix(self.n)

    @property
    def trace_sigma(self) -> np.ndarray:
        return np.trace(self.sigma.data, axis1=-2, axis2=-1)


@dataclass
class NsState:
    Y: Tensor
    Z: Tensor
    k: int
    N: int


@dataclass
class SopVector:
    v: Tensor
    Z: Tensor

    @property
    def m(self) -> int:
        return self.v.shape[-1]


def sop_dimension(channels: int) -> int:
    return channels * (channels + 1) // 2


@lru_cache(maxsize=32)
def centering_matrix(n: int) -> np.ndarray:
    """(1/n)(I - (1/n) 11^T); Sigma = X^T C X for an n x d feature matrix X."""
    matrix = (np.eye(n) - np.full((n, n), 1.0 / n)) / n
    matrix.setflags(write=False)
    return matrix


def _as_matrix(X: Union[FeatureMap, Tensor]) -> Tensor:
    return X.X if isinstance(X, FeatureMap) else as_tensor(X)


def covariance(X: Union[FeatureMap, Tensor]) -> CovarianceBundle:
    """
    Mean-removed covariance over the spatial samples.
    :param X: (n, d) or (b, n, d) features.
    :return: bundle with Sigma (d, d) or (b, d, d).
    """
    features = _as_matrix(X)
    if features.ndim < 2:
        raise DimensionError(f"covariance: expected n x d features, got shape {features.shape}")
    n, d = features.shape[-2:]
    if d < 2:
        raise ConfigError(f"covariance needs at least 2 channels, got d={d}")
    centered = sub(features, mean(features, axis=-2, keepdims=True))
    sigma = scale(matmul(transpose(centered), centered), 1.0 / n)
    return CovarianceBundle(sigma=sigma, n=n)


def pre_normalize(sigma: Tensor, mode: PreNorm = PreNorm.TRACE, eps: float = 1e-10) -> Tuple[Tensor, Tensor]:
    """
    Divide Sigma by its trace or Frobenius norm.
    :return: (A, scale) where scale is the divisor, kept on the tape for compensation.
    :raises DegenerateCovariance: divisor at or below eps; carries the batch index when batched.
    """
    divisor = trace(sigma) if mode is PreNorm.TRACE else frobenius_norm(sigma)
    values = np.atleast_1d(divisor.data)
    degenerate = np.flatnonzero(values <= eps)
    if degenerate.size:
        index = int(degenerate[0]) if divisor.ndim else None
        where = f" at batch index {index}" if index is not None else ""
        raise DegenerateCovariance(
            f"covariance {mode.value} {values[degenerate[0]]:.3e} <= {eps:g}{where}",
            sample_index=index,
        )
    A = divide(sigma, reshape(divisor, divisor.shape + (1, 1)))
    return A, divisor


def _check_symmetric(op: str, matrix: np.ndarray, tolerance: float) -> None:
    asymmetry = float(np.max(np.abs(matrix - np.swapaxes(matrix, -1, -2))))
    if asymmetry > tolerance:
        raise ContractError(f"{op}: matrix is not symmetric (max |M - M^T| = {asymmetry:.3e})")


def newton_schulz_states(A: Tensor, iterations: int) -> Iterator[NsState]:
    """Yields the coupled iterates (Y_k, Z_k) for k = 0..N, starting from Y_0 = A and Z_0 = I."""
    if iterations < 1:
        raise ContractError(f"newton_schulz needs at least one iteration, got {iterations}")
    A = as_tensor(A)
    _check_symmetric("newton_schulz", A.data, SYMMETRY_TOLERANCE)
    dim = A.shape[-1]
    three_eye = 3.0 * np.eye(dim)
    Y = A
    Z = Tensor(np.broadcast_to(np.eye(dim), A.shape))
    yield NsState(Y, Z, 0, iterations)
    for k in range(1, iterations + 1):
        T = scale(sub(three_eye, matmul(Z, Y)), 0.5)
        Y, Z = matmul(Y, T), matmul(T, Z)
        yield NsState(Y, Z, k, iterations)


def newton_schulz(A: Tensor, iterations: int = 5) -> Tensor:
    """Y_N, approximately A^(1/2), after exactly N unrolled steps."""
    state = None
    for state in newton_schulz_states(A, iterations):
        pass
    return state.Y


def post_compensate(Y: Tensor, divisor: Union[Tensor, float]) -> Tensor:
    """Z = sqrt(divisor) * Y_N, undoing the magnitude removed by pre-normalization."""
    divisor = as_tensor(divisor)
    if np.any(divisor.data <= 0):
        raise ContractError(f"post_compensate needs a positive scale, got {divisor.data}")
    root = sqrt(divisor)
    return hadamard(Y, reshape(root, root.shape + (1, 1)))


def upper_tri_vec(Z: Tensor) -> Tensor:
    """Row-major upper triangle with the diagonal, m = d(d+1)/2 entries per matrix."""
    Z = as_tensor(Z)
    magnitude = max(1.0, float(np.max(np.abs(Z.data)))) if Z.size else 1.0
    _check_symmetric("upper_tri_vec", Z.data, SYMMETRY_TOLERANCE * magnitude)
    return triu_vec(Z)


def symmetric_from_vec(v: np.ndarray, dim: int) -> np.ndarray:
    """Inverse of upper_tri_vec on plain arrays."""
    rows, cols = np.triu_indices(dim)
    matrix = np.zeros(v.shape[:-1] + (dim, dim))
    matrix[..., rows, cols] = v
    matrix[..., cols, rows] = v
    return matrix


def sop_forward(X: Union[FeatureMap, Tensor], config: SopConfig) -> SopVector:
    bundle = covariance(X)
    A, divisor = pre_normalize(bundle.sigma, config.pre_norm, config.eps_trace)
    bundle.A = A
    Z = post_compensate(newton_schulz(A, config.iterations), divisor)
    return SopVector(v=upper_tri_vec(Z), Z=Z)
