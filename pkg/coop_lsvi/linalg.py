"""
Symmetric positive definite algebra shared by every learner: the regularized covariance λI + Σφφᵀ with a cached
Cholesky factor and log-determinant, and the design accumulator Σφyᵀ it is solved against.
"""
from dataclasses import dataclass
from typing import Final

import numpy as np
from scipy import linalg as sla

from coop_lsvi.errors import InvalidArgumentError

SYMMETRY_TOL: Final = 1e-12
EIGEN_TOL: Final = 1e-9
PSD_TOL: Final = 1e-9
LOG_DET_TOL: Final = 1e-9
PHI_NORM_TOL: Final = 1e-9
SOLVE_RTOL: Final = 1e-8


def _frozen(array):
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class RegularizedCovariance:
    """
    Λ = ridge·I + Σ_τ φ_τφ_τᵀ together with its lower Cholesky factor and log-determinant. Instances never
    change; every update returns a new covariance.
    """
    dim: int
    ridge: float
    matrix: np.ndarray
    factor: np.ndarray
    log_det: float

    def recomputed_log_det(self):
        """
        log det of the stored matrix from a fresh factorization, for consistency checks.
        """
        fresh = sla.cholesky(self.matrix, lower=True)
        return float(2.0 * np.sum(np.log(np.diag(fresh))))


@dataclass(frozen=True, eq=False)
class DesignAccumulator:
    """
    Σ_τ φ_τ y_τᵀ stored as a dim×width matrix. width is 1 for the parallel learners and M for the joint learner,
    where column m collects the contribution of agent m's reward.
    """
    dim: int
    width: int
    values: np.ndarray


def _check_vector(cov, phi):
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (cov.dim,):
        raise InvalidArgumentError(f'Expected a vector of length {cov.dim}, got shape {phi.shape}')
    return phi


def make_covariance(dim, ridge):
    """
    Initial covariance ridge·I.
    :param dim: Feature dimension d >= 1
    :param ridge: Regularizer λ > 0
    """
    if int(dim) != dim or dim < 1:
        raise InvalidArgumentError(f'Covariance dimension must be a positive integer, got {dim}')
    if not ridge > 0:
        raise InvalidArgumentError(f'Ridge must be positive, got {ridge}')
    dim = int(dim)
    ridge = float(ridge)
    return RegularizedCovariance(
        dim=dim,
        ridge=ridge,
        matrix=_frozen(ridge * np.eye(dim)),
        factor=_frozen(np.sqrt(ridge) * np.eye(dim)),
        log_det=dim * float(np.log(ridge)),
    )


def cholesky_rank_one_update(factor, x):
    """
    Returns L' with L'L'ᵀ = LLᵀ + xxᵀ for a lower-triangular L.
    :param factor: Lower Cholesky factor L
    :param x: Update vector
    """
    lower = np.array(factor, dtype=float)
    x = np.array(x, dtype=float)
    n = x.shape[0]
    for k in range(n):
        r = np.hypot(lower[k, k], x[k])
        c = r / lower[k, k]
        s = x[k] / lower[k, k]
        lower[k, k] = r
        if k + 1 < n:
            lower[k + 1:, k] = (lower[k + 1:, k] + s * x[k + 1:]) / c
            x[k + 1:] = c * x[k + 1:] - s * lower[k + 1:, k]
    return lower


def rank_one_update(cov, phi):
    """
    Λ + φφᵀ. The log-determinant grows by ln(1 + φᵀΛ⁻¹φ) and the factor is updated in place of a
    refactorization.
    :param cov: Current covariance
    :param phi: Feature vector with ‖φ‖₂ <= 1
    """
    phi = _check_vector(cov, phi)
    if np.linalg.norm(phi) > 1.0 + PHI_NORM_TOL:
        raise InvalidArgumentError(f'Feature norm {np.linalg.norm(phi)} exceeds 1')
    if not np.any(phi):
        return cov
    whitened = sla.solve_triangular(cov.factor, phi, lower=True)
    increment = float(np.log1p(whitened @ whitened))
    return RegularizedCovariance(
        dim=cov.dim,
        ridge=cov.ridge,
        matrix=_frozen(cov.matrix + np.outer(phi, phi)),
        factor=_frozen(cholesky_rank_one_update(cov.factor, phi)),
        log_det=cov.log_det + increment,
    )


def batch_merge(cov, delta):
    """
    Λ + Δ for a symmetric PSD Δ, refactorized from scratch.
    :param cov: Current covariance
    :param delta: d×d symmetric positive semidefinite matrix
    """
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (cov.dim, cov.dim):
        raise InvalidArgumentError(f'Expected a {cov.dim}x{cov.dim} merge, got shape {delta.shape}')
    scale = max(1.0, float(np.max(np.abs(delta)))) if delta.size else 1.0
    if np.max(np.abs(delta - delta.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise InvalidArgumentError('Merged statistics are not symmetric')
    delta = 0.5 * (delta + delta.T)
    if np.linalg.eigvalsh(delta)[0] < -PSD_TOL * scale:
        raise InvalidArgumentError('Merged statistics are not positive semidefinite')
    merged = cov.matrix + delta
    if np.linalg.eigvalsh(merged)[0] < cov.ridge - EIGEN_TOL:
        raise InvalidArgumentError('Merged covariance lost positive definiteness')
    factor = sla.cholesky(merged, lower=True)
    return RegularizedCovariance(
        dim=cov.dim,
        ridge=cov.ridge,
        matrix=_frozen(merged),
        factor=_frozen(factor),
        log_det=float(2.0 * np.sum(np.log(np.diag(factor)))),
    )


def assemble_covariance(dim, ridge, features):
    """
    ridge·I + Σφφᵀ built from scratch from a stack of feature vectors, the reference every incremental
    covariance is checked against.
    :param features: Array of shape (n, dim)
    """
    cov = make_covariance(dim, ridge)
    features = np.asarray(features, dtype=float).reshape(-1, dim)
    if features.shape[0] == 0:
        return cov
    return batch_merge(cov, features.T @ features)


def ellipsoid_norm(cov, phi):
    """
    ‖φ‖_{Λ⁻¹} = sqrt(φᵀΛ⁻¹φ)
    """
    phi = _check_vector(cov, phi)
    whitened = sla.solve_triangular(cov.factor, phi, lower=True)
    return float(np.sqrt(whitened @ whitened))


def ellipsoid_norms(cov, features):
    """
    Row-wise ellipsoid norms for a stack of feature vectors.
    :param features: Array of shape (n, dim)
    :return: Array of shape (n,)
    """
    features = np.asarray(features, dtype=float).reshape(-1, cov.dim)
    whitened = sla.solve_triangular(cov.factor, features.T, lower=True)
    return np.sqrt(np.sum(whitened * whitened, axis=0))


def inverse_quadratic_forms(cov, blocks):
    """
    ΦᵀΛ⁻¹Φ for a stack of d×c feature blocks.
    :param blocks: Array of shape (n, dim, c)
    :return: Array of shape (n, c, c)
    """
    blocks = np.asarray(blocks, dtype=float)
    n, dim, width = blocks.shape
    if dim != cov.dim:
        raise InvalidArgumentError(f'Expected feature blocks with {cov.dim} rows, got {dim}')
    flat = np.transpose(blocks, (1, 0, 2)).reshape(dim, n * width)
    whitened = sla.solve_triangular(cov.factor, flat, lower=True).reshape(dim, n, width)
    return np.einsum('dnc,dnk->nck', whitened, whitened)


def make_accumulator(dim, width=1):
    return DesignAccumulator(dim=int(dim), width=int(width), values=_frozen(np.zeros((dim, width))))


def accumulator_from_samples(dim, features, targets):
    """
    Builds Σφyᵀ from raw samples.
    :param features: (n, dim) for scalar targets or (n, dim, c) feature blocks whose column j pairs with target j
    :param targets: (n,) or (n, c)
    """
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if features.ndim == 2:
        features = features[:, :, None]
    if targets.ndim == 1:
        targets = targets[:, None]
    n, feat_dim, width = features.shape
    if feat_dim != dim or targets.shape != (n, width):
        raise InvalidArgumentError(
            f'Samples of shape {features.shape} do not match targets {targets.shape} for dimension {dim}')
    values = np.einsum('ndc,nc->dc', features, targets) if n else np.zeros((dim, width))
    if not np.all(np.isfinite(values)):
        raise InvalidArgumentError('Design accumulator received non-finite samples')
    return DesignAccumulator(dim=dim, width=width, values=_frozen(values))


def ridge_solve(cov, acc):
    """
    Λ⁻¹·acc through the cached factor.
    :param acc: DesignAccumulator or a raw (d,) / (d, c) array
    :return: Weights with the same shape as the accumulator values
    """
    values = acc.values if isinstance(acc, DesignAccumulator) else np.asarray(acc, dtype=float)
    if values.shape[0] != cov.dim:
        raise InvalidArgumentError(f'Accumulator has {values.shape[0]} rows, covariance has dimension {cov.dim}')
    return sla.cho_solve((cov.factor, True), values)


def log_det_ratio(numerator, denominator):
    """
    ln det(numerator) - ln det(denominator)
    """
    if numerator.dim != denominator.dim:
        raise InvalidArgumentError(f'Dimension mismatch: {numerator.dim} vs {denominator.dim}')
    if numerator.ridge != denominator.ridge:
        raise InvalidArgumentError(f'Ridge mismatch: {numerator.ridge} vs {denominator.ridge}')
    return numerator.log_det - denominator.log_det
