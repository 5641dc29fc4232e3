"""Kernel evaluation, Cholesky utilities, Gaussian identities, and sparse GP
conditional quantities.

Everything here is a pure function of its inputs; the dataclasses are frozen
and safe to share across threads.  All applications of K_Z^{-1} go through
triangular solves with the Cholesky factor; explicit matrix inverses appear
only in test oracles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NotPositiveDefiniteError, ShapeError

diagnostics = logging.getLogger("ffvd.diagnostics")

JITTER_START = 1e-8  # relative to mean(diag K), escalates x10 per retry
JITTER_MAX = 1e-2
NEGATIVE_VARIANCE_WARN = 1e-4  # relative to signal variance


@dataclass(frozen=True)
class KernelParams:
    """Squared-exponential ARD hyperparameters for a single output dimension.

    ``signal_variance`` is the kernel value on the diagonal, k(x, x); the
    lengthscale vector has one entry per input dimension (latent state
    dimensions followed by control dimensions).
    """

    signal_variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if self.signal_variance <= 0.0:
            raise ValueError("signal_variance must be positive")
        if ls.ndim != 1 or np.any(ls <= 0.0):
            raise ValueError("lengthscales must be a 1-D positive vector")

    @property
    def input_dim(self) -> int:
        return self.lengthscales.shape[0]


@dataclass(frozen=True)
class GramCache:
    """Gram matrix at the inducing inputs together with its Cholesky factor
    and the mean-function values there.

    K_Z is stored without jitter; L_Z factors K_Z plus the jitter that was
    needed, so L_Z @ L_Z.T reconstructs K_Z to within that jitter.
    """

    K_Z: np.ndarray
    L_Z: np.ndarray
    m_Z: np.ndarray
    jitter: float = 0.0


@dataclass(frozen=True)
class SparseCond:
    """Projection weights A = k(x,Z) K_Z^{-1} and conditional variance
    B = k(x,x) - k(x,Z) K_Z^{-1} k(Z,x), clamped at zero."""

    A: np.ndarray
    B: float


def _as_input_matrix(X, dim: int, name: str) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != dim:
        raise ShapeError(
            f"{name} must have {dim} columns to match the lengthscales, "
            f"got shape {X.shape}"
        )
    return X


def kernel_eval(params: KernelParams, x, x_prime) -> float:
    """Evaluate the SE-ARD kernel at a single pair of points."""
    x = np.asarray(x, dtype=float).ravel()
    x_prime = np.asarray(x_prime, dtype=float).ravel()
    if x.shape[0] != params.input_dim or x_prime.shape[0] != params.input_dim:
        raise ShapeError(
            f"inputs must have dimension {params.input_dim}, "
            f"got {x.shape[0]} and {x_prime.shape[0]}"
        )
    z = (x - x_prime) / params.lengthscales
    return float(params.signal_variance * np.exp(-0.5 * np.dot(z, z)))


def gram(params: KernelParams, X, X_prime) -> np.ndarray:
    """Gram matrix k(X, X') with X of shape (n, D) and X' of shape (m, D)."""
    X = _as_input_matrix(X, params.input_dim, "X")
    X_prime = _as_input_matrix(X_prime, params.input_dim, "X_prime")
    diff = X[:, None, :] - X_prime[None, :, :]
    sq = np.sum((diff / params.lengthscales) ** 2, axis=2)
    return params.signal_variance * np.exp(-0.5 * sq)


def cholesky_jittered(K, return_jitter: bool = False):
    """Lower Cholesky factor of K + jitter*I with escalating jitter.

    The jitter starts at 1e-8 * mean(diag K) and grows by factors of ten up
    to 1e-2 * mean(diag K); failure at the maximum level raises
    ``NotPositiveDefiniteError`` carrying the final jitter tried.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape[0] < 1:
        raise ShapeError(f"K must be a square matrix, got shape {K.shape}")
    scale = float(np.mean(np.abs(np.diag(K))))
    if scale == 0.0:
        scale = 1.0
    jitter = JITTER_START * scale
    max_jitter = JITTER_MAX * scale
    eye = np.eye(K.shape[0])
    last = jitter
    while True:
        last = jitter
        try:
            L = np.linalg.cholesky(K + jitter * eye)
            return (L, jitter) if return_jitter else L
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > max_jitter * (1.0 + 1e-12):
                raise NotPositiveDefiniteError(
                    f"Cholesky failed up to jitter {last:.3e}", jitter=last
                )


def build_gram_cache(params: KernelParams, Z, m_Z) -> GramCache:
    """Construct the per-dimension cache of K_Z, L_Z and m_Z."""
    Z = _as_input_matrix(Z, params.input_dim, "Z")
    m_Z = np.asarray(m_Z, dtype=float).ravel()
    if m_Z.shape[0] != Z.shape[0]:
        raise ShapeError("m_Z length must equal the number of inducing inputs")
    K_Z = gram(params, Z, Z)
    L_Z, jitter = cholesky_jittered(K_Z, return_jitter=True)
    return GramCache(K_Z=K_Z, L_Z=L_Z, m_Z=m_Z, jitter=jitter)


def gaussian_conditional(mu, Sigma, idx_a, x_a):
    """Condition a joint Gaussian N(mu, Sigma) on block a taking values x_a.

    Returns the mean and covariance of the remaining block b.  With an empty
    index set the unconditional moments are returned unchanged.
    """
    mu = np.asarray(mu, dtype=float).ravel()
    Sigma = np.asarray(Sigma, dtype=float)
    idx_a = np.asarray(idx_a, dtype=int).ravel()
    x_a = np.asarray(x_a, dtype=float).ravel()
    n = mu.shape[0]
    if Sigma.shape != (n, n):
        raise ShapeError("Sigma must be square and match mu")
    if idx_a.size == 0:
        return mu.copy(), Sigma.copy()
    if x_a.shape[0] != idx_a.shape[0]:
        raise ShapeError("x_a must match idx_a in length")
    if np.any(idx_a < 0) or np.any(idx_a >= n) or len(set(idx_a.tolist())) != idx_a.size:
        raise ShapeError("idx_a must be distinct valid indices")
    idx_b = np.array([i for i in range(n) if i not in set(idx_a.tolist())], dtype=int)
    S_aa = Sigma[np.ix_(idx_a, idx_a)]
    S_ba = Sigma[np.ix_(idx_b, idx_a)]
    S_bb = Sigma[np.ix_(idx_b, idx_b)]
    L = cholesky_jittered(S_aa)
    # Sigma_ba Sigma_aa^{-1} via two triangular solves
    tmp = solve_triangular(L, S_ba.T, lower=True)
    gain = solve_triangular(L.T, tmp, lower=False).T
    mean_b = mu[idx_b] + gain @ (x_a - mu[idx_a])
    cov_b = S_bb - gain @ S_ba.T
    return mean_b, cov_b


def expected_log_gaussian(mu_star, Sigma_star, y, Sigma_y) -> float:
    """E_{f ~ N(mu_star, Sigma_star)}[log N(y; f, Sigma_y)] in closed form,
    which equals log N(y; mu_star, Sigma_y) - 0.5 tr(Sigma_y^{-1} Sigma_star).
    """
    mu_star = np.atleast_1d(np.asarray(mu_star, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    Sigma_star = np.atleast_2d(np.asarray(Sigma_star, dtype=float))
    Sigma_y = np.atleast_2d(np.asarray(Sigma_y, dtype=float))
    n = mu_star.shape[0]
    if y.shape[0] != n or Sigma_star.shape != (n, n) or Sigma_y.shape != (n, n):
        raise ShapeError("inconsistent shapes in expected_log_gaussian")
    L = np.linalg.cholesky(Sigma_y)  # singular Sigma_y must raise, so no jitter
    resid = solve_triangular(L, y - mu_star, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    log_density = -0.5 * (n * np.log(2.0 * np.pi) + logdet + resid @ resid)
    half_trace = 0.5 * np.trace(
        solve_triangular(L.T, solve_triangular(L, Sigma_star, lower=True), lower=False)
    )
    return float(log_density - half_trace)


def sparse_cond(params: KernelParams, cache: GramCache, Z, x) -> SparseCond:
    """Sparse GP conditional weights and variance at a single input point."""
    Z = _as_input_matrix(Z, params.input_dim, "Z")
    k_xz = gram(params, x, Z)[0]  # (M,)
    tmp = solve_triangular(cache.L_Z, k_xz, lower=True)
    A = solve_triangular(cache.L_Z.T, tmp, lower=False)
    B = params.signal_variance - float(tmp @ tmp)
    if B < -NEGATIVE_VARIANCE_WARN * params.signal_variance:
        diagnostics.warning(
            "sparse conditional variance %.3e is negative beyond tolerance", B
        )
    return SparseCond(A=A, B=max(B, 0.0))
