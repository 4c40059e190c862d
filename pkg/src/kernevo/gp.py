"""Zero-mean Gaussian process regression."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from .kernels import KernelLike, PairFeatures, as_kernel

JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)
LOG_2PI = math.log(2.0 * math.pi)


class NotPSD(ArithmeticError):
    """Covariance could not be factorized even with the largest jitter."""


def cholesky_with_jitter(K: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``K + jitter * I``.

    Jitter escalates through ``JITTER_LADDER`` scaled by the mean diagonal;
    the first rung that factorizes wins and its absolute value is returned.
    """
    K = np.asarray(K, dtype=float)
    scale = float(np.mean(np.diag(K)))
    if not np.isfinite(scale) or scale <= 0:
        raise NotPSD(f"mean diagonal {scale} is not positive")
    eye = np.eye(K.shape[0])
    for rung in JITTER_LADDER:
        jitter = rung * scale
        try:
            L = np.linalg.cholesky(K + jitter * eye if jitter else K)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, jitter
    raise NotPSD("factorization failed on every jitter rung")


@dataclass(frozen=True)
class PredictiveDistribution:
    mean: np.ndarray
    variance: np.ndarray
    full_cov: Optional[np.ndarray] = None


@dataclass
class GPModel:
    """GP conditioned on training data ``(X, f)`` for fixed hyperparameters.

    The factorization is computed lazily and cached; ``jitter`` holds the
    amount that was needed to factorize ``K(X, X)``.
    """

    kernel: KernelLike
    theta: np.ndarray
    X: np.ndarray
    f: np.ndarray
    jitter: float = 0.0
    _chol: Optional[np.ndarray] = field(default=None, repr=False)
    _alpha: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.kernel = as_kernel(self.kernel)
        self.theta = np.asarray(self.theta, dtype=float)
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.f = np.asarray(self.f, dtype=float).ravel()
        if self.X.shape[0] < 1:
            raise ValueError("need at least one training point")
        if self.X.shape[0] != self.f.shape[0]:
            raise ValueError(f"{self.X.shape[0]} inputs but {self.f.shape[0]} targets")

    def factorize(self, feats: Optional[PairFeatures] = None) -> np.ndarray:
        if self._chol is None:
            feats = feats or PairFeatures(self.X)
            K = self.kernel.evaluate(self.theta, feats)
            K = np.triu(K) + np.triu(K, 1).T
            self._chol, self.jitter = cholesky_with_jitter(K)
            self._alpha = solve_triangular(
                self._chol.T,
                solve_triangular(self._chol, self.f, lower=True),
                lower=False,
            )
        return self._chol

    def log_marginal_likelihood(self) -> float:
        L = self.factorize()
        n = self.f.shape[0]
        # a near-singular jittered factor can overflow the quadratic term; the
        # resulting -inf is a valid (terrible) score for the optimizer
        with np.errstate(over="ignore", invalid="ignore"):
            return float(
                -0.5 * self.f @ self._alpha - np.log(np.diag(L)).sum() - 0.5 * n * LOG_2PI
            )

    def predict(self, Xstar, want_full_cov: bool = False) -> PredictiveDistribution:
        L = self.factorize()
        Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
        Ks = self.kernel.evaluate(self.theta, PairFeatures(self.X, Xstar))  # n x n*
        mean = Ks.T @ self._alpha
        v = solve_triangular(L, Ks, lower=True)
        if want_full_cov:
            Kss = self.kernel.evaluate(self.theta, PairFeatures(Xstar))
            cov = Kss - v.T @ v
            cov = np.triu(cov) + np.triu(cov, 1).T
            var = np.maximum(np.diag(cov).copy(), 0.0)
            np.fill_diagonal(cov, var)
            return PredictiveDistribution(mean, var, cov)
        kss = self.kernel.evaluate(self.theta, PairFeatures(Xstar, diag=True))
        var = np.maximum(kss - np.einsum("ij,ij->j", v, v), 0.0)
        return PredictiveDistribution(mean, var)


def log_marginal_likelihood(model: GPModel) -> float:
    return model.log_marginal_likelihood()


def posterior_predict(model: GPModel, Xstar, want_full_cov: bool = False) -> PredictiveDistribution:
    return model.predict(Xstar, want_full_cov)


def lml_from_matrix(K: np.ndarray, f: np.ndarray) -> float:
    """Log marginal likelihood for an explicit covariance matrix."""
    L, _ = cholesky_with_jitter(K)
    f = np.asarray(f, dtype=float)
    a = solve_triangular(L, f, lower=True)
    return float(-0.5 * a @ a - np.log(np.diag(L)).sum() - 0.5 * f.size * LOG_2PI)
