"""
Predictive distributions shared by every emulator family.

Exact, collapsed-sparse and stochastic-variational GPs all predict with

    mean = mu + K(q, Z) L^-T v
    cov  = K(q, q) - A^T A + (R^T A)^T (R^T A),    A = L^-1 K(Z, q)

for a lower factor ``L`` of a kernel matrix over the locations ``Z``. The
exact GP uses ``Z = X``, ``L = chol(K + noise I)`` and no ``R``; the
inducing-point models use ``L = chol(K_uu)`` with ``R = L^-1 S_chol``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .core_math import KernelHyper, LOG_2PI, chol_jitter, gram, gram_grads
from .deep_kernel import MlpParams, mlp_backward, mlp_forward
from .errors import EvaluationError, SingularMatrixError

DIAG_CLAMP_TOL = 1e-10


@dataclass
class PredictiveGaussian:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy()


def _finalize_cov(cov):
    cov = 0.5 * (cov + cov.T)
    d = np.diag(cov)
    small = (d < 0) & (d >= -DIAG_CLAMP_TOL)
    if np.any(small):
        idx = np.flatnonzero(small)
        cov[idx, idx] = 0.0
    return cov


@dataclass
class Posterior:
    hyper: KernelHyper
    mean_const: float
    locations: np.ndarray
    chol: np.ndarray
    white_mean: np.ndarray
    R: np.ndarray | None = None
    feature_map: MlpParams | None = None

    @property
    def n_locations(self) -> int:
        return self.locations.shape[0]

    def kernel_inputs(self, query):
        query = np.atleast_2d(np.asarray(query, dtype=float))
        if self.feature_map is not None:
            return mlp_forward(self.feature_map, query)
        if query.shape[1] != self.locations.shape[1]:
            raise ValueError(f"query has {query.shape[1]} columns, expected {self.locations.shape[1]}")
        return query

    def _project(self, Zq):
        Kqu = gram(Zq, self.locations, self.hyper)
        A = solve_triangular(self.chol, Kqu.T, lower=True)
        return Kqu, A

    def predict(self, query, include_noise=False, full_cov=True) -> PredictiveGaussian:
        Zq = self.kernel_inputs(query)
        _, A = self._project(Zq)
        mean = self.mean_const + A.T @ self.white_mean
        if full_cov:
            cov = gram(Zq, Zq, self.hyper) - A.T @ A
            if self.R is not None:
                B = self.R.T @ A
                cov += B.T @ B
            if include_noise:
                cov[np.diag_indices_from(cov)] += self.hyper.noise
            cov = _finalize_cov(cov)
        else:
            var = self.hyper.scale - (A * A).sum(0)
            if self.R is not None:
                B = self.R.T @ A
                var += (B * B).sum(0)
            if include_noise:
                var += self.hyper.noise
            cov = np.diag(np.where((var < 0) & (var >= -DIAG_CLAMP_TOL), 0.0, var))
        return PredictiveGaussian(mean, cov)

    def predict_mean(self, query) -> np.ndarray:
        _, A = self._project(self.kernel_inputs(query))
        return self.mean_const + A.T @ self.white_mean

    def log_likelihood(self, query, observed, include_noise=True, diagonal=False, grad=True):
        """
        Gaussian log-density of ``observed`` under the joint predictive at ``query``.

        With ``grad=True`` also returns the gradient with respect to the raw
        query rows (through the feature map when one is attached).
        """
        query = np.atleast_2d(np.asarray(query, dtype=float))
        observed = np.asarray(observed, dtype=float).ravel()
        Zq = self.kernel_inputs(query)
        Kqu, A = self._project(Zq)
        W = A if self.R is None else A - self.R @ (self.R.T @ A)
        mean = self.mean_const + A.T @ self.white_mean
        if diagonal:
            c = self.hyper.scale - (A * W).sum(0)
            if include_noise:
                c = c + self.hyper.noise
            if not np.all(np.isfinite(c)) or np.any(c <= 0):
                raise EvaluationError("non-positive predictive variance", point=query)
            resid = observed - mean
            gamma = resid / c
            value = -0.5 * float(resid @ gamma + np.log(c).sum() + c.size * LOG_2PI)
            if not grad:
                return value
            G = np.diag(0.5 * (gamma * gamma - 1.0 / c))
            Kqq = None
        else:
            Kqq = gram(Zq, Zq, self.hyper)
            C = Kqq - A.T @ W
            if include_noise:
                C[np.diag_indices_from(C)] += self.hyper.noise
            C = 0.5 * (C + C.T)
            try:
                Lc, _ = chol_jitter(C)
            except SingularMatrixError as exc:
                raise EvaluationError(f"predictive covariance failed: {exc}", point=query) from exc
            resid = observed - mean
            r = solve_triangular(Lc, resid, lower=True)
            value = float(-0.5 * (r @ r) - np.log(np.diag(Lc)).sum() - 0.5 * resid.size * LOG_2PI)
            if not grad:
                return value
            gamma = solve_triangular(Lc.T, r, lower=False)
            Linv = solve_triangular(Lc, np.eye(Lc.shape[0]), lower=True)
            G = 0.5 * (np.outer(gamma, gamma) - Linv.T @ Linv)
        # mean = mu + Kqu L^-T v ;  cov = Kqq - Kqu M Kuq with M Kuq = L^-T W
        mean_dir = solve_triangular(self.chol.T, self.white_mean, lower=False)
        MKuq = solve_triangular(self.chol.T, W, lower=False)
        dKqu = np.outer(gamma, mean_dir) - 2.0 * G @ MKuq.T
        _, _, dZq, _ = gram_grads(Zq, self.locations, self.hyper, dKqu, K=Kqu)
        if not diagonal:
            _, _, dA, dB = gram_grads(Zq, Zq, self.hyper, G, K=Kqq)
            dZq = dZq + dA + dB
        if self.feature_map is not None:
            dZq = mlp_backward(self.feature_map, query, dZq)["inputs"]
        return value, dZq


def exact_posterior(X, y, hyper: KernelHyper, mean_const=0.0, feature_map=None) -> Posterior:
    """Posterior of a dense GP; ``X`` are kernel-space inputs."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    K = gram(X, X, hyper)
    K[np.diag_indices_from(K)] += hyper.noise
    L, _ = chol_jitter(K)
    v = solve_triangular(L, np.asarray(y, float) - mean_const, lower=True)
    return Posterior(hyper, float(mean_const), X, L, v, None, feature_map)


def variational_posterior(locations, q_mean, q_chol, hyper: KernelHyper, mean_const=0.0, feature_map=None):
    """Posterior implied by an explicit Gaussian ``q(u)`` over inducing values."""
    Z = np.atleast_2d(np.asarray(locations, dtype=float))
    L, _ = chol_jitter(gram(Z, Z, hyper))
    v = solve_triangular(L, np.asarray(q_mean, float) - mean_const, lower=True)
    R = solve_triangular(L, np.asarray(q_chol, float), lower=True)
    return Posterior(hyper, float(mean_const), Z, L, v, R, feature_map)
