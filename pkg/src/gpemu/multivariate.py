"""
PCA-basis multivariate emulator.

The s x p output matrix (parameter sets by nuclides) is centered per column,
divided by one global standard deviation and decomposed as ``Y ~ W K^T``
with probabilistic PCA fitted by EM over the observed entries. One exact GP
per retained component maps the simulator parameters to that component's
weight; predictions are projected back through the basis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import NOISE_BOUNDS, KernelHyper
from .errors import CoverageError
from .exact_gp import ExactGp, fit_exact_gp, log_marginal_likelihood
from .predictive import PredictiveGaussian, _finalize_cov


@dataclass
class PcaBasis:
    components: np.ndarray  # p x q, orthonormal columns
    weights: np.ndarray  # n x q
    target_mean: np.ndarray  # p
    target_scale: float

    @property
    def q(self) -> int:
        return self.components.shape[1]

    def scale(self, Y):
        return (np.asarray(Y, float) - self.target_mean) / self.target_scale

    def reconstruct(self) -> np.ndarray:
        """Scaled reconstruction ``W K^T``."""
        return self.weights @ self.components.T


def _check_coverage(obs):
    empty_rows = np.flatnonzero(~obs.any(1))
    if empty_rows.size:
        raise CoverageError(f"row {int(empty_rows[0])} has no observed entries")
    empty_cols = np.flatnonzero(~obs.any(0))
    if empty_cols.size:
        raise CoverageError(f"column {int(empty_cols[0])} has no observed entries")


def _row_lstsq(Kc, Yc, obs):
    """Per-row least-squares weights using only the observed columns."""
    n, q = Yc.shape[0], Kc.shape[1]
    W = np.zeros((n, q))
    full = obs.all(1)
    if np.any(full):
        W[full] = np.linalg.lstsq(Kc, Yc[full].T, rcond=None)[0].T
    for i in np.flatnonzero(~full):
        o = obs[i]
        W[i] = np.linalg.lstsq(Kc[o], Yc[i, o], rcond=None)[0]
    return W


def _em(Yc, obs, q, max_iters, tol):
    """EM for PPCA with missing entries; returns ``(C, mean, converged)``."""
    n, p = Yc.shape
    Y0 = np.where(obs, Yc, 0.0)
    mu = Y0.sum(0) / obs.sum(0)
    filled = np.where(obs, Yc, mu)
    U, s, Vt = np.linalg.svd(filled - mu, full_matrices=False)
    C = Vt[:q].T * (s[:q] / np.sqrt(n))
    resid_var = (s[q:] ** 2).sum() / max(n * p, 1)
    total_var = max(float(np.var(filled)), 1e-300)
    floor = 1e-12 * total_var
    s2 = max(resid_var, floor)
    eye = np.eye(q)
    all_obs = bool(obs.all())
    converged = False
    for _ in range(max_iters):
        R = np.where(obs, Yc - mu, 0.0)
        Xh = np.zeros((n, q))
        Sx = np.zeros((n, q, q))
        if all_obs:
            M = s2 * eye + C.T @ C
            Minv = np.linalg.inv(M)
            Xh = R @ C @ Minv.T
            Sx[:] = s2 * Minv
        else:
            for i in range(n):
                o = obs[i]
                Co = C[o]
                Minv = np.linalg.inv(s2 * eye + Co.T @ Co)
                Xh[i] = Minv @ (Co.T @ R[i, o])
                Sx[i] = s2 * Minv
        C_new = np.empty_like(C)
        mu_new = np.empty_like(mu)
        for j in range(p):
            o = obs[:, j]
            Xo = Xh[o]
            A = Xo.T @ Xo + Sx[o].sum(0)
            # joint update of the loading row and the column mean
            Xa = np.hstack([Xo, np.ones((Xo.shape[0], 1))])
            Aa = np.zeros((q + 1, q + 1))
            Aa[:q, :q] = A
            Aa[:q, q] = Aa[q, :q] = Xo.sum(0)
            Aa[q, q] = Xo.shape[0]
            sol = np.linalg.lstsq(Aa, Xa.T @ Yc[o, j], rcond=None)[0]
            C_new[j] = sol[:q]
            mu_new[j] = sol[q]
        E = np.where(obs, Yc - Xh @ C_new.T - mu_new, 0.0)
        quad = np.einsum("ja,iab,jb->ij", C_new, Sx, C_new)
        s2_new = max(float((E * E).sum() + (quad * obs).sum()) / obs.sum(), floor)
        delta = max(np.max(np.abs(C_new - C)) / (1.0 + np.max(np.abs(C_new))),
                    np.max(np.abs(mu_new - mu)) / (1.0 + np.max(np.abs(mu_new))),
                    abs(s2_new - s2) / (s2_new + total_var))
        C, mu, s2 = C_new, mu_new, s2_new
        if delta < tol:
            converged = True
            break
    return C, mu, converged


def ppca_fit(Y, q, max_em_iters=500, tol=1e-9):
    """
    Probabilistic PCA of ``Y`` where NaN marks a missing entry.

    Returns ``(basis, converged)``. The basis columns are orthonormal and the
    weights are the least-squares coefficients of each row's observed entries.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n, p = Y.shape
    if not 1 <= q <= min(n, p):
        raise ValueError(f"q must lie in [1, {min(n, p)}], got {q}")
    obs = np.isfinite(Y)
    _check_coverage(obs)
    col_mean = np.array([Y[obs[:, j], j].mean() for j in range(p)])
    centered = np.where(obs, Y - col_mean, np.nan)
    scale = float(np.sqrt(np.nanmean(centered ** 2)))
    if not scale > 0:
        scale = 1.0
    Yc = centered / scale
    C, mu, converged = _em(Yc, obs, q, max_em_iters, tol)
    # orthonormal basis spanning the fitted loadings
    U, s, Vt = np.linalg.svd(C, full_matrices=False)
    K = U[:, :q]
    W = _row_lstsq(K, np.where(obs, Yc - mu, 0.0), obs)
    return PcaBasis(K, W, col_mean + scale * mu, scale), converged


@dataclass
class MultivariateEmulator:
    basis: PcaBasis
    weight_gps: list
    converged: bool = True
    # variance of the truncation residual, in target units; added on the
    # diagonal when a noise-inclusive predictive is requested
    output_noise: float = 0.0

    @property
    def q(self) -> int:
        return self.basis.q


def _init_hyper(w, d):
    var = float(np.var(w))
    var = var if var > 0 else 1.0
    lo, hi = NOISE_BOUNDS
    return KernelHyper(var, np.ones(d), float(np.clip(1e-3 * var, lo * 10, hi * 0.5)))


def mv_fit(X, Y, q=12, max_iters=100, lr=0.01, max_em_iters=500):
    """Fit the basis on ``Y`` (NaN = masked) and one exact GP per component weight."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y must have the same number of rows")
    keep = np.isfinite(Y).any(1)
    X, Y = X[keep], Y[keep]
    basis, converged = ppca_fit(Y, q, max_em_iters=max_em_iters)
    gps = []
    for k in range(basis.q):
        w = basis.weights[:, k]
        gp = ExactGp(X, w, _init_hyper(w, X.shape[1]), float(np.mean(w)))
        fitted, _ = fit_exact_gp(gp, max_iters=max_iters, lr=lr)
        if log_marginal_likelihood(fitted) < log_marginal_likelihood(gp):
            fitted = gp
        gps.append(fitted)
    obs = np.isfinite(Y)
    resid = (basis.scale(Y) - basis.reconstruct())[obs]
    noise = max(float(np.mean(resid ** 2)), NOISE_BOUNDS[0]) * basis.target_scale ** 2
    return MultivariateEmulator(basis, gps, converged, noise)


def _component_moments(emulator, X, include_noise):
    means, variances = [], []
    for gp in emulator.weight_gps:
        pred = gp.posterior().predict(X, include_noise=include_noise, full_cov=False)
        means.append(pred.mean)
        variances.append(pred.var)
    return np.array(means).T, np.array(variances).T


def mv_predict(emulator: MultivariateEmulator, x_star, include_noise=False) -> PredictiveGaussian:
    """Predictive over all p outputs, in original target units, at a single input."""
    x_star = np.asarray(x_star, dtype=float).reshape(1, -1)
    mu, var = _component_moments(emulator, x_star, include_noise)
    b = emulator.basis
    K = b.components
    mean = b.target_mean + b.target_scale * (K @ mu[0])
    cov = (b.target_scale ** 2) * (K * var[0]) @ K.T
    return PredictiveGaussian(mean, _finalize_cov(cov))


def mv_predict_means(emulator: MultivariateEmulator, X) -> np.ndarray:
    """Predictive means (rows x p) in original target units."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    mu, _ = _component_moments(emulator, X, False)
    b = emulator.basis
    return b.target_mean + b.target_scale * (mu @ b.components.T)
