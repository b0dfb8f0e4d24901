"""
Inducing-point approximations.

SGP maximizes the collapsed bound with the optimal ``q(u)`` eliminated;
SVGP carries an explicit ``q(u) = N(q_mean, S)`` and a mini-batch ELBO.
Either model may carry a deep-kernel feature map, in which case inducing
locations live in the latent space and input gradients are pushed back
through the network.

All "kernel-space" functions below take already-mapped inputs and return
gradients keyed by ``log_scale``, ``log_lengthscales``, ``raw_noise``,
``mean``, ``inducing`` and ``inputs``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from .core_math import LOG_2PI, KernelHyper, chol_jitter, gram, gram_grads, noise_jacobian
from .deep_kernel import MlpParams, flatten_grads, mlp_backward, mlp_forward
from .optimizers import precision_to_cov_chol
from .predictive import Posterior, PredictiveGaussian, variational_posterior


@dataclass
class InducingPoints:
    locations: np.ndarray

    def __post_init__(self):
        self.locations = np.atleast_2d(np.asarray(self.locations, dtype=float))
        if self.locations.shape[0] < 1:
            raise ValueError("need at least one inducing point")

    @property
    def m(self) -> int:
        return self.locations.shape[0]


@dataclass
class VariationalState:
    inducing: InducingPoints
    q_mean: np.ndarray
    q_cov_factor: np.ndarray

    def __post_init__(self):
        self.q_mean = np.asarray(self.q_mean, dtype=float).ravel()
        self.q_cov_factor = np.tril(np.asarray(self.q_cov_factor, dtype=float))
        if np.any(np.diag(self.q_cov_factor) <= 0):
            raise ValueError("q_cov_factor must have a strictly positive diagonal")

    @property
    def q_cov(self) -> np.ndarray:
        return self.q_cov_factor @ self.q_cov_factor.T

    def copy(self) -> "VariationalState":
        return VariationalState(InducingPoints(self.inducing.locations.copy()), self.q_mean.copy(),
                                self.q_cov_factor.copy())


@dataclass
class SgpModel:
    hyper: KernelHyper
    mean_const: float
    inducing: InducingPoints
    feature_map: MlpParams | None = None
    # optimal q(u) cached by sgp_condition; this is what gets checkpointed
    q_state: VariationalState | None = None


@dataclass
class SvgpModel:
    hyper: KernelHyper
    mean_const: float
    vstate: VariationalState
    feature_map: MlpParams | None = None

    @property
    def inducing(self) -> InducingPoints:
        return self.vstate.inducing


def _kernel_inputs(model, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if model.feature_map is not None:
        return mlp_forward(model.feature_map, X)
    return X


def init_inducing(Z, m, rng=None) -> InducingPoints:
    """Uniformly random distinct rows of ``Z``."""
    rng = np.random.default_rng(rng)
    uniq = np.unique(np.asarray(Z, dtype=float), axis=0, return_index=True)[1]
    if m > uniq.size:
        raise ValueError(f"requested {m} inducing points but only {uniq.size} distinct rows")
    pick = np.sort(rng.choice(np.sort(uniq), size=m, replace=False))
    return InducingPoints(np.asarray(Z, dtype=float)[pick].copy())


def prior_state(inducing: InducingPoints, hyper: KernelHyper, mean_const=0.0) -> VariationalState:
    """``q(u)`` equal to the prior ``N(mean 1, K_uu)``."""
    L, _ = chol_jitter(gram(inducing.locations, inducing.locations, hyper))
    return VariationalState(inducing, np.full(inducing.m, float(mean_const)), L)


# ---------------------------------------------------------------------------
# collapsed (Titsias) bound
# ---------------------------------------------------------------------------


def _collapsed_core(Zf, y, Zu, hyper):
    Kuu = gram(Zu, Zu, hyper)
    L, _ = chol_jitter(Kuu)
    Kuf = gram(Zu, Zf, hyper)
    sigma = np.sqrt(hyper.noise)
    V = solve_triangular(L, Kuf, lower=True) / sigma
    Bm = np.eye(Zu.shape[0]) + V @ V.T
    LB, _ = chol_jitter(Bm)
    return Kuu, L, Kuf, sigma, V, Bm, LB


def collapsed_bound_terms(Zf, y, Zu, hyper: KernelHyper, mean_const=0.0, grad=True):
    Zf = np.atleast_2d(np.asarray(Zf, dtype=float))
    Zu = np.atleast_2d(np.asarray(Zu, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, m = y.size, Zu.shape[0]
    s2 = hyper.noise
    Kuu, L, Kuf, sigma, V, Bm, LB = _collapsed_core(Zf, y, Zu, hyper)
    r = y - mean_const
    c = solve_triangular(LB, V @ r, lower=True) / sigma
    trVV = float(np.sum(V * V))
    value = (-0.5 * n * LOG_2PI - np.log(np.diag(LB)).sum() - 0.5 * n * np.log(s2)
             - 0.5 * (r @ r) / s2 + 0.5 * (c @ c) - 0.5 * n * hyper.scale / s2 + 0.5 * trVV)
    if not grad:
        return float(value)
    eye = np.eye(m)
    beta = (r - sigma * V.T @ solve_triangular(LB.T, c, lower=False)) / s2
    w = solve_triangular(L, Kuf @ beta, lower=True)
    LBinv = solve_triangular(LB, eye, lower=True)
    Bm_inv = LBinv.T @ LBinv
    inner_uf = np.outer(w, beta) - (Bm_inv @ V - V) / sigma
    dKuf = solve_triangular(L.T, inner_uf, lower=False)
    inner_uu = 0.5 * np.outer(w, w) - 0.5 * (eye - Bm_inv) + 0.5 * (Bm - eye)
    Linv = solve_triangular(L, eye, lower=True)
    dKuu = -Linv.T @ inner_uu @ Linv
    tr_Ainv = n / s2 - (m - np.trace(Bm_inv)) / s2
    d_noise = 0.5 * (beta @ beta - tr_Ainv) + (n * hyper.scale - s2 * trVV) / (2.0 * s2 * s2)
    ls1, ll1, dA, dB = gram_grads(Zu, Zu, hyper, dKuu, K=Kuu)
    ls2, ll2, dU, dF = gram_grads(Zu, Zf, hyper, dKuf, K=Kuf)
    grads = {
        "log_scale": ls1 + ls2 - 0.5 * n * hyper.scale / s2,
        "log_lengthscales": ll1 + ll2,
        "raw_noise": d_noise * noise_jacobian(s2),
        "mean": float(beta.sum()),
        "inducing": dA + dB + dU,
        "inputs": dF,
    }
    return float(value), grads


def collapsed_trace_term(Zf, Zu, hyper: KernelHyper) -> float:
    """``tr(K_ff - Q_ff)``, the quantity the bound penalizes."""
    Zf = np.atleast_2d(Zf)
    Kuu = gram(Zu, Zu, hyper)
    L, _ = chol_jitter(Kuu)
    V = solve_triangular(L, gram(Zu, Zf, hyper), lower=True)
    return float(Zf.shape[0] * hyper.scale - np.sum(V * V))


def collapsed_bound(model: SgpModel, X, y) -> float:
    return collapsed_bound_terms(_kernel_inputs(model, X), y, model.inducing.locations, model.hyper,
                                 model.mean_const, grad=False)


def _push_through_map(model, X, grads):
    if model.feature_map is not None:
        back = mlp_backward(model.feature_map, X, grads["inputs"])
        grads["mlp"] = flatten_grads(back)
        grads["raw_inputs"] = back["inputs"]
    return grads


def collapsed_bound_and_grad(model: SgpModel, X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    value, grads = collapsed_bound_terms(_kernel_inputs(model, X), y, model.inducing.locations,
                                         model.hyper, model.mean_const)
    return value, _push_through_map(model, X, grads)


def optimal_q_terms(Zf, y, Zu, hyper: KernelHyper, mean_const=0.0):
    """Analytic optimum of the full-batch ELBO over ``q(u)``: ``(mean, chol)``."""
    Zf = np.atleast_2d(np.asarray(Zf, dtype=float))
    Zu = np.atleast_2d(np.asarray(Zu, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    _, L, _, sigma, V, Bm, LB = _collapsed_core(Zf, y, Zu, hyper)
    c = solve_triangular(LB, V @ (y - mean_const), lower=True) / sigma
    q_mean = mean_const + L @ solve_triangular(LB.T, c, lower=False)
    q_chol = L @ precision_to_cov_chol(Bm)
    return q_mean, q_chol


def optimal_state(model, X, y) -> VariationalState:
    Zu = model.inducing.locations
    q_mean, q_chol = optimal_q_terms(_kernel_inputs(model, X), y, Zu, model.hyper, model.mean_const)
    return VariationalState(InducingPoints(Zu.copy()), q_mean, q_chol)


def sgp_condition(model: SgpModel, X, y) -> SgpModel:
    """Cache the optimal ``q(u)`` so prediction no longer touches the data."""
    return replace(model, q_state=optimal_state(model, X, y))


def sgp_posterior(model: SgpModel) -> Posterior:
    if model.q_state is None:
        raise ValueError("SGP model has no cached statistics; call sgp_condition first")
    return variational_posterior(model.inducing.locations, model.q_state.q_mean, model.q_state.q_cov_factor,
                                 model.hyper, model.mean_const, model.feature_map)


def sgp_predict(model: SgpModel, query, include_noise=False) -> PredictiveGaussian:
    return sgp_posterior(model).predict(query, include_noise=include_noise)


# ---------------------------------------------------------------------------
# stochastic variational ELBO
# ---------------------------------------------------------------------------


def svgp_elbo_terms(Zb, yb, n_total, Zu, q_mean, q_chol, hyper: KernelHyper, mean_const=0.0, grad=True):
    """
    Mini-batch ELBO estimate ``(n_total / b) * sum_batch E[log p(y_i | f_i)] - KL(q || p)``.

    Besides the kernel-space keys the gradient dict carries ``q_mean``,
    ``q_cov`` (symmetric gradient with respect to ``S``) and ``q_cov_factor``
    (gradient with respect to the lower factor, diagonal in log storage).
    """
    Zb = np.atleast_2d(np.asarray(Zb, dtype=float))
    Zu = np.atleast_2d(np.asarray(Zu, dtype=float))
    yb = np.asarray(yb, dtype=float).ravel()
    b, m = yb.size, Zu.shape[0]
    if b < 1 or n_total < b:
        raise ValueError("need 1 <= batch size <= n_total")
    scale = n_total / b
    s2 = hyper.noise
    Kuu = gram(Zu, Zu, hyper)
    L, _ = chol_jitter(Kuu)
    Kub = gram(Zu, Zb, hyper)
    eye = np.eye(m)
    Linv = solve_triangular(L, eye, lower=True)
    Kinv = Linv.T @ Linv
    P = Kinv @ Kub
    Ls = np.tril(q_chol)
    delta = np.asarray(q_mean, float) - mean_const
    a = Kinv @ delta
    r = yb - mean_const - P.T @ delta
    LsP = Ls.T @ P
    var = hyper.scale - np.sum(P * Kub, 0) + np.sum(LsP * LsP, 0)
    expected = scale * np.sum(-0.5 * (LOG_2PI + np.log(s2)) - 0.5 * (r * r + var) / s2)
    LinvLs = Linv @ Ls
    kl = 0.5 * (np.sum(LinvLs * LinvLs) + delta @ a - m
                + 2.0 * np.log(np.diag(L)).sum() - 2.0 * np.log(np.diag(Ls)).sum())
    value = float(expected - kl)
    if not grad:
        return value
    kappa = scale / (2.0 * s2)
    S = Ls @ Ls.T
    SP = S @ P
    KinvSP = Kinv @ SP
    PPt = P @ P.T
    dKub = 2.0 * kappa * (np.outer(a, r) + P - KinvSP)
    dKuu_e = -kappa * (2.0 * np.outer(P @ r, a) + PPt - KinvSP @ P.T - (KinvSP @ P.T).T)
    KinvSKinv = Kinv @ S @ Kinv
    dKuu_kl = 0.5 * (-KinvSKinv - np.outer(a, a) + Kinv)
    dKuu = dKuu_e - dKuu_kl
    d_noise = scale * np.sum(-0.5 / s2 + 0.5 * (r * r + var) / (s2 * s2))
    ones_proj = 1.0 - P.T @ np.ones(m)
    d_mean = 2.0 * kappa * (r @ ones_proj) + a.sum()
    g_mean = 2.0 * kappa * (P @ r) - a
    Ls_inv = solve_triangular(Ls, eye, lower=True)
    g_cov = -kappa * PPt - 0.5 * Kinv + 0.5 * Ls_inv.T @ Ls_inv
    g_cov = 0.5 * (g_cov + g_cov.T)
    g_factor = np.tril(2.0 * g_cov @ Ls)
    g_factor[np.diag_indices(m)] *= np.diag(Ls)
    ls1, ll1, dA, dB = gram_grads(Zu, Zu, hyper, dKuu, K=Kuu)
    ls2, ll2, dU, dZb = gram_grads(Zu, Zb, hyper, dKub, K=Kub)
    grads = {
        "log_scale": ls1 + ls2 - kappa * b * hyper.scale,
        "log_lengthscales": ll1 + ll2,
        "raw_noise": d_noise * noise_jacobian(s2),
        "mean": float(d_mean),
        "inducing": dA + dB + dU,
        "inputs": dZb,
        "q_mean": g_mean,
        "q_cov": g_cov,
        "q_cov_factor": g_factor,
    }
    return value, grads


def svgp_elbo(model: SvgpModel, batch_X, batch_y, n_total) -> float:
    v = model.vstate
    return svgp_elbo_terms(_kernel_inputs(model, batch_X), batch_y, n_total, v.inducing.locations,
                           v.q_mean, v.q_cov_factor, model.hyper, model.mean_const, grad=False)


def svgp_elbo_and_grad(model: SvgpModel, batch_X, batch_y, n_total):
    batch_X = np.atleast_2d(np.asarray(batch_X, dtype=float))
    v = model.vstate
    value, grads = svgp_elbo_terms(_kernel_inputs(model, batch_X), batch_y, n_total, v.inducing.locations,
                                   v.q_mean, v.q_cov_factor, model.hyper, model.mean_const)
    return value, _push_through_map(model, batch_X, grads)


def svgp_posterior(model: SvgpModel) -> Posterior:
    v = model.vstate
    return variational_posterior(v.inducing.locations, v.q_mean, v.q_cov_factor, model.hyper,
                                 model.mean_const, model.feature_map)


def svgp_predict(model: SvgpModel, query, include_noise=False) -> PredictiveGaussian:
    return svgp_posterior(model).predict(query, include_noise=include_noise)


# ---------------------------------------------------------------------------
# storage of the covariance factor as an unconstrained vector
# ---------------------------------------------------------------------------


def factor_to_raw(Ls) -> np.ndarray:
    """Lower-triangular entries with the diagonal in log space."""
    Ls = np.array(Ls, dtype=float)
    Ls[np.diag_indices_from(Ls)] = np.log(np.diag(Ls))
    return Ls[np.tril_indices_from(Ls)]


def raw_to_factor(raw, m) -> np.ndarray:
    Ls = np.zeros((m, m))
    Ls[np.tril_indices(m)] = raw
    Ls[np.diag_indices(m)] = np.exp(np.diag(Ls))
    return Ls


def factor_grad_to_raw(g_factor) -> np.ndarray:
    return np.asarray(g_factor)[np.tril_indices_from(g_factor)]
