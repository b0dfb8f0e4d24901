"""Dense GP regression: log marginal likelihood, its gradient, and prediction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .core_math import LOG_2PI, KernelHyper, chol_jitter, gram, gram_grads, noise_jacobian
from .params import HYPER_KEYS, ParamLayout, blocks_hyper, hyper_blocks
from .predictive import Posterior, PredictiveGaussian, exact_posterior

__all__ = [
    "ExactGp",
    "PredictiveGaussian",
    "log_marginal_likelihood",
    "lml_and_grad",
    "predict",
    "fit_exact_gp",
]


@dataclass
class ExactGp:
    """Dense GP over fixed training data.

    The factor of ``K + noise I`` is built lazily on first prediction and
    reused until the hyperparameters, mean or data arrays are replaced.
    """

    train_inputs: np.ndarray
    train_targets: np.ndarray
    hyper: KernelHyper
    mean_const: float = 0.0
    _cache: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.train_inputs = np.atleast_2d(np.asarray(self.train_inputs, dtype=float))
        self.train_targets = np.asarray(self.train_targets, dtype=float).ravel()
        if self.train_targets.size != self.train_inputs.shape[0]:
            raise ValueError("target length must equal the number of input rows")

    def _key(self):
        h = self.hyper
        return (h.scale, tuple(h.lengthscales), h.noise, self.mean_const,
                id(self.train_inputs), id(self.train_targets))

    def posterior(self) -> Posterior:
        key = self._key()
        if self._cache is None or self._cache[0] != key:
            self._cache = (key, exact_posterior(self.train_inputs, self.train_targets, self.hyper, self.mean_const))
        return self._cache[1]

    def with_hyper(self, hyper: KernelHyper, mean_const=None) -> "ExactGp":
        return ExactGp(self.train_inputs, self.train_targets, hyper,
                       self.mean_const if mean_const is None else mean_const)


def lml_and_grad(X, y, hyper: KernelHyper, mean_const=0.0, grad=True):
    """
    Log marginal likelihood of ``y`` under the GP prior with noise.

    Returns the value and, when ``grad`` is set, a dict of gradients keyed by
    ``log_scale``, ``log_lengthscales``, ``raw_noise``, ``mean`` and ``inputs``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    Kf = gram(X, X, hyper)
    K = Kf.copy()
    K[np.diag_indices_from(K)] += hyper.noise
    L, _ = chol_jitter(K)
    r = y - mean_const
    w = solve_triangular(L, r, lower=True)
    value = float(-0.5 * (w @ w) - np.log(np.diag(L)).sum() - 0.5 * n * LOG_2PI)
    if not grad:
        return value
    alpha = solve_triangular(L.T, w, lower=False)
    Linv = solve_triangular(L, np.eye(n), lower=True)
    G = 0.5 * (np.outer(alpha, alpha) - Linv.T @ Linv)
    d_ls, d_ll, dA, dB = gram_grads(X, X, hyper, G, K=Kf)
    grads = {
        "log_scale": d_ls,
        "log_lengthscales": d_ll,
        "raw_noise": float(np.trace(G)) * noise_jacobian(hyper.noise),
        "mean": float(alpha.sum()),
        "inputs": dA + dB,
    }
    return value, grads


def log_marginal_likelihood(gp: ExactGp) -> float:
    return lml_and_grad(gp.train_inputs, gp.train_targets, gp.hyper, gp.mean_const, grad=False)


def predict(gp: ExactGp, query, include_noise=False) -> PredictiveGaussian:
    return gp.posterior().predict(query, include_noise=include_noise)


def fit_exact_gp(gp: ExactGp, max_iters=100, lr=0.01, history=10):
    """Maximize the LML over log-hypers, bounded noise and the constant mean.

    Returns the fitted model and the LBFGS result.
    """
    from .optimizers import OptimizerConfig, lbfgs_minimize

    layout = ParamLayout.like(hyper_blocks(gp.hyper, gp.mean_const), list(HYPER_KEYS))
    X, y = gp.train_inputs, gp.train_targets

    def objective(vec):
        hyper, mean = blocks_hyper(layout.unpack(vec))
        value, g = lml_and_grad(X, y, hyper, mean)
        return -value, -layout.pack(g)

    x0 = layout.pack(hyper_blocks(gp.hyper, gp.mean_const))
    res = lbfgs_minimize(objective, x0, OptimizerConfig("lbfgs", learning_rate=lr, lbfgs_history=history), max_iters)
    hyper, mean = blocks_hyper(layout.unpack(res.x))
    return gp.with_hyper(hyper, mean), res
