"""
A single prediction interface over the five emulator families.

Every emulator predicts standardized binding energies for design rows
``(theta, Z, N)`` in scaled units. ``Emulator.predictive(theta)`` returns
the joint predictive over the whole nuclide block at one parameter vector,
which is what the stability gate, the observation likelihood and the timing
benchmark consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_math import AffineScaler, gaussian_logpdf
from .dataset import query_block
from .errors import EvaluationError, SingularMatrixError
from .multivariate import mv_predict, mv_predict_means
from .predictive import Posterior, PredictiveGaussian, _finalize_cov
from .sparse_variational import SgpModel, SvgpModel, sgp_posterior, svgp_posterior

FAMILIES = ("sgp", "svgp", "dksgp", "dksvgp", "multivariate")


@dataclass
class Emulator:
    kind: str
    model: object
    nuclide_block: np.ndarray
    input_scaler: AffineScaler | None = None
    target_scaler: AffineScaler | None = None
    epoch: int = 0
    _posterior: Posterior | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in FAMILIES:
            raise ValueError(f"unknown emulator kind {self.kind!r}")
        self.nuclide_block = np.atleast_2d(np.asarray(self.nuclide_block, dtype=float))

    @property
    def n_params(self) -> int:
        if self.kind == "multivariate":
            return self.model.weight_gps[0].train_inputs.shape[1]
        if self.model.feature_map is not None:
            return self.model.feature_map.layer_dims[0] - 2
        return self.model.inducing.locations.shape[1] - 2

    @property
    def m(self):
        return None if self.kind == "multivariate" else self.model.inducing.m

    def posterior(self) -> Posterior:
        if self.kind == "multivariate":
            raise TypeError("the multivariate emulator has no single posterior")
        if self._posterior is None:
            if isinstance(self.model, SgpModel):
                self._posterior = sgp_posterior(self.model)
            elif isinstance(self.model, SvgpModel):
                self._posterior = svgp_posterior(self.model)
            else:
                raise TypeError(f"unsupported model type {type(self.model).__name__}")
        return self._posterior

    # -- prediction -------------------------------------------------------

    def _mv_nuclide_index(self, rows):
        d = np.abs(rows[:, None, :] - self.nuclide_block[None, :, :]).sum(-1)
        idx = d.argmin(1)
        if np.any(d[np.arange(rows.shape[0]), idx] > 1e-9):
            raise ValueError("query (Z, N) not in the emulator's nuclide table")
        return idx

    def predict_rows(self, X) -> np.ndarray:
        """Predictive means (standardized units) at design rows."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.kind != "multivariate":
            return self.posterior().predict_mean(X)
        p = self.n_params
        theta, inv = np.unique(X[:, :p], axis=0, return_inverse=True)
        means = mv_predict_means(self.model, theta)
        return means[inv.ravel(), self._mv_nuclide_index(X[:, p:])]

    def predictive(self, theta, include_noise=True, full_cov=True) -> PredictiveGaussian:
        """Joint predictive over the nuclide block at scaled parameters ``theta``."""
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.n_params:
            raise ValueError(f"theta has {theta.size} entries, expected {self.n_params}")
        if self.kind == "multivariate":
            pred = mv_predict(self.model, theta)
            cov = pred.cov
            if include_noise:
                cov = cov + self.model.output_noise * np.eye(cov.shape[0])
            if not full_cov:
                cov = np.diag(np.diag(cov))
            return PredictiveGaussian(pred.mean, _finalize_cov(cov))
        return self.posterior().predict(query_block(theta, self.nuclide_block), include_noise, full_cov)

    def log_likelihood(self, theta, observed, diagonal=False, grad=True, fd_step=1e-5):
        """
        Log-density of standardized ``observed`` values under the noise-inclusive
        predictive at ``theta``; with ``grad`` also its gradient in ``theta``.
        """
        theta = np.asarray(theta, dtype=float).ravel()
        observed = np.asarray(observed, dtype=float).ravel()
        if self.kind != "multivariate":
            out = self.posterior().log_likelihood(query_block(theta, self.nuclide_block), observed,
                                                  include_noise=True, diagonal=diagonal, grad=grad)
            if not grad:
                return out
            value, dq = out
            return value, dq[:, :theta.size].sum(0)
        value = self._mv_loglik(theta, observed, diagonal)
        if not grad:
            return value
        return value, fd_gradient(lambda t: self._mv_loglik(t, observed, diagonal), theta, fd_step)

    def _mv_loglik(self, theta, observed, diagonal):
        pred = self.predictive(theta, include_noise=True, full_cov=not diagonal)
        try:
            return gaussian_logpdf(observed, pred.mean, pred.cov)
        except SingularMatrixError as exc:
            raise EvaluationError(f"predictive covariance failed: {exc}", point=theta) from exc


def fd_gradient(fun, x, h=1e-5):
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fun(xp) - fun(xm)) / (2.0 * h)
    return g
