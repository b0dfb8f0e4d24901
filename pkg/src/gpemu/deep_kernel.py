"""
Feed-forward feature extractor placed in front of the kernel.

The network maps the 14 scaled inputs to a 2-D latent space through ReLU
hidden layers. A min-max scaler, refit from the training set between
optimizer epochs, bounds the training latents to [-1, 1]; between
refreshes it is a constant affine map.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core_math import AffineScaler, fit_scaler
from .errors import DegenerateColumnError

DEFAULT_LAYER_DIMS = (14, 100, 50, 5, 2)


@dataclass
class MlpParams:
    layer_dims: tuple
    weights: list
    biases: list
    latent_scaler: AffineScaler | None = None

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpParams":
        return MlpParams(
            tuple(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            None if self.latent_scaler is None else AffineScaler(
                self.latent_scaler.shift.copy(), self.latent_scaler.scale.copy(), self.latent_scaler.kind
            ),
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def with_vector(self, vec) -> "MlpParams":
        vec = np.asarray(vec, dtype=float)
        weights, biases, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[k:k + w.size].reshape(w.shape))
            k += w.size
            biases.append(vec[k:k + b.size].copy())
            k += b.size
        if k != vec.size:
            raise ValueError(f"expected {k} MLP parameters, got {vec.size}")
        return replace(self, weights=weights, biases=biases)

    def weight_mask(self) -> np.ndarray:
        """Boolean mask over ``to_vector()`` selecting weights (not biases)."""
        return np.concatenate(
            [np.r_[np.ones(w.size, bool), np.zeros(b.size, bool)] for w, b in zip(self.weights, self.biases)]
        )


def init_mlp(layer_dims=DEFAULT_LAYER_DIMS, rng=None) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(rng)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(layer_dims), weights, biases)


def _check_input(params, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != params.layer_dims[0]:
        raise ValueError(f"MLP expects {params.layer_dims[0]} input columns, got {X.shape[1]}")
    return X


def _raw_forward(params, X):
    acts = [X]
    h = X
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def raw_latents(params: MlpParams, X) -> np.ndarray:
    """Network output before latent rescaling."""
    return _raw_forward(params, _check_input(params, X))[-1]


def mlp_forward(params: MlpParams, X) -> np.ndarray:
    z = raw_latents(params, X)
    if params.latent_scaler is not None:
        z = (z - params.latent_scaler.shift) / params.latent_scaler.scale
    return z


def refresh_latent_scaler(params: MlpParams, X_train) -> MlpParams:
    z = raw_latents(params, X_train)
    try:
        scaler = fit_scaler(z, "minmax_pm1")
    except DegenerateColumnError as exc:
        raise DegenerateColumnError(exc.column, f"latent dimension {exc.column} is constant on the training set")
    return replace(params, latent_scaler=scaler)


def mlp_backward(params: MlpParams, X, upstream_grad):
    """
    Reverse-mode gradient of ``sum(upstream_grad * mlp_forward(params, X))``.

    Returns a dict with per-layer ``weights`` and ``biases`` gradients and the
    gradient with respect to the ``inputs``. The latent scaler is held fixed.
    """
    X = _check_input(params, X)
    g = np.atleast_2d(np.asarray(upstream_grad, dtype=float))
    if g.shape != (X.shape[0], params.layer_dims[-1]):
        raise ValueError(f"upstream gradient shape {g.shape} does not match output")
    if params.latent_scaler is not None:
        g = g / params.latent_scaler.scale
    acts = _raw_forward(params, X)
    n_layers = len(params.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            g = g * (acts[i + 1] > 0.0)
        gw[i] = acts[i].T @ g
        gb[i] = g.sum(0)
        g = g @ params.weights[i].T
    return {"weights": gw, "biases": gb, "inputs": g}


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([a.ravel() for pair in zip(grads["weights"], grads["biases"]) for a in pair])


def weight_decay_penalty(params: MlpParams, lam: float):
    """L2 penalty ``lam * sum(w**2)`` over weights only, with its flat gradient."""
    vec = params.to_vector()
    mask = params.weight_mask()
    value = lam * float(np.sum(vec[mask] ** 2))
    return value, np.where(mask, 2.0 * lam * vec, 0.0)
