"""
Numeric substrate shared by every emulator.

ARD squared-exponential kernel, Gram assembly and its parameter gradients,
Cholesky factorization with an escalating jitter ladder, Gaussian
log-density and affine column scalers. Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, logit

from .errors import DegenerateColumnError, SingularMatrixError

JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)
NOISE_BOUNDS = (1e-8, 1.0)
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class KernelHyper:
    """Scale, per-dimension lengthscales and noise variance of the ARD SE kernel."""

    scale: float
    lengthscales: np.ndarray
    noise: float = 1e-2

    def __post_init__(self):
        self.scale = float(self.scale)
        self.lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        self.noise = float(self.noise)
        if not self.scale > 0:
            raise ValueError(f"kernel scale must be positive, got {self.scale}")
        if np.any(~(self.lengthscales > 0)):
            raise ValueError("lengthscales must be positive")
        lo, hi = NOISE_BOUNDS
        if not lo <= self.noise <= hi:
            raise ValueError(f"noise {self.noise} outside [{lo}, {hi}]")

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    def copy(self) -> "KernelHyper":
        return KernelHyper(self.scale, self.lengthscales.copy(), self.noise)


def noise_to_raw(noise: float) -> float:
    lo, hi = NOISE_BOUNDS
    frac = (noise - lo) / (hi - lo)
    return float(logit(np.clip(frac, 1e-300, 1.0 - 1e-16)))


def raw_to_noise(raw: float) -> float:
    lo, hi = NOISE_BOUNDS
    return float(lo + (hi - lo) * expit(raw))


def noise_jacobian(noise: float) -> float:
    """Derivative of the bounded noise with respect to its unconstrained value."""
    lo, hi = NOISE_BOUNDS
    return float((noise - lo) * (hi - noise) / (hi - lo))


def _check_dims(d, hyper):
    if d != hyper.dim:
        raise ValueError(f"input dimension {d} does not match {hyper.dim} lengthscales")


def ard_se_kernel(x, x_prime, hyper: KernelHyper) -> float:
    x = np.asarray(x, dtype=float)
    x_prime = np.asarray(x_prime, dtype=float)
    if x.shape != x_prime.shape or x.ndim != 1:
        raise ValueError("kernel arguments must be vectors of equal length")
    _check_dims(x.size, hyper)
    z = (x - x_prime) / hyper.lengthscales
    return hyper.scale * float(np.exp(-0.5 * np.dot(z, z)))


def _scaled_sqdist(A, B, ls):
    a = A / ls
    b = B / ls
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def gram(A, B, hyper: KernelHyper) -> np.ndarray:
    """Kernel matrix between the rows of ``A`` and ``B``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"column mismatch: {A.shape[1]} vs {B.shape[1]}")
    _check_dims(A.shape[1], hyper)
    K = hyper.scale * np.exp(-0.5 * _scaled_sqdist(A, B, hyper.lengthscales))
    if A is B:
        # exact symmetry and unit-distance diagonal
        K = 0.5 * (K + K.T)
        np.fill_diagonal(K, hyper.scale)
    return K


def gram_grads(A, B, hyper: KernelHyper, G, K=None):
    """
    Backpropagate a matrix gradient ``G = dF/dK`` through ``K = gram(A, B)``.

    Returns
    -------
    d_log_scale : float
    d_log_lengthscales : (d,) array
    dA : (n_a, d) array
    dB : (n_b, d) array
    """
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    if K is None:
        K = gram(A, B, hyper)
    H = G * K
    ls2 = hyper.lengthscales ** 2
    rows = H.sum(1)
    cols = H.sum(0)
    HB = H @ B
    HtA = H.T @ A
    d_log_scale = float(H.sum())
    cross = (A * HB).sum(0)
    d_log_ls = ((A * A * rows[:, None]).sum(0) - 2.0 * cross + (B * B * cols[:, None]).sum(0)) / ls2
    dA = -(A * rows[:, None] - HB) / ls2
    dB = (HtA - B * cols[:, None]) / ls2
    return d_log_scale, d_log_ls, dA, dB


def chol_jitter(A, jitter_ladder=JITTER_LADDER):
    """
    Lower Cholesky factor of ``A + j I`` for the first ladder rung ``j`` that works.

    Returns
    -------
    L : (n, n) lower-triangular array
    jitter : float
        The rung that was applied.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("chol_jitter expects a square matrix")
    if not np.all(np.isfinite(A)):
        raise SingularMatrixError("matrix has non-finite entries", jitter=None)
    asym = np.max(np.abs(A - A.T), initial=0.0)
    if asym > 1e-10 * max(np.max(np.abs(A), initial=0.0), 1e-300):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    eye = np.eye(A.shape[0])
    last = None
    for j in jitter_ladder:
        last = j
        try:
            L = np.linalg.cholesky(A + j * eye if j else A)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, float(j)
    raise SingularMatrixError(f"Cholesky failed up to jitter {last:g}", jitter=last)


def chol_solve(L, b):
    """Solve ``(L L^T) x = b`` given the lower factor."""
    return solve_triangular(L.T, solve_triangular(L, b, lower=True), lower=False)


def gaussian_logpdf(y, mean, cov) -> float:
    y = np.asarray(y, dtype=float).ravel()
    mean = np.asarray(mean, dtype=float).ravel()
    L, _ = chol_jitter(np.asarray(cov, dtype=float))
    r = solve_triangular(L, y - mean, lower=True)
    return float(-0.5 * (r @ r) - np.log(np.diag(L)).sum() - 0.5 * y.size * LOG_2PI)


# ---------------------------------------------------------------------------
# affine scalers
# ---------------------------------------------------------------------------

SCALER_KINDS = ("minmax_pm1", "standardize")


@dataclass
class AffineScaler:
    """Per-column map ``(x - shift) / scale``."""

    shift: np.ndarray
    scale: np.ndarray
    kind: str = "standardize"

    def __post_init__(self):
        self.shift = np.atleast_1d(np.asarray(self.shift, dtype=float))
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=float))
        if self.kind not in SCALER_KINDS:
            raise ValueError(f"unknown scaler kind {self.kind!r}")
        if np.any(self.scale == 0):
            raise ValueError("scaler scale entries must be nonzero")

    def to_dict(self):
        return {"kind": self.kind, "shift": self.shift.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["shift"], float), np.array(d["scale"], float), d["kind"])


def fit_scaler(data, kind="standardize") -> AffineScaler:
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[0] < 2:
        raise ValueError("need at least two rows to fit a scaler")
    if kind == "minmax_pm1":
        lo = data.min(0)
        hi = data.max(0)
        shift = 0.5 * (hi + lo)
        scale = 0.5 * (hi - lo)
    elif kind == "standardize":
        shift = data.mean(0)
        scale = data.std(0)
    else:
        raise ValueError(f"unknown scaler kind {kind!r}")
    bad = np.flatnonzero(~(scale > 0))
    if bad.size:
        raise DegenerateColumnError(int(bad[0]))
    return AffineScaler(shift, scale, kind)


def apply_scaler(scaler: AffineScaler, data):
    return (np.asarray(data, dtype=float) - scaler.shift) / scaler.scale


def invert_scaler(scaler: AffineScaler, data):
    return np.asarray(data, dtype=float) * scaler.scale + scaler.shift
