"""
Adam with L2 weight decay, limited-memory BFGS with Armijo backtracking,
natural-gradient steps for Gaussian variational parameters, and a
central-difference gradient checker.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from .errors import LineSearchError, NaturalGradientError, NonFiniteGradientError

ALGORITHMS = ("adam", "lbfgs", "natgrad")


@dataclass
class OptimizerConfig:
    algorithm: str = "adam"
    learning_rate: float = 0.01
    weight_decay: float = 0.0
    lbfgs_history: int = 10
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    max_step: float | None = None  # L-BFGS trial step length cap

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown optimizer {self.algorithm!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.lbfgs_history < 1:
            raise ValueError("lbfgs_history must be at least 1")
        if self.max_step is not None and not self.max_step > 0:
            raise ValueError("max_step must be positive")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(state: AdamState, params, grad, config: OptimizerConfig, decay_mask=None):
    """One bias-corrected Adam update of a loss to be minimized.

    ``decay_mask`` selects the coordinates that receive the ``2 * lambda * w``
    weight-decay gradient. Returns ``(new_params, new_state)``.
    """
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise NonFiniteGradientError(int(bad[0]))
    if config.weight_decay and decay_mask is not None:
        grad = grad + np.where(decay_mask, 2.0 * config.weight_decay * params, 0.0)
    b1, b2 = config.betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new = params - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    return new, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# L-BFGS
# ---------------------------------------------------------------------------


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    trace: list
    n_iter: int
    message: str = ""


class Lbfgs:
    """Stateful L-BFGS driver; one call to :meth:`step` is one iteration.

    The first iteration (and any iteration after a memory reset) takes a
    steepest-descent trial step of ``learning_rate * min(1, 1/|g|_1)``; later
    iterations start the backtracking search from the unit quasi-Newton
    step, whose scale is set by the usual ``s'y / y'y`` initial Hessian.
    ``config.max_step`` optionally caps the length of every trial step.
    """

    c1 = 1e-4
    max_halvings = 40

    def __init__(self, objective, x0, config: OptimizerConfig | None = None):
        self.objective = objective
        self.config = config or OptimizerConfig("lbfgs")
        self.x = np.array(x0, dtype=float)
        f, g = objective(self.x)
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            raise ValueError("objective is not finite at the starting point")
        self.f = float(f)
        self.g = np.asarray(g, dtype=float)
        self.s_hist = deque(maxlen=self.config.lbfgs_history)
        self.y_hist = deque(maxlen=self.config.lbfgs_history)

    def reset_memory(self):
        self.s_hist.clear()
        self.y_hist.clear()

    def _direction(self):
        q = -self.g.copy()
        if not self.s_hist:
            return q
        alphas = []
        for s, y in zip(reversed(self.s_hist), reversed(self.y_hist)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            q -= a * y
            alphas.append((rho, a))
        s, y = self.s_hist[-1], self.y_hist[-1]
        q *= (s @ y) / (y @ y)
        for (s, y), (rho, a) in zip(zip(self.s_hist, self.y_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return q

    def _search(self, d, t):
        slope = float(self.g @ d)
        for _ in range(self.max_halvings):
            x_new = self.x + t * d
            try:
                # trial points far from the iterate may overflow; they are rejected below
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    f_new, g_new = self.objective(x_new)
            except (np.linalg.LinAlgError, FloatingPointError, ValueError):
                f_new, g_new = np.nan, None
            if np.isfinite(f_new) and g_new is not None and np.all(np.isfinite(g_new)):
                if f_new <= self.f + self.c1 * t * slope and f_new < self.f:
                    return x_new, float(f_new), np.asarray(g_new, dtype=float)
            t *= 0.5
        return None

    def step(self):
        """Take one iteration; raises :class:`LineSearchError` on persistent failure."""
        for attempt in range(2):
            d = self._direction()
            if not self.s_hist:
                t = self.config.learning_rate * min(1.0, 1.0 / max(np.abs(self.g).sum(), 1e-300))
            else:
                t = 1.0
            if not self.g @ d < 0:
                self.reset_memory()
                continue
            cap = self.config.max_step
            if cap is not None:
                t = min(t, cap / max(np.linalg.norm(d), 1e-300))
            found = self._search(d, t)
            if found is not None:
                x_new, f_new, g_new = found
                s = x_new - self.x
                y = g_new - self.g
                if s @ y > 1e-10 * (y @ y):
                    self.s_hist.append(s)
                    self.y_hist.append(y)
                self.x, self.f, self.g = x_new, f_new, g_new
                return self.f
            if not self.s_hist:
                break
            self.reset_memory()
        raise LineSearchError("no decrease found along the search direction")


def lbfgs_minimize(objective, x0, config: OptimizerConfig | None = None, max_iters=100, gtol=1e-12):
    """Minimize ``objective(x) -> (value, grad)`` for up to ``max_iters`` iterations."""
    opt = Lbfgs(objective, x0, config)
    trace = []
    message = "max_iters reached"
    for it in range(max_iters):
        if np.max(np.abs(opt.g)) <= gtol:
            message = "gradient tolerance reached"
            break
        try:
            trace.append(opt.step())
        except LineSearchError:
            if not trace:
                raise
            message = "line search made no further progress"
            break
    return LbfgsResult(opt.x.copy(), opt.f, trace, len(trace), message)


# ---------------------------------------------------------------------------
# natural gradient
# ---------------------------------------------------------------------------


def _flip(M):
    return M[::-1, ::-1]


def precision_to_cov_chol(P):
    """Lower Cholesky factor of ``P^-1`` without forming the inverse."""
    Lt = np.linalg.cholesky(_flip(P))
    inv = solve_triangular(Lt, np.eye(P.shape[0]), lower=True)
    return _flip(inv.T)


def natgrad_step(vstate, grad_mean, grad_cov, lr, max_halvings=10):
    """
    Natural-gradient ascent step on ``q(u) = N(q_mean, S)``.

    ``grad_mean`` and ``grad_cov`` are the ELBO gradients with respect to the
    mean and the (symmetric) covariance. The update moves the natural
    parameters ``(S^-1 m, -S^-1 / 2)`` along the gradient in expectation
    parameters, which equals the Fisher-preconditioned gradient. ``vstate``
    is any dataclass with ``q_mean`` and ``q_cov_factor`` fields.
    """
    g1 = np.asarray(grad_mean, dtype=float)
    G2 = np.asarray(grad_cov, dtype=float)
    G2 = 0.5 * (G2 + G2.T)
    if not (np.all(np.isfinite(g1)) and np.all(np.isfinite(G2))):
        raise NaturalGradientError("non-finite variational gradient")
    if lr == 0 or (not np.any(g1) and not np.any(G2)):
        return replace(vstate, q_mean=vstate.q_mean.copy(), q_cov_factor=vstate.q_cov_factor.copy())
    mu = vstate.q_mean
    Ls = vstate.q_cov_factor
    m = mu.size
    Linv = solve_triangular(Ls, np.eye(m), lower=True)
    P = Linv.T @ Linv
    eta1 = P @ mu
    d1 = g1 - 2.0 * G2 @ mu
    t = float(lr)
    for _ in range(max_halvings + 1):
        P_new = P - 2.0 * t * G2
        P_new = 0.5 * (P_new + P_new.T)
        try:
            Ls_new = precision_to_cov_chol(P_new)
        except np.linalg.LinAlgError:
            t *= 0.5
            continue
        if np.all(np.isfinite(Ls_new)) and np.all(np.diag(Ls_new) > 0):
            mu_new = Ls_new @ (Ls_new.T @ (eta1 + t * d1))
            return replace(vstate, q_mean=mu_new, q_cov_factor=Ls_new)
        t *= 0.5
    raise NaturalGradientError(f"covariance not positive definite after {max_halvings} halvings")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(objective, params, sample_indices=None, h=1e-5, floor=1e-6):
    """
    Largest relative error between the analytic gradient and central differences.

    ``objective(x)`` returns ``(value, grad)``. The relative error for each
    coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    x = np.array(params, dtype=float)
    _, g = objective(x)
    g = np.asarray(g, dtype=float).ravel()
    idx = range(x.size) if sample_indices is None else sample_indices
    worst = 0.0
    for i in idx:
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp = objective(xp)[0]
        fm = objective(xm)[0]
        num = (fp - fm) / (2.0 * h)
        err = abs(g[i] - num) / max(abs(g[i]), abs(num), floor)
        worst = max(worst, err)
    return worst
