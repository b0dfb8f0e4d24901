"""
No-U-Turn sampler over a box-bounded parameter vector.

Each coordinate is mapped to the real line by ``theta = lo + (hi - lo) s(z)``
with ``s`` the logistic function, and the log-Jacobian is added to the
target. Trajectories grow by doubling up to ``max_depth`` with the endpoint
no-U-turn criterion; the next state is drawn multinomially (biased
progressive sampling across doublings). The step size is tuned during
warmup by dual averaging; the mass matrix is the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .diagnostics import ess, hpd_interval, split_rhat
from .errors import EvaluationError, InferenceError
from .seeding import rng_for

DIVERGENCE_THRESHOLD = 1000.0
DIVERGENCE_WARN_FRACTION = 0.25
MAX_START_ATTEMPTS = 20


@dataclass
class ChainResult:
    samples: np.ndarray
    warmup: int
    rhat: np.ndarray
    ess: np.ndarray
    hpd90: np.ndarray
    quality: np.ndarray
    rhat_degenerate: np.ndarray
    divergences: int = 0
    step_size: float = float("nan")
    accept_rate: float = float("nan")
    warnings: list = field(default_factory=list)

    @property
    def good(self) -> bool:
        return bool(np.all(self.quality))


def summarize(samples, warmup=0, chains=1, mass=0.90) -> ChainResult:
    """Diagnostics for post-warmup ``samples`` (draws x dim, chains stacked in order)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    d = samples.shape[1]
    per = samples.reshape(chains, -1, d)
    rhat = np.empty(d)
    degen = np.zeros(d, bool)
    ess_v = np.empty(d)
    hpd = np.empty((d, 2))
    for j in range(d):
        rhat[j], degen[j] = split_rhat(per[:, :, j], return_flag=True)
        ess_v[j] = sum(ess(per[c, :, j]) for c in range(chains))
        hpd[j] = hpd_interval(samples[:, j], mass)
    quality = (ess_v > 30) & (rhat < 1.1)
    return ChainResult(samples, warmup, rhat, ess_v, hpd, quality, degen)


class _BoxTarget:
    def __init__(self, logp_grad, lo, hi):
        self.logp_grad = logp_grad
        self.lo = np.asarray(lo, float)
        self.hi = np.asarray(hi, float)
        self.width = self.hi - self.lo

    def to_theta(self, z):
        return self.lo + self.width * expit(z)

    def to_z(self, theta):
        u = (np.asarray(theta, float) - self.lo) / self.width
        return np.log(u) - np.log1p(-u)

    def __call__(self, z):
        s = expit(z)
        theta = self.lo + self.width * s
        try:
            lp, g = self.logp_grad(theta)
        except (EvaluationError, np.linalg.LinAlgError, FloatingPointError, ValueError):
            return -np.inf, np.zeros_like(z)
        g = np.asarray(g, float)
        if not (np.isfinite(lp) and np.all(np.isfinite(g))):
            return -np.inf, np.zeros_like(z)
        log_jac = np.sum(np.log(self.width) + log_expit(z) + log_expit(-z))
        return float(lp) + float(log_jac), g * self.width * s * (1.0 - s) + (1.0 - 2.0 * s)


@dataclass
class _Tree:
    z_minus: np.ndarray
    r_minus: np.ndarray
    g_minus: np.ndarray
    z_plus: np.ndarray
    r_plus: np.ndarray
    g_plus: np.ndarray
    z_prop: np.ndarray
    lp_prop: float
    g_prop: np.ndarray
    log_w: float
    turning: bool
    diverging: bool
    accept_sum: float
    n_leapfrog: int


def _uturn(z_minus, z_plus, r_minus, r_plus):
    dz = z_plus - z_minus
    return bool(dz @ r_minus < 0 or dz @ r_plus < 0)


class _Nuts:
    def __init__(self, target, rng, max_depth):
        self.target = target
        self.rng = rng
        self.max_depth = max_depth

    def leapfrog(self, z, r, g, eps):
        r = r + 0.5 * eps * g
        z = z + eps * r
        lp, g = self.target(z)
        r = r + 0.5 * eps * g
        return z, r, g, lp

    def build(self, z, r, g, v, depth, eps, H0):
        if depth == 0:
            z1, r1, g1, lp1 = self.leapfrog(z, r, g, v * eps)
            H = -lp1 + 0.5 * (r1 @ r1)
            if not np.isfinite(H):
                H = np.inf
            delta = H - H0
            accept = 0.0 if not np.isfinite(delta) else min(1.0, math.exp(-delta)) if delta > 0 else 1.0
            return _Tree(z1, r1, g1, z1, r1, g1, z1, lp1, g1, -delta, False,
                         bool(delta > DIVERGENCE_THRESHOLD), accept, 1)
        t1 = self.build(z, r, g, v, depth - 1, eps, H0)
        if t1.turning or t1.diverging:
            return t1
        if v > 0:
            t2 = self.build(t1.z_plus, t1.r_plus, t1.g_plus, v, depth - 1, eps, H0)
        else:
            t2 = self.build(t1.z_minus, t1.r_minus, t1.g_minus, v, depth - 1, eps, H0)
        return self._merge(t1, t2, v, uniform=True)

    def _merge(self, t1, t2, v, uniform):
        log_w = np.logaddexp(t1.log_w, t2.log_w)
        if uniform:
            p_new = math.exp(t2.log_w - log_w) if np.isfinite(log_w) else 0.0
        else:
            p_new = min(1.0, math.exp(t2.log_w - t1.log_w)) if np.isfinite(t2.log_w) else 0.0
        if self.rng.random() < p_new:
            prop = (t2.z_prop, t2.lp_prop, t2.g_prop)
        else:
            prop = (t1.z_prop, t1.lp_prop, t1.g_prop)
        if v > 0:
            ends = (t1.z_minus, t1.r_minus, t1.g_minus, t2.z_plus, t2.r_plus, t2.g_plus)
        else:
            ends = (t2.z_minus, t2.r_minus, t2.g_minus, t1.z_plus, t1.r_plus, t1.g_plus)
        turning = t2.turning or _uturn(ends[0], ends[3], ends[1], ends[4])
        return _Tree(*ends, *prop, log_w, turning, t2.diverging,
                     t1.accept_sum + t2.accept_sum, t1.n_leapfrog + t2.n_leapfrog)

    def transition(self, z, lp, g, eps):
        r0 = self.rng.standard_normal(z.size)
        H0 = -lp + 0.5 * (r0 @ r0)
        tree = _Tree(z, r0, g, z, r0, g, z, lp, g, 0.0, False, False, 0.0, 0)
        accept_sum, n_leap, diverged = 0.0, 0, False
        for depth in range(self.max_depth):
            v = 1 if self.rng.random() < 0.5 else -1
            if v > 0:
                sub = self.build(tree.z_plus, tree.r_plus, tree.g_plus, v, depth, eps, H0)
            else:
                sub = self.build(tree.z_minus, tree.r_minus, tree.g_minus, v, depth, eps, H0)
            accept_sum += sub.accept_sum
            n_leap += sub.n_leapfrog
            if sub.diverging:
                diverged = True
                break
            if sub.turning:
                break
            tree = self._merge(tree, sub, v, uniform=False)
            if tree.turning:
                break
        stat = accept_sum / max(n_leap, 1)
        return tree.z_prop, tree.lp_prop, tree.g_prop, stat, diverged


def _initial_step(nuts: _Nuts, z, lp, g):
    eps = 1.0
    r = nuts.rng.standard_normal(z.size)
    H0 = -lp + 0.5 * (r @ r)

    def log_ratio(e):
        _, r1, _, lp1 = nuts.leapfrog(z, r, g, e)
        H = -lp1 + 0.5 * (r1 @ r1)
        return H0 - H if np.isfinite(H) else -np.inf

    a = 1.0 if log_ratio(eps) > math.log(0.5) else -1.0
    for _ in range(50):
        lr = log_ratio(eps)
        if not a * lr > -a * math.log(2.0):
            break
        eps *= 2.0 ** a
    return eps


def nuts_sample(logp_grad, dim, warmup=100, samples=10000, max_depth=5, target_accept=0.70, seed=0,
                lo=-1.0, hi=1.0, init=None, chains=1) -> ChainResult:
    """
    Draw ``samples`` post-warmup states of a density on the box ``[lo, hi]^dim``.

    ``logp_grad(theta)`` returns the log-density (up to a constant) and its
    gradient in ``theta``; exceptions from it count as zero density.
    """
    if samples < 10:
        raise ValueError("need at least 10 samples")
    lo = np.broadcast_to(np.asarray(lo, float), (dim,))
    hi = np.broadcast_to(np.asarray(hi, float), (dim,))
    target = _BoxTarget(logp_grad, lo, hi)
    all_draws, steps, accepts, n_div = [], [], [], 0
    for c in range(chains):
        rng = rng_for(seed, "nuts" if c == 0 else f"nuts/{c}")
        nuts = _Nuts(target, rng, max_depth)
        z = lp = g = None
        for attempt in range(MAX_START_ATTEMPTS):
            theta0 = np.asarray(init, float) if (init is not None and attempt == 0) else \
                lo + (hi - lo) * rng.uniform(0.05, 0.95, dim)
            z = target.to_z(theta0)
            lp, g = target(z)
            if np.isfinite(lp):
                break
        else:
            raise InferenceError(f"no finite starting point after {MAX_START_ATTEMPTS} attempts")
        eps = _initial_step(nuts, z, lp, g)
        mu = math.log(10.0 * eps)
        h_bar, log_eps_bar = 0.0, 0.0
        gamma, t0, kappa = 0.05, 10.0, 0.75
        for it in range(1, warmup + 1):
            z, lp, g, stat, _ = nuts.transition(z, lp, g, eps)
            w = 1.0 / (it + t0)
            h_bar = (1.0 - w) * h_bar + w * (target_accept - stat)
            log_eps = mu - math.sqrt(it) / gamma * h_bar
            eta = it ** -kappa
            log_eps_bar = eta * log_eps + (1.0 - eta) * log_eps_bar
            eps = math.exp(log_eps)
        if warmup > 0:
            eps = math.exp(log_eps_bar)
        draws = np.empty((samples, dim))
        acc = 0.0
        for i in range(samples):
            z, lp, g, stat, div = nuts.transition(z, lp, g, eps)
            acc += stat
            n_div += int(div)
            draws[i] = target.to_theta(z)
        all_draws.append(np.clip(draws, lo, hi))
        steps.append(eps)
        accepts.append(acc / samples)
    result = summarize(np.vstack(all_draws), warmup, chains)
    result.divergences = n_div
    result.step_size = float(np.mean(steps))
    result.accept_rate = float(np.mean(accepts))
    if n_div > DIVERGENCE_WARN_FRACTION * samples * chains:
        result.warnings.append(f"{n_div} divergent transitions out of {samples * chains}")
    return result
