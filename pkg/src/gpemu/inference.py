"""
Parameter inference through a trained emulator: observation likelihood,
multi-start maximum likelihood and NUTS calibration under a box prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError, InferenceError, LineSearchError
from .nuts import ChainResult, nuts_sample
from .optimizers import OptimizerConfig, lbfgs_minimize
from .seeding import rng_for

STABILITY_THRESHOLD = 1e-4
MLE_MAX_STEP = 0.5


class ObservationLikelihood:
    """
    ``theta -> (log p(observed | theta), gradient)`` for scaled parameters.

    ``observed`` is in standardized target units, one entry per nuclide in
    the emulator's nuclide block. The predictive includes the likelihood
    noise; ``diagonal`` drops cross-nuclide covariances.
    """

    def __init__(self, emulator, observed, diagonal=False):
        self.emulator = emulator
        self.observed = np.asarray(observed, dtype=float).ravel()
        self.diagonal = diagonal
        self.dim = emulator.n_params
        if self.observed.size != emulator.nuclide_block.shape[0]:
            raise ValueError(f"observed has {self.observed.size} entries, "
                             f"expected {emulator.nuclide_block.shape[0]}")

    def value(self, theta) -> float:
        return self.emulator.log_likelihood(theta, self.observed, self.diagonal, grad=False)

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float).ravel()
        if not np.all(np.isfinite(theta)):
            raise EvaluationError("non-finite parameter vector", point=theta)
        return self.emulator.log_likelihood(theta, self.observed, self.diagonal, grad=True)


def obs_log_likelihood(emulator, theta, observed, diagonal=False) -> float:
    return ObservationLikelihood(emulator, observed, diagonal).value(theta)


@dataclass
class MleResult:
    rounds: np.ndarray  # surviving rounds x dim
    round_values: np.ndarray
    consensus: np.ndarray
    round_std: np.ndarray
    stable: np.ndarray
    out_of_bounds: np.ndarray
    failed_rounds: list = field(default_factory=list)

    @classmethod
    def from_rounds(cls, rounds, values, failed=(), threshold=STABILITY_THRESHOLD):
        rounds = np.atleast_2d(np.asarray(rounds, dtype=float))
        values = np.asarray(values, dtype=float)
        consensus = rounds[int(np.argmax(values))].copy()
        std = rounds.std(0, ddof=1) if rounds.shape[0] > 1 else np.zeros(rounds.shape[1])
        return cls(rounds, values, consensus, std, std <= threshold, np.abs(consensus) > 1.0, list(failed))


def mle_multistart(target, rounds=10, steps=100, seed=0, lr=0.01, dim=None, lo=-1.0, hi=1.0,
                   max_step=MLE_MAX_STEP, threshold=STABILITY_THRESHOLD) -> MleResult:
    """
    Maximize ``target(theta) -> (value, grad)`` by L-BFGS from ``rounds``
    uniform starts in ``[lo, hi]^dim``. Optimizer iterates are not confined
    to the box, but each trial step is at most ``max_step`` long so that a
    poorly scaled quasi-Newton step cannot jump far outside it.
    """
    dim = getattr(target, "dim", None) if dim is None else dim
    if dim is None:
        raise ValueError("dimension unknown; pass dim")
    rng = rng_for(seed, "mle")
    starts = rng.uniform(lo, hi, size=(rounds, dim))

    def objective(theta):
        try:
            v, g = target(theta)
        except (EvaluationError, np.linalg.LinAlgError, FloatingPointError):
            return np.inf, np.zeros(dim)
        return -v, -np.asarray(g, dtype=float)

    found, values, failed = [], [], []
    cfg = OptimizerConfig("lbfgs", learning_rate=lr, max_step=max_step)
    for k in range(rounds):
        try:
            res = lbfgs_minimize(objective, starts[k], cfg, max_iters=steps)
        except (ValueError, LineSearchError) as exc:
            failed.append((k, str(exc)))
            continue
        if not np.isfinite(res.fun):
            failed.append((k, "non-finite objective"))
            continue
        found.append(res.x)
        values.append(-res.fun)
    if len(found) < 3:
        raise InferenceError(f"only {len(found)} of {rounds} MLE rounds survived")
    return MleResult.from_rounds(found, values, failed, threshold)


def calibrate(emulator, observed, warmup=100, samples=10000, max_depth=5, target_accept=0.70, seed=0,
              diagonal=False, chains=1) -> ChainResult:
    """Posterior draws of the scaled parameters under a uniform prior on ``[-1, 1]^dim``."""
    like = ObservationLikelihood(emulator, observed, diagonal)
    return nuts_sample(like, like.dim, warmup=warmup, samples=samples, max_depth=max_depth,
                       target_accept=target_accept, seed=seed, chains=chains)
