"""Single-chain MCMC diagnostics: split R-hat, effective sample size, HPD intervals."""

from __future__ import annotations

import math

import numpy as np


def split_rhat(chain, return_flag=False):
    """
    Split Gelman-Rubin statistic.

    ``chain`` is one chain of draws, or a (chains x draws) array. Each chain
    is halved and the halves are compared as separate sequences. Zero
    within-sequence variance has no meaningful value; it gets the sentinel
    1.0 and, with ``return_flag``, a ``True`` degenerate flag.
    """
    x = np.atleast_2d(np.asarray(chain, dtype=float))
    if x.shape[1] < 4:
        raise ValueError("split R-hat needs at least 4 draws per chain")
    half = x.shape[1] // 2
    seqs = np.vstack([x[:, :half], x[:, x.shape[1] - half:]])
    n = half
    W = seqs.var(1, ddof=1).mean()
    if not W > 0:
        return (1.0, True) if return_flag else 1.0
    B = n * seqs.mean(1).var(ddof=1)
    var_plus = (n - 1) / n * W + B / n
    value = float(np.sqrt(var_plus / W))
    return (value, False) if return_flag else value


def _autocorr(x):
    n = x.size
    y = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(y, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0]


def ess(chain) -> float:
    """Effective sample size with Geyer's initial monotone positive sequence."""
    x = np.asarray(chain, dtype=float).ravel()
    n = x.size
    if n < 4:
        raise ValueError("ESS needs at least 4 draws")
    if not np.var(x) > 0:
        return 1.0
    rho = _autocorr(x)
    # sums of adjacent pairs, truncated at the first non-positive pair
    n_pairs = (n - 1) // 2
    pairs = rho[0:2 * n_pairs:2] + rho[1:2 * n_pairs + 1:2]
    total = 0.0
    prev = np.inf
    for g in pairs:
        if g <= 0:
            break
        g = min(g, prev)
        total += g
        prev = g
    tau = -1.0 + 2.0 * total
    tau = max(tau, 1.0 / math.log10(max(n, 10)))
    return float(n / tau)


def hpd_interval(chain, mass=0.90) -> tuple:
    """Shortest window containing ``ceil(mass k)`` of the sorted draws."""
    x = np.sort(np.asarray(chain, dtype=float).ravel())
    k = x.size
    if k < 10:
        raise ValueError("HPD interval needs at least 10 draws")
    if not 0 < mass <= 1:
        raise ValueError("mass must be in (0, 1]")
    w = math.ceil(mass * k)
    widths = x[w - 1:] - x[:k - w + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + w - 1])
