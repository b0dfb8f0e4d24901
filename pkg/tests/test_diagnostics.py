import numpy as np
import pytest
from scipy.signal import lfilter

from gpemu.diagnostics import ess, hpd_interval, split_rhat
from oracles import ar1_ess


def _ar1(rng, n, rho):
    e = rng.normal(size=n) * np.sqrt(1 - rho ** 2)
    return lfilter([1.0], [1.0, -rho], e)


def test_rhat_iid_near_one():
    x = np.random.default_rng(0).normal(size=10000)
    assert abs(split_rhat(x) - 1.0) < 0.01


def test_rhat_detects_drift():
    rng = np.random.default_rng(1)
    x = np.r_[rng.normal(size=500), rng.normal(loc=3.0, size=500)]
    assert split_rhat(x) > 1.5


def test_rhat_multi_chain_detects_disagreement():
    rng = np.random.default_rng(2)
    chains = np.vstack([rng.normal(size=400), rng.normal(loc=2.0, size=400)])
    assert split_rhat(chains) > 1.2


def test_rhat_constant_chain_sentinel():
    assert split_rhat(np.ones(100), return_flag=True) == (1.0, True)
    with pytest.raises(ValueError):
        split_rhat(np.ones(3))


def test_ess_iid_and_ar1():
    rng = np.random.default_rng(3)
    assert ess(rng.normal(size=10000)) == pytest.approx(10000, rel=0.1)
    x = _ar1(rng, 10000, 0.9)
    assert ess(x) == pytest.approx(ar1_ess(10000, 0.9), rel=0.3)


def test_ess_constant_chain():
    assert ess(np.zeros(50)) == 1.0


def test_hpd_normal_and_uniform():
    rng = np.random.default_rng(4)
    lo, hi = hpd_interval(rng.normal(size=100000), 0.9)
    assert lo == pytest.approx(-1.645, abs=0.03) and hi == pytest.approx(1.645, abs=0.03)
    lo, hi = hpd_interval(rng.uniform(-1, 1, size=100000), 0.9)
    assert hi - lo == pytest.approx(1.8, abs=0.01)


def test_hpd_skewed_is_shortest():
    x = np.random.default_rng(5).exponential(size=50000)
    lo, hi = hpd_interval(x, 0.9)
    assert lo < 0.01
    q_lo, q_hi = np.quantile(x, [0.05, 0.95])
    assert hi - lo < q_hi - q_lo


def test_hpd_validation():
    with pytest.raises(ValueError):
        hpd_interval(np.zeros(5))
    with pytest.raises(ValueError):
        hpd_interval(np.zeros(20), mass=1.5)
