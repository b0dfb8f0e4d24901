import numpy as np
import pytest

from gpemu.core_math import KernelHyper
from gpemu.exact_gp import lml_and_grad
from gpemu.optimizers import finite_diff_check, natgrad_step
from gpemu.params import ParamLayout, blocks_hyper, hyper_blocks
from gpemu.sparse_variational import (InducingPoints, SgpModel, SvgpModel, VariationalState, collapsed_bound_terms,
                                      factor_to_raw, init_inducing, optimal_q_terms, prior_state, raw_to_factor,
                                      sgp_condition, sgp_predict, svgp_elbo_terms, svgp_predict)
from oracles import dense_collapsed, dense_elbo, dense_predict, optimal_q, random_instance


def _random_q(rng, m):
    L = np.tril(rng.normal(scale=0.3, size=(m, m)))
    L[np.diag_indices(m)] = np.abs(np.diag(L)) + 0.2
    return rng.normal(size=m), L


@pytest.mark.parametrize("seed", range(4))
def test_collapsed_bound_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    X, y, Z, s, ls, nz, mu = random_instance(rng, 20, 3, 6)
    v = collapsed_bound_terms(X, y, Z, KernelHyper(s, ls, nz), mu, grad=False)
    assert v == pytest.approx(dense_collapsed(X, y, Z, s, ls, nz, mu), rel=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_elbo_matches_oracle_full_and_minibatch(seed):
    rng = np.random.default_rng(10 + seed)
    X, y, Z, s, ls, nz, mu = random_instance(rng, 20, 2, 5)
    qm, L = _random_q(rng, 5)
    h = KernelHyper(s, ls, nz)
    full = svgp_elbo_terms(X, y, 20, Z, qm, L, h, mu, grad=False)
    assert full == pytest.approx(dense_elbo(X, y, Z, qm, L @ L.T, s, ls, nz, mu), rel=1e-9)
    part = svgp_elbo_terms(X[:7], y[:7], 20, Z, qm, L, h, mu, grad=False)
    assert part == pytest.approx(dense_elbo(X[:7], y[:7], Z, qm, L @ L.T, s, ls, nz, mu, n_total=20), rel=1e-9)


def test_bound_ordering_and_tightness():
    rng = np.random.default_rng(20)
    X, y, Z, s, ls, nz, mu = random_instance(rng, 25, 2, 6)
    h = KernelHyper(s, ls, nz)
    qm, L = _random_q(rng, 6)
    elbo = svgp_elbo_terms(X, y, 25, Z, qm, L, h, mu, grad=False)
    bound = collapsed_bound_terms(X, y, Z, h, mu, grad=False)
    lml = lml_and_grad(X, y, h, mu, grad=False)
    assert elbo <= bound + 1e-8 <= lml + 2e-8
    # the ELBO at the optimal q(u) equals the collapsed bound
    q_mean, q_chol = optimal_q_terms(X, y, Z, h, mu)
    assert svgp_elbo_terms(X, y, 25, Z, q_mean, q_chol, h, mu, grad=False) == pytest.approx(bound, rel=1e-9)
    assert collapsed_bound_terms(X, y, X, h, mu, grad=False) == pytest.approx(lml, abs=1e-6)


def test_optimal_q_matches_oracle():
    rng = np.random.default_rng(21)
    X, y, Z, s, ls, nz, mu = random_instance(rng, 18, 2, 5)
    qm, qc = optimal_q_terms(X, y, Z, KernelHyper(s, ls, nz), mu)
    m2, S2 = optimal_q(X, y, Z, s, ls, nz, mu)
    np.testing.assert_allclose(qm, m2, atol=1e-10)
    np.testing.assert_allclose(qc @ qc.T, S2, atol=1e-10)


def test_sgp_with_inducing_at_data_matches_exact_prediction():
    rng = np.random.default_rng(22)
    X, y, Q, s, ls, nz, mu = random_instance(rng, 12, 2, 4)
    model = sgp_condition(SgpModel(KernelHyper(s, ls, nz), mu, InducingPoints(X)), X, y)
    p = sgp_predict(model, Q)
    m, c = dense_predict(X, y, Q, s, ls, nz, mu)
    np.testing.assert_allclose(p.mean, m, atol=1e-7)
    np.testing.assert_allclose(p.cov, c, atol=1e-7)


def _hyper_layout(h, mu, extra):
    blocks = dict(hyper_blocks(h, mu))
    blocks.update(extra)
    return ParamLayout.like(blocks, list(blocks)), blocks


def test_collapsed_bound_gradients():
    rng = np.random.default_rng(23)
    X, y, Z, s, ls, nz, mu = random_instance(rng, 15, 2, 5)
    layout, blocks = _hyper_layout(KernelHyper(s, ls, nz), mu, {"inducing": Z})

    def obj(vec):
        b = layout.unpack(vec)
        h, m = blocks_hyper(b)
        v, g = collapsed_bound_terms(X, y, b["inducing"], h, m)
        return v, layout.pack(g)

    assert finite_diff_check(obj, layout.pack(blocks)) < 1e-4


def test_elbo_gradients_all_free_parameters():
    rng = np.random.default_rng(24)
    X, y, Z, s, ls, nz, mu = random_instance(rng, 15, 2, 4)
    qm, L = _random_q(rng, 4)
    layout, blocks = _hyper_layout(KernelHyper(s, ls, nz), mu,
                                   {"inducing": Z, "q_mean": qm, "q_cov_factor": factor_to_raw(L)})

    def obj(vec):
        b = layout.unpack(vec)
        h, m = blocks_hyper(b)
        v, g = svgp_elbo_terms(X, y, 15, b["inducing"], b["q_mean"], raw_to_factor(b["q_cov_factor"], 4), h, m)
        g = dict(g)
        g["q_cov_factor"] = factor_to_raw_grad(g["q_cov_factor"])
        return v, layout.pack(g)

    assert finite_diff_check(obj, layout.pack(blocks)) < 1e-4


def factor_to_raw_grad(G):
    return G[np.tril_indices_from(G)]


def test_natgrad_unit_step_reaches_optimum():
    rng = np.random.default_rng(25)
    X, y, Z, s, ls, nz, mu = random_instance(rng, 32, 2, 8)
    h = KernelHyper(s, ls, nz)
    state = prior_state(InducingPoints(Z), h, mu)
    _, g = svgp_elbo_terms(X, y, 32, Z, state.q_mean, state.q_cov_factor, h, mu)
    new = natgrad_step(state, g["q_mean"], g["q_cov"], 1.0)
    m2, S2 = optimal_q(X, y, Z, s, ls, nz, mu)
    np.testing.assert_allclose(new.q_mean, m2, atol=1e-6)
    np.testing.assert_allclose(new.q_cov, S2, atol=1e-6)


def test_svgp_predict_prior_state_is_prior():
    rng = np.random.default_rng(26)
    Z = rng.uniform(-1, 1, size=(5, 2))
    h = KernelHyper(1.5, [0.8, 0.8], 0.05)
    model = SvgpModel(h, 0.3, prior_state(InducingPoints(Z), h, 0.3))
    p = svgp_predict(model, rng.uniform(-1, 1, size=(3, 2)))
    np.testing.assert_allclose(p.mean, 0.3, atol=1e-10)
    np.testing.assert_allclose(np.diag(p.cov), 1.5, atol=1e-8)


def test_factor_raw_round_trip_and_state_validation():
    rng = np.random.default_rng(27)
    _, L = _random_q(rng, 4)
    np.testing.assert_allclose(raw_to_factor(factor_to_raw(L), 4), L, atol=1e-14)
    with pytest.raises(ValueError):
        VariationalState(InducingPoints(np.zeros((2, 1))), np.zeros(2), np.diag([1.0, -1.0]))


def test_init_inducing_picks_distinct_rows():
    Z = np.repeat(np.arange(5.0)[:, None], 3, axis=0)
    ind = init_inducing(Z, 5, rng=0)
    assert np.unique(ind.locations, axis=0).shape[0] == 5
    with pytest.raises(ValueError):
        init_inducing(Z, 6, rng=0)
