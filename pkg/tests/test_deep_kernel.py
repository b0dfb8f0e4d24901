import numpy as np
import pytest

from gpemu.core_math import KernelHyper
from gpemu.deep_kernel import (DEFAULT_LAYER_DIMS, flatten_grads, init_mlp, mlp_backward, mlp_forward,
                               refresh_latent_scaler, weight_decay_penalty)
from gpemu.errors import DegenerateColumnError
from gpemu.optimizers import finite_diff_check
from gpemu.sparse_variational import (InducingPoints, SgpModel, SvgpModel, VariationalState, collapsed_bound_and_grad,
                                      prior_state,
                                      svgp_elbo_and_grad)


def test_default_architecture():
    assert DEFAULT_LAYER_DIMS == (14, 100, 50, 5, 2)
    p = init_mlp(rng=0)
    assert p.n_params == 14 * 100 + 100 + 100 * 50 + 50 + 50 * 5 + 5 + 5 * 2 + 2
    assert mlp_forward(p, np.zeros((3, 14))).shape == (3, 2)


def test_latent_scaler_bounds_training_latents():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, size=(40, 14))
    p = refresh_latent_scaler(init_mlp(rng=1), X)
    z = mlp_forward(p, X)
    np.testing.assert_allclose(z.min(0), -1.0, atol=1e-12)
    np.testing.assert_allclose(z.max(0), 1.0, atol=1e-12)


def test_constant_latent_rejected():
    p = init_mlp((3, 4, 2), rng=0)
    p.weights[-1][:] = 0.0
    with pytest.raises(DegenerateColumnError):
        refresh_latent_scaler(p, np.random.default_rng(0).normal(size=(5, 3)))


def test_backward_matches_finite_differences_on_sampled_weights():
    rng = np.random.default_rng(2)
    X = rng.uniform(-1, 1, size=(6, 14))
    p = refresh_latent_scaler(init_mlp(rng=3), X)
    U = rng.normal(size=(6, 2))
    vec0 = p.to_vector()

    def obj(vec):
        q = p.with_vector(vec)
        return float((U * mlp_forward(q, X)).sum()), flatten_grads(mlp_backward(q, X, U))

    idx = rng.choice(vec0.size, size=100, replace=False)
    assert finite_diff_check(obj, vec0, idx) < 1e-4


def test_backward_input_gradient():
    rng = np.random.default_rng(4)
    X = rng.uniform(-1, 1, size=(3, 5))
    p = init_mlp((5, 7, 2), rng=5)
    U = rng.normal(size=(3, 2))

    def obj(vec):
        Xv = vec.reshape(X.shape)
        return float((U * mlp_forward(p, Xv)).sum()), mlp_backward(p, Xv, U)["inputs"].ravel()

    assert finite_diff_check(obj, X.ravel()) < 1e-4


def test_weight_decay_weights_only():
    p = init_mlp((3, 4, 2), rng=0)
    p.biases[0][:] = 5.0
    value, grad = weight_decay_penalty(p, 1e-4)
    w = np.concatenate([w.ravel() for w in p.weights])
    assert value == pytest.approx(1e-4 * np.sum(w ** 2))
    mask = p.weight_mask()
    np.testing.assert_allclose(grad[mask], 2e-4 * p.to_vector()[mask])
    assert np.all(grad[~mask] == 0)


def _deep_setup(seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(12, 6))
    y = np.sin(X[:, 0]) + X[:, 1]
    fmap = refresh_latent_scaler(init_mlp((6, 8, 2), rng=seed), X)
    Zu = rng.uniform(-1, 1, size=(4, 2))
    return rng, X, y, fmap, Zu, KernelHyper(1.1, [0.7, 0.9], 0.05)


def test_dksgp_bound_gradient_through_network():
    rng, X, y, fmap, Zu, h = _deep_setup(6)
    vec0 = fmap.to_vector()

    def obj(vec):
        model = SgpModel(h, 0.1, InducingPoints(Zu), fmap.with_vector(vec))
        v, g = collapsed_bound_and_grad(model, X, y)
        return v, np.asarray(g["mlp"])

    assert finite_diff_check(obj, vec0, rng.choice(vec0.size, 30, replace=False)) < 1e-4


def test_dksvgp_elbo_gradient_through_network():
    rng, X, y, fmap, Zu, h = _deep_setup(7)
    # away from the prior, where the ELBO does not depend on the inputs at all
    state = prior_state(InducingPoints(Zu), h, 0.1)
    state = VariationalState(state.inducing, rng.normal(size=4), 0.5 * state.q_cov_factor)
    vec0 = fmap.to_vector()

    def obj(vec):
        model = SvgpModel(h, 0.1, state, fmap.with_vector(vec))
        v, g = svgp_elbo_and_grad(model, X, y, 12)
        return v, np.asarray(g["mlp"])

    assert finite_diff_check(obj, vec0, rng.choice(vec0.size, 30, replace=False)) < 1e-4
