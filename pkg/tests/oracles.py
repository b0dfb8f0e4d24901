"""
Dense reference implementations used as test oracles.

These use explicit inverses, determinants and double loops on purpose and
share no code with the package.
"""

import math

import numpy as np


def dense_kernel(A, B, scale, ls):
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    K = np.empty((A.shape[0], B.shape[0]))
    for i in range(A.shape[0]):
        for j in range(B.shape[0]):
            z = (A[i] - B[j]) / ls
            K[i, j] = scale * math.exp(-0.5 * float(z @ z))
    return K


def dense_lml(X, y, scale, ls, noise, mean=0.0):
    n = y.size
    K = dense_kernel(X, X, scale, ls) + noise * np.eye(n)
    r = y - mean
    _, logdet = np.linalg.slogdet(K)
    return float(-0.5 * r @ np.linalg.inv(K) @ r - 0.5 * logdet - 0.5 * n * math.log(2 * math.pi))


def dense_predict(X, y, Q, scale, ls, noise, mean=0.0):
    Kinv = np.linalg.inv(dense_kernel(X, X, scale, ls) + noise * np.eye(y.size))
    Kqx = dense_kernel(Q, X, scale, ls)
    mu = mean + Kqx @ Kinv @ (y - mean)
    cov = dense_kernel(Q, Q, scale, ls) - Kqx @ Kinv @ Kqx.T
    return mu, cov


def dense_collapsed(X, y, Z, scale, ls, noise, mean=0.0):
    n = y.size
    Kuu = dense_kernel(Z, Z, scale, ls)
    Kfu = dense_kernel(X, Z, scale, ls)
    Qff = Kfu @ np.linalg.inv(Kuu) @ Kfu.T
    C = Qff + noise * np.eye(n)
    r = y - mean
    _, logdet = np.linalg.slogdet(C)
    fit = -0.5 * r @ np.linalg.inv(C) @ r - 0.5 * logdet - 0.5 * n * math.log(2 * math.pi)
    trace = np.trace(dense_kernel(X, X, scale, ls) - Qff) / (2.0 * noise)
    return float(fit - trace)


def gauss_kl(m0, S0, m1, S1):
    """KL(N(m0, S0) || N(m1, S1))."""
    k = m0.size
    S1inv = np.linalg.inv(S1)
    d = m1 - m0
    return 0.5 * float(np.trace(S1inv @ S0) + d @ S1inv @ d - k
                       + np.linalg.slogdet(S1)[1] - np.linalg.slogdet(S0)[1])


def dense_elbo(X, y, Z, q_mean, S, scale, ls, noise, mean=0.0, n_total=None):
    b = y.size
    n_total = b if n_total is None else n_total
    Kuu = dense_kernel(Z, Z, scale, ls)
    Kinv = np.linalg.inv(Kuu)
    Kfu = dense_kernel(X, Z, scale, ls)
    A = Kfu @ Kinv
    mu = mean + A @ (q_mean - mean)
    var = scale - np.einsum("ij,ij->i", A, Kfu) + np.einsum("ij,jk,ik->i", A, S, A)
    ell = -0.5 * math.log(2 * math.pi * noise) - ((y - mu) ** 2 + var) / (2.0 * noise)
    return float(n_total / b * ell.sum() - gauss_kl(q_mean, S, np.full(q_mean.size, mean), Kuu))


def optimal_q(X, y, Z, scale, ls, noise, mean=0.0):
    Kuu = dense_kernel(Z, Z, scale, ls)
    Kuf = dense_kernel(Z, X, scale, ls)
    M = np.linalg.inv(Kuu + Kuf @ Kuf.T / noise)
    return mean + Kuu @ M @ Kuf @ (y - mean) / noise, Kuu @ M @ Kuu


def random_instance(rng, n, d, m=None):
    X = rng.uniform(-1.0, 1.0, size=(n, d))
    y = np.sin(2.0 * X).sum(1) + 0.1 * rng.normal(size=n)
    scale = float(rng.uniform(0.5, 2.0))
    ls = rng.uniform(0.4, 1.5, size=d)
    noise = float(rng.uniform(0.01, 0.3))
    mean = float(rng.normal(scale=0.3))
    Z = None if m is None else rng.uniform(-1.0, 1.0, size=(m, d))
    return X, y, Z, scale, ls, noise, mean


def ar1_ess(n, rho):
    return n * (1.0 - rho) / (1.0 + rho)
