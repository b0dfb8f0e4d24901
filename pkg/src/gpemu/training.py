"""
Training protocol for every emulator family, the dual checkpoint policy,
the covariance stability gate and the evaluation ops (RMSE and timed
single-threaded prediction).

Optimizer wiring per family:

    sgp          one L-BFGS iteration per epoch on the collapsed bound
    dksgp        one Adam step per epoch on the collapsed bound + MLP decay
    svgp         per mini-batch: natural gradient on q(u), Adam on hypers
    dksvgp       as svgp, with the MLP weights in the Adam block
    multivariate PPCA basis + L-BFGS fits of one exact GP per component

Losses are the negated objective divided by the number of training rows.
"""

from __future__ import annotations

import gc
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .core_math import KernelHyper, chol_jitter
from .dataset import EmulationDataset
from .deep_kernel import DEFAULT_LAYER_DIMS, MlpParams, init_mlp, mlp_forward, refresh_latent_scaler
from .emulators import FAMILIES, Emulator
from .errors import EvaluationError, LineSearchError, NaturalGradientError, SingularMatrixError
from .exact_gp import log_marginal_likelihood
from .multivariate import mv_fit
from .optimizers import AdamState, Lbfgs, OptimizerConfig, adam_step, natgrad_step
from .params import HYPER_KEYS, ParamLayout, blocks_hyper, hyper_blocks
from .seeding import rng_for
from .sparse_variational import (InducingPoints, SgpModel, SvgpModel, collapsed_bound_and_grad, init_inducing,
                                 prior_state, sgp_condition, svgp_elbo_and_grad)

INDUCING_SWEEP = tuple(range(2, 507, 8))
GATE_LADDER = (0.0, 1e-10)
GATE_SYMMETRY_TOL = 1e-8
NUMERIC_ERRORS = (np.linalg.LinAlgError, FloatingPointError, ValueError, EvaluationError, NaturalGradientError)


@dataclass
class TrainConfig:
    kind: str = "sgp"
    m: int = 64
    epochs: int = 4000
    batch_size: int = 512
    lr_lbfgs: float = 0.01
    lr_adam: float = 0.01
    lr_natgrad: float = 0.1
    weight_decay: float = 1e-4
    seed: int = 0
    stability_probes: int = 10
    val_subsample: int = 512
    lbfgs_history: int = 10
    q_components: int = 12
    mlp_hidden: tuple = DEFAULT_LAYER_DIMS[1:-1]
    latent_dim: int = DEFAULT_LAYER_DIMS[-1]
    init_noise: float = 1e-2
    abort_after: int = 3

    def __post_init__(self):
        if self.kind not in FAMILIES:
            raise ValueError(f"unknown emulator kind {self.kind!r}; expected one of {FAMILIES}")
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.stability_probes < 1:
            raise ValueError("stability_probes must be at least 1")
        self.mlp_hidden = tuple(int(h) for h in self.mlp_hidden)


@dataclass
class TraceRow:
    epoch: int
    loss: float
    val_rmse_mev: float
    gate_passed: bool


@dataclass
class CheckpointPair:
    final: Emulator
    best_stable: Emulator | None
    traces: list = field(default_factory=list)
    aborted: bool = False
    initial_loss: float = float("nan")
    best_epoch: int | None = None
    message: str = ""


# ---------------------------------------------------------------------------
# evaluation ops
# ---------------------------------------------------------------------------


def rmse(predicted, targets) -> float:
    predicted = np.asarray(predicted, dtype=float).ravel()
    targets = np.asarray(targets, dtype=float).ravel()
    if predicted.size != targets.size:
        raise ValueError(f"length mismatch: {predicted.size} vs {targets.size}")
    return float(np.sqrt(np.mean((predicted - targets) ** 2)))


def validation_rmse_mev(emulator: Emulator, X, Y, target_scale) -> float:
    """RMSE of predictive means in MeV given standardized targets."""
    return rmse(emulator.predict_rows(X), Y) * float(target_scale)


@dataclass
class GateResult:
    passed: bool
    reason: str = ""
    probe: int | None = None


def check_covariance(cov) -> tuple:
    """``(ok, reason)`` for one predictive covariance."""
    cov = np.asarray(cov, dtype=float)
    if not np.all(np.isfinite(cov)):
        return False, "non-finite"
    if np.max(np.abs(cov - cov.T), initial=0.0) > GATE_SYMMETRY_TOL:
        return False, "asymmetric"
    try:
        chol_jitter(0.5 * (cov + cov.T), GATE_LADDER)
    except SingularMatrixError:
        return False, "not-spd"
    return True, ""


def gate_probes(n_params, count=10, seed=0) -> np.ndarray:
    return rng_for(seed, "gate").uniform(-1.0, 1.0, size=(count, n_params))


def stability_gate(emulator, probes) -> GateResult:
    """
    Check the noise-inclusive joint predictive over the nuclide block at
    every probe. ``emulator`` needs only a ``predictive(theta, include_noise)``
    method.
    """
    for i, theta in enumerate(np.atleast_2d(probes)):
        try:
            pred = emulator.predictive(theta, include_noise=True)
        except NUMERIC_ERRORS:
            return GateResult(False, "factorization", i)
        if not np.all(np.isfinite(pred.mean)):
            return GateResult(False, "non-finite", i)
        ok, reason = check_covariance(pred.cov)
        if not ok:
            return GateResult(False, reason, i)
    return GateResult(True)


@dataclass
class BenchResult:
    mean: float
    std: float
    samples: np.ndarray


def bench_predict(emulator, points, repetitions=30) -> BenchResult:
    """
    Wall-clock seconds of one joint predictive evaluation at each of
    ``repetitions`` distinct points, pinned to a single thread. One untimed
    warm-up call precedes the timed loop.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] < repetitions:
        raise ValueError(f"need {repetitions} points, got {points.shape[0]}")
    samples = np.empty(repetitions)
    with threadpool_limits(limits=1):
        emulator.predictive(points[0], include_noise=True)
        was_enabled = gc.isenabled()
        gc.disable()
        try:
            for i in range(repetitions):
                t0 = time.perf_counter()
                try:
                    emulator.predictive(points[i], include_noise=True)
                except NUMERIC_ERRORS as exc:
                    raise EvaluationError(f"prediction failed: {exc}", point=points[i]) from exc
                samples[i] = time.perf_counter() - t0
        finally:
            if was_enabled:
                gc.enable()
    return BenchResult(float(samples.mean()), float(samples.std(ddof=1)) if repetitions > 1 else 0.0, samples)


# ---------------------------------------------------------------------------
# parameter plumbing
# ---------------------------------------------------------------------------


class _Family:
    """Flat parameter vector and model construction for one family."""

    def __init__(self, ds: EmulationDataset, cfg: TrainConfig):
        self.ds = ds
        self.cfg = cfg
        self.kind = cfg.kind
        self.deep = self.kind in ("dksgp", "dksvgp")
        self.sparse_collapsed = self.kind in ("sgp", "dksgp")
        d_in = ds.X_train.shape[1]
        self.mlp = None
        if self.deep:
            dims = (d_in, *cfg.mlp_hidden, cfg.latent_dim)
            self.mlp = refresh_latent_scaler(init_mlp(dims, rng_for(cfg.seed, "mlp")), ds.X_train)
        d_kernel = cfg.latent_dim if self.deep else d_in
        hyper = KernelHyper(1.0, np.ones(d_kernel), cfg.init_noise)
        Zinit = mlp_forward(self.mlp, ds.X_train) if self.deep else ds.X_train
        inducing = init_inducing(Zinit, cfg.m, rng_for(cfg.seed, "inducing"))
        blocks = hyper_blocks(hyper, 0.0)
        names = list(HYPER_KEYS)
        if self.sparse_collapsed:
            blocks["inducing"] = inducing.locations
            names.append("inducing")
        else:
            self.q = prior_state(inducing, hyper, 0.0)
        if self.deep:
            blocks["mlp"] = self.mlp.to_vector()
            names.append("mlp")
        self.layout = ParamLayout.like(blocks, names)
        self.vec = self.layout.pack(blocks)
        self.decay_mask = np.zeros(self.layout.size, bool)
        if self.deep:
            self.decay_mask[self.layout.slices["mlp"]] = self.mlp.weight_mask()

    def feature_map(self, blocks) -> MlpParams | None:
        if not self.deep:
            return None
        return self.mlp.with_vector(blocks["mlp"])

    def refresh(self):
        if self.deep:
            self.mlp = refresh_latent_scaler(self.feature_map(self.layout.unpack(self.vec)), self.ds.X_train)

    def model(self, vec=None, q=None):
        blocks = self.layout.unpack(self.vec if vec is None else vec)
        hyper, mean = blocks_hyper(blocks)
        fmap = self.feature_map(blocks)
        if self.sparse_collapsed:
            return SgpModel(hyper, mean, InducingPoints(blocks["inducing"].copy()), fmap)
        return SvgpModel(hyper, mean, (self.q if q is None else q).copy(), fmap)

    def grad_vector(self, grads, scale):
        out = {k: -np.asarray(grads[k], dtype=float) * scale for k in HYPER_KEYS}
        if self.sparse_collapsed:
            out["inducing"] = -grads["inducing"] * scale
        if self.deep:
            out["mlp"] = -grads["mlp"] * scale
        return self.layout.pack(out)

    def penalty(self, vec):
        if not self.deep:
            return 0.0
        w = vec[self.decay_mask]
        return self.cfg.weight_decay * float(w @ w)

    def collapsed_objective(self, vec):
        model = self.model(vec)
        n = self.ds.n_train
        value, grads = collapsed_bound_and_grad(model, self.ds.X_train, self.ds.Y_train)
        return -value / n + self.penalty(vec), self.grad_vector(grads, 1.0 / n)

    def snapshot(self, epoch) -> Emulator:
        model = self.model()
        if self.sparse_collapsed:
            model = sgp_condition(model, self.ds.X_train, self.ds.Y_train)
        return Emulator(self.kind, model, self.ds.nuclide_block, self.ds.input_scaler, self.ds.target_scaler, epoch)


def _validation_subset(ds: EmulationDataset, cfg: TrainConfig):
    n_val = ds.X_val.shape[0]
    if n_val == 0:
        return ds.X_train[:0], ds.Y_train[:0]
    k = min(cfg.val_subsample, n_val)
    idx = np.sort(rng_for(cfg.seed, "validation").choice(n_val, size=k, replace=False))
    return ds.X_val[idx], ds.Y_val[idx]


def _evaluate(emulator, Xv, Yv, target_scale, probes):
    try:
        score = validation_rmse_mev(emulator, Xv, Yv, target_scale) if Yv.size else float("nan")
    except NUMERIC_ERRORS:
        score = float("nan")
    gate = stability_gate(emulator, probes)
    return score, gate


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def train_emulator(ds: EmulationDataset, cfg: TrainConfig) -> CheckpointPair:
    if cfg.kind == "multivariate":
        return _train_multivariate(ds, cfg)
    fam = _Family(ds, cfg)
    Xv, Yv = _validation_subset(ds, cfg)
    scale = ds.target_scaler.scale[0]
    probes = gate_probes(ds.n_params, cfg.stability_probes, cfg.seed)
    n = ds.n_train

    def record(epoch, loss, pair):
        em = fam.snapshot(epoch)
        score, gate = _evaluate(em, Xv, Yv, scale, probes)
        pair.final = em
        if epoch > 0:
            pair.traces.append(TraceRow(epoch, float(loss), score, gate.passed))
        if gate.passed and np.isfinite(score) and (pair.best_stable is None or score < best[0]):
            best[0] = score
            pair.best_stable = em
            pair.best_epoch = epoch

    best = [np.inf]
    pair = CheckpointPair(final=None, best_stable=None)
    if fam.sparse_collapsed:
        pair.initial_loss = float(fam.collapsed_objective(fam.vec)[0])
    else:
        pair.initial_loss = _full_elbo_loss(fam)
    record(0, pair.initial_loss, pair)

    opt_cfg = OptimizerConfig("adam", cfg.lr_adam, cfg.weight_decay if fam.deep else 0.0)
    adam = AdamState.zeros(fam.layout.size)
    lbfgs = None
    bad = 0
    batch = min(cfg.batch_size, n)
    batch_rng = rng_for(cfg.seed, "batches")
    for epoch in range(1, cfg.epochs + 1):
        fam.refresh()
        loss = np.nan
        if cfg.kind == "sgp":
            if lbfgs is None:
                lbfgs = Lbfgs(fam.collapsed_objective, fam.vec,
                              OptimizerConfig("lbfgs", cfg.lr_lbfgs, lbfgs_history=cfg.lbfgs_history))
            try:
                loss = lbfgs.step()
                fam.vec = lbfgs.x.copy()
            except LineSearchError:
                pair.message = f"line search made no further progress at epoch {epoch}"
                record(epoch, lbfgs.f, pair)
                break
        elif cfg.kind == "dksgp":
            try:
                loss, g = fam.collapsed_objective(fam.vec)
                if np.isfinite(loss) and np.all(np.isfinite(g)):
                    # the decay gradient is added inside adam_step
                    fam.vec, adam = adam_step(adam, fam.vec, g, opt_cfg, fam.decay_mask)
                else:
                    loss = np.nan
            except NUMERIC_ERRORS:
                loss = np.nan
        else:
            loss, adam = _svgp_epoch(fam, cfg, batch, batch_rng, adam, opt_cfg)
        if not np.isfinite(loss):
            bad += 1
            if bad >= cfg.abort_after:
                pair.aborted = True
                pair.message = f"non-finite loss for {bad} consecutive epochs at epoch {epoch}"
                break
            continue
        bad = 0
        record(epoch, loss, pair)
    return pair


def _full_elbo_loss(fam: _Family) -> float:
    n = fam.ds.n_train
    try:
        value, _ = svgp_elbo_and_grad(fam.model(), fam.ds.X_train, fam.ds.Y_train, n)
    except NUMERIC_ERRORS:
        return float("nan")
    return -value / n + fam.penalty(fam.vec)


def _svgp_epoch(fam: _Family, cfg: TrainConfig, batch, rng, adam, opt_cfg):
    ds = fam.ds
    n = ds.n_train
    perm = rng.permutation(n)
    losses = []
    for start in range(0, n, batch):
        idx = perm[start:start + batch]
        try:
            value, g = svgp_elbo_and_grad(fam.model(), ds.X_train[idx], ds.Y_train[idx], n)
            gvec = fam.grad_vector(g, 1.0 / n)
            if not (np.isfinite(value) and np.all(np.isfinite(gvec))):
                continue
            q_new = natgrad_step(fam.q, g["q_mean"], g["q_cov"], cfg.lr_natgrad)
        except NUMERIC_ERRORS:
            continue
        fam.q = q_new
        fam.vec, adam = adam_step(adam, fam.vec, gvec, opt_cfg, fam.decay_mask)
        losses.append(-value / n + fam.penalty(fam.vec))
    # mean of per-batch estimates of the per-datum loss
    return (float(np.mean(losses)) if losses else float("nan")), adam


def mv_tables(ds: EmulationDataset):
    """Set-level inputs (s x p) and a standardized s x K target matrix with validation entries masked."""
    if ds.set_index is None or ds.nuclide_index is None:
        raise ValueError("the multivariate emulator needs per-row set and nuclide indices")
    p = ds.n_params
    s = int(ds.set_index.max()) + 1
    k = int(ds.nuclide_index.max()) + 1 if ds.nuclides is None else ds.nuclides.shape[0]
    Xs = np.full((s, p), np.nan)
    si_tr, ni_tr = ds.set_index[ds.train_rows], ds.nuclide_index[ds.train_rows]
    si_va = ds.set_index[ds.val_rows]
    Xs[si_tr] = ds.X_train[:, :p]
    Xs[si_va] = ds.X_val[:, :p]
    Y = np.full((s, k), np.nan)
    Y[si_tr, ni_tr] = ds.Y_train
    keep = np.all(np.isfinite(Xs), 1)
    return Xs[keep], Y[keep]


def _train_multivariate(ds: EmulationDataset, cfg: TrainConfig) -> CheckpointPair:
    Xs, Y = mv_tables(ds)
    q = min(cfg.q_components, *Y.shape)
    em = mv_fit(Xs, Y, q=q, max_iters=100, lr=cfg.lr_lbfgs)
    emulator = Emulator("multivariate", em, ds.nuclide_block, ds.input_scaler, ds.target_scaler, 1)
    Xv, Yv = _validation_subset(ds, cfg)
    probes = gate_probes(ds.n_params, cfg.stability_probes, cfg.seed)
    score, gate = _evaluate(emulator, Xv, Yv, ds.target_scaler.scale[0], probes)
    loss = -sum(log_marginal_likelihood(gp) for gp in em.weight_gps) / ds.n_train
    pair = CheckpointPair(final=emulator, best_stable=emulator if gate.passed else None,
                          traces=[TraceRow(1, loss, score, gate.passed)], initial_loss=float("nan"),
                          best_epoch=1 if gate.passed else None)
    if not em.converged:
        pair.message = "PPCA EM did not converge"
    return pair


def batches_per_epoch(n_train, batch_size) -> tuple:
    """``(full_batches, remainder)`` of one shuffled pass."""
    return n_train // batch_size, n_train % batch_size


def full_validation_rmse(emulator: Emulator, ds: EmulationDataset) -> float:
    return validation_rmse_mev(emulator, ds.X_val, ds.Y_val, ds.target_scaler.scale[0])
