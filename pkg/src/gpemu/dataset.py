"""
Design-matrix assembly, scaling, train/validation split, CSV bundles and a
seeded synthetic stand-in for the simulator runs.

Rows of the design are (simulator parameters, Z, N), stacked in
nuclide-major blocks: all parameter sets for the first nuclide, then all
for the second, and so on. Masked runs are dropped.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial import legendre
from scipy.stats import qmc

from .core_math import AffineScaler, apply_scaler, fit_scaler
from .errors import ParseError
from .seeding import rng_for

PARAM_NAMES = (
    "rho_sat", "E_NM", "K_NM", "a_sym", "L_sym", "ms_star",
    "C0_rho_drho", "C1_rho_drho", "V0_n", "V0_p", "C0_rho_dJ", "C1_rho_dJ",
)
PARAM_BOUNDS = (
    (0.150, 0.170), (-16.2, -15.6), (190.0, 230.0), (28.0, 36.0), (30.0, 70.0), (0.9, 1.5),
    (-70.0, -40.0), (-240.0, 40.0), (-260.0, -150.0), (-300.0, -170.0), (-100.0, -60.0), (-120.0, 100.0),
)


@dataclass
class RawRuns:
    params: np.ndarray
    nuclides: np.ndarray
    outputs: np.ndarray
    valid: np.ndarray
    param_names: tuple = ()
    truth: dict | None = None

    def __post_init__(self):
        self.params = np.atleast_2d(np.asarray(self.params, dtype=float))
        self.nuclides = np.atleast_2d(np.asarray(self.nuclides, dtype=float))
        self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.outputs)
        s, k = self.params.shape[0], self.nuclides.shape[0]
        if self.outputs.shape != (s, k) or self.valid.shape != (s, k):
            raise ValueError(f"outputs/valid must be {s}x{k}")
        if not self.param_names:
            self.param_names = tuple(f"p{i}" for i in range(self.params.shape[1]))

    @property
    def n_sets(self) -> int:
        return self.params.shape[0]

    @property
    def n_nuclides(self) -> int:
        return self.nuclides.shape[0]


def assemble_design(raw: RawRuns, return_index=False):
    """
    Stack the parameter matrix once per nuclide with (Z, N) appended.

    Returns ``X`` (rows x (p + 2)) and ``Y``; with ``return_index`` also the
    parameter-set and nuclide index of every row.
    """
    s, k = raw.n_sets, raw.n_nuclides
    set_idx = np.tile(np.arange(s), k)
    nuc_idx = np.repeat(np.arange(k), s)
    keep = raw.valid[set_idx, nuc_idx]
    set_idx, nuc_idx = set_idx[keep], nuc_idx[keep]
    X = np.hstack([raw.params[set_idx], raw.nuclides[nuc_idx]])
    Y = raw.outputs[set_idx, nuc_idx]
    if return_index:
        return X, Y, set_idx, nuc_idx
    return X, Y


@dataclass
class EmulationDataset:
    X_train: np.ndarray
    X_val: np.ndarray
    Y_train: np.ndarray
    Y_val: np.ndarray
    input_scaler: AffineScaler
    target_scaler: AffineScaler
    seed: int
    train_rows: np.ndarray = field(repr=False, default=None)
    val_rows: np.ndarray = field(repr=False, default=None)
    set_index: np.ndarray | None = field(repr=False, default=None)
    nuclide_index: np.ndarray | None = field(repr=False, default=None)
    nuclides: np.ndarray | None = field(repr=False, default=None)

    @property
    def n_train(self) -> int:
        return self.X_train.shape[0]

    @property
    def n_params(self) -> int:
        return self.X_train.shape[1] - 2

    def target_to_mev(self, y):
        return np.asarray(y, float) * self.target_scaler.scale[0] + self.target_scaler.shift[0]

    def target_from_mev(self, y):
        return (np.asarray(y, float) - self.target_scaler.shift[0]) / self.target_scaler.scale[0]

    def scale_nuclides(self, nuclides):
        """Scaled (Z, N) columns for the given nuclide table."""
        sc = self.input_scaler
        return (np.asarray(nuclides, float) - sc.shift[-2:]) / sc.scale[-2:]

    @property
    def nuclide_block(self) -> np.ndarray:
        """Scaled (Z, N) rows, one per nuclide, in table order."""
        if self.nuclides is not None:
            return self.scale_nuclides(self.nuclides)
        rows = np.vstack([self.X_train[:, -2:], self.X_val[:, -2:]])
        return np.unique(rows, axis=0)

    def scale_params(self, params):
        sc = self.input_scaler
        return (np.asarray(params, float) - sc.shift[:-2]) / sc.scale[:-2]

    def unscale_params(self, theta):
        sc = self.input_scaler
        return np.asarray(theta, float) * sc.scale[:-2] + sc.shift[:-2]


def query_block(theta, nuclide_block):
    """Broadcast a scaled parameter vector against every scaled (Z, N) row."""
    theta = np.asarray(theta, float).ravel()
    k = nuclide_block.shape[0]
    return np.hstack([np.broadcast_to(theta, (k, theta.size)), nuclide_block])


def preprocess_split(X, Y, train_fraction=0.8, seed=0, set_index=None, nuclide_index=None) -> EmulationDataset:
    """Scale on the full data, then shuffle and keep the first ceil(f n) rows for training."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).ravel()
    n = Y.size
    if n < 2:
        raise ValueError("need at least two rows")
    in_sc = fit_scaler(X, "minmax_pm1")
    out_sc = fit_scaler(Y[:, None], "standardize")
    Xs = apply_scaler(in_sc, X)
    Ys = apply_scaler(out_sc, Y[:, None])[:, 0]
    perm = rng_for(seed, "split").permutation(n)
    n_train = math.ceil(train_fraction * n)
    tr, va = perm[:n_train], perm[n_train:]
    return EmulationDataset(Xs[tr], Xs[va], Ys[tr], Ys[va], in_sc, out_sc, int(seed), tr, va,
                            None if set_index is None else np.asarray(set_index),
                            None if nuclide_index is None else np.asarray(nuclide_index))


def prepare(raw: RawRuns, train_fraction=0.8, seed=0) -> EmulationDataset:
    X, Y, si, ni = assemble_design(raw, return_index=True)
    ds = preprocess_split(X, Y, train_fraction, seed, si, ni)
    ds.nuclides = raw.nuclides.copy()
    return ds


# ---------------------------------------------------------------------------
# synthetic simulator
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    n_params: int = 12
    n_sets: int = 500
    n_nuclides: int = 75
    seed: int = 0
    mask_fraction: float = 0.0
    effect_mev: float = 40.0
    # geometric fall-off of parameter effects: a few stiff directions, many sloppy ones
    effect_decay: float = 0.6


def _valley_n(Z):
    return Z + 0.0065 * Z * Z


def _excess_width(Z):
    return 4.0 + 0.08 * Z


def default_nuclides(count=75) -> np.ndarray:
    """
    Distinct (Z, N) pairs: proton numbers spread over 8..100 and neutron
    numbers scattered on both sides of the valley of stability.
    """
    Z = np.round(np.linspace(8, 100, count)).astype(int)
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    out, seen = [], set()
    for i, z in enumerate(Z):
        frac = 2.0 * ((i * golden + 0.5) % 1.0) - 1.0
        n = int(round(_valley_n(z) + frac * _excess_width(z)))
        while (z, n) in seen:
            n += 1
        seen.add((z, n))
        out.append((z, n))
    return np.array(out, dtype=float)


_LEGENDRE_PAIRS = ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2),
                   (3, 0), (2, 1), (1, 2), (0, 3), (4, 0), (2, 2))


def _features(nuclides, count):
    """Products of Legendre polynomials in scaled Z and scaled neutron excess."""
    Z, N = nuclides[:, 0], nuclides[:, 1]
    x1 = (Z - 54.0) / 46.0
    x2 = (N - _valley_n(Z)) / _excess_width(Z)
    cols = []
    for k in range(count):
        i, j = _LEGENDRE_PAIRS[k % len(_LEGENDRE_PAIRS)]
        shift = 1.0 + k // len(_LEGENDRE_PAIRS)
        ci = np.zeros(i + 1)
        ci[i] = 1.0
        cj = np.zeros(j + 1)
        cj[j] = 1.0
        cols.append(legendre.legval(x1 / shift, ci) * legendre.legval(x2, cj))
    return np.stack(cols, axis=1)


def _liquid_drop(nuclides):
    Z, N = nuclides[:, 0], nuclides[:, 1]
    A = Z + N
    return 15.8 * A - 18.3 * A ** (2.0 / 3.0) - 0.714 * Z * (Z - 1) / A ** (1.0 / 3.0) - 23.2 * (N - Z) ** 2 / A


def synthetic_binding(params, nuclides, bounds, effect_mev=40.0, effect_decay=0.6):
    """Smooth binding-energy stand-in (MeV) for every (parameter set, nuclide)."""
    params = np.atleast_2d(params)
    lo, hi = np.asarray(bounds, float).T
    u = 2.0 * (params - lo) / (hi - lo) - 1.0
    g = u + 0.3 * u * u
    p = params.shape[1]
    feats = _features(nuclides, p)
    amp = effect_mev * effect_decay ** np.arange(p)
    out = _liquid_drop(nuclides)[None, :] + (g * amp) @ feats.T
    if p >= 2:
        out += 0.25 * effect_mev * (u[:, [0]] * u[:, [1]]) * feats[None, :, 0]
    return out


def synth_generate(config: SynthConfig | None = None) -> RawRuns:
    config = config or SynthConfig()
    p = config.n_params
    names = PARAM_NAMES[:p] if p <= len(PARAM_NAMES) else tuple(f"p{i}" for i in range(p))
    bounds = np.array(PARAM_BOUNDS[:p] if p <= len(PARAM_BOUNDS) else [(0.0, 1.0)] * p)
    lo, hi = bounds.T
    nuclides = default_nuclides(config.n_nuclides)
    lhs = qmc.LatinHypercube(d=p, seed=rng_for(config.seed, "design")).random(config.n_sets)
    params = lo + lhs * (hi - lo)
    outputs = synthetic_binding(params, nuclides, bounds, config.effect_mev, config.effect_decay)
    valid = np.ones(outputs.shape, bool)
    if config.mask_fraction > 0:
        valid = rng_for(config.seed, "mask").random(outputs.shape) >= config.mask_fraction
        outputs = np.where(valid, outputs, np.nan)
    theta_u = rng_for(config.seed, "truth").uniform(0.3, 0.7, p)
    theta_star = lo + theta_u * (hi - lo)
    observed = synthetic_binding(theta_star[None, :], nuclides, bounds, config.effect_mev, config.effect_decay)[0]
    truth = {"theta_star": theta_star.tolist(), "observed": observed.tolist(), "bounds": bounds.tolist()}
    return RawRuns(params, nuclides, outputs, valid, tuple(names), truth)


# ---------------------------------------------------------------------------
# CSV bundles
# ---------------------------------------------------------------------------


def _fmt(x):
    return "NaN" if not np.isfinite(x) else repr(float(x))


def save_csv(path, matrix, header):
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if len(header) != matrix.shape[1]:
        raise ValueError("header length does not match column count")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in matrix:
            w.writerow([_fmt(v) for v in row])


def load_csv(path):
    """Read a headed numeric CSV; returns ``(header, matrix)``. ``NaN`` marks masked entries."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", line=lineno)
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


def save_runs(directory, raw: RawRuns):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_csv(d / "params.csv", raw.params, list(raw.param_names))
    save_csv(d / "nuclides.csv", raw.nuclides, ["Z", "N"])
    labels = [f"Z{int(z)}N{int(n)}" for z, n in raw.nuclides]
    save_csv(d / "outputs.csv", np.where(raw.valid, raw.outputs, np.nan), labels)
    if raw.truth is not None:
        with open(d / "truth.json", "w") as fh:
            json.dump(raw.truth, fh, indent=2)


def load_runs(directory) -> RawRuns:
    d = Path(directory)
    names, params = load_csv(d / "params.csv")
    _, nuclides = load_csv(d / "nuclides.csv")
    _, outputs = load_csv(d / "outputs.csv")
    truth = None
    if (d / "truth.json").exists():
        with open(d / "truth.json") as fh:
            truth = json.load(fh)
    return RawRuns(params, nuclides, outputs, np.isfinite(outputs), tuple(names), truth)
