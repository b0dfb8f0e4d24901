"""
JSON checkpoints for trained emulators.

Schema (version 1)::

    {
      "schema_version": 1,
      "kind": "sgp" | "svgp" | "dksgp" | "dksvgp" | "multivariate",
      "seed": int, "epoch": int,
      "scalers": {"input": scaler, "target": scaler},
      "nuclide_block": [[z, n], ...],          # scaled
      "hyper": {"scale", "lengthscales", "noise"}, "mean_const": float,
      "inducing": [[...], ...],                # m x d (latent space for deep kernels)
      "q_mean": [...], "q_cov_factor": [[...]],  # SGP: its optimal q(u)
      "mlp": {"layer_dims", "weights", "biases", "latent_scaler"} | null,
      "basis": {...} | null                    # multivariate only
    }

where ``scaler`` is ``{"kind", "shift", "scale"}``. Floats are written with
round-trip precision.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core_math import AffineScaler, KernelHyper
from .deep_kernel import MlpParams
from .emulators import Emulator
from .exact_gp import ExactGp
from .multivariate import MultivariateEmulator, PcaBasis
from .sparse_variational import InducingPoints, SgpModel, SvgpModel, VariationalState

SCHEMA_VERSION = 1


def _hyper_dict(h: KernelHyper):
    return {"scale": h.scale, "lengthscales": h.lengthscales.tolist(), "noise": h.noise}


def _hyper_from(d) -> KernelHyper:
    return KernelHyper(d["scale"], np.array(d["lengthscales"], float), d["noise"])


def _scaler(s):
    return None if s is None else s.to_dict()


def _scaler_from(d):
    return None if d is None else AffineScaler.from_dict(d)


def _mlp_dict(p: MlpParams | None):
    if p is None:
        return None
    return {
        "layer_dims": list(p.layer_dims),
        "weights": [w.tolist() for w in p.weights],
        "biases": [b.tolist() for b in p.biases],
        "latent_scaler": _scaler(p.latent_scaler),
    }


def _mlp_from(d) -> MlpParams | None:
    if d is None:
        return None
    return MlpParams(tuple(d["layer_dims"]), [np.array(w, float) for w in d["weights"]],
                     [np.array(b, float) for b in d["biases"]], _scaler_from(d["latent_scaler"]))


def emulator_to_dict(em: Emulator, seed=0) -> dict:
    out = {
        "schema_version": SCHEMA_VERSION,
        "kind": em.kind,
        "seed": int(seed),
        "epoch": int(em.epoch),
        "scalers": {"input": _scaler(em.input_scaler), "target": _scaler(em.target_scaler)},
        "nuclide_block": em.nuclide_block.tolist(),
        "hyper": None, "mean_const": None, "inducing": None, "q_mean": None, "q_cov_factor": None,
        "mlp": None, "basis": None,
    }
    if em.kind == "multivariate":
        mv: MultivariateEmulator = em.model
        b = mv.basis
        out["basis"] = {
            "components": b.components.tolist(),
            "weights": b.weights.tolist(),
            "target_mean": b.target_mean.tolist(),
            "target_scale": b.target_scale,
            "output_noise": mv.output_noise,
            "converged": mv.converged,
            "inputs": mv.weight_gps[0].train_inputs.tolist(),
            "weight_gps": [{"hyper": _hyper_dict(gp.hyper), "mean_const": gp.mean_const} for gp in mv.weight_gps],
        }
        return out
    model = em.model
    out["hyper"] = _hyper_dict(model.hyper)
    out["mean_const"] = model.mean_const
    out["inducing"] = model.inducing.locations.tolist()
    q = model.q_state if isinstance(model, SgpModel) else model.vstate
    if q is not None:
        out["q_mean"] = q.q_mean.tolist()
        out["q_cov_factor"] = q.q_cov_factor.tolist()
    out["mlp"] = _mlp_dict(model.feature_map)
    return out


def emulator_from_dict(d: dict) -> Emulator:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {d.get('schema_version')!r}")
    kind = d["kind"]
    scalers = d.get("scalers", {})
    common = dict(nuclide_block=np.array(d["nuclide_block"], float), input_scaler=_scaler_from(scalers.get("input")),
                  target_scaler=_scaler_from(scalers.get("target")), epoch=int(d.get("epoch", 0)))
    if kind == "multivariate":
        b = d["basis"]
        X = np.array(b["inputs"], float)
        W = np.array(b["weights"], float)
        basis = PcaBasis(np.array(b["components"], float), W, np.array(b["target_mean"], float), b["target_scale"])
        gps = [ExactGp(X, W[:, k], _hyper_from(g["hyper"]), g["mean_const"]) for k, g in enumerate(b["weight_gps"])]
        mv = MultivariateEmulator(basis, gps, bool(b["converged"]), float(b["output_noise"]))
        return Emulator(kind, mv, **common)
    hyper = _hyper_from(d["hyper"])
    inducing = InducingPoints(np.array(d["inducing"], float))
    fmap = _mlp_from(d["mlp"])
    q = None
    if d.get("q_mean") is not None:
        q = VariationalState(InducingPoints(inducing.locations.copy()), np.array(d["q_mean"], float),
                             np.array(d["q_cov_factor"], float))
    if kind in ("sgp", "dksgp"):
        model = SgpModel(hyper, d["mean_const"], inducing, fmap, q)
    else:
        if q is None:
            raise ValueError("SVGP checkpoint is missing q(u)")
        model = SvgpModel(hyper, d["mean_const"], q, fmap)
    return Emulator(kind, model, **common)


def save_emulator(path, em: Emulator, seed=0):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(emulator_to_dict(em, seed), fh)


def load_emulator(path) -> Emulator:
    with open(path) as fh:
        return emulator_from_dict(json.load(fh))
