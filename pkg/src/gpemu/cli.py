"""
Command-line entry point: ``gpemu <subcommand> [options]``.

Subcommands
-----------
gen-data    write a synthetic run bundle (params/nuclides/outputs CSV, truth.json)
train       train one emulator; checkpoints, trace.csv, metrics.json
sweep       train over families x inducing counts, one directory per run
evaluate    validation RMSE and stability gate of a checkpoint
bench       single-threaded prediction timing of a checkpoint
mle         multi-start maximum likelihood through a checkpoint
calibrate   NUTS posterior draws through a checkpoint
report      collect sweep metrics into report.csv

Every run writes ``manifest.json`` into its output directory. Exit status
is 0 on success, 1 on a usage or input error and 2 on a numeric or
inference failure.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .checkpoint import emulator_from_dict, save_emulator
from .config import ConfigError, RunConfig, load_config
from .dataset import PARAM_NAMES, SynthConfig, load_csv, load_runs, prepare, save_csv, save_runs, synth_generate
from .errors import (CoverageError, DegenerateColumnError, EvaluationError, InferenceError, LineSearchError,
                     NaturalGradientError, ParseError)
from .inference import ObservationLikelihood, calibrate, mle_multistart
from .seeding import rng_for
from .training import bench_predict, full_validation_rmse, gate_probes, stability_gate, train_emulator

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
USAGE_ERRORS = (ConfigError, ParseError, CoverageError, DegenerateColumnError, FileNotFoundError, KeyError,
                ValueError)
NUMERIC_ERRORS = (InferenceError, EvaluationError, LineSearchError, NaturalGradientError, np.linalg.LinAlgError,
                  FloatingPointError)

TRACE_HEADER = ["epoch", "loss", "val_rmse_mev"]


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    """Raised after outputs are written when the run itself reports a numeric failure."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# small helpers
# ---------------------------------------------------------------------------


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _floats(a):
    return np.asarray(a, dtype=float).tolist()


def _manifest(out, command, argv, cfg: RunConfig, started, extra=None):
    _write_json(Path(out) / "manifest.json", {
        "command": command,
        "argv": list(argv),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": {"gpemu": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_time_s": time.time() - started,
        **(extra or {}),
    })


def _load_checkpoint(path):
    with open(path) as fh:
        d = json.load(fh)
    return emulator_from_dict(d), int(d.get("seed", 0))


def _dataset(cfg: RunConfig, seed=None):
    if cfg.data.path is None:
        raise UsageError("a data bundle is required (--data DIR)")
    raw = load_runs(cfg.data.path)
    return raw, prepare(raw, cfg.data.train_fraction, cfg.seed if seed is None else seed)


def _param_names(p, raw=None):
    if raw is not None and len(raw.param_names) == p:
        return list(raw.param_names)
    return list(PARAM_NAMES) if p == len(PARAM_NAMES) else [f"p{i}" for i in range(p)]


def _observed_std(args, cfg, em):
    """Observed binding energies (MeV) mapped to the emulator's standardized units."""
    if args.observed:
        _, obs = load_csv(args.observed)
        obs = obs.ravel()
        raw = load_runs(cfg.data.path) if cfg.data.path else None
    else:
        if cfg.data.path is None:
            raise UsageError("give --observed FILE or --data DIR with a truth.json")
        raw = load_runs(cfg.data.path)
        if not raw.truth or "observed" not in raw.truth:
            raise UsageError(f"{cfg.data.path} has no observed values in truth.json")
        obs = np.asarray(raw.truth["observed"], dtype=float)
    sc = em.target_scaler
    return (obs - sc.shift[0]) / sc.scale[0], raw


def _unscale(em, theta):
    sc = em.input_scaler
    return np.asarray(theta, float) * sc.scale[:-2] + sc.shift[:-2]


def _bench_points(cfg: RunConfig, p):
    if cfg.bench.points:
        _, pts = load_csv(cfg.bench.points)
        return pts
    return rng_for(cfg.seed, "bench").uniform(-1.0, 1.0, size=(cfg.bench.repetitions, p))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig, out: Path):
    raw = synth_generate(SynthConfig(n_sets=cfg.data.n_sets, n_nuclides=cfg.data.n_nuclides, seed=cfg.seed,
                                     mask_fraction=cfg.data.mask_fraction))
    save_runs(out, raw)
    return {"n_sets": raw.n_sets, "n_nuclides": raw.n_nuclides}


def write_trace(path, traces):
    with open(path, "w") as fh:
        fh.write(",".join(TRACE_HEADER) + "\n")
        for r in traces:
            fh.write(f"{r.epoch},{r.loss!r},{r.val_rmse_mev!r}\n")


def train_run(cfg: RunConfig, out: Path) -> dict:
    """Train one emulator and write its outputs; returns the metrics dict."""
    out.mkdir(parents=True, exist_ok=True)
    _, ds = _dataset(cfg)
    t0 = time.time()
    pair = train_emulator(ds, cfg.train)
    train_time = time.time() - t0
    save_emulator(out / "checkpoints" / "final.json", pair.final, cfg.seed)
    if pair.best_stable is not None:
        save_emulator(out / "checkpoints" / "best_stable.json", pair.best_stable, cfg.seed)
    write_trace(out / "trace.csv", pair.traces)
    chosen = pair.best_stable if pair.best_stable is not None else pair.final
    gate = stability_gate(chosen, gate_probes(ds.n_params, cfg.train.stability_probes, cfg.seed))
    metrics = {
        "family": cfg.train.kind,
        "m": chosen.m,
        "epochs_completed": pair.traces[-1].epoch if pair.traces else 0,
        "best_epoch": pair.best_epoch,
        "checkpoint": "best_stable" if pair.best_stable is not None else "final",
        "rmse_mev": float("nan"),
        "time_mean_s": float("nan"),
        "time_std_s": float("nan"),
        "gate_status": "pass" if gate.passed else f"fail:{gate.reason}",
        "aborted": pair.aborted,
        "message": pair.message,
        "initial_loss": pair.initial_loss,
        "train_time_s": train_time,
    }
    if ds.X_val.shape[0]:
        metrics["rmse_mev"] = full_validation_rmse(chosen, ds)
    if gate.passed:
        b = bench_predict(chosen, _bench_points(cfg, ds.n_params), cfg.bench.repetitions)
        metrics.update(time_mean_s=b.mean, time_std_s=b.std, time_samples_s=_floats(b.samples))
    _write_json(out / "metrics.json", metrics)
    return metrics


def cmd_train(args, cfg, out):
    metrics = train_run(cfg, out)
    if metrics["aborted"]:
        raise NumericFailure(f"training aborted: {metrics['message']}")
    return {"rmse_mev": metrics["rmse_mev"], "gate_status": metrics["gate_status"]}


def _sweep_dir(out, family, m):
    return Path(out) / family / ("default" if family == "multivariate" else f"m{m:03d}")


def _sweep_worker(job):
    cfg_dict, out = job
    cfg = RunConfig.from_dict(cfg_dict)
    started = time.time()
    try:
        metrics = train_run(cfg, Path(out))
    except NUMERIC_ERRORS as exc:
        metrics = {"family": cfg.train.kind, "m": cfg.train.m, "error": str(exc), "gate_status": "error"}
        _write_json(Path(out) / "metrics.json", metrics)
    _manifest(out, "sweep-run", [], cfg, started)
    return out, metrics.get("gate_status")


def cmd_sweep(args, cfg: RunConfig, out: Path):
    jobs = []
    for family in cfg.sweep.families:
        ms = (None,) if family == "multivariate" else cfg.sweep.m_values
        for m in ms:
            d = cfg.to_dict()
            d["train"]["kind"] = family
            if m is not None:
                d["train"]["m"] = int(m)
            d["train"].pop("seed")
            jobs.append((d, str(_sweep_dir(out, family, m))))
    if cfg.sweep.workers > 1:
        with ProcessPoolExecutor(cfg.sweep.workers) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    else:
        results = [_sweep_worker(j) for j in jobs]
    return {"runs": [r[0] for r in results]}


def cmd_evaluate(args, cfg, out):
    em, ck_seed = _load_checkpoint(args.checkpoint)
    _, ds = _dataset(cfg, seed=ck_seed)
    gate = stability_gate(em, gate_probes(ds.n_params, cfg.train.stability_probes, ck_seed))
    rmse_mev = full_validation_rmse(em, ds)
    result = {"rmse_mev": rmse_mev, "rmse_std": rmse_mev / float(ds.target_scaler.scale[0]),
              "n_val": int(ds.X_val.shape[0]), "gate_status": "pass" if gate.passed else f"fail:{gate.reason}",
              "gate_probe": gate.probe}
    _write_json(out / "evaluation.json", result)
    return result


def cmd_bench(args, cfg, out):
    em, _ = _load_checkpoint(args.checkpoint)
    b = bench_predict(em, _bench_points(cfg, em.n_params), cfg.bench.repetitions)
    result = {"family": em.kind, "m": em.m, "time_mean_s": b.mean, "time_std_s": b.std,
              "samples_s": _floats(b.samples)}
    _write_json(out / "bench.json", result)
    return {"time_mean_s": b.mean}


def cmd_mle(args, cfg, out):
    em, _ = _load_checkpoint(args.checkpoint)
    obs, raw = _observed_std(args, cfg, em)
    like = ObservationLikelihood(em, obs, cfg.likelihood.diagonal)
    res = mle_multistart(like, cfg.mle.rounds, cfg.mle.steps, seed=cfg.seed, lr=cfg.mle.lr,
                         max_step=cfg.mle.max_step, threshold=cfg.mle.threshold)
    result = {
        "param_names": _param_names(em.n_params, raw),
        "rounds": _floats(res.rounds),
        "round_log_likelihood": _floats(res.round_values),
        "consensus": _floats(res.consensus),
        "consensus_physical": _floats(_unscale(em, res.consensus)),
        "round_std": _floats(res.round_std),
        "stable": res.stable.tolist(),
        "out_of_bounds": res.out_of_bounds.tolist(),
        "failed_rounds": [{"round": k, "reason": r} for k, r in res.failed_rounds],
        "threshold": cfg.mle.threshold,
    }
    _write_json(out / "mle.json", result)
    return {"stable": int(res.stable.sum())}


def cmd_calibrate(args, cfg, out):
    em, _ = _load_checkpoint(args.checkpoint)
    obs, raw = _observed_std(args, cfg, em)
    n = cfg.nuts
    ch = calibrate(em, obs, n.warmup, n.samples, n.max_depth, n.target_accept, cfg.seed,
                   cfg.likelihood.diagonal, n.chains)
    names = _param_names(em.n_params, raw)
    save_csv(out / "samples.csv", ch.samples, names)
    hpd_phys = np.sort(np.stack([_unscale(em, ch.hpd90[:, 0]), _unscale(em, ch.hpd90[:, 1])], 1), 1)
    _write_json(out / "diagnostics.json", {
        "param_names": names,
        "rhat": _floats(ch.rhat),
        "rhat_degenerate": ch.rhat_degenerate.tolist(),
        "ess": _floats(ch.ess),
        "hpd90": _floats(ch.hpd90),
        "hpd90_physical": _floats(hpd_phys),
        "quality": ch.quality.tolist(),
        "good": ch.good,
        "divergences": ch.divergences,
        "step_size": ch.step_size,
        "accept_rate": ch.accept_rate,
        "warmup": ch.warmup,
        "samples": int(ch.samples.shape[0]),
        "warnings": ch.warnings,
    })
    for w in ch.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return {"good": ch.good, "divergences": ch.divergences}


REPORT_HEADER = ("m", "family", "rmse_mev", "time_mean_s", "time_std_s", "gate_status")


def collect_report(sweep_dir) -> list:
    rows = []
    for path in sorted(Path(sweep_dir).glob("*/*/metrics.json")):
        with open(path) as fh:
            mt = json.load(fh)
        rows.append({k: mt.get(k) for k in REPORT_HEADER})
    rows.sort(key=lambda r: (r["family"], r["m"] if r["m"] is not None else -1))
    return rows


def cmd_report(args, cfg, out):
    rows = collect_report(args.sweep)
    if not rows:
        raise UsageError(f"no metrics.json files found under {args.sweep}")
    with open(out / "report.csv", "w") as fh:
        fh.write(",".join(REPORT_HEADER) + "\n")
        for r in rows:
            cells = []
            for k in REPORT_HEADER:
                v = r[k]
                cells.append("" if v is None else repr(float(v)) if isinstance(v, float) else str(v))
            fh.write(",".join(cells) + "\n")
    return {"rows": len(rows)}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

# (flag, dotted config name, type, help)
_DATA_FLAGS = [("--data", "data.path", str, "run bundle directory"),
               ("--train-fraction", "data.train_fraction", float, "training share of rows")]
_TRAIN_FLAGS = [
    ("--kind", "train.kind", str, "emulator family"),
    ("--m", "train.m", int, "number of inducing points"),
    ("--epochs", "train.epochs", int, "training epochs"),
    ("--batch-size", "train.batch_size", int, "mini-batch size (SVGP families)"),
    ("--lr-lbfgs", "train.lr_lbfgs", float, "L-BFGS learning rate"),
    ("--lr-adam", "train.lr_adam", float, "Adam learning rate"),
    ("--lr-natgrad", "train.lr_natgrad", float, "natural-gradient learning rate"),
    ("--weight-decay", "train.weight_decay", float, "MLP weight decay"),
    ("--probes", "train.stability_probes", int, "stability gate probe count"),
]
_BENCH_FLAGS = [("--repetitions", "bench.repetitions", int, "timed predictions"),
                ("--bench-points", "bench.points", str, "CSV of scaled parameter vectors to time")]
_LIKE_FLAGS = [("--diagonal", "likelihood.diagonal", None, "drop cross-nuclide predictive covariance")]

SUBCOMMANDS = {
    "gen-data": (cmd_gen_data, "write a synthetic run bundle",
                 [("--n-sets", "data.n_sets", int, "parameter sets"),
                  ("--n-nuclides", "data.n_nuclides", int, "nuclides per set"),
                  ("--mask-fraction", "data.mask_fraction", float, "share of failed runs")]),
    "train": (cmd_train, "train one emulator", _DATA_FLAGS + _TRAIN_FLAGS + _BENCH_FLAGS),
    "sweep": (cmd_sweep, "train over families and inducing counts",
              _DATA_FLAGS + _TRAIN_FLAGS + _BENCH_FLAGS + [
                  ("--m-values", "sweep.m_values", "ints", "comma-separated inducing counts"),
                  ("--families", "sweep.families", "strs", "comma-separated families"),
                  ("--workers", "sweep.workers", int, "parallel worker processes")]),
    "evaluate": (cmd_evaluate, "validation RMSE and stability gate of a checkpoint", _DATA_FLAGS),
    "bench": (cmd_bench, "time single-threaded predictions", _BENCH_FLAGS),
    "mle": (cmd_mle, "multi-start maximum likelihood", _DATA_FLAGS + _LIKE_FLAGS + [
        ("--rounds", "mle.rounds", int, "L-BFGS restarts"),
        ("--steps", "mle.steps", int, "iterations per restart"),
        ("--threshold", "mle.threshold", float, "stability threshold on round std")]),
    "calibrate": (cmd_calibrate, "NUTS calibration", _DATA_FLAGS + _LIKE_FLAGS + [
        ("--warmup", "nuts.warmup", int, "adaptation iterations"),
        ("--samples", "nuts.samples", int, "post-warmup draws per chain"),
        ("--max-depth", "nuts.max_depth", int, "maximum tree depth"),
        ("--target-accept", "nuts.target_accept", float, "dual-averaging target"),
        ("--chains", "nuts.chains", int, "independent chains")]),
    "report": (cmd_report, "aggregate sweep metrics into report.csv", []),
}


def _list_of(kind):
    def parse(text):
        items = [t.strip() for t in text.split(",") if t.strip()]
        return [int(t) for t in items] if kind == "ints" else items
    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gpemu", description="Gaussian-process emulation and calibration pipeline.")
    parser.add_argument("--version", action="version", version=f"gpemu {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (_, help_text, flags) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", help="output directory (default: config output_dir)")
        p.add_argument("--seed", type=int, help="root seed")
        if name in ("evaluate", "bench", "mle", "calibrate"):
            p.add_argument("--checkpoint", required=True, help="emulator checkpoint JSON")
        if name in ("mle", "calibrate"):
            p.add_argument("--observed", help="CSV with one row of observed binding energies (MeV)")
        if name == "report":
            p.add_argument("--sweep", required=True, help="sweep output directory")
        for flag, dest, typ, help_flag in flags:
            key = "cfg:" + dest
            if typ is None:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=help_flag)
            elif isinstance(typ, str):
                p.add_argument(flag, dest=key, type=_list_of(typ), help=help_flag)
            else:
                p.add_argument(flag, dest=key, type=typ, help=help_flag)
    return parser


def _overrides(args) -> dict:
    out = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.out is not None:
        out["output_dir"] = args.out
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("gpemu: a subcommand is required (see --help)")
        cfg = load_config(args.config, _overrides(args))
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        handler = SUBCOMMANDS[args.command][0]
        failure = None
        try:
            summary = handler(args, cfg, out)
        except NumericFailure as exc:
            summary, failure = {"error": str(exc)}, exc
        _manifest(out, args.command, argv, cfg, started, {"summary": summary})
        if failure is not None:
            raise failure
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (NumericFailure, *NUMERIC_ERRORS) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(summary, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
