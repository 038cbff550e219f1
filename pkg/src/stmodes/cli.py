"""Command-line front end.

Every subcommand reads the same settings, resolved as flag > config file >
built-in default.  The config file is INI-style: ``[section]`` headers with
``key = value`` lines; see ``SETTINGS`` for the recognised keys and types.
"""
from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .attention import write_channel_matrix_csv
from .datasets import Dataset, SyntheticSpec, export_csv, generate_synthetic, ingest_csv
from .errors import ConfigError, InvalidInputError, NumericError, StModesError
from .experiment import (DEFAULT_SWEEP, DecompositionCache, ExperimentConfig, Normalizer,
                         Pipeline, build_model, ensemble_train, evaluate, feature_splits,
                         inject_noise, noise_sweep, run_ablation, select_modes, write_rows_csv)
from .graph import Graph, cheb_polynomials, scaled_laplacian
from .model import (ForecastModel, ModelConfig, TrainingReport, forward, load_checkpoint,
                    mae_loss, save_checkpoint)
from .numerics import Tensor, compare_parameters, difference_noise_floor, no_grad, relative_error
from .vmd import VmdConfig, decompose, reconstruction_error, save_modeset

SUBCOMMANDS = ("decompose", "train", "eval", "sweep", "ablate", "synth", "gradcheck")


@dataclass(frozen=True)
class Setting:
    section: str
    key: str
    type: Callable[[str], Any]
    default: Any
    help: str


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def _cases(text: str) -> tuple[str, ...]:
    return tuple(v.strip().upper() for v in str(text).replace(",", " ").split())


SETTINGS: dict[str, Setting] = {s.key: s for s in [
    Setting("run", "seed", int, 42, "seed for noise, initialization and shuffling"),
    Setting("run", "threads", int, None, "worker threads for decomposition"),
    Setting("run", "out", str, "out", "output directory"),
    Setting("vmd", "k", int, 3, "number of modes K"),
    Setting("vmd", "alpha", float, 2000.0, "bandwidth constraint"),
    Setting("vmd", "eps", float, 1e-7, "convergence tolerance"),
    Setting("vmd", "tau", float, 0.0, "dual ascent step"),
    Setting("vmd", "max_iterations", int, 500, "iteration cap"),
    Setting("experiment", "sigma", float, 0.0, "noise std on z-scored data"),
    Setting("experiment", "window", int, 12, "input window T_w"),
    Setting("experiment", "horizon", int, 12, "forecast horizon N_H"),
    Setting("experiment", "split", _floats, (0.6, 0.2, 0.2), "train/val/test fractions"),
    Setting("experiment", "snr_threshold", float, -6.0, "mode truncation threshold (dB)"),
    Setting("experiment", "ensemble", int, 1, "number of ensemble decompositions"),
    Setting("experiment", "sigmas", _floats, DEFAULT_SWEEP, "noise levels for sweep"),
    Setting("experiment", "cases", _cases, ("I", "II", "III", "IV"), "ablation cases"),
    Setting("training", "batch", int, 48, "batch size"),
    Setting("training", "filters", int, 64, "filters per ST block"),
    Setting("training", "order", int, 3, "Chebyshev order M"),
    Setting("training", "blocks", int, 2, "number of ST blocks"),
    Setting("training", "epochs", int, 100, "maximum epochs"),
    Setting("training", "patience", int, 10, "early-stopping patience"),
    Setting("training", "lr", float, 1e-3, "Adam learning rate"),
    Setting("data", "data", str, None, "directory holding signals.csv and adjacency.csv"),
    Setting("data", "signals", str, None, "signals CSV (rows = time, columns = nodes)"),
    Setting("data", "adjacency", str, None, "adjacency CSV (edge list or dense)"),
    Setting("data", "nodes", int, 16, "synthetic node count"),
    Setting("data", "length", int, 2016, "synthetic series length"),
    Setting("data", "coupling", float, 0.3, "synthetic spatial coupling"),
]}

_FLAG_NAMES = {"snr_threshold": "--snr-threshold", "max_iterations": "--max-iterations"}


class UsageError(StModesError):
    """Bad flags, missing files or conflicting settings (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(key: str) -> str:
    return _FLAG_NAMES.get(key, f"--{key}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI config file")
    for key, s in SETTINGS.items():
        common.add_argument(_flag(key), dest=key, type=s.type, default=None, help=s.help)
    parser = _Parser(prog="stmodes", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"stmodes {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "decompose": "decompose (optionally noised) signals; writes modes and an E_R report",
        "train": "train a forecaster; writes a checkpoint, loss curve and test metrics",
        "eval": "evaluate a checkpoint (or an untrained model) on the test split",
        "sweep": "evaluate a trained model across noise levels",
        "ablate": "run ablation cases I-IV and write the case matrix",
        "synth": "write a synthetic dataset",
        "gradcheck": "finite-difference check of a toy model's gradients",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name in ("eval", "sweep"):
            p.add_argument("--checkpoint", metavar="PATH")
        if name == "decompose":
            p.add_argument("--raw", action="store_true", help="skip z-score normalization")
        if name == "gradcheck":
            p.add_argument("--step", type=float, default=1e-5)
            p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def resolve_settings(args: argparse.Namespace) -> dict[str, Any]:
    """Merge flags, the config file and defaults (in that order of precedence)."""
    from_file: dict[str, Any] = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise UsageError(f"{path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                s = SETTINGS.get(key)
                if s is None or s.section != section:
                    raise UsageError(f"{path}: unknown setting [{section}] {key}")
                try:
                    from_file[key] = s.type(raw)
                except ValueError as exc:
                    raise UsageError(f"{path}: bad value for {key}: {raw!r}") from exc
    out = {}
    for key, s in SETTINGS.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else from_file.get(key, s.default)
    if out["threads"] is None:
        env = os.environ.get("STMODES_THREADS")
        try:
            out["threads"] = int(env) if env else (os.cpu_count() or 1)
        except ValueError as exc:
            raise UsageError(f"STMODES_THREADS must be an integer, got {env!r}") from exc
    if out["threads"] < 1:
        raise UsageError("threads must be >= 1")
    out["_explicit"] = {k for k in SETTINGS if getattr(args, k, None) is not None} | set(from_file)
    return out


def experiment_config(s: dict[str, Any]) -> ExperimentConfig:
    vmd = VmdConfig(num_modes=s["k"], alpha=s["alpha"], tolerance=s["eps"], tau=s["tau"],
                    max_iterations=s["max_iterations"])
    return ExperimentConfig(
        sigma_hat=s["sigma"], split=s["split"], window=s["window"], horizon=s["horizon"],
        vmd=vmd, truncation_snr_db=s["snr_threshold"], ensemble_count=s["ensemble"],
        seed=s["seed"], batch_size=s["batch"], filters=s["filters"], order=s["order"],
        blocks=s["blocks"], epochs=s["epochs"], patience=s["patience"], lr=s["lr"])


def load_dataset(s: dict[str, Any]) -> Dataset:
    if s["data"] and (s["signals"] or s["adjacency"]):
        raise UsageError("use either --data or --signals/--adjacency, not both")
    if s["data"]:
        root = Path(s["data"])
        signals, adjacency = root / "signals.csv", root / "adjacency.csv"
    elif s["signals"] or s["adjacency"]:
        if not (s["signals"] and s["adjacency"]):
            raise UsageError("--signals and --adjacency must be given together")
        signals, adjacency = Path(s["signals"]), Path(s["adjacency"])
    else:
        return generate_synthetic(_synthetic_spec(s))
    for p in (signals, adjacency):
        if not p.is_file():
            raise UsageError(f"file not found: {p}")
    return ingest_csv(signals, adjacency)


def _synthetic_spec(s: dict[str, Any]) -> SyntheticSpec:
    return SyntheticSpec(num_nodes=s["nodes"], length=s["length"], coupling=s["coupling"],
                         seed=s["seed"])


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _out_dir(s: dict[str, Any]) -> Path:
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands -------------------------------------------------------------

def cmd_synth(s, args) -> dict:
    out = _out_dir(s)
    ds = generate_synthetic(_synthetic_spec(s))
    export_csv(ds, out / "signals.csv", out / "adjacency.csv")
    n, c, _ = ds.components.shape
    header = [f"node{i}_c{k}" for i in range(n) for k in range(c)]
    rows = ds.components.reshape(n * c, -1).T
    with open(out / "components.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) for v in r) + "\n")
    meta = {"name": ds.name, "num_nodes": ds.num_nodes, "length": ds.length,
            "sample_period": ds.sample_period, "provenance": ds.provenance}
    _write_json(out / "dataset.json", meta)
    return {"command": "synth", "out": str(out), "num_nodes": ds.num_nodes, "length": ds.length}


def cmd_decompose(s, args) -> dict:
    out = _out_dir(s)
    ds = load_dataset(s)
    cfg = experiment_config(s)
    x = ds.signals
    normalizer = None if args.raw else Normalizer.fit(x, cfg.split)
    base = x if normalizer is None else normalizer.transform(x)
    noisy = inject_noise(base, cfg.sigma_hat, cfg.noise_mean, cfg.seed)
    modes = decompose(noisy, cfg.vmd, threads=s["threads"])
    save_modeset(modes, out / "modes.bin")
    report = {
        "command": "decompose",
        "num_nodes": modes.num_nodes, "num_modes": modes.num_modes, "length": modes.length,
        "sigma": cfg.sigma_hat, "normalized": normalizer is not None,
        "alpha": cfg.vmd.alpha, "eps": cfg.vmd.tolerance, "tau": cfg.vmd.tau,
        "reconstruction_error": reconstruction_error(noisy, modes),
        "iterations_max": int(modes.iterations_used.max()),
        "converged_nodes": int(modes.converged.sum()),
        "mean_center_frequencies": modes.center_frequencies.mean(axis=0).tolist(),
    }
    if ds.components is not None and ds.components.shape[1] == modes.num_modes:
        corr = [[float(np.corrcoef(modes.modes[i, k], ds.components[i, k])[0, 1])
                 for k in range(modes.num_modes)] for i in range(modes.num_nodes)]
        report["min_component_correlation"] = float(np.min(corr))
    _write_json(out / "decompose_report.json", report)
    return report


def _training_metadata(cfg: ExperimentConfig, pipe) -> dict:
    return {"experiment": cfg.to_dict(), "normalizer": pipe.normalizer.to_dict(),
            "channels": None if pipe.channels is None else pipe.channels.tolist(),
            "fill": pipe.fill}


def _export_channel_maps(model: ForecastModel, inputs: np.ndarray, out: Path) -> list[str]:
    with no_grad():
        _, maps = forward(model, Tensor(inputs), return_attention=True)
    names = []
    for i, att in enumerate(maps):
        name = f"channel_attention_block{i}.csv"
        write_channel_matrix_csv(att.c_th.data.mean(axis=0), out / name)
        names.append(name)
    return names


def cmd_train(s, args) -> dict:
    out = _out_dir(s)
    ds = load_dataset(s)
    cfg = experiment_config(s)
    pipe = ensemble_train(ds.signals, ds.graph, cfg, threads=s["threads"])
    save_checkpoint(pipe.model, out / "checkpoint.bin", epoch=pipe.report.best_epoch,
                    val_mae=pipe.report.best_val, seed=cfg.seed,
                    metadata=_training_metadata(cfg, pipe))
    with open(out / "loss_curve.csv", "w") as fh:
        fh.write("epoch,train_mae,val_mae,decomposition\n")
        for e, tl, vl, j in pipe.report.curve_rows():
            fh.write(f"{e},{tl!r},{vl!r},{j}\n")
    pipe.test_metrics.write_json(out / "metrics.json")
    pipe.test_metrics.write_csv(out / "metrics.csv")
    x_norm = pipe.normalizer.transform(ds.signals)
    _, _, test = feature_splits(pipe.modes, x_norm, cfg)
    maps = _export_channel_maps(pipe.model, test.inputs, out)
    return {"command": "train", "best_epoch": pipe.report.best_epoch,
            "best_val_mae": pipe.report.best_val, "epochs_run": len(pipe.report.train_loss),
            "parameters": pipe.model.parameter_count(),
            "test": pipe.test_metrics.aggregates()["average"], "channel_maps": maps}


def _model_from_checkpoint(s, args, cfg: ExperimentConfig, num_nodes: int):
    explicit = s["_explicit"]
    path = Path(args.checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    model, manifest = load_checkpoint(path)
    found = model.config
    wanted = {"k": "in_channels", "window": "window", "horizon": "horizon",
              "filters": "filters", "order": "order", "blocks": "blocks"}
    meta = manifest.get("metadata", {})
    channels = meta.get("channels")
    for key, field_name in wanted.items():
        if key in explicit:
            value = s[key] if key != "k" or channels is None else len(channels)
            if value != getattr(found, field_name):
                raise ConfigError(f"checkpoint was trained with {field_name}="
                                  f"{getattr(found, field_name)}, but {_flag(key)} {s[key]} given")
    if found.num_nodes != num_nodes:
        raise ConfigError(f"checkpoint has {found.num_nodes} nodes, dataset has {num_nodes}")
    stored = meta.get("experiment", {})
    vmd = VmdConfig(**stored["vmd"]) if "vmd" in stored else cfg.vmd
    overrides = {k: v for k, v in stored.items() if k in ExperimentConfig.__dataclass_fields__
                 and k not in ("vmd", "sigma_hat", "seed")}
    cfg = replace(cfg, vmd=vmd, **overrides)
    if "sigma" not in explicit and "sigma_hat" in stored:
        cfg = replace(cfg, sigma_hat=stored["sigma_hat"])
    normalizer = Normalizer.from_dict(meta["normalizer"]) if "normalizer" in meta else None
    return model, cfg, normalizer, channels, meta.get("fill", "truncate")


def _pipeline_for_eval(s, args, ds: Dataset):
    cfg = experiment_config(s)
    cache = DecompositionCache()
    if getattr(args, "checkpoint", None):
        model, cfg, normalizer, channels, fill = _model_from_checkpoint(s, args, cfg, ds.num_nodes)
        normalizer = normalizer or Normalizer.fit(ds.signals, cfg.split)
    else:
        normalizer = Normalizer.fit(ds.signals, cfg.split)
        model = build_model(ds.graph, cfg, cfg.vmd.num_modes)
        channels, fill = None, "truncate"
    x_norm = normalizer.transform(ds.signals)
    modes = select_modes(cache.get(x_norm, cfg.sigma_hat, cfg.noise_mean, cfg.seed, cfg.vmd,
                              s["threads"]), channels, fill)
    _, _, test = feature_splits(modes, x_norm, cfg)
    metrics = evaluate(model, test, normalizer, cfg.mape_floor)
    pipe = Pipeline(model, normalizer, cfg, TrainingReport(), modes, metrics,
                    None if channels is None else np.asarray(channels), fill)
    return pipe, cache


def cmd_eval(s, args) -> dict:
    out = _out_dir(s)
    ds = load_dataset(s)
    pipe, _ = _pipeline_for_eval(s, args, ds)
    pipe.test_metrics.write_json(out / "metrics.json")
    pipe.test_metrics.write_csv(out / "metrics.csv")
    return {"command": "eval", "trained": bool(getattr(args, "checkpoint", None)),
            "sigma": pipe.config.sigma_hat, "test": pipe.test_metrics.aggregates()["average"]}


def cmd_sweep(s, args) -> dict:
    out = _out_dir(s)
    ds = load_dataset(s)
    if args.checkpoint:
        pipe, cache = _pipeline_for_eval(s, args, ds)
    else:
        cache = DecompositionCache()
        pipe = ensemble_train(ds.signals, ds.graph, experiment_config(s), threads=s["threads"],
                              cache=cache)
    results = noise_sweep(pipe, ds.signals, s["sigmas"], threads=s["threads"], cache=cache)
    rows = []
    for sigma, rep in results:
        agg = rep.aggregates()["average"]
        rows.append({"sigma": sigma, "mae": agg["mae"], "rmse": agg["rmse"], "mape": agg["mape"]})
    write_rows_csv(rows, out / "sweep.csv")
    _write_json(out / "sweep.json", {"trained_sigma": pipe.config.sigma_hat,
                                     "results": [{"sigma": sg, **rep.to_dict()}
                                                 for sg, rep in results]})
    return {"command": "sweep", "results": rows}


def cmd_ablate(s, args) -> dict:
    out = _out_dir(s)
    ds = load_dataset(s)
    cfg = experiment_config(s)
    rows = run_ablation(ds.signals, ds.graph, cfg, s["cases"], threads=s["threads"],
                        ensemble_count=s["ensemble"] if "ensemble" in s["_explicit"] else None)
    write_rows_csv(rows, out / "ablation.csv")
    return {"command": "ablate", "rows": rows}


def cmd_gradcheck(s, args) -> dict:
    """1-block toy model; unset sizes default to 4 nodes, K=3, T_w=5, N_H=2, M=2, F=4."""
    out = _out_dir(s)
    explicit = s["_explicit"]
    pick = lambda key, toy: s[key] if key in explicit else toy  # noqa: E731
    n = pick("nodes", 4)
    cfg = ModelConfig(num_nodes=n, in_channels=pick("k", 3), window=pick("window", 5),
                      horizon=pick("horizon", 2), order=pick("order", 2),
                      filters=pick("filters", 4), blocks=pick("blocks", 1))
    report = gradcheck_report(cfg, seed=s["seed"], step=args.step)
    report["tolerance"] = args.tolerance
    report["passed"] = report["max_relative_error"] < args.tolerance
    _write_json(out / "gradcheck.json", report)
    if not report["passed"]:
        raise NumericError(
            f"gradient check failed: max relative error "
            f"{report['max_relative_error']:.3e} >= {args.tolerance:g}",
            diagnostics={k: report[k] for k in ("worst_parameter", "max_relative_error",
                                                "max_absolute_error", "difference_noise_floor")})
    return report


def toy_graph(num_nodes: int, seed: int) -> Graph:
    """Dense random symmetric graph used for gradient checks."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.1, 1.0, size=(num_nodes, num_nodes))
    a = (a + a.T) / 2
    np.fill_diagonal(a, 0.0)
    return Graph(a)


def gradcheck_report(cfg: ModelConfig, seed: int = 42, step: float = 1e-5,
                     batch: int = 2) -> dict:
    rng = np.random.default_rng(seed)
    polys = cheb_polynomials(scaled_laplacian(toy_graph(cfg.num_nodes, seed)), cfg.order)
    model = ForecastModel.init(cfg, polys, seed=seed)
    x = rng.standard_normal((batch, cfg.num_nodes, cfg.in_channels, cfg.window))
    y = rng.standard_normal((batch, cfg.num_nodes, cfg.horizon))
    value, pairs = compare_parameters(lambda: mae_loss(forward(model, Tensor(x)), y),
                                      model.parameters(), step=step)
    errors = {name: relative_error(a, n) for name, (a, n) in pairs.items()}
    worst = max(errors, key=errors.get)
    return {"config": cfg.to_dict(), "seed": seed, "step": step,
            "max_relative_error": errors[worst], "worst_parameter": worst,
            "per_parameter": errors,
            "max_absolute_error": max(float(np.max(np.abs(a - n))) for a, n in pairs.values()),
            "difference_noise_floor": difference_noise_floor(value, step)}


HANDLERS = {"synth": cmd_synth, "decompose": cmd_decompose, "train": cmd_train,
            "eval": cmd_eval, "sweep": cmd_sweep, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck}


def _fail(code: int, exc: BaseException) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    diagnostics = getattr(exc, "diagnostics", None)
    if diagnostics:
        payload["diagnostics"] = diagnostics
    print(json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        return _fail(2, exc)
    try:
        settings = resolve_settings(args)
        result = HANDLERS[args.command](settings, args)
    except (UsageError, ConfigError, InvalidInputError, FileNotFoundError) as exc:
        return _fail(2, exc)
    except (NumericError, FloatingPointError) as exc:
        return _fail(1, exc)
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
