"""Noise injection, windowing, metrics, SNR-based mode selection, ensemble
training, noise sweeps and the ablation case matrix."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError
from .graph import Graph, cheb_polynomials, scaled_laplacian
from .model import (ForecastModel, ModelConfig, TrainingReport, TrainOptions, WindowedSplit,
                    predict, train)
from .vmd import ModeSet, VmdConfig, decompose, reconstruction_error

__all__ = [
    "ExperimentConfig",
    "DEFAULT_SWEEP",
    "inject_noise",
    "window_count",
    "WindowSet",
    "make_windows",
    "Normalizer",
    "MetricsReport",
    "metrics",
    "mode_snr",
    "truncate_modes",
    "select_modes",
    "DecompositionCache",
    "Pipeline",
    "build_model",
    "feature_splits",
    "evaluate",
    "train_pipeline",
    "ensemble_train",
    "noise_sweep",
    "run_ablation",
    "write_rows_csv",
]

DEFAULT_SWEEP = (0.0, 0.1, 0.2, 0.5, 0.8, 1.0)
REPORT_HORIZONS = (3, 6, 12)


@dataclass(frozen=True)
class ExperimentConfig:
    sigma_hat: float = 0.0
    noise_mean: float = 0.0
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    window: int = 12
    horizon: int = 12
    vmd: VmdConfig = field(default_factory=VmdConfig)
    truncation_snr_db: float = -6.0
    ensemble_count: int = 1
    seed: int = 42
    batch_size: int = 48
    filters: int = 64
    order: int = 3
    blocks: int = 2
    epochs: int = 100
    patience: int = 10
    lr: float = 1e-3
    mape_floor: float = 1.0

    def __post_init__(self):
        split = tuple(float(f) for f in self.split)
        object.__setattr__(self, "split", split)
        if len(split) != 3 or any(f <= 0 for f in split) or abs(sum(split) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be three positives summing to 1, got {split}")
        if self.window < 1 or self.horizon < 1:
            raise ConfigError("window and horizon must be >= 1")
        if not self.sigma_hat >= 0:
            raise ConfigError(f"sigma_hat must be >= 0, got {self.sigma_hat}")
        if self.ensemble_count < 1:
            raise ConfigError("ensemble_count must be >= 1")
        if math.isnan(self.truncation_snr_db):
            raise ConfigError("truncation threshold must not be NaN")

    def model_config(self, num_nodes: int, in_channels: int) -> ModelConfig:
        return ModelConfig(num_nodes=num_nodes, in_channels=in_channels, window=self.window,
                           horizon=self.horizon, order=self.order, filters=self.filters,
                           blocks=self.blocks)

    def train_options(self) -> TrainOptions:
        return TrainOptions(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                            patience=self.patience, seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d


def inject_noise(x, sigma_hat: float, mean: float = 0.0, seed: int = 42) -> np.ndarray:
    """``x + N(mean, sigma_hat^2)`` i.i.d. per element."""
    if not sigma_hat >= 0:
        raise ConfigError(f"sigma_hat must be >= 0, got {sigma_hat}")
    x = np.asarray(x, dtype=np.float64)
    if sigma_hat == 0 and mean == 0:
        return x.copy()
    return x + np.random.default_rng(seed).normal(mean, sigma_hat, size=x.shape)


# -- windowing -----------------------------------------------------------------

def window_count(length: int, window: int, horizon: int) -> int:
    return max(0, length - window - horizon + 1)


def split_bounds(length: int, split: Sequence[float]) -> tuple[int, int]:
    """End indices of the train and validation time segments."""
    train_end = int(round(length * split[0]))
    val_end = int(round(length * (split[0] + split[1])))
    return train_end, val_end


@dataclass
class WindowSet:
    inputs: np.ndarray   # [S, N, T_w]
    targets: np.ndarray  # [S, N, N_H]
    starts: np.ndarray   # [S] first input time index

    def target_times(self, window: int, horizon: int) -> np.ndarray:
        return self.starts[:, None] + window + np.arange(horizon)[None, :]

    def __len__(self) -> int:
        return len(self.starts)


def _segment_starts(begin: int, end: int, window: int, horizon: int) -> np.ndarray:
    return np.arange(begin, max(begin, end - window - horizon + 1))


def make_windows(x, window: int, horizon: int,
                 split: Sequence[float] = (0.6, 0.2, 0.2)) -> tuple[WindowSet, WindowSet, WindowSet]:
    """Stride-1 windows inside each chronological segment (train, val, test).

    A window occupies ``window + horizon`` consecutive steps and never crosses
    a segment boundary.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError(f"expected [N, T] series, got {x.shape}")
    if window < 1 or horizon < 1:
        raise InvalidInputError("window and horizon must be >= 1")
    t = x.shape[1]
    if t < window + horizon:
        raise InvalidInputError(f"series of length {t} is shorter than window + horizon "
                                f"= {window + horizon}")
    train_end, val_end = split_bounds(t, split)
    out = []
    for begin, end in ((0, train_end), (train_end, val_end), (val_end, t)):
        starts = _segment_starts(begin, end, window, horizon)
        out.append(_gather(x, x, starts, window, horizon))
    return tuple(out)


def _gather(inputs_src: np.ndarray, target_src: np.ndarray, starts: np.ndarray,
            window: int, horizon: int) -> WindowSet:
    idx_in = starts[:, None] + np.arange(window)[None, :]
    idx_out = starts[:, None] + window + np.arange(horizon)[None, :]
    # inputs_src is [N, ..., T]; move the sample axis first.  A fixed memory
    # layout keeps BLAS summation order, and so results, independent of the source
    inputs = np.ascontiguousarray(np.moveaxis(inputs_src[..., idx_in], -2, 0))
    targets = np.ascontiguousarray(np.moveaxis(target_src[..., idx_out], -2, 0))
    return WindowSet(inputs, targets, starts)


@dataclass(frozen=True)
class Normalizer:
    """Per-node z-score with statistics from the training segment."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x, split: Sequence[float]) -> "Normalizer":
        x = np.asarray(x, dtype=np.float64)
        train_end, _ = split_bounds(x.shape[1], split)
        seg = x[:, :max(train_end, 2)]
        std = seg.std(axis=1)
        return cls(seg.mean(axis=1), np.where(std > 0, std, 1.0))

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x) - self.mean[:, None]) / self.std[:, None]

    def inverse(self, x, node_axis: int = -2) -> np.ndarray:
        """Undo the scaling on an array whose node axis is ``node_axis``."""
        x = np.asarray(x)
        shape = [1] * x.ndim
        shape[node_axis] = -1
        return x * self.std.reshape(shape) + self.mean.reshape(shape)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# -- metrics -------------------------------------------------------------------

@dataclass
class MetricsReport:
    mae: np.ndarray   # [N_H]
    rmse: np.ndarray  # [N_H]
    mape: np.ndarray  # [N_H], percent

    @property
    def horizon(self) -> int:
        return len(self.mae)

    def aggregates(self) -> dict[str, dict[str, float]]:
        out = {}
        for h in REPORT_HORIZONS:
            if h <= self.horizon:
                out[f"horizon_{h}"] = {"mae": float(self.mae[h - 1]),
                                       "rmse": float(self.rmse[h - 1]),
                                       "mape": _finite_or_none(self.mape[h - 1])}
        out["average"] = {"mae": float(self.mae.mean()), "rmse": float(self.rmse.mean()),
                          "mape": _finite_or_none(np.nanmean(self.mape)
                                                  if np.any(np.isfinite(self.mape)) else np.nan)}
        return out

    @property
    def average_mae(self) -> float:
        return float(self.mae.mean())

    def to_dict(self) -> dict:
        return {
            "per_horizon": [{"horizon": h + 1, "mae": float(self.mae[h]),
                             "rmse": float(self.rmse[h]), "mape": _finite_or_none(self.mape[h])}
                            for h in range(self.horizon)],
            "aggregates": self.aggregates(),
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["horizon", "mae", "rmse", "mape"])
            for h in range(self.horizon):
                w.writerow([h + 1, repr(float(self.mae[h])), repr(float(self.rmse[h])),
                            "" if not np.isfinite(self.mape[h]) else repr(float(self.mape[h]))])


def _finite_or_none(v) -> float | None:
    v = float(v)
    return v if math.isfinite(v) else None


def metrics(pred, target, mape_floor: float = 1.0) -> MetricsReport:
    """Per-horizon MAE, RMSE and MAPE; the horizon is the last axis.

    MAPE skips targets with ``|y| < mape_floor``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim < 1:
        raise InvalidInputError(f"prediction {pred.shape} and target {target.shape} differ")
    err = (pred - target).reshape(-1, pred.shape[-1])
    y = target.reshape(-1, pred.shape[-1])
    mae = np.abs(err).mean(axis=0)
    rmse = np.sqrt((err ** 2).mean(axis=0))
    mask = np.abs(y) >= mape_floor
    ratio = np.where(mask, np.abs(err) / np.where(mask, np.abs(y), 1.0), 0.0)
    counts = mask.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mape = np.where(counts > 0, 100.0 * ratio.sum(axis=0) / counts, np.nan)
    return MetricsReport(mae, rmse, mape)


# -- SNR-driven mode selection -------------------------------------------------

def mode_snr(clean: ModeSet, noisy: ModeSet) -> np.ndarray:
    """Mean over nodes of ``10 log10(P(clean u_k) / P(noisy u_k - clean u_k))`` in dB.

    Identical modes give ``+inf``.
    """
    if clean.modes.shape != noisy.modes.shape:
        raise InvalidInputError(f"mode sets differ in shape: {clean.modes.shape} vs "
                                f"{noisy.modes.shape}")
    signal = np.mean(clean.modes ** 2, axis=2)
    noise = np.mean((noisy.modes - clean.modes) ** 2, axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        db = 10.0 * np.log10(signal / noise)
    db = np.where(noise == 0, np.inf, db)
    db = np.where((noise > 0) & (signal == 0), -np.inf, db)
    with np.errstate(invalid="ignore"):
        return db.mean(axis=0)


def truncate_modes(z: ModeSet, snr_db, threshold: float, mode: str = "truncate") -> ModeSet:
    """Drop (``truncate``) or zero (``zero_fill``) modes whose SNR is below ``threshold``."""
    snr_db = np.asarray(snr_db, dtype=np.float64)
    if snr_db.shape != (z.num_modes,):
        raise InvalidInputError(f"expected {z.num_modes} SNR values, got {snr_db.shape}")
    if math.isnan(threshold):
        raise ConfigError("threshold must not be NaN")
    if mode not in ("truncate", "zero_fill"):
        raise ConfigError(f"unknown truncation mode {mode!r}")
    keep = snr_db >= threshold
    if not keep.any():
        raise ConfigError(f"every mode is below {threshold} dB; the feature vector would be empty")
    if mode == "truncate":
        return z.take_modes(np.flatnonzero(keep))
    modes = z.modes.copy()
    modes[:, ~keep] = 0.0
    return ModeSet(modes, z.center_frequencies.copy(), z.iterations_used, z.converged, z.config)


# -- pipeline ------------------------------------------------------------------

class DecompositionCache:
    """Memoizes decompositions keyed by (noise level, noise seed, VMD config)."""

    def __init__(self):
        self._store: dict = {}
        self.misses = 0

    def get(self, x_norm: np.ndarray, sigma: float, mean: float, seed: int,
            vmd: VmdConfig, threads: int | None = 1) -> ModeSet:
        key = (float(sigma), float(mean), int(seed), vmd, x_norm.shape, x_norm.tobytes())
        if key not in self._store:
            self.misses += 1
            noisy = inject_noise(x_norm, sigma, mean, seed)
            self._store[key] = decompose(noisy, vmd, threads=threads)
        return self._store[key]


def build_model(graph: Graph, cfg: ExperimentConfig, in_channels: int) -> ForecastModel:
    polys = cheb_polynomials(scaled_laplacian(graph), cfg.order)
    return ForecastModel.init(cfg.model_config(graph.num_nodes, in_channels), polys, seed=cfg.seed)


def feature_splits(modes: ModeSet | np.ndarray, target_norm: np.ndarray,
                   cfg: ExperimentConfig) -> tuple[WindowedSplit, WindowedSplit, WindowedSplit]:
    """Window ``[N, K, T]`` mode features against clean ``[N, T]`` targets."""
    feats = modes.modes if isinstance(modes, ModeSet) else np.asarray(modes, dtype=np.float64)
    t = target_norm.shape[1]
    if feats.shape[0] != target_norm.shape[0] or feats.shape[2] != t:
        raise InvalidInputError(f"features {feats.shape} do not align with targets "
                                f"{target_norm.shape}")
    if t < cfg.window + cfg.horizon:
        raise InvalidInputError(f"series of length {t} is shorter than window + horizon")
    train_end, val_end = split_bounds(t, cfg.split)
    out = []
    for begin, end in ((0, train_end), (train_end, val_end), (val_end, t)):
        starts = _segment_starts(begin, end, cfg.window, cfg.horizon)
        ws = _gather(feats, target_norm, starts, cfg.window, cfg.horizon)
        out.append(WindowedSplit(ws.inputs, ws.targets))
    return tuple(out)


def evaluate(model: ForecastModel, split: WindowedSplit, normalizer: Normalizer,
             mape_floor: float = 1.0) -> MetricsReport:
    """Metrics in original units (predictions and targets de-normalized)."""
    pred = predict(model, split.inputs)
    return metrics(normalizer.inverse(pred), normalizer.inverse(split.targets), mape_floor)


@dataclass
class Pipeline:
    """A trained model with everything needed to evaluate it on new noise levels."""
    model: ForecastModel
    normalizer: Normalizer
    config: ExperimentConfig
    report: TrainingReport
    modes: ModeSet
    test_metrics: MetricsReport
    channels: np.ndarray | None = None  # retained mode indices after SNR selection
    fill: str = "truncate"


def select_modes(modes: ModeSet, channels, fill: str = "truncate") -> ModeSet:
    """Keep ``channels`` (truncate) or zero the others (zero_fill); ``None`` keeps all."""
    if channels is None:
        return modes
    keep = np.zeros(modes.num_modes, dtype=bool)
    keep[np.asarray(channels, dtype=np.int64)] = True
    if fill == "truncate":
        return modes.take_modes(np.flatnonzero(keep))
    z = modes.modes.copy()
    z[:, ~keep] = 0.0
    return ModeSet(z, modes.center_frequencies, modes.iterations_used, modes.converged,
                   modes.config)


def ensemble_train(x, graph: Graph, config: ExperimentConfig,
                   model: ForecastModel | None = None, *, threads: int | None = 1,
                   cache: DecompositionCache | None = None, channels=None,
                   fill: str = "truncate") -> Pipeline:
    """Train on ``l`` independently re-noised decompositions, cycling per epoch.

    Decomposition ``t`` (1-based) uses noise seed ``seed + t - 1``; validation
    and test always use decomposition 1.
    """
    x = np.asarray(x, dtype=np.float64)
    cache = cache or DecompositionCache()
    normalizer = Normalizer.fit(x, config.split)
    x_norm = normalizer.transform(x)
    decomps = [
        select_modes(cache.get(x_norm, config.sigma_hat, config.noise_mean, config.seed + t,
                          config.vmd, threads), channels, fill)
        for t in range(config.ensemble_count)
    ]
    split_sets = [feature_splits(d, x_norm, config) for d in decomps]
    if model is None:
        model = build_model(graph, config, decomps[0].num_modes)
    report = train(model, [s[0] for s in split_sets], split_sets[0][1], config.train_options())
    test = evaluate(model, split_sets[0][2], normalizer, config.mape_floor)
    return Pipeline(model, normalizer, config, report, decomps[0], test,
                    None if channels is None else np.asarray(channels), fill)


def train_pipeline(x, graph: Graph, config: ExperimentConfig, *, threads: int | None = 1,
                   cache: DecompositionCache | None = None, channels=None,
                   fill: str = "truncate") -> Pipeline:
    """Single-decomposition training: the ensemble path with ``l = 1``."""
    return ensemble_train(x, graph, replace(config, ensemble_count=1), threads=threads,
                          cache=cache, channels=channels, fill=fill)


def noise_sweep(pipeline: Pipeline, x, sigmas: Iterable[float] = DEFAULT_SWEEP, *,
                seed: int | None = None, threads: int | None = 1,
                cache: DecompositionCache | None = None) -> list[tuple[float, MetricsReport]]:
    """Evaluate a frozen model on test features re-decomposed at each noise level.

    ``seed`` defaults to the training noise seed, so the trained noise level
    reproduces the pipeline's own test metrics.
    """
    cfg = pipeline.config
    seed = cfg.seed if seed is None else seed
    cache = cache or DecompositionCache()
    x_norm = pipeline.normalizer.transform(np.asarray(x, dtype=np.float64))
    results = []
    for sigma in sorted(float(s) for s in sigmas):
        if sigma < 0:
            raise ConfigError(f"noise levels must be >= 0, got {sigma}")
        modes = select_modes(cache.get(x_norm, sigma, cfg.noise_mean, seed, cfg.vmd, threads),
                        pipeline.channels, pipeline.fill)
        _, _, test = feature_splits(modes, x_norm, cfg)
        results.append((sigma, evaluate(pipeline.model, test, pipeline.normalizer,
                                        cfg.mape_floor)))
    return results


CASE_I_GRID = ((1000.0, 1e-7), (1000.0, 1e-6), (2000.0, 1e-7), (2000.0, 1e-6))


def run_ablation(x, graph: Graph, config: ExperimentConfig, cases: Sequence[str] = ("I", "II", "III", "IV"),
                 *, threads: int | None = 1, ensemble_count: int | None = None) -> list[dict]:
    """Case matrix: I = VMD (alpha, eps) grid; II = SNR truncation; III = zero
    replacement; IV = multiple-ensemble training.  Each case decomposes afresh."""
    x = np.asarray(x, dtype=np.float64)
    normalizer = Normalizer.fit(x, config.split)
    x_norm = normalizer.transform(x)
    rows = []

    def row(case, variant, cfg, pipe, extra=None):
        agg = pipe.test_metrics.aggregates()["average"]
        noisy = inject_noise(x_norm, cfg.sigma_hat, cfg.noise_mean, cfg.seed)
        rows.append({
            "case": case, "variant": variant, "alpha": cfg.vmd.alpha, "eps": cfg.vmd.tolerance,
            "modes": cfg.vmd.num_modes,
            "modes_used": int(pipe.model.config.in_channels),
            "ensemble": cfg.ensemble_count,
            "reconstruction_error": reconstruction_error(noisy, pipe.modes),
            "mae": agg["mae"], "rmse": agg["rmse"], "mape": agg["mape"],
            "best_epoch": pipe.report.best_epoch, **(extra or {}),
        })

    for case in cases:
        if case == "I":
            for alpha, eps in CASE_I_GRID:
                cfg = replace(config, vmd=replace(config.vmd, alpha=alpha, tolerance=eps))
                row("I", f"alpha={alpha:g},eps={eps:g}", cfg,
                    train_pipeline(x, graph, cfg, threads=threads))
        elif case in ("II", "III"):
            cache = DecompositionCache()
            clean = cache.get(x_norm, 0.0, 0.0, config.seed, config.vmd, threads)
            noisy = cache.get(x_norm, config.sigma_hat, config.noise_mean, config.seed,
                              config.vmd, threads)
            snr = mode_snr(clean, noisy)
            keep = np.flatnonzero(snr >= config.truncation_snr_db)
            if keep.size == 0:
                raise ConfigError(f"every mode is below {config.truncation_snr_db} dB")
            fill = "truncate" if case == "II" else "zero_fill"
            pipe = train_pipeline(x, graph, config, threads=threads, cache=cache,
                                  channels=keep, fill=fill)
            row(case, fill, config, pipe,
                {"removed_modes": int(config.vmd.num_modes - keep.size)})
        elif case == "IV":
            cfg = replace(config, ensemble_count=ensemble_count or max(config.ensemble_count, 3))
            row("IV", f"l={cfg.ensemble_count}", cfg, ensemble_train(x, graph, cfg, threads=threads))
        else:
            raise ConfigError(f"unknown ablation case {case!r}; expected I, II, III or IV")
    return rows


def write_rows_csv(rows: Sequence[dict], path) -> None:
    """Write dict rows with the union of their keys as columns (first-seen order)."""
    columns: list[str] = []
    for r in rows:
        columns.extend(k for k in r if k not in columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else
                        (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns])
