"""Variational mode decomposition of node time series.

Each node's signal is mirror-extended, transformed once, and split into K
band-limited modes by alternating Wiener-filter mode updates, spectral
centroid updates of the center frequencies and (optionally) dual ascent on
the reconstruction constraint.  All updates act on the non-negative half of
the mirrored spectrum; the negative half follows by Hermitian symmetry.
"""
from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidInputError
from .numerics.fft import cfft, icfft

__all__ = [
    "VmdConfig",
    "ModeSet",
    "mirror_extend",
    "half_spectrum_frequencies",
    "update_mode",
    "update_center_frequency",
    "decompose",
    "reconstruction_error",
    "save_modeset",
    "load_modeset",
]

MODESET_MAGIC = b"VMD1"
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class VmdConfig:
    num_modes: int = 3
    alpha: float = 2000.0
    tolerance: float = 1e-7
    tau: float = 0.0
    max_iterations: int = 500
    dc_mode: bool = False

    def __post_init__(self):
        if int(self.num_modes) < 1:
            raise ConfigError(f"num_modes must be >= 1, got {self.num_modes}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if not self.tolerance > 0:
            raise ConfigError(f"tolerance must be positive, got {self.tolerance}")
        if not self.tau >= 0:
            raise ConfigError(f"tau must be non-negative, got {self.tau}")
        if int(self.max_iterations) < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")

    def initial_frequencies(self) -> np.ndarray:
        # evenly spaced from 0, as the reference VMD tool's uniform start
        omega = 0.5 * np.arange(self.num_modes) / self.num_modes
        if self.dc_mode:
            omega[0] = 0.0
        return omega


@dataclass
class ModeSet:
    """Decomposition of N signals into K modes of length T.

    ``modes`` is ``[N, K, T]``; ``center_frequencies`` is ``[N, K]`` in
    cycles/sample, ascending along K.
    """

    modes: np.ndarray
    center_frequencies: np.ndarray
    iterations_used: np.ndarray
    converged: np.ndarray
    config: VmdConfig | None = field(default=None, compare=False)

    def __post_init__(self):
        self.modes = np.asarray(self.modes, dtype=np.float64)
        self.center_frequencies = np.asarray(self.center_frequencies, dtype=np.float64)
        self.iterations_used = np.asarray(self.iterations_used, dtype=np.int64)
        self.converged = np.asarray(self.converged, dtype=bool)
        if self.modes.ndim != 3:
            raise InvalidInputError(f"modes must be [N, K, T], got shape {self.modes.shape}")
        n, k, _ = self.modes.shape
        if self.center_frequencies.shape != (n, k):
            raise InvalidInputError(
                f"center_frequencies shape {self.center_frequencies.shape} != {(n, k)}")
        if self.iterations_used.shape != (n,) or self.converged.shape != (n,):
            raise InvalidInputError("iterations_used / converged must have one entry per node")

    @property
    def num_nodes(self) -> int:
        return self.modes.shape[0]

    @property
    def num_modes(self) -> int:
        return self.modes.shape[1]

    @property
    def length(self) -> int:
        return self.modes.shape[2]

    def reconstruct(self) -> np.ndarray:
        """Sum of modes, ``[N, T]``."""
        return self.modes.sum(axis=1)

    def features(self) -> np.ndarray:
        """Modes as a node x time x mode array (``Z`` in ``[N, T, K]`` layout)."""
        return np.transpose(self.modes, (0, 2, 1)).copy()

    def take_nodes(self, index) -> "ModeSet":
        index = np.asarray(index)
        return ModeSet(self.modes[index], self.center_frequencies[index],
                       self.iterations_used[index], self.converged[index], self.config)

    def take_modes(self, channels) -> "ModeSet":
        channels = np.asarray(channels, dtype=np.int64)
        return ModeSet(np.ascontiguousarray(self.modes[:, channels]),
                       self.center_frequencies[:, channels],
                       self.iterations_used, self.converged, self.config)


def mirror_extend(signal) -> np.ndarray:
    """Reflect the first half before and the second half after the signal.

    The output has length 2T and its samples ``[T//2, T//2 + T)`` are the input.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim < 1 or x.shape[-1] < 2:
        raise InvalidInputError(f"mirror_extend needs length >= 2, got shape {x.shape}")
    half = x.shape[-1] // 2
    return np.concatenate([x[..., :half][..., ::-1], x, x[..., half:][..., ::-1]], axis=-1)


def half_spectrum_frequencies(mirrored_length: int) -> np.ndarray:
    """Frequencies (cycles/sample) of the non-negative bins of a mirrored signal."""
    return np.arange(mirrored_length // 2) / mirrored_length


def update_mode(u_hat: np.ndarray, f_hat: np.ndarray, lambda_hat: np.ndarray, k: int,
                omega_k, alpha: float, freqs: np.ndarray) -> np.ndarray:
    """Wiener-filter update of mode ``k``.

    ``u_hat`` is ``[..., K, H]`` holding the already-updated modes below ``k``
    and the previous iterate above it.  Returns the new ``[..., H]`` spectrum.
    """
    u_hat = np.asarray(u_hat)
    f_hat = np.asarray(f_hat)
    lambda_hat = np.asarray(lambda_hat)
    h = u_hat.shape[-1]
    if f_hat.shape[-1] != h or lambda_hat.shape[-1] != h or np.shape(freqs)[-1] != h:
        raise InvalidInputError(
            f"spectrum lengths disagree: modes {h}, signal {f_hat.shape[-1]}, "
            f"multiplier {lambda_hat.shape[-1]}, frequencies {np.shape(freqs)[-1]}")
    if not 0 <= k < u_hat.shape[-2]:
        raise InvalidInputError(f"mode index {k} out of range for {u_hat.shape[-2]} modes")
    others = np.concatenate([u_hat[..., :k, :], u_hat[..., k + 1:, :]], axis=-2).sum(axis=-2)
    omega_k = np.asarray(omega_k, dtype=np.float64)[..., None]
    return (f_hat - others + lambda_hat / 2.0) / (1.0 + 2.0 * alpha * (freqs - omega_k) ** 2)


def update_center_frequency(u_hat_k: np.ndarray, freqs: np.ndarray, previous=0.0):
    """Power-weighted spectral centroid of a half-spectrum.

    Returns ``(omega, stagnated)``; where the spectrum carries no energy the
    previous frequency is kept and ``stagnated`` is True.
    """
    power = np.abs(np.asarray(u_hat_k)) ** 2
    total = power.sum(axis=-1)
    weighted = (power * freqs).sum(axis=-1)
    previous = np.broadcast_to(np.asarray(previous, dtype=np.float64), total.shape)
    stagnated = total <= 0.0
    safe = np.where(stagnated, 1.0, total)
    omega = np.where(stagnated, previous, weighted / safe)
    omega = np.clip(omega, 0.0, 0.5)
    if omega.ndim == 0:
        return float(omega), bool(stagnated)
    return omega, stagnated


@dataclass
class _BlockResult:
    modes: np.ndarray
    omega: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    residual_history: list | None = None
    objective_history: list | None = None


def _decompose_block(signals: np.ndarray, cfg: VmdConfig, record: bool = False) -> _BlockResult:
    rows, t = signals.shape
    kk = cfg.num_modes
    mirrored = mirror_extend(signals)
    length = mirrored.shape[-1]
    h = length // 2
    freqs = half_spectrum_frequencies(length)
    f_hat = cfft(mirrored)[:, :h]

    u = np.zeros((rows, kk, h), dtype=complex)
    omega = np.tile(cfg.initial_frequencies(), (rows, 1))
    lam = np.zeros((rows, h), dtype=complex)
    iterations = np.zeros(rows, dtype=np.int64)
    converged = np.zeros(rows, dtype=bool)
    active = np.arange(rows)
    residuals: list[np.ndarray] = []
    objectives: list[np.ndarray] = []

    for _ in range(cfg.max_iterations):
        if active.size == 0:
            break
        fa, la = f_hat[active], lam[active]
        old = u[active]
        new = old.copy()
        om = omega[active]
        for k in range(kk):
            new[:, k] = update_mode(new, fa, la, k, om[:, k], cfg.alpha, freqs)
            if not (cfg.dc_mode and k == 0):
                om[:, k], _ = update_center_frequency(new[:, k], freqs, om[:, k])
        if cfg.tau > 0:
            lam[active] = la + cfg.tau * (fa - new.sum(axis=1))
        u[active] = new
        omega[active] = om
        iterations[active] += 1

        delta = np.sum(np.abs(new - old) ** 2, axis=-1)
        base = np.sum(np.abs(old) ** 2, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(delta == 0.0, 0.0, delta / base)
        change = ratio.sum(axis=-1)
        if record:
            res = np.full(rows, np.nan)
            obj = np.full(rows, np.nan)
            resid = np.sum(np.abs(fa - new.sum(axis=1)) ** 2, axis=-1)
            spread = np.sum(2.0 * cfg.alpha * (freqs - om[..., None]) ** 2 * np.abs(new) ** 2,
                            axis=(-2, -1))
            res[active] = resid
            obj[active] = resid + spread
            residuals.append(res)
            objectives.append(obj)
        done = change < cfg.tolerance
        converged[active[done]] = True
        active = active[~done]

    # Hermitian completion of the half spectra, Nyquist bin left empty
    full = np.zeros((rows, kk, length), dtype=complex)
    full[..., :h] = u
    full[..., 0] = u[..., 0].real
    full[..., length - h + 1:] = np.conj(u[..., 1:][..., ::-1])
    time_modes = icfft(full).real
    start = t // 2
    time_modes = time_modes[..., start:start + t]

    order = np.argsort(omega, axis=1, kind="stable")
    time_modes = np.take_along_axis(time_modes, order[..., None], axis=1)
    omega = np.take_along_axis(omega, order, axis=1)
    return _BlockResult(time_modes, omega, iterations, converged,
                        residuals if record else None, objectives if record else None)


def _resolve_threads(threads: int | None) -> int:
    if threads is None:
        env = os.environ.get("STMODES_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def decompose(signals, config: VmdConfig | None = None, threads: int | None = 1) -> ModeSet:
    """Decompose each row of ``signals`` ([N, T]) into ``config.num_modes`` modes.

    Nodes are independent; with ``threads > 1`` contiguous node slices are
    processed concurrently and merged in node order, giving results identical
    to the serial run.
    """
    cfg = config or VmdConfig()
    x = np.asarray(signals, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise InvalidInputError(f"signals must be [N, T], got shape {x.shape}")
    if x.shape[1] < 4:
        raise InvalidInputError(f"signals need at least 4 samples, got {x.shape[1]}")
    bad = ~np.all(np.isfinite(x), axis=1)
    if bad.any():
        raise InvalidInputError(f"non-finite samples in node {int(np.flatnonzero(bad)[0])}")

    n = x.shape[0]
    workers = min(_resolve_threads(threads), n)
    if workers <= 1:
        parts = [_decompose_block(x, cfg)]
    else:
        slices = np.array_split(np.arange(n), workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda idx: _decompose_block(x[idx], cfg), slices))
    return ModeSet(
        modes=np.concatenate([p.modes for p in parts]),
        center_frequencies=np.concatenate([p.omega for p in parts]),
        iterations_used=np.concatenate([p.iterations for p in parts]),
        converged=np.concatenate([p.converged for p in parts]),
        config=cfg,
    )


def decompose_with_history(signals, config: VmdConfig | None = None):
    """Serial decomposition that also returns per-iteration diagnostics.

    Returns ``(modeset, residual_energy, objective)`` where the two histories are
    ``[iterations, N]`` arrays measured on the mirrored half-spectrum (NaN once a
    node has converged).
    """
    cfg = config or VmdConfig()
    x = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    res = _decompose_block(x, cfg, record=True)
    ms = ModeSet(res.modes, res.omega, res.iterations, res.converged, cfg)
    return ms, np.array(res.residual_history), np.array(res.objective_history)


def reconstruction_error(signals, modes: ModeSet | np.ndarray) -> float:
    """Mean squared difference between the signals and the sum of their modes."""
    y = np.asarray(signals, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    m = modes.modes if isinstance(modes, ModeSet) else np.asarray(modes, dtype=np.float64)
    if m.ndim != 3 or m.shape[0] != y.shape[0] or m.shape[2] != y.shape[1]:
        raise InvalidInputError(f"signals {y.shape} and modes {m.shape} do not agree")
    return float(np.mean((y - m.sum(axis=1)) ** 2))


def save_modeset(modes: ModeSet, path) -> tuple[Path, Path]:
    """Write ``path`` (header + float64 payload) and a ``.json`` sidecar."""
    path = Path(path)
    n, k, t = modes.modes.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MODESET_MAGIC, n, k, t))
        fh.write(np.ascontiguousarray(modes.modes, dtype="<f8").tobytes())
    sidecar = path.with_name(path.name + ".json")
    meta = {
        "format": "stmodes-modeset",
        "version": 1,
        "num_nodes": n,
        "num_modes": k,
        "length": t,
        "center_frequencies": modes.center_frequencies.tolist(),
        "iterations_used": modes.iterations_used.tolist(),
        "converged": modes.converged.tolist(),
        "config": asdict(modes.config) if modes.config is not None else None,
    }
    sidecar.write_text(json.dumps(meta, indent=2) + "\n")
    return path, sidecar


def load_modeset(path) -> ModeSet:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidInputError(f"{path}: truncated header")
    magic, n, k, t = _HEADER.unpack_from(raw)
    if magic != MODESET_MAGIC:
        raise InvalidInputError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 8 * n * k * t
    if len(raw) != expected:
        raise InvalidInputError(f"{path}: expected {expected} bytes, found {len(raw)}")
    modes = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(n, k, t).astype(np.float64)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    cfg = VmdConfig(**meta["config"]) if meta.get("config") else None
    return ModeSet(modes, np.array(meta["center_frequencies"], dtype=np.float64).reshape(n, k),
                   meta["iterations_used"], meta["converged"], cfg)
