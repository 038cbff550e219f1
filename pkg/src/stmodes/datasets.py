"""Datasets: synthetic traffic-like graph signals and CSV ingestion/export."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidInputError
from .graph import Graph, read_adjacency_csv, write_adjacency_csv

__all__ = ["Dataset", "SyntheticSpec", "generate_synthetic", "ingest_csv", "export_csv",
           "random_geometric_graph"]


@dataclass
class Dataset:
    name: str
    signals: np.ndarray          # [N, T]
    sample_period: float         # seconds per sample
    graph: Graph
    provenance: dict = field(default_factory=dict)
    components: np.ndarray | None = None  # [N, C, T] clean ground truth, synthetic only

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.float64)
        if self.signals.ndim != 2:
            raise InvalidInputError(f"signals must be [N, T], got {self.signals.shape}")
        if not np.all(np.isfinite(self.signals)):
            raise InvalidInputError("signals contain non-finite values")
        if self.signals.shape[0] != self.graph.num_nodes:
            raise InvalidInputError(
                f"{self.signals.shape[0]} signal nodes but graph has {self.graph.num_nodes}")

    @property
    def num_nodes(self) -> int:
        return self.signals.shape[0]

    @property
    def length(self) -> int:
        return self.signals.shape[1]


@dataclass(frozen=True)
class SyntheticSpec:
    """Sum of sinusoids per node, coupled across a random geometric graph.

    Frequencies are in cycles per sample; the defaults are the daily cycle
    and its 4th and 12th harmonics at 15-minute sampling.
    """
    num_nodes: int = 16
    length: int = 2016
    daily_period: int = 96
    frequencies: tuple[float, ...] = (1 / 96, 4 / 96, 12 / 96)
    amplitudes: tuple[float, ...] = (40.0, 20.0, 10.0)
    amplitude_jitter: float = 0.2
    base_level: float = 100.0
    coupling: float = 0.3
    radius: float = 0.4
    noise_std: float = 0.3
    sample_period: float = 900.0
    seed: int = 42

    def __post_init__(self):
        if self.num_nodes < 1 or self.length < 2:
            raise ConfigError("need at least one node and two samples")
        if len(self.frequencies) == 0 or len(self.frequencies) != len(self.amplitudes):
            raise ConfigError("frequencies and amplitudes must be non-empty and the same length")
        if any(not 0 < f < 0.5 for f in self.frequencies):
            raise ConfigError(f"frequencies must lie in (0, 0.5), got {self.frequencies}")
        if any(not a > 0 for a in self.amplitudes):
            raise ConfigError(f"amplitudes must be positive, got {self.amplitudes}")
        if not 0 <= self.amplitude_jitter < 1:
            raise ConfigError("amplitude_jitter must be in [0, 1)")
        if self.coupling < 0 or self.noise_std < 0 or self.radius <= 0:
            raise ConfigError("coupling and noise_std must be >= 0, radius > 0")
        if self.sample_period <= 0 or self.daily_period < 1:
            raise ConfigError("sample_period and daily_period must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frequencies"] = list(self.frequencies)
        d["amplitudes"] = list(self.amplitudes)
        return d


def random_geometric_graph(num_nodes: int, radius: float, rng: np.random.Generator) -> Graph:
    """Gaussian-kernel weights between points closer than ``radius`` in the unit
    square; a node with no neighbor in range is joined to its nearest one."""
    pos = rng.uniform(0.0, 1.0, size=(num_nodes, 2))
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    weights = np.exp(-(dist / radius) ** 2)
    adj = np.where(dist < radius, weights, 0.0)
    np.fill_diagonal(adj, 0.0)
    if num_nodes > 1:
        for i in np.flatnonzero(adj.sum(axis=1) == 0):
            d = dist[i].copy()
            d[i] = np.inf
            j = int(np.argmin(d))
            adj[i, j] = adj[j, i] = weights[i, j]
    return Graph(adj)


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    n, t = spec.num_nodes, spec.length
    graph = random_geometric_graph(n, spec.radius, rng)
    freqs = np.asarray(spec.frequencies)
    amps = np.asarray(spec.amplitudes)[None, :] * rng.uniform(
        1 - spec.amplitude_jitter, 1 + spec.amplitude_jitter, size=(n, len(freqs)))
    phases = rng.uniform(0, 2 * math.pi, size=(n, len(freqs)))
    time = np.arange(t)
    own = amps[:, :, None] * np.sin(2 * math.pi * freqs[None, :, None] * time + phases[:, :, None])
    adj = graph.adjacency
    deg = adj.sum(axis=1, keepdims=True)
    neighbor_mean = np.divide(adj, deg, out=np.zeros_like(adj), where=deg > 0)
    # neighbors' same-frequency terms keep each component a single sinusoid
    components = own + spec.coupling * np.einsum("ij,jct->ict", neighbor_mean, own)
    noise = spec.noise_std * rng.standard_normal((n, t))
    signals = spec.base_level + components.sum(axis=1) + noise
    return Dataset(
        name=f"synthetic-{n}x{t}-seed{spec.seed}",
        signals=signals,
        sample_period=spec.sample_period,
        graph=graph,
        provenance={"generator": "synthetic", "spec": spec.to_dict()},
        components=components,
    )


def _read_rows(path) -> list[list[str]]:
    text = Path(path).read_text()
    return [r for r in csv.reader(io.StringIO(text)) if r]


def ingest_csv(signals_path, adjacency_path, sample_period: float = 900.0,
               name: str | None = None) -> Dataset:
    """Signals CSV: header of node ids, then one row per time step."""
    rows = _read_rows(signals_path)
    if len(rows) < 2:
        raise InvalidInputError(f"{signals_path}: need a header and at least one data row")
    header = [c.strip() for c in rows[0]]
    width = len(header)
    values = np.empty((len(rows) - 1, width))
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != width:
            raise InvalidInputError(
                f"{signals_path}: row {r} has {len(row)} cells, header has {width}")
        for c, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise InvalidInputError(
                    f"{signals_path}: unparseable value {cell!r} at row {r}, column {c} "
                    f"({header[c]})") from None
            if not math.isfinite(v):
                raise InvalidInputError(
                    f"{signals_path}: non-finite value at row {r}, column {c} ({header[c]})")
            values[r - 1, c] = v
    graph = read_adjacency_csv(adjacency_path, num_nodes=width)
    return Dataset(
        name=name or Path(signals_path).stem,
        signals=values.T.copy(),
        sample_period=sample_period,
        graph=graph,
        provenance={"signals": str(signals_path), "adjacency": str(adjacency_path),
                    "node_ids": header},
    )


def export_csv(dataset: Dataset, signals_path, adjacency_path) -> None:
    ids = dataset.provenance.get("node_ids") or [str(i) for i in range(dataset.num_nodes)]
    with open(signals_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ids)
        for row in dataset.signals.T:
            w.writerow([repr(float(v)) for v in row])
    write_adjacency_csv(dataset.graph, adjacency_path)
