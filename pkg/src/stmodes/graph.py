"""Graphs, normalized Laplacians and attention-masked Chebyshev filtering."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidGraphError, InvalidInputError, NumericError
from .numerics import ops
from .numerics.tensor import Tensor

__all__ = [
    "Graph",
    "ScaledLaplacian",
    "normalized_laplacian",
    "estimate_lambda_max",
    "scaled_laplacian",
    "cheb_polynomials",
    "cheb_graph_conv",
    "read_adjacency_csv",
    "write_adjacency_csv",
]


@dataclass(frozen=True)
class Graph:
    adjacency: np.ndarray
    directed: bool = False

    def __post_init__(self):
        a = np.array(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InvalidGraphError(f"adjacency must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidGraphError("adjacency contains non-finite weights")
        if np.any(a < 0):
            raise InvalidGraphError("adjacency weights must be non-negative")
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def symmetrized(self) -> "Graph":
        """Undirected version with ``A <- max(A, A^T)``."""
        return Graph(np.maximum(self.adjacency, self.adjacency.T), directed=False)


@dataclass(frozen=True)
class ScaledLaplacian:
    matrix: np.ndarray
    lambda_max: float


def normalized_laplacian(g: Graph) -> np.ndarray:
    """``I - D^{-1/2} A D^{-1/2}``; a directed graph is symmetrized first."""
    if g.directed:
        g = g.symmetrized()
    deg = g.degrees()
    isolated = np.flatnonzero(deg <= 0)
    if isolated.size:
        raise InvalidGraphError(f"node {int(isolated[0])} has zero degree")
    d = 1.0 / np.sqrt(deg)
    return np.eye(g.num_nodes) - d[:, None] * g.adjacency * d[None, :]


def estimate_lambda_max(laplacian: np.ndarray, tol: float = 1e-6,
                        max_iterations: int = 10_000, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    The Rayleigh quotient of a unit vector never exceeds the true maximum, so
    the iteration stops once successive quotients agree to ``tol`` relative.
    """
    m = np.asarray(laplacian, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("matrix has non-finite entries")
    n = m.shape[0]
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    estimate = float(v @ m @ v)
    for _ in range(max_iterations):
        w = m @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new = float(v @ m @ v)
        # quotient steps shrink geometrically; a step 1000x below tol bounds the remaining gap
        if abs(new - estimate) <= 1e-3 * tol * max(abs(new), 1e-300):
            return new
        estimate = new
    raise NumericError(f"power iteration did not converge in {max_iterations} iterations")


def scaled_laplacian(g: Graph, lambda_max: float | None = None) -> ScaledLaplacian:
    lap = normalized_laplacian(g)
    lam = estimate_lambda_max(lap) if lambda_max is None else float(lambda_max)
    if not lam > 0:
        raise InvalidGraphError("largest Laplacian eigenvalue must be positive")
    return ScaledLaplacian((2.0 / lam) * lap - np.eye(g.num_nodes), lam)


def cheb_polynomials(l_hat: ScaledLaplacian | np.ndarray, order: int) -> list[np.ndarray]:
    """``[T_0, ..., T_{order-1}]`` of the scaled Laplacian by the three-term recursion."""
    m = l_hat.matrix if isinstance(l_hat, ScaledLaplacian) else np.asarray(l_hat, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {m.shape}")
    if order < 1:
        raise InvalidInputError(f"order must be >= 1, got {order}")
    polys = [np.eye(m.shape[0])]
    if order > 1:
        polys.append(m.copy())
    for _ in range(2, order):
        polys.append(2.0 * m @ polys[-1] - polys[-2])
    return polys


def cheb_graph_conv(z: Tensor, s_att: Tensor, theta: Tensor,
                    polys: Sequence[np.ndarray] | np.ndarray) -> Tensor:
    """Chebyshev graph convolution masked by spatial attention.

    ``out[b, i, o, t] = sum_m sum_j (T_m * S'_b)[i, j] sum_c z[b, j, c, t] theta[m, c, o]``

    z: ``[B, N, d_in, T]``; s_att: ``[B, N, N]`` (or ``[N, N]``);
    theta: ``[M, d_in, d_out]``; polys: M matrices ``[N, N]``.
    """
    z, s_att, theta = (x if isinstance(x, Tensor) else Tensor(x) for x in (z, s_att, theta))
    stack = np.asarray(polys, dtype=np.float64)
    if z.ndim != 4:
        raise InvalidInputError(f"z must be [B, N, d, T], got {z.shape}")
    b, n, d_in, _ = z.shape
    if stack.ndim != 3 or stack.shape[1:] != (n, n):
        raise InvalidInputError(f"polynomials must be [M, {n}, {n}], got {stack.shape}")
    if theta.ndim != 3 or theta.shape[0] != stack.shape[0] or theta.shape[1] != d_in:
        raise InvalidInputError(
            f"theta must be [{stack.shape[0]}, {d_in}, d_out], got {theta.shape}")
    if s_att.ndim == 2:
        s_att = ops.reshape(s_att, (1, n, n))
    if s_att.ndim != 3 or s_att.shape[1:] != (n, n) or s_att.shape[0] not in (1, b):
        raise InvalidInputError(f"spatial attention must be [B, {n}, {n}], got {s_att.shape}")
    if s_att.shape[0] != b:
        s_att = ops.mul(s_att, np.ones((b, 1, 1)))
    m, d_out, t = stack.shape[0], theta.shape[2], z.shape[3]
    masked = ops.mul(Tensor(stack[None]), ops.reshape(s_att, (b, 1, n, n)))  # [B, M, N, N]
    propagated = ops.matmul(masked, ops.reshape(z, (b, 1, n, d_in * t)))  # [B, M, N, d_in*T]
    propagated = ops.reshape(propagated, (b, m, n, d_in, t))
    stacked = ops.reshape(ops.transpose(propagated, (0, 2, 4, 1, 3)), (b, n, t, m * d_in))
    out = ops.matmul(stacked, ops.reshape(theta, (m * d_in, d_out)))  # [B, N, T, d_out]
    return ops.transpose(out, (0, 1, 3, 2))


def _parse_csv(text: str) -> list[list[str]]:
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if not rows:
        raise InvalidInputError("adjacency file is empty")
    return rows


def read_adjacency_csv(path, num_nodes: int | None = None, directed: bool = True) -> Graph:
    """Load a graph from an edge list (``src,dst,weight`` header) or a dense matrix.

    The format is chosen from the header row: a header naming ``src`` and
    ``dst`` columns selects the edge list; anything else is read as a dense
    matrix, with an optional non-numeric header row.
    """
    rows = _parse_csv(Path(path).read_text())
    header = [c.strip().lower() for c in rows[0]]
    if "src" in header and "dst" in header:
        i_src, i_dst = header.index("src"), header.index("dst")
        i_w = header.index("weight") if "weight" in header else None
        edges = []
        for line_no, row in enumerate(rows[1:], start=2):
            try:
                src, dst = int(row[i_src]), int(row[i_dst])
                w = float(row[i_w]) if i_w is not None else 1.0
            except (ValueError, IndexError) as exc:
                raise InvalidInputError(f"{path}: bad edge on line {line_no}: {row}") from exc
            edges.append((src, dst, w))
        n = num_nodes if num_nodes is not None else 1 + max(max(s, d) for s, d, _ in edges)
        a = np.zeros((n, n))
        for src, dst, w in edges:
            if not (0 <= src < n and 0 <= dst < n):
                raise InvalidInputError(f"{path}: edge ({src}, {dst}) outside {n} nodes")
            a[src, dst] = w
        return Graph(a, directed=directed)

    body = rows
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        body = rows[1:]
    width = len(body[0])
    for line_no, row in enumerate(body, start=1):
        if len(row) != width:
            raise InvalidInputError(f"{path}: ragged adjacency row {line_no}")
    a = np.array([[float(c) for c in row] for row in body])
    if a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"{path}: dense adjacency is {a.shape}, not square")
    if num_nodes is not None and a.shape[0] != num_nodes:
        raise InvalidInputError(f"{path}: adjacency has {a.shape[0]} nodes, expected {num_nodes}")
    return Graph(a, directed=directed)


def write_adjacency_csv(g: Graph, path) -> None:
    """Write the graph as a ``src,dst,weight`` edge list (non-zero weights only)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "weight"])
        for i, j in zip(*np.nonzero(g.adjacency)):
            w.writerow([int(i), int(j), repr(float(g.adjacency[i, j]))])
