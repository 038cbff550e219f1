"""ST blocks, the stacked forecaster, MAE training under Adam, and checkpoints.

One ST block maps ``[B, N, d_in, T_w]`` to ``[B, N, d_out, T_w]``:
3D attention, attention-masked Chebyshev graph convolution, a same-padded
time convolution, a 1x1 residual convolution of the block input, and ReLU.
A per-node linear head maps the last block's ``[F * T_w]`` features to the
``N_H`` forecast steps.
"""
from __future__ import annotations

import datetime as _dt
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attention import (AttentionOutput, AttentionParams, ChannelAttentionParams,
                        SpatialAttentionParams, TemporalAttentionParams, attention_3d)
from .errors import ConfigError, InvalidInputError, TrainingDivergedError
from .graph import cheb_graph_conv
from .numerics import ops
from .numerics.tensor import Tensor, backward, no_grad

__all__ = [
    "ModelConfig",
    "StBlockParams",
    "ForecastModel",
    "st_block_forward",
    "forward",
    "mae_loss",
    "Adam",
    "WindowedSplit",
    "TrainOptions",
    "TrainingReport",
    "train",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
]

TIME_KERNEL = 3


@dataclass(frozen=True)
class ModelConfig:
    num_nodes: int
    in_channels: int
    window: int = 12
    horizon: int = 12
    order: int = 3
    filters: int = 64
    blocks: int = 2
    time_kernel: int = TIME_KERNEL

    def __post_init__(self):
        for name in ("num_nodes", "in_channels", "window", "horizon", "order", "filters", "blocks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.time_kernel < 1 or self.time_kernel % 2 == 0:
            raise ConfigError(f"time_kernel must be a positive odd integer, got {self.time_kernel}")

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng, shape, fan_in) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class StBlockParams:
    spatial: SpatialAttentionParams
    temporal: TemporalAttentionParams
    channel: ChannelAttentionParams
    theta: Tensor             # [M, d_in, d_out]
    time_conv_kernel: Tensor  # [d_out, d_out, 1, k_t]
    residual_kernel: Tensor   # [d_in, d_out, 1, 1]

    @classmethod
    def init(cls, num_nodes: int, d_in: int, d_out: int, window: int, order: int,
             rng: np.random.Generator, time_kernel: int = TIME_KERNEL) -> "StBlockParams":
        att = AttentionParams.init(num_nodes, d_in, window, rng)
        return cls(
            att.spatial, att.temporal, att.channel,
            theta=_uniform(rng, (order, d_in, d_out), order * d_in),
            time_conv_kernel=_uniform(rng, (d_out, d_out, 1, time_kernel), d_out * time_kernel),
            residual_kernel=_uniform(rng, (d_in, d_out, 1, 1), d_in),
        )

    @property
    def attention(self) -> AttentionParams:
        return AttentionParams(self.spatial, self.temporal, self.channel)

    @property
    def d_in(self) -> int:
        return self.theta.shape[1]

    @property
    def d_out(self) -> int:
        return self.theta.shape[2]

    def parameters(self) -> dict[str, Tensor]:
        out = self.attention.parameters()
        out["theta"] = self.theta
        out["time_conv_kernel"] = self.time_conv_kernel
        out["residual_kernel"] = self.residual_kernel
        return out


@dataclass
class ForecastModel:
    config: ModelConfig
    blocks: list[StBlockParams]
    head_weight: Tensor  # [F * T_w, N_H]
    head_bias: Tensor    # [N_H]
    polys: np.ndarray    # [M, N, N] Chebyshev matrices of the scaled Laplacian

    @classmethod
    def init(cls, config: ModelConfig, polys, seed: int = 42) -> "ForecastModel":
        polys = np.asarray(polys, dtype=np.float64)
        n = config.num_nodes
        if polys.shape != (config.order, n, n):
            raise ConfigError(
                f"expected {config.order} Chebyshev matrices of size {n}, got {polys.shape}")
        rng = np.random.default_rng(seed)
        blocks = []
        d_in = config.in_channels
        for _ in range(config.blocks):
            blocks.append(StBlockParams.init(n, d_in, config.filters, config.window,
                                             config.order, rng, config.time_kernel))
            d_in = config.filters
        fan_in = config.filters * config.window
        head_weight = _uniform(rng, (fan_in, config.horizon), fan_in)
        head_bias = Tensor(np.zeros(config.horizon), requires_grad=True)
        return cls(config, blocks, head_weight, head_bias, polys)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, block in enumerate(self.blocks):
            for name, t in block.parameters().items():
                out[f"blocks.{i}.{name}"] = t
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ConfigError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, t in params.items():
            if state[name].shape != t.shape:
                raise ConfigError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data[...] = state[name]


def st_block_forward(z: Tensor, block: StBlockParams, polys,
                     return_attention: bool = False):
    """One ST block; optionally also returns the block's attention maps."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.ndim != 4 or z.shape[2] != block.d_in:
        raise InvalidInputError(f"block expects [B, N, {block.d_in}, T_w] input, got {z.shape}")
    att: AttentionOutput = attention_3d(z, block.attention)
    spatial = cheb_graph_conv(att.z_new, att.s_norm, block.theta, polys)
    temporal = ops.conv2d(spatial, block.time_conv_kernel)
    out = ops.relu(ops.add(temporal, ops.conv2d(z, block.residual_kernel)))
    return (out, att) if return_attention else out


def forward(model: ForecastModel, z: Tensor, return_attention: bool = False):
    """``[B, N, K, T_w]`` features to ``[B, N, N_H]`` forecasts."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    cfg = model.config
    expected = (cfg.num_nodes, cfg.in_channels, cfg.window)
    if z.ndim != 4 or z.shape[1:] != expected:
        raise InvalidInputError(f"model expects [B, {expected[0]}, {expected[1]}, {expected[2]}], "
                                f"got {z.shape}")
    maps = []
    h = z
    for block in model.blocks:
        h, att = st_block_forward(h, block, model.polys, return_attention=True)
        maps.append(att)
    b = z.shape[0]
    flat = ops.reshape(h, (b, cfg.num_nodes, cfg.filters * cfg.window))
    pred = ops.add(ops.einsum("bnf,fh->bnh", flat, model.head_weight), model.head_bias)
    return (pred, maps) if return_attention else pred


def mae_loss(pred: Tensor, target) -> Tensor:
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise InvalidInputError(f"prediction {pred.shape} and target {target.shape} differ")
    return ops.mean(ops.abs(ops.sub(pred, target)))


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class WindowedSplit:
    """Model-ready samples: inputs ``[S, N, K, T_w]``, targets ``[S, N, N_H]``."""
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.ndim != 4 or self.targets.ndim != 3 or \
                self.inputs.shape[0] != self.targets.shape[0]:
            raise InvalidInputError(
                f"inputs {self.inputs.shape} and targets {self.targets.shape} do not pair up")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class TrainOptions:
    lr: float = 1e-3
    batch_size: int = 48
    epochs: int = 100
    patience: int = 10
    seed: int = 42
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size and patience must be >= 1 and epochs >= 0")


@dataclass
class TrainingReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    schedule: list[int] = field(default_factory=list)
    stopped_early: bool = False

    def curve_rows(self) -> list[tuple[int, float, float, int]]:
        return [(e + 1, tl, vl, self.schedule[e])
                for e, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss))]


def predict(model: ForecastModel, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outs = []
    with no_grad():
        for start in range(0, len(inputs), batch_size):
            outs.append(forward(model, Tensor(inputs[start:start + batch_size])).data)
    if not outs:
        return np.zeros((0, model.config.num_nodes, model.config.horizon))
    return np.concatenate(outs, axis=0)


def _evaluate_mae(model: ForecastModel, split: WindowedSplit) -> float:
    pred = predict(model, split.inputs)
    return float(np.mean(np.abs(pred - split.targets)))


def _norms(model: ForecastModel) -> dict[str, float]:
    return {k: float(np.linalg.norm(t.data)) for k, t in model.parameters().items()}


def train(model: ForecastModel, train_split: WindowedSplit | Sequence[WindowedSplit],
          val_split: WindowedSplit | None, opts: TrainOptions = TrainOptions(),
          on_epoch: Callable[[int, float, float], None] | None = None) -> TrainingReport:
    """Minimize MAE with Adam; keep and restore the best-validation parameters.

    ``train_split`` may be a list of alternative training sets; epoch ``e``
    (0-based) then draws from set ``e mod len(list)`` and the 1-based index
    used is recorded in ``report.schedule``.
    """
    sets = list(train_split) if isinstance(train_split, (list, tuple)) else [train_split]
    if not sets or any(len(s) == 0 for s in sets):
        raise InvalidInputError("training set is empty")
    params = model.parameters()
    opt = Adam(params, lr=opts.lr)
    rng = np.random.default_rng(opts.seed)
    report = TrainingReport()
    best_state = model.state()
    since_best = 0
    for epoch in range(opts.epochs):
        j = epoch % len(sets)
        data = sets[j]
        report.schedule.append(j + 1)
        order = rng.permutation(len(data)) if opts.shuffle else np.arange(len(data))
        total = 0.0
        for batch_no, start in enumerate(range(0, len(data), opts.batch_size)):
            idx = order[start:start + opts.batch_size]
            opt.zero_grad()
            loss = mae_loss(forward(model, Tensor(data.inputs[idx])), data.targets[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"loss became {value} at epoch {epoch + 1}, batch {batch_no + 1}",
                    diagnostics={"epoch": epoch + 1, "batch": batch_no + 1,
                                 "parameter_norms": _norms(model)})
            backward(loss)
            opt.step()
            total += value * len(idx)
        train_loss = total / len(data)
        val_loss = _evaluate_mae(model, val_split) if val_split is not None and len(val_split) \
            else train_loss
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        if on_epoch is not None:
            on_epoch(epoch + 1, train_loss, val_loss)
        if val_loss < report.best_val:
            report.best_val, report.best_epoch = val_loss, epoch + 1
            best_state = model.state()
            since_best = 0
        else:
            since_best += 1
            if since_best >= opts.patience:
                report.stopped_early = True
                break
    model.load_state(best_state)
    opt.zero_grad()
    return report


# -- checkpoints ---------------------------------------------------------------

_BLOB_MAGIC = b"STM1"


def save_checkpoint(model: ForecastModel, path, *, epoch: int = 0, val_mae: float | None = None,
                    seed: int | None = None, metadata: dict | None = None) -> tuple[Path, Path]:
    """Write ``path`` (little-endian float64 blob) and ``path.json`` (manifest).

    The only time-dependent value is the manifest's ``created`` field.
    """
    path = Path(path)
    arrays = dict(model.parameters())
    entries, offset = [], 0
    with open(path, "wb") as fh:
        fh.write(_BLOB_MAGIC)
        for name in sorted(arrays):
            data = np.asarray(arrays[name].data, dtype="<f8", order="C")
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(data.shape), "offset": offset})
            offset += data.size
        polys = np.asarray(model.polys, dtype="<f8", order="C")
        fh.write(polys.tobytes())
    manifest = {
        "format": "stmodes-checkpoint",
        "version": 1,
        "config": model.config.to_dict(),
        "epoch": int(epoch),
        "val_mae": None if val_mae is None else float(val_mae),
        "seed": seed,
        "parameters": entries,
        "polys": {"shape": list(polys.shape), "offset": offset},
        "metadata": metadata or {},
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    manifest_path = path.with_name(path.name + ".json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path, manifest_path


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[ForecastModel, dict]:
    """Rebuild a model from a checkpoint; a config differing from ``expected`` is an error."""
    path = Path(path)
    manifest_path = path.with_name(path.name + ".json")
    if not path.exists() or not manifest_path.exists():
        raise InvalidInputError(f"checkpoint {path} or its manifest is missing")
    manifest = json.loads(manifest_path.read_text())
    try:
        config = ModelConfig(**manifest["config"])
    except TypeError as exc:
        raise ConfigError(f"{manifest_path}: bad config: {exc}") from exc
    if expected is not None and expected != config:
        diff = {k: (v, getattr(config, k)) for k, v in expected.to_dict().items()
                if getattr(config, k) != v}
        raise ConfigError(f"checkpoint config does not match (expected, found): {diff}")
    raw = path.read_bytes()
    if raw[:4] != _BLOB_MAGIC:
        raise InvalidInputError(f"{path} is not a checkpoint blob")
    flat = np.frombuffer(raw[4:], dtype="<f8")
    p_shape = tuple(manifest["polys"]["shape"])
    p_off = manifest["polys"]["offset"]
    if flat.size != p_off + int(np.prod(p_shape)):
        raise InvalidInputError(f"{path}: blob size does not match its manifest")
    polys = flat[p_off:p_off + int(np.prod(p_shape))].reshape(p_shape).astype(np.float64)
    model = ForecastModel.init(config, polys, seed=0)
    state = {}
    for entry in manifest["parameters"]:
        n = int(np.prod(entry["shape"]))
        state[entry["name"]] = flat[entry["offset"]:entry["offset"] + n].reshape(entry["shape"])
    model.load_state(state)
    return model, manifest

