"""Losses, windowed mini-batch training, early stopping and checkpoints."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .graph import LaplacianBundle, block_diagonal, build_graph, laplacian_bundle
from .grid_ingest import EventGrid
from .model import ModelParams, cell_likelihood, forward, node_features, raster_cells
from .numerics import GradientTape, Tensor, adam_step, backward, clip_global_norm, ops
from .subdivision import Partition, region_event_tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HRCF"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.003
    batch: int = 5
    window: int = 10
    early_stop_tolerance: int = 5
    clip_norm: float = 10.0
    weight_decay: float = 0.001
    max_epochs: int = 100
    seed: int = 0
    objective: str = "bce"

    def __post_init__(self):
        if min(self.lr, self.batch, self.window, self.early_stop_tolerance,
               self.clip_norm, self.max_epochs) <= 0 or self.weight_decay < 0:
            raise ValueError(f"invalid training config {self}")


@dataclass
class TrainState:
    epoch: int = 0
    best_val: float = float("inf")
    best_epoch: int = 0
    counter: int = 0
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# losses


def bce_loss(likelihood, labels) -> Tensor:
    """Mean binary cross-entropy over cells (the 1/(I*J) normalised sum).

    ``likelihood`` must already be clamped into the open unit interval.
    """
    l = likelihood if isinstance(likelihood, Tensor) else Tensor(likelihood)
    q = np.asarray(labels, dtype=float).reshape(l.shape)
    if np.any(l.data <= 0.0) or np.any(l.data >= 1.0):
        raise ValueError("bce_loss: likelihood outside (0, 1); clamp the raster first")
    q_t = Tensor(q)
    ll = q_t * ops.log(l) + (1.0 - q_t) * ops.log(1.0 - l)
    return -ops.mean(ll)


def nll_loss(points, point_region, mu, v, weights=None) -> Tensor:
    """-sum log pdf of each event under its region's Gaussian."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(points) == 0:
        return Tensor(0.0)
    if np.any(points < 0) or np.any(points > 1):
        raise ValueError("nll_loss: event outside the unit square")
    mu = mu if isinstance(mu, Tensor) else Tensor(mu)
    v = v if isinstance(v, Tensor) else Tensor(v)
    mu_p = ops.gather_rows(mu, point_region)
    v_p = ops.gather_rows(v, point_region)
    quad = ops.sum(ops.square(Tensor(points) - mu_p) / v_p + ops.log(v_p), axis=1)
    logpdf = quad * -0.5 - float(np.log(2 * np.pi))
    if weights is not None:
        logpdf = logpdf * Tensor(np.asarray(weights, dtype=float))
    return -ops.sum(logpdf)


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class ForecastData:
    """Everything the model needs for a fixed partition, precomputed once."""

    features: np.ndarray        # (T, N, d_x)
    labels: np.ndarray          # (T, I*J) in {0, 1}
    counts: np.ndarray          # (T, I*J) totals, for the nll objective
    partition: Partition
    laplacian: LaplacianBundle
    cell_xy: np.ndarray         # (I*J, 2)
    cell_region: np.ndarray     # (I*J,)
    _ops: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.features.shape[1]

    @property
    def n_slots(self) -> int:
        return self.features.shape[0]

    @property
    def grid_shape(self) -> tuple:
        return self.partition.shape

    def operator(self, copies: int):
        if copies not in self._ops:
            self._ops[copies] = block_diagonal(self.laplacian.L_scaled, copies)
        return self._ops[copies]

    def windows(self, targets, window: int) -> np.ndarray:
        """Inputs for ``targets`` stacked along the node axis: (W, B*N, d_x)."""
        targets = np.asarray(targets)
        idx = targets[:, None] - window + np.arange(window)[None, :]
        if idx.min() < 0:
            raise ValueError("window reaches before the first slot")
        X = self.features[idx]                      # (B, W, N, d)
        B, W, N, d = X.shape
        return X.transpose(1, 0, 2, 3).reshape(W, B * N, d)


def prepare_data(grid: EventGrid, partition: Partition, weighting: str = "distance") -> ForecastData:
    graph = build_graph(partition, weighting=weighting)
    bundle = laplacian_bundle(graph.A)
    region_counts = region_event_tensor(grid, partition)
    feats = node_features(region_counts, partition.centers, grid.calendar)
    totals = grid.totals.reshape(grid.n_slots, -1)
    I, J = partition.shape
    xy, region = raster_cells(partition, I, J)
    return ForecastData(feats, (totals >= 1).astype(np.int8), totals, partition, bundle, xy, region)


def split_targets(split: slice, window: int, n_slots: int | None = None) -> np.ndarray:
    """Target slots of a split: every slot with a full in-split history window."""
    start, stop, _ = split.indices(n_slots if n_slots is not None else split.stop)
    if stop - start < window + 1:
        raise ValueError(f"split of {stop - start} slots is shorter than window + 1 = {window + 1}")
    return np.arange(start + window, stop)


def batch_likelihood(params: ModelParams, data: ForecastData, targets, window: int):
    """Forward a batch of windows; returns (mu, v, clamped cell likelihood (B*M,))."""
    targets = np.atleast_1d(targets)
    B = len(targets)
    X = data.windows(targets, window)
    mu, v = forward(X, params, data.operator(B))
    N = data.n_nodes
    region = (data.cell_region[None, :] + N * np.arange(B)[:, None]).ravel()
    xy = np.tile(data.cell_xy, (B, 1))
    return mu, v, cell_likelihood(mu, v, xy, region)


def batch_loss(params: ModelParams, data: ForecastData, targets, window: int, objective: str = "bce") -> Tensor:
    targets = np.atleast_1d(targets)
    mu, v, lik = batch_likelihood(params, data, targets, window)
    if objective == "bce":
        return bce_loss(lik, data.labels[targets].ravel())
    if objective == "nll":
        # events sit at their cell centers, weighted by count; averaged per window
        B, N = len(targets), data.n_nodes
        counts = data.counts[targets]
        b_idx, cell = np.nonzero(counts)
        region = data.cell_region[cell] + N * b_idx
        return nll_loss(data.cell_xy[cell], region, mu, v, counts[b_idx, cell]) / float(B)
    raise ValueError(f"unknown objective {objective!r}")


def predict(params: ModelParams, data: ForecastData, targets, window: int, batch: int = 5) -> np.ndarray:
    """Clamped likelihood per (target, cell): shape (len(targets), I*J)."""
    targets = np.asarray(targets)
    out = []
    for i in range(0, len(targets), batch):
        chunk = targets[i:i + batch]
        _, _, lik = batch_likelihood(params, data, chunk, window)
        out.append(lik.data.reshape(len(chunk), -1))
    return np.concatenate(out, axis=0) if out else np.zeros((0, len(data.cell_region)))


# ---------------------------------------------------------------------------
# training loop


def train_step(params: ModelParams, data: ForecastData, targets, cfg: TrainConfig) -> float:
    with GradientTape() as tape:
        loss = batch_loss(params, data, targets, cfg.window, cfg.objective)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss for target slots {list(np.atleast_1d(targets))}")
    backward(tape, loss)
    tape.clear()
    plist = list(params)
    clip_global_norm(plist, cfg.clip_norm)
    adam_step(plist, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return value


def train_epoch(params: ModelParams, data: ForecastData, split: slice, cfg: TrainConfig,
                rng: np.random.Generator | None = None, epoch: int = 0) -> float:
    """Shuffle stride-1 windows, step Adam once per batch; return the mean batch loss."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    targets = split_targets(split, cfg.window, data.n_slots)
    order = targets[rng.permutation(len(targets))]
    losses = []
    for i in range(0, len(order), cfg.batch):
        chunk = order[i:i + cfg.batch]
        try:
            losses.append(train_step(params, data, chunk, cfg))
        except TrainingError as err:
            raise TrainingError(f"epoch {epoch}: {err}") from err
    return float(np.mean(losses))


def evaluate_loss(params: ModelParams, data: ForecastData, split: slice, cfg: TrainConfig) -> float:
    targets = split_targets(split, cfg.window, data.n_slots)
    losses, weights = [], []
    for i in range(0, len(targets), cfg.batch):
        chunk = targets[i:i + cfg.batch]
        losses.append(float(batch_loss(params, data, chunk, cfg.window, cfg.objective).data))
        weights.append(len(chunk))
    return float(np.average(losses, weights=weights))


class EarlyStopping:
    """Counts epochs without strict validation improvement."""

    def __init__(self, tolerance: int = 5):
        self.tolerance = tolerance
        self.best = float("inf")
        self.counter = 0

    def update(self, val_loss: float) -> bool:
        """Record a validation loss; True if it is a new best."""
        if val_loss < self.best:
            self.best = val_loss
            self.counter = 0
            return True
        self.counter += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.counter >= self.tolerance


@dataclass
class FitResult:
    params: ModelParams
    state: TrainState
    best_snapshot: dict
    hit_max_epochs: bool
    log_lines: list


def fit(params: ModelParams, data: ForecastData, train: slice, val: slice, cfg: TrainConfig,
        log_path=None, val_loss_fn=None) -> FitResult:
    """Train with early stopping; ``params`` ends up holding the best-validation weights."""
    rng = np.random.default_rng(cfg.seed)
    val_loss_fn = val_loss_fn or (lambda p: evaluate_loss(p, data, val, cfg))
    stopper = EarlyStopping(cfg.early_stop_tolerance)
    state = TrainState()
    best = params.snapshot()
    lines = []
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            train_loss = train_epoch(params, data, train, cfg, rng, epoch)
            val_loss = val_loss_fn(params)
            if stopper.update(val_loss):
                best = params.snapshot()
                state.best_epoch = epoch
            state.epoch, state.best_val, state.counter = epoch, stopper.best, stopper.counter
            record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                      "lr": cfg.lr, "counter": stopper.counter}
            state.history.append(record)
            line = json.dumps(record)
            lines.append(line)
            if fh:
                fh.write(line + "\n")
                fh.flush()
            log.info(line)
            if stopper.should_stop:
                break
    finally:
        if fh:
            fh.close()
    params.load_snapshot(best)
    hit_max = not stopper.should_stop
    return FitResult(params, state, best, hit_max, lines)


# ---------------------------------------------------------------------------
# checkpoints: "HRCF", u32 version, u32 count, then per tensor
#   u32 name length, name bytes, u32 ndim, u32 dims..., f64 data (little endian)


class CheckpointError(IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def save_checkpoint(path, tensors) -> None:
    """``tensors``: mapping name -> array, or a ModelParams."""
    if isinstance(tensors, ModelParams):
        tensors = tensors.snapshot()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic {raw[:4]!r}, not an HRCF checkpoint")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointTruncatedError(f"{path}: truncated at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def restore_params(tensors: dict, params: ModelParams) -> ModelParams:
    """Copy checkpoint tensors into ``params``; shapes must agree with its config."""
    for name, p in params.tensors.items():
        if name not in tensors:
            raise CheckpointShapeError(f"checkpoint lacks tensor {name!r}")
        if tensors[name].shape != p.shape:
            raise CheckpointShapeError(f"tensor {name!r}: checkpoint shape {tensors[name].shape} "
                                       f"!= model shape {p.shape}")
        p.data[...] = tensors[name]
    return params


def config_dict(cfg) -> dict:
    return asdict(cfg)
