"""Graph-convolutional GRU encoder with per-region bivariate Gaussian heads."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graph import chebyshev_basis
from .grid_ingest import cell_centers
from .numerics import Parameter, Tensor, ops
from .subdivision import Partition

LOG_2PI = math.log(2.0 * math.pi)
CLAMP_EPS = 1e-6
GATES = ("z", "r", "h")


@dataclass
class ModelConfig:
    widths: tuple = (50, 20, 10)
    K: int = 3
    d_x: int = 16
    mlp_hidden: int = 64
    window: int = 10
    var_floor: float = 1e-4

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths or min(self.widths) < 1 or self.K < 1 or self.d_x < 1 or self.mlp_hidden < 1:
            raise ValueError(f"invalid model config {self}")

    @property
    def d_out(self) -> int:
        return self.widths[-1]


@dataclass
class GaussianParams:
    """Per-node means and (diagonal) variances, each of shape (N, 2)."""

    mu: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(-1, 2)
        self.v = np.asarray(self.v, dtype=float).reshape(-1, 2)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name) -> Parameter:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.tensors.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.tensors.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]):
        for k, arr in snap.items():
            self.tensors[k].data[...] = arr


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every trainable tensor; independent of the node count."""
    shapes = {}
    d_in = config.d_x
    for layer, d_h in enumerate(config.widths):
        for gate in GATES:
            shapes[f"gcgru{layer}.W_x{gate}"] = (config.K, d_in, d_h)
            shapes[f"gcgru{layer}.b_x{gate}"] = (d_h,)
            shapes[f"gcgru{layer}.W_h{gate}"] = (config.K, d_h, d_h)
            shapes[f"gcgru{layer}.b_h{gate}"] = (d_h,)
        d_in = d_h
    for head in ("mu", "v"):
        shapes[f"head_{head}.W1"] = (config.d_out, config.mlp_hidden)
        shapes[f"head_{head}.b1"] = (config.mlp_hidden,)
        shapes[f"head_{head}.W2"] = (config.mlp_hidden, 2)
        shapes[f"head_{head}.b2"] = (2,)
    return shapes


def glorot_bound(shape) -> float:
    if len(shape) == 3:
        fan_in, fan_out = shape[0] * shape[1], shape[2]
    else:
        fan_in, fan_out = shape
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            value = np.zeros(shape)
        else:
            a = glorot_bound(shape)
            value = rng.uniform(-a, a, size=shape)
        tensors[name] = Parameter(name, value)
    return ModelParams(config, tensors)


def zero_params(config: ModelConfig) -> ModelParams:
    return ModelParams(config, {n: Parameter(n, np.zeros(s)) for n, s in param_shapes(config).items()})


# ---------------------------------------------------------------------------
# forward pass


def _conv(basis: Tensor, W: Parameter, b: Parameter) -> Tensor:
    K, f_in, f_out = W.shape
    return basis @ ops.reshape(W, (K * f_in, f_out)) + b


def _basis(L_scaled, x, K):
    return ops.concat(chebyshev_basis(L_scaled, x, K)) if K > 1 else x


def gcgru_cell(x_t, h_prev, params: ModelParams, layer: int, L_scaled) -> Tensor:
    """One GRU step with Chebyshev graph convolutions in place of affine maps."""
    p = lambda name: params[f"gcgru{layer}.{name}"]  # noqa: E731
    K, d_in, d_h = p("W_xz").shape
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    h_prev = h_prev if isinstance(h_prev, Tensor) else Tensor(h_prev)
    if x_t.ndim != 2 or x_t.shape[1] != d_in or h_prev.shape != (x_t.shape[0], d_h):
        raise ValueError(f"gcgru{layer}: x {x_t.shape} / h {h_prev.shape} do not match "
                         f"input width {d_in}, hidden width {d_h}")
    bx = _basis(L_scaled, x_t, K)
    bh = _basis(L_scaled, h_prev, K)
    z = ops.sigmoid(_conv(bx, p("W_xz"), p("b_xz")) + _conv(bh, p("W_hz"), p("b_hz")))
    r = ops.sigmoid(_conv(bx, p("W_xr"), p("b_xr")) + _conv(bh, p("W_hr"), p("b_hr")))
    brh = _basis(L_scaled, r * h_prev, K)
    h_cand = ops.tanh(_conv(bx, p("W_xh"), p("b_xh")) + _conv(brh, p("W_hh"), p("b_hh")))
    # z*h + (1-z)*h_cand
    return h_cand + z * (h_prev - h_cand)


def encode_sequence(window, params: ModelParams, L_scaled) -> Tensor:
    """Run the GCGRU stack over ``window`` (W, N, d_x) from zero states; return the top state."""
    cfg = params.config
    window = np.asarray(window, dtype=float)
    if window.ndim != 3 or window.shape[2] != cfg.d_x:
        raise ValueError(f"window must be (W, N, {cfg.d_x}), got {window.shape}")
    n = window.shape[1]
    states = [Tensor(np.zeros((n, d))) for d in cfg.widths]
    for x_t in window:
        inp = Tensor(x_t)
        for layer in range(len(cfg.widths)):
            states[layer] = gcgru_cell(inp, states[layer], params, layer, L_scaled)
            inp = states[layer]
    return states[-1]


def mlp_heads(h, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Per-node (mu, v); both heads are shared across nodes."""
    eps = params.config.var_floor

    def head(name):
        hidden = ops.tanh(h @ params[f"head_{name}.W1"] + params[f"head_{name}.b1"])
        return ops.sigmoid(hidden @ params[f"head_{name}.W2"] + params[f"head_{name}.b2"])

    return head("mu"), head("v") + eps


def forward(window, params: ModelParams, L_scaled) -> tuple[Tensor, Tensor]:
    return mlp_heads(encode_sequence(window, params, L_scaled), params)


def predict_gaussians(window, params: ModelParams, L_scaled) -> GaussianParams:
    mu, v = forward(window, params, L_scaled)
    return GaussianParams(mu.data, v.data)


# ---------------------------------------------------------------------------
# densities


def gaussian_pdf(x, y, mu, v):
    """Uncorrelated bivariate normal density; ``v`` holds the two variances."""
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0):
        raise ValueError("variances must be positive")
    q = (np.asarray(x) - mu[..., 0]) ** 2 / v[..., 0] + (np.asarray(y) - mu[..., 1]) ** 2 / v[..., 1]
    return np.exp(-0.5 * q) / (2.0 * math.pi * np.sqrt(v[..., 0] * v[..., 1]))


def cell_likelihood(mu: Tensor, v: Tensor, cell_xy, cell_region, clamp: float = CLAMP_EPS) -> Tensor:
    """Differentiable clamped pdf at each cell center under its region's Gaussian."""
    mu_c = ops.gather_rows(mu, cell_region)
    v_c = ops.gather_rows(v, cell_region)
    d = Tensor(cell_xy) - mu_c
    quad = ops.sum(ops.square(d) / v_c + ops.log(v_c), axis=1)
    density = ops.exp(quad * -0.5 - LOG_2PI)
    return ops.clamp(density, clamp, 1.0 - clamp)


def raster_cells(partition: Partition, rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    """Cell centers of a rows x cols raster and the region that owns each."""
    if rows < 1 or cols < 1:
        raise ValueError("resolution must be at least 1x1")
    xy = cell_centers(rows, cols)
    region = partition.locate(xy[:, 0], xy[:, 1])
    if np.any(region < 0):
        raise ValueError("raster cell outside every region; partition is not an exact cover")
    return xy, region


def rasterize_density(gauss: GaussianParams, partition: Partition, rows: int, cols: int,
                      clamp: float | None = CLAMP_EPS) -> np.ndarray:
    """(rows, cols) likelihood map, each cell scored under its owning region."""
    xy, region = raster_cells(partition, rows, cols)
    vals = gaussian_pdf(xy[:, 0], xy[:, 1], gauss.mu[region], gauss.v[region])
    if clamp is not None:
        vals = np.clip(vals, clamp, 1.0 - clamp)
    return vals.reshape(rows, cols)


def node_features(region_counts, centers, calendar) -> np.ndarray:
    """(T, N, L + 2 + 6) inputs: log1p counts, node center, calendar features."""
    region_counts = np.asarray(region_counts, dtype=float)
    T, N, _ = region_counts.shape
    centers = np.broadcast_to(np.asarray(centers, dtype=float)[None], (T, N, 2))
    cal = np.broadcast_to(np.asarray(calendar, dtype=float)[:, None, :], (T, N, calendar.shape[1]))
    return np.concatenate([np.log1p(region_counts), centers, cal], axis=2)
