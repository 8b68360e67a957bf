"""Synthetic Gaussian-cluster events with AR(1) daily totals and switching profiles."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from .grid_ingest import N_CALENDAR, UNIT_BBOX, EventGrid, GridSpec, calendar_features, rasterize_points


@dataclass
class SyntheticConfig:
    group_count: int = 4
    locations_per_group: int = 10
    location_range: tuple = (0.2, 0.8)
    variances: tuple = (0.02, 0.01, 0.005, 0.003)
    ratios: tuple = (0.1, 0.2, 0.3, 0.4)
    profile_period: int = 10
    n_slots: int = 365
    ar_coef: float = 0.7
    noise_std: float = 5.0
    level: float = 100.0
    shared_locations: bool = False
    start: date = date(2015, 1, 1)
    seed: int = 0

    def __post_init__(self):
        if len(self.variances) != self.group_count or len(self.ratios) != self.group_count:
            raise ValueError("need one variance and one ratio per group")
        if not math.isclose(sum(self.ratios), 1.0, abs_tol=1e-9):
            raise ValueError(f"ratios sum to {sum(self.ratios)}, not 1")
        if min(self.variances) <= 0:
            raise ValueError("variances must be positive")
        lo, hi = self.location_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("location range must lie inside the unit square")


def gen_ar_counts(cfg: SyntheticConfig, rng=None, initial: float | None = None) -> np.ndarray:
    """e_t = c + phi (e_{t-1} - c) + noise, rounded and floored at zero."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    noise = rng.normal(0.0, cfg.noise_std, size=cfg.n_slots) if cfg.noise_std > 0 else np.zeros(cfg.n_slots)
    e = np.empty(cfg.n_slots)
    prev = cfg.level if initial is None else initial
    for t in range(cfg.n_slots):
        prev = cfg.level + cfg.ar_coef * (prev - cfg.level) + noise[t]
        e[t] = prev
    return np.maximum(np.rint(e), 0).astype(np.int64)


def gen_density_locations(cfg: SyntheticConfig, rng=None) -> np.ndarray:
    """Cluster means, shape (groups, locations_per_group, 2)."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    lo, hi = cfg.location_range
    if cfg.shared_locations:
        pts = rng.uniform(lo, hi, size=(cfg.locations_per_group, 2))
        return np.repeat(pts[None], cfg.group_count, axis=0)
    return rng.uniform(lo, hi, size=(cfg.group_count, cfg.locations_per_group, 2))


def allocate_events(total: int, ratios) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` by ``ratios`` (ties to the lower index)."""
    ratios = np.asarray(ratios, dtype=float)
    quotas = total * ratios / ratios.sum()
    base = np.floor(quotas + 1e-9).astype(np.int64)
    remainder = quotas - base
    extra = int(total - base.sum())
    if extra > 0:
        order = np.argsort(-remainder, kind="stable")
        base[order[:extra]] += 1
    return base


def apply_profiles(t: int, group: int, n_locations: int = 10, period: int = 10) -> np.ndarray:
    """Active cluster indices of ``group`` (1-based) at slot ``t``.

    Profiles: 1 even, 2 odd, 3 divisible by four, 4 the rest. Every ``period``
    slots profile 1 swaps with 2 and 3 with 4.
    """
    if group < 1:
        raise ValueError("groups are numbered from 1")
    idx = np.arange(n_locations)
    profile = (group - 1) % 4 + 1
    if (t // period) % 2 == 1:
        profile = {1: 2, 2: 1, 3: 4, 4: 3}[profile]
    mask = {1: idx % 2 == 0, 2: idx % 2 == 1, 3: idx % 4 == 0, 4: idx % 4 != 0}[profile]
    return idx[mask]


def sample_cluster(rng, mean, variance, n) -> np.ndarray:
    """``n`` isotropic Gaussian draws inside the unit square (rejection resampling)."""
    out = np.empty((0, 2))
    std = math.sqrt(variance)
    while len(out) < n:
        pts = rng.normal(mean, std, size=(2 * (n - len(out)) + 4, 2))
        pts = pts[np.all((pts >= 0.0) & (pts <= 1.0), axis=1)]
        out = np.vstack([out, pts])
    return out[:n]


@dataclass
class SyntheticDataset:
    grid: EventGrid
    totals: np.ndarray
    locations: np.ndarray
    points: list = field(repr=False, default_factory=list)  # per slot: (n, 2) xy
    point_groups: list = field(repr=False, default_factory=list)

    def metadata_text(self, cfg: SyntheticConfig) -> str:
        lines = [
            "# synthetic dataset ground truth",
            f"seed = {cfg.seed}",
            f"n_slots = {cfg.n_slots}",
            f"start = {cfg.start.isoformat()}",
            f"grid = {self.grid.shape[0]} {self.grid.shape[1]}",
            f"ar = level {cfg.level!r} coef {cfg.ar_coef!r} noise_std {cfg.noise_std!r}",
            f"variances = {', '.join(repr(v) for v in cfg.variances)}",
            f"ratios = {', '.join(repr(r) for r in cfg.ratios)}",
            f"profile_period = {cfg.profile_period}",
            "# group index x y",
        ]
        for g, locs in enumerate(self.locations, 1):
            for k, (x, y) in enumerate(locs):
                lines.append(f"location {g} {k} {float(x)!r} {float(y)!r}")
        lines.append("# slot total per-group counts")
        for t, total in enumerate(self.totals):
            per = allocate_events(int(total), cfg.ratios)
            lines.append(f"slot {t} {int(total)} {' '.join(str(int(c)) for c in per)}")
        return "\n".join(lines) + "\n"


def generate_dataset(cfg: SyntheticConfig, grid: GridSpec | None = None, keep_points: bool = False) -> SyntheticDataset:
    """Draw the full event history and rasterize it with one category per group."""
    grid = grid or GridSpec(UNIT_BBOX, 50, 33)
    rng = np.random.default_rng(cfg.seed)
    locations = gen_density_locations(cfg, rng)
    totals = gen_ar_counts(cfg, rng)
    counts = np.zeros((cfg.n_slots, grid.rows, grid.cols, cfg.group_count), dtype=np.int64)
    cal = np.zeros((cfg.n_slots, N_CALENDAR))
    points, groups = [], []
    for t in range(cfg.n_slots):
        cal[t] = calendar_features(cfg.start + timedelta(days=t))
        per_group = allocate_events(int(totals[t]), cfg.ratios)
        slot_pts, slot_groups = [], []
        for g in range(cfg.group_count):
            active = apply_profiles(t, g + 1, cfg.locations_per_group, cfg.profile_period)
            quota = allocate_events(int(per_group[g]), np.ones(len(active)))
            for k, n in zip(active, quota):
                if n == 0:
                    continue
                pts = sample_cluster(rng, locations[g, k], cfg.variances[g], int(n))
                counts[t, :, :, g] += rasterize_points(pts, grid)
                if keep_points:
                    slot_pts.append(pts)
                    slot_groups.append(np.full(len(pts), g))
        if keep_points:
            points.append(np.vstack(slot_pts) if slot_pts else np.zeros((0, 2)))
            groups.append(np.concatenate(slot_groups) if slot_groups else np.zeros(0, dtype=int))
    cats = tuple(f"GROUP{g + 1}" for g in range(cfg.group_count))
    eg = EventGrid(counts, cal, start=cfg.start, slot_hours=24, categories=cats)
    return SyntheticDataset(eg, totals, locations, points, groups)
