"""Event-balanced recursive quartering of the count grid into regions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Region:
    id: int
    row_range: tuple[int, int]
    col_range: tuple[int, int]
    center: tuple[float, float]
    total_events: int

    @property
    def n_rows(self) -> int:
        return self.row_range[1] - self.row_range[0]

    @property
    def n_cols(self) -> int:
        return self.col_range[1] - self.col_range[0]

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols


@dataclass
class Partition:
    regions: list[Region]
    shape: tuple[int, int]
    tau: float
    _owner: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    @property
    def centers(self) -> np.ndarray:
        return np.array([r.center for r in self.regions], dtype=float).reshape(-1, 2)

    @property
    def owner(self) -> np.ndarray:
        """(I, J) array of region ids."""
        if self._owner is None:
            own = np.full(self.shape, -1, dtype=np.int64)
            for r in self.regions:
                own[r.row_range[0]:r.row_range[1], r.col_range[0]:r.col_range[1]] = r.id
            self._owner = own
        return self._owner

    def locate(self, x, y) -> np.ndarray:
        """Region id owning each normalized point (upper edge closed)."""
        I, J = self.shape
        row = np.clip(np.floor(np.asarray(y, dtype=float) * I).astype(int), 0, I - 1)
        col = np.clip(np.floor(np.asarray(x, dtype=float) * J).astype(int), 0, J - 1)
        return self.owner[row, col]

    def to_text(self) -> str:
        lines = [f"{r.id} {r.row_range[0]} {r.row_range[1]} {r.col_range[0]} {r.col_range[1]} "
                 f"{float(r.center[0])!r} {float(r.center[1])!r} {int(r.total_events)}" for r in self.regions]
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(f"# grid {self.shape[0]} {self.shape[1]} tau {float(self.tau)!r}\n")
            fh.write("# id r0 r1 c0 c1 center_x center_y total\n")
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "Partition":
        shape, tau, regions = None, float("nan"), []
        with open(path) as fh:
            for line in fh:
                if line.startswith("# grid"):
                    parts = line.split()
                    shape = (int(parts[2]), int(parts[3]))
                    tau = float(parts[5])
                    continue
                if line.startswith("#") or not line.strip():
                    continue
                f = line.split()
                regions.append(Region(int(f[0]), (int(f[1]), int(f[2])), (int(f[3]), int(f[4])),
                                      (float(f[5]), float(f[6])), int(f[7])))
        if shape is None:
            shape = (max(r.row_range[1] for r in regions), max(r.col_range[1] for r in regions))
        return cls(regions, shape, tau)

    @classmethod
    def from_rects(cls, rects, shape, Q=None, tau=float("nan")) -> "Partition":
        """Build a partition from ``(r0, r1, c0, c1)`` rectangles in the given order."""
        I, J = shape
        regions = []
        for k, (r0, r1, c0, c1) in enumerate(rects):
            total = 0 if Q is None else int(np.asarray(Q)[r0:r1, c0:c1].sum())
            regions.append(Region(k, (int(r0), int(r1)), (int(c0), int(c1)),
                                  ((c0 + c1) / 2 / J, (r0 + r1) / 2 / I), total))
        return cls(regions, tuple(shape), tau)


def split_regions(row_range, col_range):
    """Quarter a rectangle at its floor midpoints; order NW, NE, SW, SE.

    "North" here is the low-row half, matching array order.
    """
    r0, r1 = row_range
    c0, c1 = col_range
    if r1 - r0 < 2 or c1 - c0 < 2:
        raise ValueError(f"cannot quarter rows {row_range} x cols {col_range}")
    rm = (r0 + r1) // 2
    cm = (c0 + c1) // 2
    return [((r0, rm), (c0, cm)), ((r0, rm), (cm, c1)),
            ((rm, r1), (c0, cm)), ((rm, r1), (cm, c1))]


def divide_regions(Q, tau: float, row_range=None, col_range=None, min_size: int = 2) -> Partition:
    """Recursively quarter ``Q`` until every region holds fewer than ``tau`` events
    or has at most ``min_size`` rows or columns.
    """
    Q = np.asarray(Q)
    if Q.ndim != 2:
        raise ValueError("Q must be a 2-D count grid")
    if tau <= 0:
        raise ValueError("tau must be positive")
    I, J = Q.shape
    row_range = (0, I) if row_range is None else tuple(row_range)
    col_range = (0, J) if col_range is None else tuple(col_range)
    if not (0 <= row_range[0] < row_range[1] <= I and 0 <= col_range[0] < col_range[1] <= J):
        raise ValueError(f"empty or out-of-bounds range rows {row_range} cols {col_range}")
    # 2-D prefix sums make every rectangle sum O(1)
    S = np.zeros((I + 1, J + 1), dtype=np.float64)
    S[1:, 1:] = np.cumsum(np.cumsum(Q, axis=0), axis=1)

    def rect_sum(r, c):
        return S[r[1], c[1]] - S[r[0], c[1]] - S[r[1], c[0]] + S[r[0], c[0]]

    rects = []
    stack = [(row_range, col_range)]
    while stack:
        r, c = stack.pop()
        small = (r[1] - r[0]) <= min_size or (c[1] - c[0]) <= min_size
        if rect_sum(r, c) < tau or small:
            rects.append((r[0], r[1], c[0], c[1]))
            continue
        stack.extend(reversed(split_regions(r, c)))
    return Partition.from_rects(rects, (I, J), Q=Q, tau=tau)


def _touch(a0, a1, b0, b1):
    """Length of overlap of [a0, a1) and [b0, b1) (may be <= 0)."""
    return min(a1, b1) - max(a0, b0)


def region_adjacency(partition: Partition, include_corners: bool = False) -> set[tuple[int, int]]:
    """Undirected pairs (a < b) of regions sharing a boundary segment."""
    regs = partition.regions
    edges = set()
    for ia, a in enumerate(regs):
        (ar0, ar1), (ac0, ac1) = a.row_range, a.col_range
        for b in regs[ia + 1:]:
            (br0, br1), (bc0, bc1) = b.row_range, b.col_range
            vert = ac1 == bc0 or bc1 == ac0
            horiz = ar1 == br0 or br1 == ar0
            row_ov = _touch(ar0, ar1, br0, br1)
            col_ov = _touch(ac0, ac1, bc0, bc1)
            if (vert and row_ov > 0) or (horiz and col_ov > 0):
                edges.add((min(a.id, b.id), max(a.id, b.id)))
            elif include_corners and vert and horiz:
                edges.add((min(a.id, b.id), max(a.id, b.id)))
    return edges


def sparsity_stats(obj, bins=None) -> dict:
    """Zero fraction and count histogram of grid cells or partition regions."""
    if isinstance(obj, Partition):
        values = np.array([r.total_events for r in obj.regions])
    else:
        values = np.asarray(obj).ravel()
    if bins is None:
        # [0,1), [1,2), [2,4), [4,8), ... up past the largest count
        top = int(values.max(initial=0))
        bins = [0, 1]
        while bins[-1] <= top:
            bins.append(bins[-1] * 2)
    hist, edges = np.histogram(values, bins=bins)
    return {
        "zero_fraction": float(np.mean(values == 0)) if values.size else 0.0,
        "n_units": int(values.size),
        "histogram": hist.tolist(),
        "bin_edges": np.asarray(edges).tolist(),
    }


def region_event_tensor(grid, partition: Partition) -> np.ndarray:
    """Per-slot per-region per-category counts, shape (T, N, L).

    ``grid`` is an EventGrid or a raw (T, I, J, L) count array.
    """
    counts = getattr(grid, "counts", grid)
    counts = np.asarray(counts)
    if counts.shape[1:3] != tuple(partition.shape):
        raise ValueError(f"grid shape {counts.shape[1:3]} does not match partition {partition.shape}")
    T, I, J, L = counts.shape
    flat = counts.reshape(T, I * J, L)
    out = np.zeros((T, len(partition), L), dtype=counts.dtype)
    owner = partition.owner.ravel()
    for r in partition.regions:
        out[:, r.id] = flat[:, owner == r.id].sum(axis=1)
    return out
