"""Shared fixtures: tiny graphs, toy models and a synthetic micro-dataset."""
from __future__ import annotations

from datetime import date

import numpy as np
import pytest

from hrcf.grid_ingest import UNIT_BBOX, GridSpec
from hrcf.model import ModelConfig, init_params
from hrcf.subdivision import Partition
from hrcf.synthetic import SyntheticConfig, generate_dataset
from hrcf.training import prepare_data


def random_graph(rng, n, p=0.5, connected=False):
    """Symmetric nonnegative weight matrix with zero diagonal."""
    A = np.triu(rng.uniform(0.1, 1.0, (n, n)) * (rng.random((n, n)) < p), 1)
    if connected:
        for i in range(n - 1):
            A[i, i + 1] = A[i, i + 1] or rng.uniform(0.1, 1.0)
    return A + A.T


def micro_partition():
    """Ten 2x2 regions tiling a 10x4 grid."""
    rects = [(r, r + 2, c, c + 2) for r in range(0, 10, 2) for c in (0, 2)]
    return Partition.from_rects(rects, (10, 4))


@pytest.fixture(scope="session")
def micro_data():
    cfg = SyntheticConfig(n_slots=200, seed=3, start=date(2015, 1, 1))
    ds = generate_dataset(cfg, GridSpec(UNIT_BBOX, 10, 4))
    return prepare_data(ds.grid, micro_partition())


def toy_partition():
    """Three regions on a 2x4 grid: 2x2 squares left and right, the right one split again."""
    return Partition.from_rects([(0, 2, 0, 2), (0, 1, 2, 4), (1, 2, 2, 4)], (2, 4))


def toy_config(d_x=4, widths=(3, 2), K=2, hidden=3, window=3):
    return ModelConfig(widths=widths, K=K, d_x=d_x, mlp_hidden=hidden, window=window)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_params():
    return init_params(toy_config(), seed=1)


def toy_grid(T=12, I=2, J=6, L=2, seed=0):
    from datetime import timedelta

    from hrcf.grid_ingest import EventGrid, calendar_features

    rng = np.random.default_rng(seed)
    start = date(2015, 3, 1)
    counts = rng.poisson(0.7, size=(T, I, J, L))
    cal = np.array([calendar_features(start + timedelta(days=t)) for t in range(T)])
    return EventGrid(counts, cal, start=start, slot_hours=24, categories=tuple(f"C{l}" for l in range(L)))


def three_region_partition():
    """Three 2x2-cell regions side by side on a 2x6 grid (a 3-node path graph)."""
    return Partition.from_rects([(0, 2, 0, 2), (0, 2, 2, 4), (0, 2, 4, 6)], (2, 6))


@pytest.fixture
def toy_data():
    return prepare_data(toy_grid(), three_region_partition())
