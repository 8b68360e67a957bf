"""Small end-to-end tour of the library on synthetic data.

Generates a year of events, partitions the busy part of the map, trains a
short model, scores it against the per-cell frequency baseline and writes a
forecast heatmap at twice the grid resolution.

    python demos/walkthrough.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from hrcf.evaluation import evaluate_predictions, evaluate_split, export_raster, frequency_baseline
from hrcf.grid_ingest import UNIT_BBOX, GridSpec, aggregate_training_grid, split_chronological
from hrcf.model import ModelConfig, init_params, predict_gaussians, rasterize_density
from hrcf.subdivision import divide_regions, sparsity_stats
from hrcf.synthetic import SyntheticConfig, generate_dataset
from hrcf.training import TrainConfig, fit, prepare_data, split_targets

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

grid = generate_dataset(SyntheticConfig(seed=0), GridSpec(UNIT_BBOX, 20, 20)).grid
splits = split_chronological(grid)
Q = aggregate_training_grid(grid.subset(splits.train))
part = divide_regions(Q, tau=1000)
print(f"{grid.n_slots} days on a {grid.shape} grid -> {len(part)} regions")
print(f"zero fraction: cells {sparsity_stats(Q)['zero_fraction']:.3f}, regions {sparsity_stats(part)['zero_fraction']:.3f}")

data = prepare_data(grid, part)
cfg = ModelConfig(d_x=data.features.shape[2])
params = init_params(cfg, seed=0)
result = fit(params, data, splits.train, splits.val, TrainConfig(max_epochs=15))
print(f"trained {result.state.epoch} epochs, best validation loss {result.state.best_val:.4f}")

val = evaluate_split(params, data, splits.val, cfg.window)
test = evaluate_split(params, data, splits.test, cfg.window, threshold=val.report.threshold)
base = frequency_baseline(data.labels[splits.train])
vt = split_targets(splits.val, cfg.window, data.n_slots)
tt = split_targets(splits.test, cfg.window, data.n_slots)
base_test = evaluate_predictions(np.tile(base, (len(tt), 1)), data.labels[tt],
                                 threshold_source=(np.tile(base, (len(vt), 1)), data.labels[vt]))
print(f"test F1 {test.report.f1:.3f} acc {test.report.accuracy:.3f} "
      f"(frequency baseline F1 {base_test.f1:.3f} acc {base_test.accuracy:.3f})")

# the day after the data ends, rendered at 40x40
gauss = predict_gaussians(data.windows(np.array([data.n_slots]), cfg.window), params, data.operator(1))
export_raster(rasterize_density(gauss, part, 40, 40), out / "forecast.pgm")
print(f"heatmap written to {out / 'forecast.pgm'}")
