"""Command-line driver: prepare, synth, subdivide, train, eval, raster.

Every flag can also be given in a ``key = value`` config file passed with
``--config`` (key = flag name with dashes replaced by underscores). Flags
override the file, the file overrides built-in defaults.

Exit codes: 0 success, 1 usage, 2 I/O, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields, replace
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from . import evaluation, grid_ingest, subdivision, synthetic, training
from .grid_ingest import DataFormatError, EventGrid, GridSpec, UNIT_BBOX
from .model import ModelConfig, init_params, predict_gaussians, rasterize_density
from .numerics import GradientError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("hrcf")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # data
    data: str | None = None
    input: str | None = None
    out: str | None = None
    data_config: str | None = None
    # synthetic
    slots: int = 365
    rows: int | None = None
    cols: int | None = None
    start: str = "2015-01-01"
    ar_coef: float = 0.7
    noise_std: float = 5.0
    level: float = 100.0
    # partition / graph
    tau: float = 1000.0
    partition: str | None = None
    include_corners: bool = False
    weighting: str = "distance"
    graph_out: str | None = None
    # model
    widths: str = "50,20,10"
    cheb_k: int = 3
    mlp_hidden: int = 64
    window: int = 10
    # training
    lr: float = 0.003
    batch: int = 5
    patience: int = 5
    clip_norm: float = 10.0
    weight_decay: float = 0.001
    epochs: int = 100
    objective: str = "bce"
    log: str | None = None
    # eval / raster
    ckpt: str | None = None
    report: str | None = None
    slot: int | None = None
    date: str | None = None
    format: str | None = None
    seed: int = 0

    def model_config(self, d_x: int) -> ModelConfig:
        widths = tuple(int(w) for w in str(self.widths).split(",") if w.strip())
        return ModelConfig(widths=widths, K=self.cheb_k, d_x=d_x, mlp_hidden=self.mlp_hidden,
                           window=self.window)

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(lr=self.lr, batch=self.batch, window=self.window,
                                    early_stop_tolerance=self.patience, clip_norm=self.clip_norm,
                                    weight_decay=self.weight_decay, max_epochs=self.epochs,
                                    seed=self.seed, objective=self.objective)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, value):
    kind = _FIELD_TYPES[name]
    if value is None:
        return None
    if "bool" in kind:
        return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
    if "int" in kind:
        return int(value)
    if "float" in kind:
        return float(value)
    return str(value)


def merge_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        kv = grid_ingest.read_kv(args.config)
        for key, value in kv.items():
            if key in _FIELD_TYPES:
                setattr(cfg, key, _coerce(key, value))
    for key, value in vars(args).items():
        if key in _FIELD_TYPES and value is not None:
            setattr(cfg, key, _coerce(key, value))
    return cfg


# ---------------------------------------------------------------------------
# dataset sidecar metadata (``<dataset>.meta``)


def write_meta(path, grid: EventGrid, extra_text: str = ""):
    lines = [
        f"start = {grid.start.isoformat()}",
        f"slot_hours = {grid.slot_hours}",
        f"categories = {', '.join(grid.categories)}",
        f"rows = {grid.shape[0]}",
        f"cols = {grid.shape[1]}",
    ]
    Path(str(path) + ".meta").write_text("\n".join(lines) + "\n" + extra_text)


def read_meta(path) -> dict:
    meta = Path(str(path) + ".meta")
    if not meta.exists():
        return {}
    text = "\n".join(line for line in meta.read_text().splitlines() if "=" in line)
    return grid_ingest.parse_kv(text)


def load_data(path) -> EventGrid:
    if not Path(path).exists():
        raise FileNotFoundError(path)
    meta = read_meta(path)
    start = date.fromisoformat(meta["start"]) if "start" in meta else None
    cats = [c.strip() for c in meta.get("categories", "").split(",") if c.strip()]
    return grid_ingest.load_dataset(path, start=start, slot_hours=int(meta.get("slot_hours", 24)),
                                    categories=cats)


def default_splits(grid: EventGrid, window: int) -> grid_ingest.Splits:
    """Month splits for a full calendar year, otherwise a 10/1/1 proportional cut."""
    if grid.slot_hours == 24 and grid.start.month == 1 and grid.start.day == 1:
        try:
            return grid_ingest.split_chronological(grid, grid.start.year)
        except ValueError:
            pass
    T = grid.n_slots
    a, b = int(round(T * 10 / 12)), int(round(T * 11 / 12))
    if min(a, b - a, T - b) < window + 1:
        raise UsageError(f"{T} slots are too few for train/val/test windows of {window}")
    return grid_ingest.Splits(slice(0, a), slice(a, b), slice(b, T))


def _require(cfg, *names):
    missing = [n for n in names if getattr(cfg, n) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _partition_for(cfg: RunConfig, grid: EventGrid, splits) -> subdivision.Partition:
    if cfg.partition:
        part = subdivision.Partition.load(cfg.partition)
        if tuple(part.shape) != tuple(grid.shape):
            raise UsageError(f"partition grid {part.shape} does not match data grid {grid.shape}")
        return part
    Q = grid_ingest.aggregate_training_grid(grid.subset(splits.train))
    return subdivision.divide_regions(Q, cfg.tau)


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: RunConfig) -> int:
    _require(cfg, "input", "out")
    dcfg = grid_ingest.DataConfig()
    if cfg.data_config:
        dcfg = grid_ingest.data_config_from_kv(grid_ingest.read_kv(cfg.data_config), dcfg)
    if cfg.rows:
        dcfg.rows = cfg.rows
    if cfg.cols:
        dcfg.cols = cfg.cols
    with open(cfg.input, newline="") as fh:
        records, rejects = grid_ingest.parse_events(fh, dcfg.schema, dcfg.categories, dcfg.bbox, dcfg.delimiter)
    grid = grid_ingest.rasterize(records, dcfg.grid, dcfg.slot_hours, start=dcfg.start, n_slots=dcfg.n_slots,
                                 categories=dcfg.categories, holidays=dcfg.holidays)
    grid_ingest.save_dataset(grid, cfg.out)
    write_meta(cfg.out, grid)
    print(json.dumps({"accepted": len(records), "rejected": dict(rejects), "slots": grid.n_slots,
                      "grid": list(grid.shape), "categories": grid.n_categories}))
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    _require(cfg, "out")
    scfg = synthetic.SyntheticConfig(n_slots=cfg.slots, ar_coef=cfg.ar_coef, noise_std=cfg.noise_std,
                                     level=cfg.level, start=date.fromisoformat(cfg.start), seed=cfg.seed)
    gspec = GridSpec(UNIT_BBOX, cfg.rows or 20, cfg.cols or 20)
    ds = synthetic.generate_dataset(scfg, gspec)
    grid_ingest.save_dataset(ds.grid, cfg.out)
    write_meta(cfg.out, ds.grid, ds.metadata_text(scfg))
    print(json.dumps({"slots": ds.grid.n_slots, "events": int(ds.totals.sum()), "grid": list(ds.grid.shape)}))
    return EXIT_OK


def cmd_subdivide(cfg: RunConfig) -> int:
    _require(cfg, "data", "out")
    grid = load_data(cfg.data)
    splits = default_splits(grid, cfg.window)
    Q = grid_ingest.aggregate_training_grid(grid.subset(splits.train))
    part = subdivision.divide_regions(Q, cfg.tau)
    part.save(cfg.out)
    if cfg.graph_out:
        from .graph import build_graph

        adj = subdivision.region_adjacency(part, include_corners=cfg.include_corners)
        build_graph(part, adj, weighting=cfg.weighting).export(cfg.graph_out)
    grid_stats = subdivision.sparsity_stats(Q)
    part_stats = subdivision.sparsity_stats(part)
    print(json.dumps({"regions": len(part), "tau": cfg.tau,
                      "grid_zero_fraction": grid_stats["zero_fraction"],
                      "partition_zero_fraction": part_stats["zero_fraction"]}))
    return EXIT_OK


def _meta_tensors(part: subdivision.Partition, mcfg: ModelConfig) -> dict:
    rects = np.array([[r.row_range[0], r.row_range[1], r.col_range[0], r.col_range[1]] for r in part.regions],
                     dtype=float).reshape(-1, 4)
    return {
        "meta.partition": rects,
        "meta.region_totals": np.array([r.total_events for r in part.regions], dtype=float),
        "meta.grid": np.array(part.shape, dtype=float),
        "meta.model": np.array([mcfg.K, mcfg.d_x, mcfg.mlp_hidden, mcfg.window, mcfg.var_floor]),
        "meta.widths": np.array(mcfg.widths, dtype=float),
    }


def load_model(path):
    """Restore (params, partition) from a checkpoint written by ``train``."""
    tensors = training.load_checkpoint(path)
    try:
        K, d_x, hidden, window, floor = tensors["meta.model"]
        widths = tuple(int(w) for w in tensors["meta.widths"])
        I, J = (int(v) for v in tensors["meta.grid"])
        rects = tensors["meta.partition"].astype(int)
    except KeyError as err:
        raise training.CheckpointError(f"{path}: missing metadata tensor {err}") from None
    mcfg = ModelConfig(widths=widths, K=int(K), d_x=int(d_x), mlp_hidden=int(hidden), window=int(window),
                       var_floor=float(floor))
    params = training.restore_params(tensors, init_params(mcfg, 0))
    part = subdivision.Partition.from_rects([tuple(r) for r in rects], (I, J))
    totals = tensors.get("meta.region_totals")
    if totals is not None:
        part = subdivision.Partition([replace(r, total_events=int(t)) for r, t in zip(part.regions, totals)],
                                     (I, J), part.tau)
    return params, part


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "data", "out")
    grid = load_data(cfg.data)
    splits = default_splits(grid, cfg.window)
    part = _partition_for(cfg, grid, splits)
    data = training.prepare_data(grid, part, weighting=cfg.weighting)
    mcfg = cfg.model_config(data.features.shape[2])
    params = init_params(mcfg, cfg.seed)
    result = training.fit(params, data, splits.train, splits.val, cfg.train_config(), log_path=cfg.log)
    tensors = params.snapshot()
    tensors.update(_meta_tensors(part, mcfg))
    training.save_checkpoint(cfg.out, tensors)
    print(json.dumps({"regions": len(part), "epochs": result.state.epoch, "best_epoch": result.state.best_epoch,
                      "best_val_loss": result.state.best_val, "hit_max_epochs": result.hit_max_epochs}))
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "ckpt", "data")
    params, part = load_model(cfg.ckpt)
    grid = load_data(cfg.data)
    if tuple(grid.shape) != tuple(part.shape):
        raise UsageError(f"checkpoint grid {part.shape} does not match data grid {grid.shape}")
    window = params.config.window
    splits = default_splits(grid, window)
    data = training.prepare_data(grid, part, weighting=cfg.weighting)
    val = evaluation.evaluate_split(params, data, splits.val, window)
    test = evaluation.evaluate_split(params, data, splits.test, window, threshold=val.report.threshold)
    base = evaluation.frequency_baseline(data.labels[splits.train])
    vt = training.split_targets(splits.val, window, data.n_slots)
    tt = training.split_targets(splits.test, window, data.n_slots)
    base_val = evaluation.evaluate_predictions(np.tile(base, (len(vt), 1)), data.labels[vt],
                                               threshold_source=(np.tile(base, (len(vt), 1)), data.labels[vt]))
    base_test = evaluation.evaluate_predictions(np.tile(base, (len(tt), 1)), data.labels[tt],
                                                threshold=base_val.threshold)
    lines = [
        val.report.to_json(model="hrcf", split="val"),
        test.report.to_json(model="hrcf", split="test"),
        base_val.to_json(model="frequency", split="val"),
        base_test.to_json(model="frequency", split="test"),
    ]
    text = "\n".join(lines) + "\n"
    if cfg.report:
        Path(cfg.report).write_text(text)
    for rep, name in ((val.report, "hrcf val"), (test.report, "hrcf test"),
                      (base_val, "frequency val"), (base_test, "frequency test")):
        print(f"{name:15s} F1 {rep.f1:.4f}  Acc {rep.accuracy:.4f}  threshold {rep.threshold:.4f}")
    return EXIT_OK


def cmd_raster(cfg: RunConfig) -> int:
    _require(cfg, "ckpt", "data", "out")
    params, part = load_model(cfg.ckpt)
    grid = load_data(cfg.data)
    window = params.config.window
    data = training.prepare_data(grid, part, weighting=cfg.weighting)
    if cfg.date:
        slot = (date.fromisoformat(cfg.date) - grid.start).days * 24 // grid.slot_hours
    elif cfg.slot is not None:
        slot = cfg.slot
    else:
        slot = grid.n_slots  # forecast the day after the data ends
    if not window <= slot <= grid.n_slots:
        raise UsageError(f"slot {slot} needs {window} preceding slots inside [0, {grid.n_slots})")
    X = data.windows(np.array([slot]), window)
    gauss = predict_gaussians(X, params, data.operator(1))
    rows = cfg.rows or part.shape[0]
    cols = cfg.cols or part.shape[1]
    raster = rasterize_density(gauss, part, rows, cols)
    evaluation.export_raster(raster, cfg.out, cfg.format)
    print(json.dumps({"slot": int(slot), "date": (grid.start + timedelta(hours=grid.slot_hours * slot)).isoformat(),
                      "rows": rows, "cols": cols, "out": cfg.out}))
    return EXIT_OK


COMMANDS = {
    "prepare": (cmd_prepare, "CSV events -> processed dataset", ["input", "data_config", "rows", "cols", "out"]),
    "synth": (cmd_synth, "generate the synthetic dataset",
              ["slots", "seed", "rows", "cols", "start", "ar_coef", "noise_std", "level", "out"]),
    "subdivide": (cmd_subdivide, "emit the region partition and sparsity stats",
                  ["data", "tau", "include_corners", "weighting", "graph_out", "window", "out"]),
    "train": (cmd_train, "fit the model; write checkpoint and training log",
              ["data", "partition", "tau", "weighting", "widths", "cheb_k", "mlp_hidden", "window", "lr", "batch",
               "patience", "clip_norm", "weight_decay", "epochs", "objective", "seed", "log", "out"]),
    "eval": (cmd_eval, "score a checkpoint on validation and test splits", ["ckpt", "data", "weighting", "report"]),
    "raster": (cmd_raster, "render a forecast heatmap at any resolution",
               ["ckpt", "data", "slot", "date", "rows", "cols", "format", "weighting", "out"]),
}

_HELP = {
    "input": "raw delimited event file",
    "data_config": "key=value data config (bbox, rows, cols, slot_hours, categories, holidays, col_*)",
    "data": "processed dataset (GDF1)",
    "out": "output path",
    "slots": "number of daily slots",
    "rows": "grid / raster rows",
    "cols": "grid / raster columns",
    "start": "first slot date (ISO)",
    "ar_coef": "AR(1) coefficient of daily totals",
    "noise_std": "AR(1) noise standard deviation",
    "level": "AR(1) mean level",
    "tau": "subdivision event threshold",
    "partition": "partition file from `subdivide` (otherwise computed with --tau)",
    "include_corners": "treat corner-only contact as adjacency",
    "weighting": "edge weights: distance or gaussian",
    "graph_out": "also write the region graph edge list here",
    "widths": "comma-separated GCGRU hidden widths",
    "cheb_k": "Chebyshev order K",
    "mlp_hidden": "hidden width of the density heads",
    "window": "input window length",
    "lr": "Adam learning rate",
    "batch": "windows per batch",
    "patience": "early-stop tolerance in epochs",
    "clip_norm": "global gradient-norm bound",
    "weight_decay": "L2 coefficient",
    "epochs": "maximum epochs",
    "objective": "bce or nll",
    "seed": "random seed",
    "log": "line-delimited JSON training log",
    "ckpt": "checkpoint path",
    "report": "write metrics as JSON lines here",
    "slot": "target slot index (default: the slot after the data)",
    "date": "target date (ISO), alternative to --slot",
    "format": "pgm or csv (default: from the --out suffix)",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hrcf", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (_, help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key=value config file; flags override it")
        for opt in opts:
            flag = "--" + opt.replace("_", "-")
            if opt == "include_corners":
                p.add_argument(flag, action="store_const", const=True, default=None, help=_HELP[opt])
            else:
                p.add_argument(flag, default=None, help=_HELP[opt])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = merge_config(args)
        return COMMANDS[args.command][0](cfg)
    except UsageError as err:
        print(f"hrcf {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError) as err:
        if isinstance(err, DataFormatError):
            print(f"hrcf {args.command}: {err}", file=sys.stderr)
            return EXIT_IO
        print(f"hrcf {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, training.CheckpointError) as err:
        print(f"hrcf {args.command}: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except (GradientError, training.TrainingError, FloatingPointError) as err:
        print(f"hrcf {args.command}: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
