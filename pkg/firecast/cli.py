"""
Command-line entry point: ``firecast simulate | dataset | train | eval | cost``.

Every subcommand resolves its configuration (profile, optional YAML file,
flags), writes ``resolved_config.yaml`` into the run directory and places
all outputs next to it. Exit codes: 0 success, 2 configuration error,
3 data or dimension error, 4 numeric failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence

import numpy as np
import pandas as pd

from .checkpoint import checkpoint_name, load_checkpoint
from .config import PROFILES, RunConfig, load_run_config, write_snapshot
from .dataset import (
    AOISpec,
    ChunkDataset,
    check_split_hygiene,
    generate_split,
    palette_from_dict,
    read_manifest,
    render_rgb,
    write_dataset,
    write_ppm,
)
from .evaluation import (
    compare_variants,
    comparison_frame,
    cost_report,
    evaluate_windows,
    format_cost_table,
    multi_aoi_sweep,
    oracle_report,
    write_cost_csv,
    write_roc_csv,
    write_summary_yaml,
    write_sweep_csv,
    write_window_csv,
)
from .exceptions import (
    ConfigurationError,
    DataError,
    DimensionError,
    FirecastError,
    NumericalError,
    SweepError,
)
from .models import ModelSpec, Variant, build_model
from .simulator import derive_sim_params, run_batch, summarize
from .training import Trainer, write_loss_csv
from .utils import limit_threads
from .version import __version__

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the documented exit code."""
    if isinstance(error, SweepError):
        return exit_code_for(error.cause)
    if isinstance(error, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(error, (DataError, DimensionError)):
        return EXIT_DATA
    if isinstance(error, NumericalError):
        return EXIT_NUMERIC
    return EXIT_FAILURE


def _set(overrides: Dict[str, Any], section: str, key: str, value: Any):
    if value is not None:
        overrides.setdefault(section, {})[key] = value


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Nested config overrides from the flags that were given."""
    overrides: Dict[str, Any] = {}
    get = lambda name: getattr(args, name, None)  # noqa: E731

    _set(overrides, "output", "run_dir", get("run_dir"))
    _set(overrides, "output", "dataset_dir", get("dataset"))
    _set(overrides, "output", "checkpoint", get("checkpoint"))
    _set(overrides, "train", "threads", get("threads"))
    if get("seed") is not None:
        _set(overrides, "sim", "rng_seed", args.seed)
        _set(overrides, "train", "seed", args.seed)
    _set(overrides, "sim", "density", get("density"))
    _set(overrides, "sim", "max_steps", get("max_steps"))
    if get("grid") is not None:
        _set(overrides, "sim", "width", args.grid)
        _set(overrides, "sim", "height", args.grid)
        _set(overrides, "model", "width", args.grid)
        _set(overrides, "model", "height", args.grid)
    _set(overrides, "dataset", "train_sims", get("sims"))
    _set(overrides, "dataset", "train_sims", get("train_sims"))
    _set(overrides, "dataset", "test_sims", get("test_sims"))
    _set(overrides, "dataset", "max_workers", get("workers"))
    if get("export_frames"):
        _set(overrides, "dataset", "export_frames", True)
    if get("label_mode") is not None:
        _set(overrides, "dataset", "label_mode", args.label_mode)
        _set(overrides, "train", "label_mode", args.label_mode)
    _set(overrides, "model", "variant", get("variant"))
    if get("aoi") is not None:
        _set(overrides, "train", "aoi", list(AOISpec.parse(args.aoi).as_tuple()))
    _set(overrides, "train", "epochs", get("epochs"))
    _set(overrides, "train", "lr", get("lr"))
    _set(overrides, "train", "batch_size", get("batch_size"))
    if get("progress"):
        _set(overrides, "train", "progress", True)
    return overrides


def _export_frames(states: np.ndarray, palette: Dict[str, Any], directory: Path, prefix: str):
    directory.mkdir(parents=True, exist_ok=True)
    frames = render_rgb(states, palette_from_dict(palette))
    for index, frame in enumerate(frames):
        write_ppm(frame, directory / f"{prefix}_{index:04d}.ppm")


def cmd_simulate(config: RunConfig) -> Dict[str, Any]:
    """Run dataset.train_sims simulations; write trajectories and a summary."""
    run_dir = Path(config.output.run_dir)
    sim_dir = run_dir / "simulations"
    sim_dir.mkdir(parents=True, exist_ok=True)

    sim_ids = list(range(config.dataset.first_sim_id,
                         config.dataset.first_sim_id + config.dataset.train_sims))
    per_sim = [derive_sim_params(config.sim, sim_id) for sim_id in sim_ids]
    trajectories = run_batch(per_sim, max_workers=config.dataset.max_workers)

    rows = []
    for sim_id, params, trajectory in zip(sim_ids, per_sim, trajectories):
        states = np.stack([state.states for state in trajectory])
        np.save(sim_dir / f"sim_{sim_id:05d}.npy", states)
        if config.dataset.export_frames:
            _export_frames(states, config.dataset.palette, run_dir / "frames", f"sim{sim_id:05d}")
        rows.append({"sim_id": sim_id, "rng_seed": params.rng_seed,
                     **summarize(trajectory).to_dict()})

    frame = pd.DataFrame(rows)
    frame.to_csv(run_dir / "summary.csv", index=False)
    summary = {
        "simulations": len(rows),
        "density": config.sim.density,
        "mean_burned_fraction": float(frame["burned_fraction"].mean()) if rows else None,
        "mean_steps": float(frame["steps"].mean()) if rows else None,
    }
    write_summary_yaml(summary, run_dir / "summary.yaml")
    logger.info(f"Simulated {len(rows)} forest(s) into {sim_dir}")
    return summary


def cmd_dataset(config: RunConfig) -> Dict[str, Any]:
    """Generate disjoint train and test splits."""
    options = config.dataset
    root = config.output.resolved_dataset_dir()
    palette = palette_from_dict(options.palette)
    common = dict(chunk_len=options.chunk_len, stride=options.stride,
                  label_mode=options.label_mode, palette=palette,
                  max_workers=options.max_workers)

    train_chunks, train_manifest = generate_split(
        config.sim, options.train_sims, options.first_sim_id, "train", **common)
    test_chunks, test_manifest = generate_split(
        config.sim, options.test_sims, options.first_sim_id + options.train_sims, "test", **common)
    check_split_hygiene(train_manifest, test_manifest)

    write_dataset(train_chunks, train_manifest, root / "train")
    write_dataset(test_chunks, test_manifest, root / "test")
    if options.export_frames and train_chunks:
        _export_frames(train_chunks[0].states, options.palette,
                       Path(config.output.run_dir) / "frames", "train_chunk0")

    summary = {
        "dataset_dir": str(root),
        "density": config.sim.density,
        "train_chunks": len(train_chunks),
        "test_chunks": len(test_chunks),
        "train_sim_ids": [r.sim_id for r in train_manifest.simulations],
        "test_sim_ids": [r.sim_id for r in test_manifest.simulations],
    }
    write_summary_yaml(summary, Path(config.output.run_dir) / "summary.yaml")
    return summary


def _load_split(root: Path, split: str, required: bool) -> Optional[ChunkDataset]:
    path = root / split
    if not (path / "manifest.yaml").exists():
        if required:
            raise DataError(f"No {split} split found under {root}")
        return None
    return ChunkDataset.load(path)


def cmd_train(config: RunConfig, sweep: bool = False, compare: bool = False) -> Dict[str, Any]:
    """Train one model (or a multi-AOI sweep, or all three variants) and save results."""
    run_dir = Path(config.output.run_dir)
    root = config.output.resolved_dataset_dir()
    train_data = _load_split(root, "train", required=True)
    test_data = _load_split(root, "test", required=sweep or compare)
    density = read_manifest(root / "train").density or config.sim.density

    if sweep:
        results = multi_aoi_sweep(config.model, train_data, test_data, config.train)
        write_sweep_csv(results, run_dir / "sweep.csv")
        return {"sweep": [{"aoi": list(r.aoi), "seed": r.seed} for r in results]}

    if compare:
        specs = [ModelSpec.from_dict({**config.model.to_dict(), "variant": variant.value})
                 for variant in Variant]
        reports = compare_variants(specs, train_data, test_data, config.train)
        write_window_csv(reports, run_dir / "windows.csv")
        comparison_frame(reports).to_csv(run_dir / "comparison.csv")
        return {"variants": [report.to_dict() for report in reports]}

    model = build_model(config.model, seed=config.train.seed)
    result = Trainer(model, train_data, test_data, config.train).fit()
    name = checkpoint_name(config.model.variant.value, density, config.train.aoi, config.train.seed)
    checkpoint = result.save(run_dir / "checkpoints" / name)
    write_loss_csv(result.curves, run_dir / "loss.csv")
    summary = {
        "checkpoint": str(checkpoint),
        "epochs": len(result.curves),
        "train_loss": result.curves.train,
        "test_loss": result.curves.test,
        "completed": result.completed,
    }
    write_summary_yaml(summary, run_dir / "summary.yaml")
    return summary


def cmd_eval(config: RunConfig, oracle: bool = False) -> Dict[str, Any]:
    """Per-window metrics of a checkpoint (or of the ground truth) on the test split."""
    run_dir = Path(config.output.run_dir)
    test_data = _load_split(config.output.resolved_dataset_dir(), "test", required=True)
    aoi = config.train.aoi_spec

    if oracle:
        report = oracle_report(test_data, aoi, config.model.t_obs, config.train.label_mode)
    else:
        if not config.output.checkpoint:
            raise ConfigurationError("eval needs output.checkpoint (--checkpoint) or --oracle")
        model = load_checkpoint(config.output.checkpoint)
        report = evaluate_windows(model, test_data, aoi, config.train.label_mode,
                                  max_workers=config.dataset.max_workers)

    write_window_csv([report], run_dir / "windows.csv")
    write_roc_csv([report], run_dir / "roc.csv")
    summary = report.to_dict()
    write_summary_yaml(summary, run_dir / "summary.yaml")
    return summary


def cmd_cost(config: RunConfig, paper_scale: bool = False) -> Dict[str, Any]:
    """Parameter and activation counts of all three variants."""
    base = ModelSpec() if paper_scale else config.model
    specs = [ModelSpec.from_dict({**base.to_dict(), "variant": variant.value})
             for variant in Variant]
    frame = cost_report(specs)
    write_cost_csv(frame, Path(config.output.run_dir) / "cost.csv")
    print(format_cost_table(frame))
    return {"rows": frame.to_dict(orient="records")}


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--profile", choices=sorted(PROFILES), help="Named default profile")
    parser.add_argument("--run-dir", help="Directory for outputs and the resolved config")
    parser.add_argument("--seed", type=int, help="Seed for simulations and training")
    parser.add_argument("--threads", type=int, help="Cap BLAS threads (1 = deterministic mode)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="firecast",
        description="Forest-fire simulation, dataset generation and AOI forecasting",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", help="Run simulations and summarize them")
    _add_common(simulate)
    simulate.add_argument("--density", type=float)
    simulate.add_argument("--sims", type=int, help="Number of simulations")
    simulate.add_argument("--grid", type=int, help="Square grid size")
    simulate.add_argument("--max-steps", type=int)
    simulate.add_argument("--workers", type=int)
    simulate.add_argument("--export-frames", action="store_true")

    dataset = sub.add_parser("dataset", help="Generate train/test chunk datasets")
    _add_common(dataset)
    dataset.add_argument("--density", type=float)
    dataset.add_argument("--train-sims", type=int)
    dataset.add_argument("--test-sims", type=int)
    dataset.add_argument("--grid", type=int, help="Square grid size")
    dataset.add_argument("--max-steps", type=int)
    dataset.add_argument("--label-mode", choices=["instantaneous", "latched"])
    dataset.add_argument("--dataset", help="Output dataset directory")
    dataset.add_argument("--workers", type=int)
    dataset.add_argument("--export-frames", action="store_true")

    train = sub.add_parser("train", help="Train a forecaster")
    _add_common(train)
    train.add_argument("--variant", choices=[v.value for v in Variant])
    train.add_argument("--aoi", help="Agent of interest as x,y")
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--label-mode", choices=["instantaneous", "latched"])
    train.add_argument("--dataset", help="Dataset directory with train/ and test/")
    train.add_argument("--progress", action="store_true")
    mode = train.add_mutually_exclusive_group()
    mode.add_argument("--sweep", action="store_true", help="Train one AOI model per grid AOI")
    mode.add_argument("--compare", action="store_true", help="Train and compare all variants")

    evaluate = sub.add_parser("eval", help="Per-window ROC/AUC and F1 on the test split")
    _add_common(evaluate)
    evaluate.add_argument("--checkpoint")
    evaluate.add_argument("--aoi", help="Agent of interest as x,y")
    evaluate.add_argument("--label-mode", choices=["instantaneous", "latched"])
    evaluate.add_argument("--dataset", help="Dataset directory with a test/ split")
    evaluate.add_argument("--workers", type=int)
    evaluate.add_argument("--oracle", action="store_true",
                          help="Score the ground truth instead of a model")

    cost = sub.add_parser("cost", help="Parameter and activation cost report")
    _add_common(cost)
    cost.add_argument("--paper-scale", "--full-scale", dest="paper_scale", action="store_true",
                      help="Use the 251 x 251 calibration instead of the configured model")
    return parser


def _dispatch(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    commands: Dict[str, Callable[[], Dict[str, Any]]] = {
        "simulate": lambda: cmd_simulate(config),
        "dataset": lambda: cmd_dataset(config),
        "train": lambda: cmd_train(config, sweep=args.sweep, compare=args.compare),
        "eval": lambda: cmd_eval(config, oracle=args.oracle),
        "cost": lambda: cmd_cost(config, paper_scale=args.paper_scale),
    }
    return commands[args.command]()


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        config = load_run_config(args.config, _overrides(args), args.profile)
        write_snapshot(config, config.output.run_dir)
        with limit_threads(config.train.threads):
            _dispatch(args, config)
    except FirecastError as e:
        code = exit_code_for(e)
        logger.error(f"{type(e).__name__}: {e}")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
