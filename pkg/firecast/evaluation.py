"""
Evaluation suite: per-window ROC/AUC and F1, the multi-AOI sweep, the
variant comparison and the parameter/activation cost report.

A window is identified by its chunk start step and named after the last
timestep of the chunk, so the chunk starting at step 0 is window "t59".
Each window is scored on the last prediction timestep only.
"""

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from .dataset import CHUNK_LEN, AOISpec, ChunkDataset, LabelMode, aoi_grid_coords
from .exceptions import FirecastError, SweepError, UndefinedMetricError
from .metrics import ConfusionCounts, RocCurve, confusion_counts, f1, roc_auc
from .models import Forecaster, ModelSpec, Variant, build_model, count_activations, count_params
from .training import LossCurves, TrainConfig, train
from .utils import format_count, log_array_summary

logger = logging.getLogger(__name__)

REFERENCE_COSTS: Dict[Variant, Tuple[float, float]] = {
    Variant.AOI: (262.7e3, 12.3e6),
    Variant.RECONSTRUCTION: (295.6e3, 12.8e6),
    Variant.CONVLSTM: (250.6e3, 103.8e6),
}

COST_COLUMNS = [
    "variant", "params", "params_ref", "activations", "activations_ref",
    "params_vs_aoi", "activations_vs_aoi", "activations_vs_aoi_ref",
]


def window_name(start_step: int, chunk_len: int = CHUNK_LEN) -> str:
    return f"t{start_step + chunk_len - 1}"


@dataclass
class WindowReport:
    """Metrics of one window position; auc is None when the window holds one class."""
    window: str
    start_step: int
    n: int
    positives: int
    auc: Optional[float]
    f1: float
    counts: ConfusionCounts
    roc: Optional[RocCurve] = None

    def to_row(self) -> Dict[str, Any]:
        return {
            "window": self.window,
            "start_step": self.start_step,
            "n": self.n,
            "positives": self.positives,
            "auc": self.auc,
            "f1": self.f1,
            **self.counts.to_dict(),
        }


@dataclass
class MetricsReport:
    """Per-window metrics of one model at one AOI, plus its loss curves when known."""
    variant: str
    aoi: Tuple[int, int]
    windows: List[WindowReport] = field(default_factory=list)
    curves: Optional[LossCurves] = None

    def window(self, name: str) -> WindowReport:
        for report in self.windows:
            if report.window == name:
                return report
        raise KeyError(name)

    def to_frame(self) -> pd.DataFrame:
        rows = [{"variant": self.variant, "aoi_x": self.aoi[0], "aoi_y": self.aoi[1],
                 **report.to_row()} for report in self.windows]
        return pd.DataFrame(rows)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "variant": self.variant,
            "aoi": list(self.aoi),
            "windows": [report.to_row() for report in self.windows],
        }
        if self.curves is not None and len(self.curves):
            data["final_train_loss"] = self.curves.train[-1]
            data["final_test_loss"] = self.curves.test[-1]
        return data


def predict_dataset(model: Forecaster, dataset: ChunkDataset, aoi: AOISpec,
                    batch_size: int = 8, max_workers: int = 1) -> np.ndarray:
    """
    AOI probability series for every chunk, in dataset order.

    The model is put in eval mode and only read, so batches may run on
    several threads.

    Returns:
        (N, T_pred) array of probabilities
    """
    model.eval()
    t_obs = model.spec.t_obs
    dtype = next(iter(model.parameters())).data.dtype
    batches = [list(range(i, min(i + batch_size, len(dataset))))
               for i in range(0, len(dataset), batch_size)]

    def _predict(indices: List[int]) -> np.ndarray:
        frames = dataset.observation_frames(indices, t_obs, dtype=dtype)
        return model.aoi_series(model.predict(frames), aoi)

    results: List[Optional[np.ndarray]] = [None] * len(batches)
    if max_workers <= 1:
        for index, indices in enumerate(batches):
            results[index] = _predict(indices)
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            future_to_index = {
                executor.submit(_predict, indices): index for index, indices in enumerate(batches)
            }
            for future in as_completed(future_to_index):
                results[future_to_index[future]] = future.result()

    if not batches:
        return np.zeros((0, model.spec.t_pred), dtype=dtype)
    scores = np.concatenate([r for r in results if r is not None], axis=0)
    log_array_summary(f"{model.spec.variant.value} AOI scores", scores)
    return scores


def score_windows(scores: np.ndarray, labels: np.ndarray, start_steps: Sequence[int],
                  chunk_len: int = CHUNK_LEN) -> List[WindowReport]:
    """
    Group chunks by start step and score the last prediction timestep.

    Args:
        scores: (N, T_pred) predicted probabilities
        labels: (N, T_pred) binary labels
        start_steps: Start step of each chunk
        chunk_len: Chunk length used to name windows

    Returns:
        One WindowReport per distinct start step, in increasing order
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    start_steps = np.asarray(start_steps)
    reports = []
    for start in np.unique(start_steps):
        rows = np.flatnonzero(start_steps == start)
        window_scores = scores[rows, -1]
        window_labels = labels[rows, -1]
        name = window_name(int(start), chunk_len)
        try:
            curve: Optional[RocCurve] = roc_auc(window_scores, window_labels)
        except UndefinedMetricError as e:
            logger.warning(f"AUC undefined for window {name}: {e}")
            curve = None
        reports.append(WindowReport(
            window=name,
            start_step=int(start),
            n=int(rows.size),
            positives=int(np.count_nonzero(window_labels)),
            auc=curve.auc if curve is not None else None,
            f1=f1(window_scores, window_labels),
            counts=confusion_counts(window_scores, window_labels),
            roc=curve,
        ))
    return reports


def evaluate_windows(model: Forecaster, dataset: ChunkDataset, aoi: AOISpec,
                     label_mode: Optional[Union[LabelMode, str]] = None,
                     batch_size: int = 8, max_workers: int = 1) -> MetricsReport:
    """
    Per-window metrics of a trained model on a test split.

    Map variants are scored at the AOI pixel, so every variant sees the same
    label stream.
    """
    scores = predict_dataset(model, dataset, aoi, batch_size, max_workers)
    labels = dataset.aoi_targets(range(len(dataset)), aoi, model.spec.t_obs, label_mode)
    start_steps = [chunk.start_step for chunk in dataset.chunks]
    windows = score_windows(scores, labels, start_steps)
    logger.info(
        f"Evaluated {model.spec.variant.value} model at AOI {aoi.as_tuple()} on "
        f"{len(dataset)} chunks in {len(windows)} window(s)"
    )
    return MetricsReport(variant=model.spec.variant.value, aoi=aoi.as_tuple(), windows=windows)


def oracle_report(dataset: ChunkDataset, aoi: AOISpec, t_obs: int = 10,
                  label_mode: Optional[Union[LabelMode, str]] = None) -> MetricsReport:
    """Score the ground-truth labels as if they were predictions."""
    labels = dataset.aoi_targets(range(len(dataset)), aoi, t_obs, label_mode)
    start_steps = [chunk.start_step for chunk in dataset.chunks]
    windows = score_windows(labels, labels, start_steps)
    return MetricsReport(variant="oracle", aoi=aoi.as_tuple(), windows=windows)


@dataclass
class SweepResult:
    aoi: Tuple[int, int]
    seed: int
    report: MetricsReport

    def to_rows(self) -> List[Dict[str, Any]]:
        return [{"aoi_x": self.aoi[0], "aoi_y": self.aoi[1], "seed": self.seed,
                 **window.to_row()} for window in self.report.windows]


def multi_aoi_sweep(spec: ModelSpec, train_data: ChunkDataset, test_data: ChunkDataset,
                    config: TrainConfig,
                    aois: Optional[Sequence[AOISpec]] = None) -> List[SweepResult]:
    """
    Train and evaluate one AOI model per coordinate.

    The i-th model uses seed config.seed + i for initialization and shuffling.

    Args:
        spec: AOI-variant model spec
        train_data: Training split
        test_data: Test split
        config: Base training config; aoi and seed are replaced per coordinate
        aois: Coordinates; the 3 x 3 grid of aoi_grid_coords by default

    Raises:
        SweepError: Wrapping the failure of any single AOI
    """
    if aois is None:
        aois = aoi_grid_coords(spec.width, spec.height)
    results = []
    for index, aoi in enumerate(aois):
        seed = config.seed + index
        aoi_config = dataclasses.replace(config, aoi=aoi.as_tuple(), seed=seed)
        try:
            model = build_model(spec, seed=seed)
            outcome = train(model, train_data, aoi_config, test_data)
            report = evaluate_windows(model, test_data, aoi, aoi_config.label_mode)
        except FirecastError as e:
            raise SweepError(aoi.as_tuple(), e) from e
        report.curves = outcome.curves
        results.append(SweepResult(aoi=aoi.as_tuple(), seed=seed, report=report))
        logger.info(f"Sweep {index + 1}/{len(aois)}: AOI {aoi.as_tuple()} seed {seed} done")
    return results


def compare_variants(specs: Sequence[ModelSpec], train_data: ChunkDataset,
                     test_data: ChunkDataset, config: TrainConfig) -> List[MetricsReport]:
    """Train each spec with the same config and evaluate all at config.aoi."""
    reports = []
    for spec in specs:
        model = build_model(spec, seed=config.seed)
        outcome = train(model, train_data, config, test_data)
        report = evaluate_windows(model, test_data, config.aoi_spec, config.label_mode)
        report.curves = outcome.curves
        reports.append(report)
    return reports


def comparison_frame(reports: Sequence[MetricsReport]) -> pd.DataFrame:
    """AUC per window (rows) and variant (columns)."""
    if not reports:
        return pd.DataFrame()
    frame = pd.concat([report.to_frame() for report in reports], ignore_index=True)
    return frame.pivot(index="window", columns="variant", values="auc")


def cost_report(specs: Sequence[ModelSpec]) -> pd.DataFrame:
    """
    Parameter and activation counts per spec next to the reference table,
    with ratios against the AOI spec when one is listed.
    """
    if not specs:
        return pd.DataFrame(columns=COST_COLUMNS)

    rows = []
    for spec in specs:
        params_ref, activations_ref = REFERENCE_COSTS[spec.variant]
        rows.append({
            "variant": spec.variant.value,
            "params": count_params(spec),
            "params_ref": params_ref,
            "activations": count_activations(spec),
            "activations_ref": activations_ref,
        })
    frame = pd.DataFrame(rows)

    base = frame[frame["variant"] == Variant.AOI.value]
    if len(base):
        frame["params_vs_aoi"] = frame["params"] / base["params"].iloc[0]
        frame["activations_vs_aoi"] = frame["activations"] / base["activations"].iloc[0]
    else:
        frame["params_vs_aoi"] = np.nan
        frame["activations_vs_aoi"] = np.nan
    frame["activations_vs_aoi_ref"] = frame["activations_ref"] / REFERENCE_COSTS[Variant.AOI][1]
    return frame[COST_COLUMNS]


def format_cost_table(frame: pd.DataFrame) -> str:
    """Human-readable rendering of a cost report."""
    if frame.empty:
        return "(no models)"
    shown = frame.copy()
    for column in ("params", "params_ref", "activations", "activations_ref"):
        shown[column] = shown[column].map(format_count)
    for column in ("params_vs_aoi", "activations_vs_aoi", "activations_vs_aoi_ref"):
        shown[column] = shown[column].map(lambda v: f"{v:.2f}x")
    return shown.to_string(index=False)


def _prepare(path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_window_csv(reports: Sequence[MetricsReport], path: Union[str, Path]) -> Path:
    """One row per (report, window)."""
    frames = [report.to_frame() for report in reports]
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    path = _prepare(path)
    frame.to_csv(path, index=False)
    return path


def write_roc_csv(reports: Sequence[MetricsReport], path: Union[str, Path]) -> Path:
    """ROC points: one row per (report, window, threshold)."""
    rows = []
    for report in reports:
        for window in report.windows:
            if window.roc is None:
                continue
            for threshold, fpr, tpr in zip(window.roc.thresholds, window.roc.fpr, window.roc.tpr):
                rows.append({"variant": report.variant, "aoi_x": report.aoi[0],
                             "aoi_y": report.aoi[1], "window": window.window,
                             "threshold": float(threshold), "fpr": float(fpr), "tpr": float(tpr)})
    path = _prepare(path)
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def write_sweep_csv(results: Sequence[SweepResult], path: Union[str, Path]) -> Path:
    rows = [row for result in results for row in result.to_rows()]
    path = _prepare(path)
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def write_cost_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = _prepare(path)
    frame.to_csv(path, index=False)
    return path


def write_summary_yaml(summary: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = _prepare(path)
    with open(path, "w") as handle:
        yaml.safe_dump(summary, handle, sort_keys=False)
    return path
