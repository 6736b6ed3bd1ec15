"""
firecast - Forest-fire many-agent simulation and reconstruction-free forecasting of an agent of interest.
"""

from .checkpoint import inspect_checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config, write_snapshot
from .dataset import (
    AOISpec,
    Chunk,
    ChunkDataset,
    DatasetManifest,
    LabelMode,
    aoi_grid_coords,
    chunk_trajectory,
    decode_rgb,
    expected_chunk_count,
    extract_aoi_labels,
    generate_split,
    read_dataset,
    render_rgb,
    write_dataset,
)
from .evaluation import (
    MetricsReport,
    compare_variants,
    cost_report,
    evaluate_windows,
    multi_aoi_sweep,
    predict_dataset,
    score_windows,
)
from .exceptions import (
    CheckpointError,
    ConfigurationError,
    DataError,
    DatasetError,
    DimensionError,
    FirecastError,
    NumericalError,
)
from .metrics import f1, roc_auc
from .models import (
    ModelSpec,
    RolloutOutput,
    Variant,
    build_model,
    count_activations,
    count_params,
    describe_layers,
)
from .optim import Adam, adam_step, gradcheck
from .plugins import BatchContext, EpochContext, ErrorContext, HookType, PluginManager
from .simulator import CellState, SimParams, SimState, init_forest, run, run_batch, step, summarize
from .training import TrainConfig, Trainer, train

from .version import __version__
__all__ = [
    "AOISpec",
    "Adam",
    "BatchContext",
    "CellState",
    "CheckpointError",
    "Chunk",
    "ChunkDataset",
    "ConfigurationError",
    "DataError",
    "DatasetError",
    "DatasetManifest",
    "DimensionError",
    "EpochContext",
    "ErrorContext",
    "FirecastError",
    "HookType",
    "LabelMode",
    "MetricsReport",
    "ModelSpec",
    "NumericalError",
    "PluginManager",
    "RolloutOutput",
    "RunConfig",
    "SimParams",
    "SimState",
    "TrainConfig",
    "Trainer",
    "Variant",
    "adam_step",
    "aoi_grid_coords",
    "build_model",
    "chunk_trajectory",
    "compare_variants",
    "cost_report",
    "count_activations",
    "count_params",
    "decode_rgb",
    "describe_layers",
    "evaluate_windows",
    "expected_chunk_count",
    "extract_aoi_labels",
    "f1",
    "generate_split",
    "gradcheck",
    "init_forest",
    "inspect_checkpoint",
    "load_checkpoint",
    "load_run_config",
    "multi_aoi_sweep",
    "predict_dataset",
    "read_dataset",
    "render_rgb",
    "roc_auc",
    "run",
    "run_batch",
    "save_checkpoint",
    "score_windows",
    "step",
    "summarize",
    "train",
    "write_dataset",
    "write_snapshot",
    "__version__",
]
