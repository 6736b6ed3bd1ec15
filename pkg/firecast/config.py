"""
Run configuration: one dataclass per concern, named profiles, YAML loading
with flag overrides and resolved-config snapshots.

Precedence is profile defaults < config file < command-line flags.
"""

import copy
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import yaml

from .dataset import CHUNK_LEN, CHUNK_STRIDE, DEFAULT_PALETTE, LabelMode, palette_to_dict
from .exceptions import ConfigurationError
from .models import ModelSpec
from .simulator import SimParams
from .training import TrainConfig
from .utils import log_config

logger = logging.getLogger(__name__)

SNAPSHOT_NAME = "resolved_config.yaml"

PROFILES: Dict[str, Dict[str, Any]] = {
    "paper": {},
    "full": {},
    "desk": {
        # Slower spread and longer smoulder keep the center AOI burning inside
        # the t59..t89 windows; 90 steps give four chunks per run.
        "sim": {"width": 64, "height": 64, "lam": 0.2, "q_die": 5.0, "max_steps": 90},
        "dataset": {"train_sims": 25, "test_sims": 25},
        "model": {
            "height": 64,
            "width": 64,
            "conv_strides": [2, 2, 1],
            "conv_paddings": [3, 1, 1],
        },
        "train": {"epochs": 20, "lr": 2e-3, "batch_size": 2, "aoi": [32, 32]},
    },
}


@dataclass
class DatasetOptions:
    """
    Dataset generation options.

    Test simulations take the sim ids right after the training ones, so the
    two splits never share a simulation.
    """
    train_sims: int = 20
    test_sims: int = 5
    first_sim_id: int = 0
    chunk_len: int = CHUNK_LEN
    stride: int = CHUNK_STRIDE
    label_mode: str = LabelMode.INSTANTANEOUS.value
    palette: Dict[str, Any] = field(default_factory=lambda: palette_to_dict(DEFAULT_PALETTE))
    max_workers: int = 4
    export_frames: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.train_sims < 0 or self.test_sims < 0:
            raise ConfigurationError(
                f"train_sims and test_sims must be >= 0, got {self.train_sims}/{self.test_sims}"
            )
        if self.chunk_len < 1 or self.stride < 1:
            raise ConfigurationError(
                f"chunk_len and stride must be >= 1, got {self.chunk_len}/{self.stride}"
            )
        if self.max_workers < 1:
            raise ConfigurationError(f"max_workers must be >= 1, got {self.max_workers}")
        try:
            LabelMode(self.label_mode)
        except ValueError as e:
            raise ConfigurationError(f"Unknown label_mode {self.label_mode!r}") from e


@dataclass
class OutputOptions:
    """Where runs write and where they read their inputs from."""
    run_dir: str = "runs/default"
    dataset_dir: Optional[str] = None
    checkpoint: Optional[str] = None

    def resolved_dataset_dir(self) -> Path:
        return Path(self.dataset_dir) if self.dataset_dir else Path(self.run_dir) / "dataset"


@dataclass
class RunConfig:
    profile: str = "paper"
    sim: SimParams = field(default_factory=SimParams)
    dataset: DatasetOptions = field(default_factory=DatasetOptions)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputOptions = field(default_factory=OutputOptions)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "profile": self.profile,
            "sim": self.sim.to_dict(),
            "dataset": dataclasses.asdict(self.dataset),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "output": dataclasses.asdict(self.output),
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        """
        Build a config from nested plain data.

        Raises:
            ConfigurationError: On unknown keys (named with their section) or invalid values
        """
        data = dict(data)
        unknown = sorted(set(data) - set(_SECTIONS) - {"profile"})
        if unknown:
            raise ConfigurationError(f"Unknown config section(s): {', '.join(unknown)}")
        sections = {}
        for name, section_cls in _SECTIONS.items():
            values = data.get(name) or {}
            if not isinstance(values, Mapping):
                raise ConfigurationError(f"Config section {name!r} must be a mapping")
            sections[name] = _build_section(name, section_cls, values)
        return cls(profile=data.get("profile", "paper"), **sections)


_SECTIONS = {
    "sim": SimParams,
    "dataset": DatasetOptions,
    "model": ModelSpec,
    "train": TrainConfig,
    "output": OutputOptions,
}


def _build_section(name: str, section_cls: Any, values: Mapping[str, Any]) -> Any:
    known = {f.name for f in dataclasses.fields(section_cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(
            f"Unknown config key(s): {', '.join(f'{name}.{key}' for key in unknown)}"
        )
    try:
        return section_cls(**values)
    except TypeError as e:
        raise ConfigurationError(f"Invalid {name} section: {e}") from e


def deep_merge(base: Dict[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    """Return base updated recursively with override; override wins."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def profile_defaults(name: str) -> Dict[str, Any]:
    if name not in PROFILES:
        raise ConfigurationError(f"Unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return copy.deepcopy(PROFILES[name])


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Mapping[str, Any]] = None,
                    profile: Optional[str] = None) -> RunConfig:
    """
    Resolve a run configuration.

    Args:
        path: Optional YAML config file
        overrides: Nested values from command-line flags
        profile: Profile name; falls back to the file's profile, then "paper"

    Returns:
        The validated RunConfig

    Raises:
        ConfigurationError: Missing file, malformed YAML, unknown keys or invalid values
    """
    file_data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Config file not found: {path}")
        try:
            file_data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Malformed config file {path}: {e}") from e
        if not isinstance(file_data, dict):
            raise ConfigurationError(f"Config file {path} must hold a mapping")

    name = profile or file_data.get("profile") or "paper"
    data = deep_merge(profile_defaults(name), file_data)
    data = deep_merge(data, overrides or {})
    data["profile"] = name
    config = RunConfig.from_dict(data)
    log_config("Resolved config", config.to_dict())
    return config


def write_snapshot(config: RunConfig, directory: Union[str, Path]) -> Path:
    """Write resolved_config.yaml into directory; loading it reproduces the run."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / SNAPSHOT_NAME
    path.write_text(config.to_yaml())
    logger.info(f"Wrote resolved config to {path}")
    return path
