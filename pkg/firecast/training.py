"""
Training loop: mean BCE over the prediction window, full backpropagation
through time, one Adam update per batch, seeded shuffling.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .checkpoint import save_checkpoint
from .dataset import AOISpec, ChunkDataset, LabelMode
from .exceptions import (
    ConfigurationError,
    DatasetError,
    DimensionError,
    NonFiniteLossError,
    NumericalError,
)
from .layers import BCE_EPS, bce_loss
from .models import Forecaster
from .optim import Adam
from .plugins import BatchContext, EpochContext, ErrorContext, HookType, PluginManager
from .utils import limit_threads

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """
    Training hyperparameters.

    Attributes:
        lr: Adam learning rate; 0 freezes the parameters
        batch_size: Chunks per Adam update
        epochs: Passes over the training split
        seed: Seed of the shuffling generator and of model initialization
        label_mode: "instantaneous" or "latched" burning labels
        aoi: (x, y) of the agent of interest
        clamp_eps: BCE probability clamp
        threads: Cap on BLAS threads (1 gives the deterministic mode)
        progress: Show a progress bar over epochs
    """
    lr: float = 5e-6
    batch_size: int = 4
    epochs: int = 100
    seed: int = 0
    label_mode: str = LabelMode.INSTANTANEOUS.value
    aoi: Tuple[int, int] = (125, 125)
    clamp_eps: float = BCE_EPS
    threads: Optional[int] = None
    progress: bool = False

    def __post_init__(self):
        self.aoi = (int(self.aoi[0]), int(self.aoi[1]))
        self.validate()

    def validate(self):
        if not math.isfinite(self.lr) or self.lr < 0:
            raise ConfigurationError(f"lr must be a finite value >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.clamp_eps < 0.5:
            raise ConfigurationError(f"clamp_eps must be in (0, 0.5), got {self.clamp_eps}")
        if self.threads is not None and self.threads < 1:
            raise ConfigurationError(f"threads must be >= 1, got {self.threads}")
        try:
            LabelMode(self.label_mode)
        except ValueError as e:
            raise ConfigurationError(f"label_mode must be one of "
                                     f"{[m.value for m in LabelMode]}, got {self.label_mode!r}") from e

    @property
    def aoi_spec(self) -> AOISpec:
        return AOISpec(*self.aoi)

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["aoi"] = list(self.aoi)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"Unknown train field(s): {', '.join(unknown)}")
        return cls(**data)


@dataclass
class LossCurves:
    """Per-epoch mean train loss and (when a test split is given) test loss."""
    train: List[float] = field(default_factory=list)
    test: List[Optional[float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "epoch": np.arange(1, len(self.train) + 1),
            "train_loss": self.train,
            "test_loss": self.test,
        })


@dataclass
class TrainResult:
    model: Forecaster
    curves: LossCurves
    config: TrainConfig
    error: Optional[Exception] = None

    @property
    def completed(self) -> bool:
        return self.error is None

    def save(self, path: Union[str, Path]) -> Path:
        return save_checkpoint(self.model, path)


def batch_targets(model: Forecaster, dataset: ChunkDataset, indices: Sequence[int],
                  config: TrainConfig, dtype: Any = np.float32) -> np.ndarray:
    """Labels matching the model's output: AOI series or burning-mask maps."""
    t_obs = model.spec.t_obs
    if model.spec.is_map:
        return dataset.mask_targets(indices, t_obs, config.label_mode, dtype=dtype)
    return dataset.aoi_targets(indices, config.aoi_spec, t_obs, config.label_mode, dtype=dtype)


class Trainer:
    """
    Owns a model, its Adam optimizer and the training hooks.

    Example:
        trainer = Trainer(model, train_data, test_data, TrainConfig(epochs=20))
        trainer.register_epoch_end_hook(lambda ctx: print(ctx.train_loss))
        result = trainer.fit()
    """

    def __init__(self, model: Forecaster, train_data: ChunkDataset,
                 test_data: Optional[ChunkDataset] = None,
                 config: Optional[TrainConfig] = None):
        self.model = model
        self.train_data = train_data
        self.test_data = test_data
        self.config = config or TrainConfig()
        self._check_compatible()

        self.optimizer = Adam(model.named_parameters(), lr=self.config.lr)
        self.rng = np.random.default_rng(self.config.seed)
        self.plugin_manager = PluginManager()
        self.curves = LossCurves()
        self.dtype = next(iter(model.parameters())).data.dtype

        logger.info(
            f"Trainer initialized: {model.spec.variant.value} model, "
            f"{len(train_data)} train / {len(test_data) if test_data else 0} test chunks, "
            f"lr={self.config.lr}, batch_size={self.config.batch_size}"
        )

    def _check_compatible(self):
        if len(self.train_data) == 0:
            raise DatasetError("Training split is empty")
        spec = self.model.spec
        for data in (self.train_data, self.test_data):
            if data is None or len(data) == 0:
                continue
            height, width = data.grid_shape
            if (height, width) != (spec.height, spec.width):
                axis = "height" if height != spec.height else "width"
                raise DimensionError(
                    f"Dataset grid {height}x{width} does not match model "
                    f"{spec.height}x{spec.width}", axis=axis
                )
        if not spec.is_map:
            self.config.aoi_spec.validate(spec.width, spec.height)

    def register_batch_end_hook(self, hook_func: Callable[[BatchContext], None]):
        self.plugin_manager.register_hook(HookType.BATCH_END, hook_func)

    def register_epoch_end_hook(self, hook_func: Callable[[EpochContext], None]):
        self.plugin_manager.register_hook(HookType.EPOCH_END, hook_func)

    def register_error_hook(self, hook_func: Callable[[ErrorContext], None]):
        """
        Register a training-error hook.

        Args:
            hook_func: Called with an ErrorContext; may call mark_handled()
        """
        self.plugin_manager.register_hook(HookType.TRAIN_ERROR, hook_func)

    def unregister_hook(self, hook_type: HookType, hook_func: Callable):
        self.plugin_manager.unregister_hook(hook_type, hook_func)

    def _batches(self, size: int, shuffle: bool) -> List[np.ndarray]:
        order = self.rng.permutation(size) if shuffle else np.arange(size)
        return [order[i:i + self.config.batch_size]
                for i in range(0, size, self.config.batch_size)]

    def train_epoch(self, epoch: int) -> float:
        """
        One pass over the training split.

        Returns:
            Mean BCE over every prediction target of the split

        Raises:
            NonFiniteLossError: If a batch loss is NaN or infinite
        """
        self.model.train()
        total = 0.0
        for batch, indices in enumerate(self._batches(len(self.train_data), shuffle=True)):
            chunk_ids = [self.train_data.chunks[i].key for i in indices]
            frames = self.train_data.observation_frames(indices, self.model.spec.t_obs,
                                                        dtype=self.dtype)
            targets = batch_targets(self.model, self.train_data, indices, self.config, self.dtype)

            self.optimizer.zero_grad()
            probs, cache = self.model.forward(frames)
            loss, dprobs = bce_loss(probs, targets, self.config.clamp_eps)
            if not math.isfinite(loss):
                logger.error(f"Non-finite loss {loss} at epoch {epoch}, batch {batch}")
                raise NonFiniteLossError(epoch, batch, chunk_ids)
            self.model.backward(dprobs, cache)
            self.optimizer.step()

            total += loss * len(indices)
            logger.debug(f"Epoch {epoch} batch {batch}: loss={loss:.6f}")
            self.plugin_manager.execute_batch_end_hooks(
                BatchContext(epoch, batch, loss, chunk_ids)
            )
        return total / len(self.train_data)

    def evaluate_loss(self, data: ChunkDataset) -> float:
        """Mean BCE of the model in eval mode over a split."""
        self.model.eval()
        total = 0.0
        for indices in self._batches(len(data), shuffle=False):
            frames = data.observation_frames(indices, self.model.spec.t_obs, dtype=self.dtype)
            targets = batch_targets(self.model, data, indices, self.config, self.dtype)
            probs, _ = self.model.forward(frames)
            loss, _ = bce_loss(probs, targets, self.config.clamp_eps)
            total += loss * len(indices)
        return total / len(data)

    def fit(self) -> TrainResult:
        """
        Train for config.epochs epochs, evaluating the test split after each.

        Returns:
            TrainResult with the trained model and the loss curves

        Raises:
            NumericalError: Unless an error hook marks it handled
        """
        error: Optional[Exception] = None
        epochs = range(1, self.config.epochs + 1)
        with limit_threads(self.config.threads):
            for epoch in tqdm(epochs, desc="epochs", disable=not self.config.progress):
                try:
                    train_loss = self.train_epoch(epoch)
                except NumericalError as e:
                    context = ErrorContext(e, epoch)
                    self.plugin_manager.execute_error_hooks(context)
                    if not context.handled:
                        raise
                    logger.warning(f"Training stopped at epoch {epoch}: {e}")
                    error = e
                    break

                test_loss = None
                if self.test_data is not None and len(self.test_data):
                    test_loss = self.evaluate_loss(self.test_data)
                self.curves.train.append(train_loss)
                self.curves.test.append(test_loss)
                test_text = f"{test_loss:.6f}" if test_loss is not None else "n/a"
                logger.info(
                    f"Epoch {epoch}/{self.config.epochs}: train_loss={train_loss:.6f} "
                    f"test_loss={test_text}"
                )
                self.plugin_manager.execute_epoch_end_hooks(
                    EpochContext(epoch, train_loss, test_loss, self.model)
                )

        self.model.eval()
        return TrainResult(model=self.model, curves=self.curves, config=self.config, error=error)


def train(model: Forecaster, train_data: ChunkDataset, config: TrainConfig,
          test_data: Optional[ChunkDataset] = None) -> TrainResult:
    """Train a model with a fresh Trainer; see Trainer.fit."""
    return Trainer(model, train_data, test_data, config).fit()


def write_loss_csv(curves: LossCurves, path: Union[str, Path]) -> Path:
    """Write epoch, train_loss, test_loss rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    curves.to_frame().to_csv(path, index=False)
    return path
