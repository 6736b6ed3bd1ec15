"""
Forecast models: the AOI CNN-LSTM, the map-reconstruction CNN-LSTM and the
ConvLSTM baseline, plus parameter and activation accounting.

All three observe T_obs rendered frames and then roll out T_pred steps
autoregressively: during prediction the recurrent cell consumes a learned
projection of its own previous hidden state, never new observations.
Frames are batched as (N, T_obs, 3, H, W).
"""

import dataclasses
import enum
import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .dataset import CHUNK_LEN, AOISpec
from .exceptions import ConfigurationError, DimensionError
from .layers import (
    DEFAULT_DTYPE,
    Cache,
    ConvBlock,
    Conv2d,
    ConvLSTMCell,
    Linear,
    LSTMCell,
    Module,
    Tensor,
    UpConvBlock,
    center_fit_backward,
    center_fit_forward,
    conv_output_size,
    pool_output_size,
    relu_backward,
    relu_forward,
    sigmoid_backward,
    sigmoid_forward,
)

logger = logging.getLogger(__name__)

HIDDEN_SIZE = 64


class Variant(str, enum.Enum):
    AOI = "aoi"
    RECONSTRUCTION = "reconstruction"
    CONVLSTM = "convlstm"


@dataclass
class ModelSpec:
    """
    Architecture of a forecaster.

    Defaults are the full-scale (251 x 251) calibration. Encoder geometry is
    configurable so that smaller grids still fit the three-block stack.
    """
    variant: Variant = Variant.AOI
    height: int = 251
    width: int = 251
    in_channels: int = 3
    encoder_widths: Tuple[int, ...] = (32, 96, 160)
    conv_kernels: Tuple[int, ...] = (7, 3, 3)
    conv_strides: Tuple[int, ...] = (2, 2, 2)
    conv_paddings: Tuple[int, ...] = (0, 0, 0)
    pool_kernel: int = 3
    pool_stride: int = 2
    latent_dim: int = 64
    hidden_size: int = HIDDEN_SIZE
    decoder_hidden: int = 64
    recon_seed_size: int = 2
    recon_channels: int = 32
    recon_widths: Tuple[int, ...] = (32, 32, 16, 16, 8, 8, 8)
    convlstm_kernel: int = 3
    convlstm_widths: Tuple[int, ...] = (32, 16, 8)
    t_obs: int = 10
    t_pred: int = 50

    def __post_init__(self):
        self.variant = Variant(self.variant)
        for name in ("encoder_widths", "conv_kernels", "conv_strides", "conv_paddings",
                     "recon_widths", "convlstm_widths"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        """Raise ConfigurationError naming the first invalid field."""
        if self.hidden_size != HIDDEN_SIZE:
            raise ConfigurationError(f"hidden_size must be {HIDDEN_SIZE}, got {self.hidden_size}")
        if self.t_obs < 1 or self.t_pred < 0 or self.t_obs + self.t_pred != CHUNK_LEN:
            raise ConfigurationError(
                f"t_obs + t_pred must equal the chunk length {CHUNK_LEN}, "
                f"got {self.t_obs} + {self.t_pred}"
            )
        blocks = len(self.encoder_widths)
        for name in ("conv_kernels", "conv_strides", "conv_paddings"):
            if len(getattr(self, name)) != blocks:
                raise ConfigurationError(
                    f"{name} needs {blocks} entries to match encoder_widths"
                )
        if blocks < 1:
            raise ConfigurationError("encoder_widths needs at least one block")
        if self.height < 1 or self.width < 1:
            raise ConfigurationError(f"height and width must be >= 1, got {self.height}x{self.width}")
        if self.variant is Variant.CONVLSTM and not self.convlstm_widths:
            raise ConfigurationError("convlstm_widths needs at least one block")
        if self.variant is Variant.RECONSTRUCTION and \
                self.reconstruction_blocks() > len(self.recon_widths):
            raise ConfigurationError(
                f"recon_widths has {len(self.recon_widths)} entries, "
                f"{self.reconstruction_blocks()} upconvolution blocks are needed"
            )

    def reconstruction_blocks(self) -> int:
        """Number of x2 upconvolution blocks until the map covers the grid."""
        target = max(self.height, self.width)
        if target <= self.recon_seed_size:
            return 0
        return math.ceil(math.log2(target / self.recon_seed_size))

    @property
    def is_map(self) -> bool:
        return self.variant is not Variant.AOI

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["variant"] = self.variant.value
        return {key: list(value) if isinstance(value, tuple) else value
                for key, value in data.items()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"Unknown model field(s): {', '.join(unknown)}")
        return cls(**data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def spec_hash(self) -> str:
        """SHA-256 of the canonical YAML rendering."""
        return hashlib.sha256(self.to_yaml().encode("utf-8")).hexdigest()


@dataclass
class RolloutOutput:
    """
    Result of a rollout.

    Attributes:
        probs: (N, T_pred) for the AOI variant, (N, T_pred, H, W) for map variants
        hidden_trace: (N, T_obs + T_pred, 64) hidden vectors (spatially averaged
            for the ConvLSTM), when requested
    """
    probs: Tensor
    hidden_trace: Optional[Tensor] = None


# --------------------------------------------------------------------------
# Layer accounting
# --------------------------------------------------------------------------

@dataclass
class LayerInfo:
    """
    One row of a layer table.

    ``phase`` says how often the layer runs per sequence: once per observed
    frame ("obs"), once per prediction step ("pred") or on every step ("all").
    """
    name: str
    kind: str
    params: int
    output_shape: Tuple[int, ...]
    phase: str

    @property
    def size(self) -> int:
        return int(np.prod(self.output_shape))

    def calls(self, t_obs: int, t_pred: int) -> int:
        return {"obs": t_obs, "pred": t_pred, "all": t_obs + t_pred}[self.phase]


def encoder_shapes(spec: ModelSpec, blocks: Optional[int] = None) -> List[Tuple[int, int, int]]:
    """
    (C, H, W) after each conv and each pool of the encoder.

    Raises:
        DimensionError: If the input is too small for the stack
    """
    blocks = len(spec.encoder_widths) if blocks is None else blocks
    h, w = spec.height, spec.width
    shapes = []
    for index in range(blocks):
        kernel = spec.conv_kernels[index]
        stride = spec.conv_strides[index]
        padding = spec.conv_paddings[index]
        h = conv_output_size(h, kernel, stride, padding)
        w = conv_output_size(w, kernel, stride, padding)
        if h < 1 or w < 1:
            raise DimensionError(
                f"Input {spec.height}x{spec.width} too small for encoder conv {index + 1}",
                axis="height" if h < 1 else "width",
            )
        shapes.append((spec.encoder_widths[index], h, w))
        if spec.pool_kernel > h or spec.pool_kernel > w:
            raise DimensionError(
                f"Input {spec.height}x{spec.width} too small for encoder pool {index + 1}",
                axis="height" if spec.pool_kernel > h else "width",
            )
        h = pool_output_size(h, spec.pool_kernel, spec.pool_stride)
        w = pool_output_size(w, spec.pool_kernel, spec.pool_stride)
        shapes.append((spec.encoder_widths[index], h, w))
    return shapes


def encoder_trace(spec: ModelSpec, blocks: Optional[int] = None) -> List[int]:
    """Spatial height after each conv and pool, e.g. [123, 61, 30, 14, 6, 2]."""
    return [shape[1] for shape in encoder_shapes(spec, blocks)]


def _encoder_rows(spec: ModelSpec, blocks: int) -> List[LayerInfo]:
    rows = []
    shapes = encoder_shapes(spec, blocks)
    in_channels = spec.in_channels
    for index in range(blocks):
        out_channels = spec.encoder_widths[index]
        kernel = spec.conv_kernels[index]
        conv_shape, pool_shape = shapes[2 * index], shapes[2 * index + 1]
        prefix = f"encoder.blocks.{index}"
        rows += [
            LayerInfo(f"{prefix}.conv", "conv2d",
                      in_channels * out_channels * kernel * kernel + out_channels,
                      conv_shape, "obs"),
            LayerInfo(f"{prefix}.norm", "batchnorm2d", 2 * out_channels, conv_shape, "obs"),
            LayerInfo(f"{prefix}.relu", "relu", 0, conv_shape, "obs"),
            LayerInfo(f"{prefix}.pool", "maxpool2d", 0, pool_shape, "obs"),
        ]
        in_channels = out_channels
    return rows


def _lstm_rows(name: str, input_size: int, hidden: int) -> List[LayerInfo]:
    params = 4 * (input_size * hidden + hidden * hidden + 2 * hidden)
    return [
        LayerInfo(f"{name}.gates_pre", "lstm", params, (4 * hidden,), "all"),
        LayerInfo(f"{name}.gates", "lstm", 0, (4 * hidden,), "all"),
        LayerInfo(f"{name}.cell", "lstm", 0, (hidden,), "all"),
        LayerInfo(f"{name}.hidden", "lstm", 0, (hidden,), "all"),
    ]


def _upconv_rows(name: str, in_channels: int, out_channels: int, size: Tuple[int, int],
                 upsample: bool) -> Tuple[List[LayerInfo], Tuple[int, int]]:
    rows = []
    h, w = size
    if upsample:
        h, w = 2 * h, 2 * w
        rows.append(LayerInfo(f"{name}.upsample", "upsample2x", 0, (in_channels, h, w), "pred"))
    shape = (out_channels, h, w)
    rows += [
        LayerInfo(f"{name}.conv", "conv2d", in_channels * out_channels * 9 + out_channels,
                  shape, "pred"),
        LayerInfo(f"{name}.norm", "batchnorm2d", 2 * out_channels, shape, "pred"),
        LayerInfo(f"{name}.relu", "relu", 0, shape, "pred"),
    ]
    return rows, (h, w)


def describe_layers(spec: ModelSpec) -> List[LayerInfo]:
    """
    Per-layer table of a model: name, kind, parameter count, per-sample output
    shape and how often the layer runs in one observe-and-predict pass.

    Activation convention: every produced layer output counts (conv, batch
    norm, ReLU, pool, fully connected, upsample, crop/pad, sigmoid). A
    recurrent step counts its 4H gate pre-activations, 4H gate activations,
    the cell state and the hidden state. Reshapes and model inputs do not
    count. The encoder runs on observed frames only and decoders on
    prediction steps only.
    """
    hidden = spec.hidden_size
    if spec.variant is Variant.CONVLSTM:
        rows = _encoder_rows(spec, 1)
        channels, h, w = encoder_shapes(spec, 1)[-1]
        k = spec.convlstm_kernel
        gate_params = 4 * hidden * (channels * k * k + 1) + 4 * hidden * hidden * k * k
        rows += [
            LayerInfo("project", "conv2d", hidden * channels + channels, (channels, h, w), "pred"),
            LayerInfo("cell.gates_pre", "convlstm", gate_params, (4 * hidden, h, w), "all"),
            LayerInfo("cell.gates", "convlstm", 0, (4 * hidden, h, w), "all"),
            LayerInfo("cell.cell", "convlstm", 0, (hidden, h, w), "all"),
            LayerInfo("cell.hidden", "convlstm", 0, (hidden, h, w), "all"),
        ]
        in_channels, size = hidden, (h, w)
        for index, width in enumerate(spec.convlstm_widths):
            block_rows, size = _upconv_rows(f"decoder.blocks.{index}", in_channels, width,
                                            size, upsample=index > 0)
            rows += block_rows
            in_channels = width
        rows += [
            LayerInfo("decoder.fit", "center_fit", 0, (in_channels, spec.height, spec.width), "pred"),
            LayerInfo("decoder.head", "conv2d", in_channels + 1, (1, spec.height, spec.width), "pred"),
            LayerInfo("decoder.sigmoid", "sigmoid", 0, (1, spec.height, spec.width), "pred"),
        ]
        return rows

    rows = _encoder_rows(spec, len(spec.encoder_widths))
    features = int(np.prod(encoder_shapes(spec)[-1]))
    rows.append(LayerInfo("fc1", "linear", features * spec.latent_dim + spec.latent_dim,
                          (spec.latent_dim,), "obs"))
    rows += _lstm_rows("lstm", spec.latent_dim, hidden)
    rows.append(LayerInfo("fc2", "linear", hidden * spec.latent_dim + spec.latent_dim,
                          (spec.latent_dim,), "pred"))

    if spec.variant is Variant.AOI:
        rows += [
            LayerInfo("decoder.fc1", "linear", hidden * spec.decoder_hidden + spec.decoder_hidden,
                      (spec.decoder_hidden,), "pred"),
            LayerInfo("decoder.relu", "relu", 0, (spec.decoder_hidden,), "pred"),
            LayerInfo("decoder.fc2", "linear", spec.decoder_hidden + 1, (1,), "pred"),
            LayerInfo("decoder.sigmoid", "sigmoid", 0, (1,), "pred"),
        ]
        return rows

    seed, channels = spec.recon_seed_size, spec.recon_channels
    rows.append(LayerInfo("decoder.project", "linear",
                          hidden * channels * seed * seed + channels * seed * seed,
                          (channels * seed * seed,), "pred"))
    in_channels, size = channels, (seed, seed)
    for index in range(spec.reconstruction_blocks()):
        width = spec.recon_widths[index]
        block_rows, size = _upconv_rows(f"decoder.blocks.{index}", in_channels, width, size,
                                        upsample=True)
        rows += block_rows
        in_channels = width
    rows += [
        LayerInfo("decoder.head", "conv2d", in_channels + 1, (1, *size), "pred"),
        LayerInfo("decoder.sigmoid", "sigmoid", 0, (1, *size), "pred"),
        LayerInfo("decoder.fit", "center_fit", 0, (1, spec.height, spec.width), "pred"),
    ]
    return rows


def count_params(spec: Union[ModelSpec, Sequence[LayerInfo]]) -> int:
    """Trainable scalars of a spec or a layer table (running statistics excluded)."""
    layers = describe_layers(spec) if isinstance(spec, ModelSpec) else spec
    return sum(layer.params for layer in layers)


def count_activations(spec: ModelSpec, t_obs: Optional[int] = None,
                      t_pred: Optional[int] = None) -> int:
    """
    Total layer-output elements of one observe-and-predict pass for one
    sample, under the convention documented in describe_layers.
    """
    t_obs = spec.t_obs if t_obs is None else t_obs
    t_pred = spec.t_pred if t_pred is None else t_pred
    return sum(layer.size * layer.calls(t_obs, t_pred) for layer in describe_layers(spec))


# --------------------------------------------------------------------------
# Modules
# --------------------------------------------------------------------------

class Encoder(Module):
    """Stack of conv blocks applied to a batch of frames."""

    def __init__(self, spec: ModelSpec, blocks: int, rng: np.random.Generator, dtype: Any):
        super().__init__()
        self.blocks = []
        in_channels = spec.in_channels
        for index in range(blocks):
            self.blocks.append(ConvBlock(
                in_channels, spec.encoder_widths[index], spec.conv_kernels[index],
                spec.conv_strides[index], spec.conv_paddings[index],
                spec.pool_kernel, spec.pool_stride, rng=rng, dtype=dtype,
            ))
            in_channels = spec.encoder_widths[index]

    def forward(self, x: Tensor) -> Tuple[Tensor, Cache]:
        caches = []
        for block in self.blocks:
            x, cache = block.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, dout: Tensor, caches: Cache) -> Tensor:
        for block, cache in zip(reversed(self.blocks), reversed(caches)):
            dout = block.backward(dout, cache)
        return dout


class ProbabilityHead(Module):
    """FC -> ReLU -> FC -> sigmoid, mapping a hidden vector to one probability."""

    def __init__(self, hidden: int, width: int, rng: np.random.Generator, dtype: Any):
        super().__init__()
        self.fc1 = Linear(hidden, width, rng=rng, dtype=dtype)
        self.fc2 = Linear(width, 1, rng=rng, dtype=dtype)

    def forward(self, h: Tensor) -> Tuple[Tensor, Cache]:
        a, fc1_cache = self.fc1.forward(h)
        a, relu_cache = relu_forward(a)
        a, fc2_cache = self.fc2.forward(a)
        p, sigmoid_cache = sigmoid_forward(a)
        return p[:, 0], (fc1_cache, relu_cache, fc2_cache, sigmoid_cache)

    def backward(self, dp: Tensor, cache: Cache) -> Tensor:
        fc1_cache, relu_cache, fc2_cache, sigmoid_cache = cache
        da = sigmoid_backward(dp[:, None], sigmoid_cache)
        da = self.fc2.backward(da, fc2_cache)
        da = relu_backward(da, relu_cache)
        return self.fc1.backward(da, fc1_cache)


class MapDecoder(Module):
    """
    Upconvolution decoder: optional FC projection to (C, s, s), a series of
    upconvolution blocks, a 1x1 conv head with sigmoid and a final center
    crop or pad to the grid size. ``fit_before_head`` selects whether the
    size fitting happens before the head (zero padding) or after the sigmoid
    (cropping an overshoot).
    """

    def __init__(self, in_channels: int, widths: Sequence[int], upsample_first: bool,
                 height: int, width: int, fit_before_head: bool, rng: np.random.Generator,
                 dtype: Any, project: Optional[Tuple[int, int, int]] = None):
        super().__init__()
        self.height = height
        self.width = width
        self.fit_before_head = fit_before_head
        self.seed_shape = None
        self.project = None
        if project is not None:
            hidden, channels, seed = project
            self.seed_shape = (channels, seed, seed)
            self.project = Linear(hidden, channels * seed * seed, rng=rng, dtype=dtype)
            in_channels = channels
        self.blocks = []
        for index, out_channels in enumerate(widths):
            self.blocks.append(UpConvBlock(in_channels, out_channels,
                                           upsample=upsample_first or index > 0,
                                           rng=rng, dtype=dtype))
            in_channels = out_channels
        self.head = Conv2d(in_channels, 1, 1, rng=rng, dtype=dtype)

    def forward(self, h: Tensor) -> Tuple[Tensor, Cache]:
        project_cache = None
        x = h
        if self.project is not None:
            x, project_cache = self.project.forward(h)
            x = x.reshape(h.shape[0], *self.seed_shape)
        block_caches = []
        for block in self.blocks:
            x, cache = block.forward(x)
            block_caches.append(cache)
        fit_cache = None
        if self.fit_before_head:
            x, fit_cache = center_fit_forward(x, self.height, self.width)
        x, head_cache = self.head.forward(x)
        p, sigmoid_cache = sigmoid_forward(x)
        if not self.fit_before_head:
            p, fit_cache = center_fit_forward(p, self.height, self.width)
        return p[:, 0], (project_cache, block_caches, fit_cache, head_cache, sigmoid_cache)

    def backward(self, dp: Tensor, cache: Cache) -> Tensor:
        project_cache, block_caches, fit_cache, head_cache, sigmoid_cache = cache
        dx = dp[:, None]
        if not self.fit_before_head:
            dx = center_fit_backward(dx, fit_cache)
        dx = sigmoid_backward(dx, sigmoid_cache)
        dx = self.head.backward(dx, head_cache)
        if self.fit_before_head:
            dx = center_fit_backward(dx, fit_cache)
        for block, block_cache in zip(reversed(self.blocks), reversed(block_caches)):
            dx = block.backward(dx, block_cache)
        if self.project is not None:
            dx = self.project.backward(dx.reshape(dx.shape[0], -1), project_cache)
        return dx


class Forecaster(Module):
    """Common interface of the three forecasters."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec

    def _check_frames(self, frames: Tensor):
        spec = self.spec
        if frames.ndim != 5:
            raise DimensionError(
                f"frames must be (N, T_obs, C, H, W), got shape {frames.shape}", axis="rank"
            )
        expected = (spec.t_obs, spec.in_channels, spec.height, spec.width)
        for axis, actual, wanted in zip(("time", "channels", "height", "width"),
                                        frames.shape[1:], expected):
            if actual != wanted:
                raise DimensionError(
                    f"frames {axis} axis is {actual}, model expects {wanted}", axis=axis
                )

    def forward(self, frames: Tensor) -> Tuple[Tensor, Cache]:
        raise NotImplementedError

    def backward(self, dprobs: Tensor, cache: Cache) -> Tensor:
        raise NotImplementedError

    def predict(self, frames: Tensor, with_trace: bool = False) -> RolloutOutput:
        """Run a rollout and wrap the probabilities (and optional hidden trace)."""
        probs, cache = self.forward(frames)
        trace = self._hidden_trace(cache) if with_trace else None
        return RolloutOutput(probs=probs, hidden_trace=trace)

    def _hidden_trace(self, cache: Cache) -> Tensor:
        raise NotImplementedError

    def aoi_series(self, probs: Union[Tensor, RolloutOutput], aoi: AOISpec) -> Tensor:
        """(N, T_pred) probabilities of the AOI, from scalar or map outputs."""
        if isinstance(probs, RolloutOutput):
            probs = probs.probs
        if probs.ndim == 2:
            return probs
        return probs[:, :, aoi.y, aoi.x]


class LatentForecaster(Forecaster):
    """
    CNN encoder -> FC1 -> LSTM over observed frames, then FC2 feedback of the
    previous hidden state during prediction, decoding every new hidden state.
    """

    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype: Any):
        super().__init__(spec)
        blocks = len(spec.encoder_widths)
        features = int(np.prod(encoder_shapes(spec)[-1]))
        self.encoder = Encoder(spec, blocks, rng, dtype)
        self.fc1 = Linear(features, spec.latent_dim, rng=rng, dtype=dtype)
        self.lstm = LSTMCell(spec.latent_dim, spec.hidden_size, rng=rng, dtype=dtype)
        self.fc2 = Linear(spec.hidden_size, spec.latent_dim, rng=rng, dtype=dtype)
        self.decoder: Module

    def forward(self, frames: Tensor) -> Tuple[Tensor, Cache]:
        self._check_frames(frames)
        spec = self.spec
        n = frames.shape[0]
        feats, encoder_cache = self.encoder.forward(frames.reshape(n * spec.t_obs, *frames.shape[2:]))
        z, fc1_cache = self.fc1.forward(feats.reshape(n * spec.t_obs, -1))
        z = z.reshape(n, spec.t_obs, -1)

        h, c = self.lstm.initial_state(n, dtype=frames.dtype)
        observe_caches, hidden = [], []
        for t in range(spec.t_obs):
            h, c, cache = self.lstm.forward(z[:, t], h, c)
            observe_caches.append(cache)
            hidden.append(h)

        predict_caches, probs = [], []
        for _ in range(spec.t_pred):
            z_hat, feedback_cache = self.fc2.forward(h)
            h, c, lstm_cache = self.lstm.forward(z_hat, h, c)
            p, decoder_cache = self.decoder.forward(h)
            predict_caches.append((feedback_cache, lstm_cache, decoder_cache))
            hidden.append(h)
            probs.append(p)

        out = np.stack(probs, axis=1) if probs else np.zeros((n, 0), dtype=frames.dtype)
        cache = (frames.shape, feats.shape, encoder_cache, fc1_cache, observe_caches,
                 predict_caches, hidden)
        return out, cache

    def backward(self, dprobs: Tensor, cache: Cache) -> Tensor:
        frames_shape, feats_shape, encoder_cache, fc1_cache, observe_caches, \
            predict_caches, _ = cache
        n = frames_shape[0]
        dh = np.zeros((n, self.spec.hidden_size), dtype=dprobs.dtype)
        dc = np.zeros_like(dh)
        for t in reversed(range(len(predict_caches))):
            feedback_cache, lstm_cache, decoder_cache = predict_caches[t]
            dh = dh + self.decoder.backward(dprobs[:, t], decoder_cache)
            dz_hat, dh, dc = self.lstm.backward(dh, dc, lstm_cache)
            dh = dh + self.fc2.backward(dz_hat, feedback_cache)

        dz = np.zeros((n, len(observe_caches), self.spec.latent_dim), dtype=dprobs.dtype)
        for t in reversed(range(len(observe_caches))):
            dz[:, t], dh, dc = self.lstm.backward(dh, dc, observe_caches[t])

        dfeats = self.fc1.backward(dz.reshape(n * len(observe_caches), -1), fc1_cache)
        dframes = self.encoder.backward(dfeats.reshape(feats_shape), encoder_cache)
        return dframes.reshape(frames_shape)

    def _hidden_trace(self, cache: Cache) -> Tensor:
        return np.stack(cache[-1], axis=1)


class AOIForecaster(LatentForecaster):
    """Predicts the AOI's burning probability for each prediction step."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype: Any = DEFAULT_DTYPE):
        super().__init__(spec, rng, dtype)
        self.decoder = ProbabilityHead(spec.hidden_size, spec.decoder_hidden, rng, dtype)


class ReconstructionForecaster(LatentForecaster):
    """Decodes a full burning-probability map of the grid at every prediction step."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype: Any = DEFAULT_DTYPE):
        super().__init__(spec, rng, dtype)
        blocks = spec.reconstruction_blocks()
        self.decoder = MapDecoder(
            spec.recon_channels, spec.recon_widths[:blocks], upsample_first=True,
            height=spec.height, width=spec.width, fit_before_head=False, rng=rng, dtype=dtype,
            project=(spec.hidden_size, spec.recon_channels, spec.recon_seed_size),
        )


class ConvLSTMForecaster(Forecaster):
    """
    First encoder block, a single ConvLSTM cell on the pooled feature maps and
    an upconvolution decoder. During prediction the cell consumes a 1x1-conv
    projection of its own hidden state.
    """

    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype: Any = DEFAULT_DTYPE):
        super().__init__(spec)
        channels, self.state_h, self.state_w = encoder_shapes(spec, 1)[-1]
        self.encoder = Encoder(spec, 1, rng, dtype)
        self.cell = ConvLSTMCell(channels, spec.hidden_size, spec.convlstm_kernel,
                                 rng=rng, dtype=dtype)
        self.project = Conv2d(spec.hidden_size, channels, 1, rng=rng, dtype=dtype)
        self.decoder = MapDecoder(
            spec.hidden_size, spec.convlstm_widths, upsample_first=False,
            height=spec.height, width=spec.width, fit_before_head=True, rng=rng, dtype=dtype,
        )

    def forward(self, frames: Tensor) -> Tuple[Tensor, Cache]:
        self._check_frames(frames)
        spec = self.spec
        n = frames.shape[0]
        feats, encoder_cache = self.encoder.forward(frames.reshape(n * spec.t_obs, *frames.shape[2:]))
        x = feats.reshape(n, spec.t_obs, *feats.shape[1:])

        h, c = self.cell.initial_state(n, self.state_h, self.state_w, dtype=frames.dtype)
        observe_caches, hidden = [], []
        for t in range(spec.t_obs):
            h, c, cache = self.cell.forward(x[:, t], h, c)
            observe_caches.append(cache)
            hidden.append(h.mean(axis=(2, 3)))

        predict_caches, probs = [], []
        for _ in range(spec.t_pred):
            x_hat, project_cache = self.project.forward(h)
            h, c, cell_cache = self.cell.forward(x_hat, h, c)
            p, decoder_cache = self.decoder.forward(h)
            predict_caches.append((project_cache, cell_cache, decoder_cache))
            hidden.append(h.mean(axis=(2, 3)))
            probs.append(p)

        if probs:
            out = np.stack(probs, axis=1)
        else:
            out = np.zeros((n, 0, spec.height, spec.width), dtype=frames.dtype)
        cache = (frames.shape, feats.shape, encoder_cache, observe_caches, predict_caches, hidden)
        return out, cache

    def backward(self, dprobs: Tensor, cache: Cache) -> Tensor:
        frames_shape, feats_shape, encoder_cache, observe_caches, predict_caches, _ = cache
        n = frames_shape[0]
        dh = np.zeros((n, self.spec.hidden_size, self.state_h, self.state_w), dtype=dprobs.dtype)
        dc = np.zeros_like(dh)
        for t in reversed(range(len(predict_caches))):
            project_cache, cell_cache, decoder_cache = predict_caches[t]
            dh = dh + self.decoder.backward(dprobs[:, t], decoder_cache)
            dx_hat, dh, dc = self.cell.backward(dh, dc, cell_cache)
            dh = dh + self.project.backward(dx_hat, project_cache)

        dx = np.zeros((n, len(observe_caches), *feats_shape[1:]), dtype=dprobs.dtype)
        for t in reversed(range(len(observe_caches))):
            dx[:, t], dh, dc = self.cell.backward(dh, dc, observe_caches[t])

        dframes = self.encoder.backward(dx.reshape(feats_shape), encoder_cache)
        return dframes.reshape(frames_shape)

    def _hidden_trace(self, cache: Cache) -> Tensor:
        return np.stack(cache[-1], axis=1)


_MODEL_CLASSES = {
    Variant.AOI: AOIForecaster,
    Variant.RECONSTRUCTION: ReconstructionForecaster,
    Variant.CONVLSTM: ConvLSTMForecaster,
}


def build_model(spec: ModelSpec, seed: int = 0, dtype: Any = DEFAULT_DTYPE) -> Forecaster:
    """
    Instantiate the forecaster for spec.variant with seeded initialization.

    Raises:
        DimensionError: If the grid is too small for the encoder
    """
    describe_layers(spec)
    model = _MODEL_CLASSES[spec.variant](spec, np.random.default_rng(seed), dtype)
    logger.debug(
        f"Built {spec.variant.value} model for {spec.height}x{spec.width} "
        f"with {model.num_parameters()} parameters"
    )
    return model
