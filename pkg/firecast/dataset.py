"""
Chunked, labeled datasets built from simulation trajectories.

On disk a dataset is a directory holding ``chunks.bin`` (one little-endian
payload of chunk_len * H * W state bytes per chunk) and ``manifest.yaml``
(format version, provenance, per-chunk offsets and SHA-256 checksums).
Frames are rendered to RGB on load, so any palette and any AOI can be
chosen after the fact.
"""

import dataclasses
import enum
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .exceptions import (
    ChecksumMismatchError,
    ChunkLayoutError,
    ConfigurationError,
    DatasetError,
    DimensionError,
    FormatVersionError,
    PaletteError,
    SplitLeakError,
    TruncatedDatasetError,
)
from .simulator import (
    BURNING_CODES,
    CellState,
    SimParams,
    SimState,
    derive_sim_params,
    run_batch,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
CHUNK_LEN = 60
CHUNK_STRIDE = 10
MANIFEST_NAME = "manifest.yaml"
PAYLOAD_NAME = "chunks.bin"

Palette = Mapping[CellState, Tuple[int, int, int]]

DEFAULT_PALETTE: Dict[CellState, Tuple[int, int, int]] = {
    CellState.EMPTY: (0, 0, 0),
    CellState.TREE: (0, 153, 0),
    CellState.FIRE: (255, 0, 0),
    CellState.EMBER: (153, 51, 0),
    CellState.BURNED_OUT: (64, 64, 64),
}


class LabelMode(str, enum.Enum):
    """How a burning AOI is labeled over time."""
    INSTANTANEOUS = "instantaneous"
    LATCHED = "latched"


@dataclass(frozen=True)
class AOISpec:
    """Agent of interest at column x, row y; (0, 0) is the top-left corner."""
    x: int
    y: int

    def validate(self, width: int, height: int):
        if not (0 <= self.x < width and 0 <= self.y < height):
            raise ConfigurationError(
                f"AOI ({self.x}, {self.y}) is outside the {width}x{height} grid"
            )

    @classmethod
    def parse(cls, text: str) -> "AOISpec":
        """Parse "x,y" as written on the command line."""
        try:
            x, y = (int(part) for part in text.split(","))
        except ValueError as e:
            raise ConfigurationError(f"AOI must look like 'x,y', got {text!r}") from e
        return cls(x, y)

    def as_tuple(self) -> Tuple[int, int]:
        return (self.x, self.y)


@dataclass
class Chunk:
    """chunk_len consecutive recorded grids of one simulation, as state codes."""
    sim_id: int
    start_step: int
    states: np.ndarray
    params: Optional[SimParams] = None

    @property
    def key(self) -> Tuple[int, int]:
        return (self.sim_id, self.start_step)


@dataclass
class ChunkRecord:
    sim_id: int
    start_step: int
    offset: int
    length: int
    checksum: str


@dataclass
class SimulationRecord:
    sim_id: int
    rng_seed: int
    length: int


@dataclass
class DatasetManifest:
    """
    Provenance and layout of a dataset split.

    ``chunks`` is filled in by write_dataset; callers describe everything else.
    """
    split: str = "train"
    sim_params: Dict[str, Any] = field(default_factory=dict)
    label_mode: str = LabelMode.INSTANTANEOUS.value
    palette: Dict[str, List[int]] = field(
        default_factory=lambda: palette_to_dict(DEFAULT_PALETTE)
    )
    chunk_len: int = CHUNK_LEN
    stride: int = CHUNK_STRIDE
    height: int = 0
    width: int = 0
    simulations: List[SimulationRecord] = field(default_factory=list)
    chunks: List[ChunkRecord] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    @property
    def density(self) -> Optional[float]:
        return self.sim_params.get("density")

    @property
    def sim_ids(self) -> List[int]:
        return sorted({record.sim_id for record in self.simulations}
                      | {record.sim_id for record in self.chunks})

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["density"] = self.density
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetManifest":
        data = dict(data)
        data.pop("density", None)
        data["simulations"] = [SimulationRecord(**r) for r in data.get("simulations", [])]
        data["chunks"] = [ChunkRecord(**r) for r in data.get("chunks", [])]
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise DatasetError(f"Unknown manifest field(s): {', '.join(unknown)}")
        return cls(**data)


def palette_to_dict(palette: Palette) -> Dict[str, List[int]]:
    return {CellState(state).name.lower(): list(color) for state, color in palette.items()}


def palette_from_dict(data: Mapping[str, Sequence[int]]) -> Dict[CellState, Tuple[int, int, int]]:
    try:
        return {CellState[name.upper()]: tuple(int(c) for c in color)  # type: ignore[misc]
                for name, color in data.items()}
    except KeyError as e:
        raise PaletteError(f"Unknown cell state in palette: {e}") from e


def _palette_table(palette: Palette) -> np.ndarray:
    missing = [state.name for state in CellState if state not in palette]
    if missing:
        raise PaletteError(f"Palette has no color for: {', '.join(missing)}")
    if tuple(palette[CellState.EMPTY]) != (0, 0, 0):
        raise PaletteError("Empty cells must render as (0, 0, 0)")
    table = np.zeros((len(CellState), 3), dtype=np.uint8)
    for state in CellState:
        table[state] = palette[state]
    return table


def chunk_trajectory(
    trajectory: Sequence[SimState],
    chunk_len: int = CHUNK_LEN,
    stride: int = CHUNK_STRIDE,
    sim_id: int = 0,
    params: Optional[SimParams] = None,
) -> List[Chunk]:
    """
    Cut a trajectory into overlapping fixed-length chunks without padding.

    Args:
        trajectory: Recorded states, initial state first
        chunk_len: Timesteps per chunk
        stride: Offset between consecutive chunk starts
        sim_id: Simulation identifier stored in each chunk
        params: Simulation parameters stored in each chunk

    Returns:
        Chunks starting at 0, stride, 2 * stride, ... (empty if the trajectory
        is shorter than chunk_len)
    """
    if chunk_len <= 0 or stride <= 0:
        raise ConfigurationError(
            f"chunk_len and stride must be positive, got {chunk_len} and {stride}"
        )
    if len(trajectory) < chunk_len:
        return []

    grids = np.stack([state.states for state in trajectory]).astype(np.uint8)
    return [
        Chunk(sim_id=sim_id, start_step=start, states=grids[start:start + chunk_len].copy(),
              params=params)
        for start in range(0, len(trajectory) - chunk_len + 1, stride)
    ]


def expected_chunk_count(lengths: Sequence[int], chunk_len: int = CHUNK_LEN,
                         stride: int = CHUNK_STRIDE) -> int:
    """Closed-form chunk count: sum of floor((len - chunk_len) / stride) + 1."""
    return sum((length - chunk_len) // stride + 1 for length in lengths if length >= chunk_len)


def render_rgb(states: np.ndarray, palette: Palette = DEFAULT_PALETTE) -> np.ndarray:
    """
    Render a grid (or a stack of grids) of state codes to 8-bit RGB.

    Args:
        states: (H, W) or (T, H, W) state codes
        palette: Color per cell state; Empty must be black

    Returns:
        (3, H, W) or (T, 3, H, W) uint8 frames
    """
    rgb = _palette_table(palette)[states]
    return np.moveaxis(rgb, -1, -3)


def decode_rgb(frame: np.ndarray, palette: Palette = DEFAULT_PALETTE) -> np.ndarray:
    """
    Invert render_rgb for an injective palette.

    Raises:
        PaletteError: If two states share a color or a pixel matches no color
    """
    table = _palette_table(palette)
    if len({tuple(row) for row in table}) != len(table):
        raise PaletteError("Palette is not injective; frames cannot be decoded")

    pixels = np.moveaxis(frame, -3, -1)
    states = np.full(pixels.shape[:-1], 255, dtype=np.uint8)
    for code, color in enumerate(table):
        states[np.all(pixels == color, axis=-1)] = code
    if np.any(states == 255):
        raise PaletteError("Frame contains colors outside the palette")
    return states


def frames_to_model_input(frames: np.ndarray, dtype: Any = np.float32) -> np.ndarray:
    """Scale 8-bit frames to [0, 1] floats."""
    return frames.astype(dtype) / np.asarray(255.0, dtype=dtype)


def extract_aoi_labels(chunk: Chunk, aoi: AOISpec,
                       label_mode: Union[LabelMode, str] = LabelMode.INSTANTANEOUS) -> np.ndarray:
    """
    Burning label of the AOI at every timestep of a chunk.

    Args:
        chunk: Chunk to label
        aoi: Agent of interest
        label_mode: instantaneous (Fire or Ember now) or latched (ever ignited)

    Returns:
        uint8 array of length chunk_len
    """
    height, width = chunk.states.shape[1:]
    aoi.validate(width, height)
    labels = np.isin(chunk.states[:, aoi.y, aoi.x], BURNING_CODES).astype(np.uint8)
    if LabelMode(label_mode) is LabelMode.LATCHED:
        labels = np.maximum.accumulate(labels)
    return labels


def aoi_grid_coords(width: int, height: int) -> List[AOISpec]:
    """
    Centers of the 3x3 equal partition of the grid, north row first.

    Centers sit at floor(k * n / 3 + n / 6), computed exactly as (2k + 1) * n // 6.
    """
    if width < 3 or height < 3:
        raise ConfigurationError(f"Grid must be at least 3x3, got {width}x{height}")
    xs = [(2 * k + 1) * width // 6 for k in range(3)]
    ys = [(2 * k + 1) * height // 6 for k in range(3)]
    return [AOISpec(x, y) for y in ys for x in xs]


def write_ppm(frame: np.ndarray, path: Union[str, Path]):
    """Write a (3, H, W) uint8 frame as a binary PPM (P6) image."""
    height, width = frame.shape[1:]
    pixels = np.ascontiguousarray(np.moveaxis(frame.astype(np.uint8), 0, -1))
    with open(path, "wb") as handle:
        handle.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        handle.write(pixels.tobytes())


def _checksum(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def write_dataset(chunks: Sequence[Chunk], manifest: DatasetManifest,
                  path: Union[str, Path]) -> DatasetManifest:
    """
    Persist chunks and their manifest into a dataset directory.

    Args:
        chunks: Chunks to store, in order
        manifest: Provenance; its chunk records are rebuilt from ``chunks``
        path: Target directory (created if missing)

    Returns:
        The manifest as written

    Raises:
        DimensionError: If a chunk does not match the manifest's shape
    """
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)

    expected = (manifest.chunk_len, manifest.height, manifest.width)
    records: List[ChunkRecord] = []
    offset = 0
    with open(directory / PAYLOAD_NAME, "wb") as handle:
        for chunk in chunks:
            if chunk.states.shape != expected:
                raise DimensionError(
                    f"Chunk (sim_id={chunk.sim_id}, start_step={chunk.start_step}) has shape "
                    f"{chunk.states.shape}, manifest expects {expected}",
                    axis="chunk",
                )
            payload = np.ascontiguousarray(chunk.states, dtype=np.uint8).tobytes()
            handle.write(payload)
            records.append(ChunkRecord(chunk.sim_id, chunk.start_step, offset,
                                       len(payload), _checksum(payload)))
            offset += len(payload)

    written = dataclasses.replace(manifest, chunks=records, format_version=FORMAT_VERSION)
    with open(directory / MANIFEST_NAME, "w") as handle:
        yaml.safe_dump(written.to_dict(), handle, sort_keys=False)

    logger.info(f"Wrote {len(records)} chunk(s) ({offset} bytes) to {directory}")
    return written


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    """Load and version-check a dataset manifest."""
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetError(f"No {MANIFEST_NAME} in {path}")
    with open(manifest_path) as handle:
        data = yaml.safe_load(handle) or {}

    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(
            f"Dataset format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    return DatasetManifest.from_dict(data)


def read_dataset(path: Union[str, Path]) -> Tuple[List[Chunk], DatasetManifest]:
    """
    Load a dataset directory, verifying version, size and every checksum.

    Raises:
        FormatVersionError: Unsupported format version
        TruncatedDatasetError: Payload shorter than the manifest requires
        ChecksumMismatchError: A chunk payload was modified
        ChunkLayoutError: A chunk length disagrees with the manifest shape
    """
    directory = Path(path)
    manifest = read_manifest(directory)
    payload_path = directory / PAYLOAD_NAME
    if not payload_path.exists():
        raise TruncatedDatasetError(f"No {PAYLOAD_NAME} in {directory}")
    payload = payload_path.read_bytes()

    required = max((r.offset + r.length for r in manifest.chunks), default=0)
    if len(payload) < required:
        raise TruncatedDatasetError(
            f"{payload_path} has {len(payload)} bytes, manifest requires {required}"
        )

    base_params = SimParams.from_dict(manifest.sim_params) if manifest.sim_params else None
    seeds = {record.sim_id: record.rng_seed for record in manifest.simulations}
    shape = (manifest.chunk_len, manifest.height, manifest.width)
    expected = manifest.chunk_len * manifest.height * manifest.width

    chunks = []
    for index, record in enumerate(manifest.chunks):
        if record.length != expected:
            raise ChunkLayoutError(index, record.length, expected, shape)
        raw = payload[record.offset:record.offset + record.length]
        if _checksum(raw) != record.checksum:
            raise ChecksumMismatchError(index, record.sim_id, record.start_step)
        params = None
        if base_params is not None:
            params = dataclasses.replace(base_params,
                                         rng_seed=seeds.get(record.sim_id, base_params.rng_seed))
        states = np.frombuffer(raw, dtype=np.uint8).reshape(shape).copy()
        chunks.append(Chunk(record.sim_id, record.start_step, states, params))

    logger.info(f"Read {len(chunks)} chunk(s) from {directory} (split={manifest.split})")
    return chunks, manifest


def check_split_hygiene(first: DatasetManifest, second: DatasetManifest):
    """Raise SplitLeakError if two manifests share a simulation id."""
    shared = sorted(set(first.sim_ids) & set(second.sim_ids))
    if shared:
        raise SplitLeakError(
            f"Splits {first.split!r} and {second.split!r} share sim_id(s) {shared}"
        )


def generate_split(
    params: SimParams,
    n_sims: int,
    first_sim_id: int = 0,
    split: str = "train",
    chunk_len: int = CHUNK_LEN,
    stride: int = CHUNK_STRIDE,
    label_mode: Union[LabelMode, str] = LabelMode.INSTANTANEOUS,
    palette: Palette = DEFAULT_PALETTE,
    max_workers: int = 4,
) -> Tuple[List[Chunk], DatasetManifest]:
    """
    Simulate n_sims forests and chunk them into one dataset split.

    Simulation sim_id uses a seed derived from params.rng_seed and sim_id, so
    every simulation is reproducible from the manifest alone.

    Args:
        params: Base simulation parameters
        n_sims: Number of simulations
        first_sim_id: Id of the first simulation; splits use disjoint ranges
        split: Split designation recorded in the manifest
        chunk_len: Timesteps per chunk
        stride: Offset between chunk starts
        label_mode: Label mode recorded for consumers
        palette: Palette recorded for consumers
        max_workers: Concurrent simulations

    Returns:
        Chunks and a manifest describing them
    """
    sim_ids = list(range(first_sim_id, first_sim_id + n_sims))
    per_sim = [derive_sim_params(params, sim_id) for sim_id in sim_ids]
    trajectories = run_batch(per_sim, max_workers=max_workers)

    chunks: List[Chunk] = []
    simulations = []
    for sim_id, sim_params, trajectory in zip(sim_ids, per_sim, trajectories):
        chunks.extend(chunk_trajectory(trajectory, chunk_len, stride, sim_id, sim_params))
        simulations.append(SimulationRecord(sim_id, sim_params.rng_seed, len(trajectory)))

    achieved = len(chunks)
    if achieved == 0:
        logger.warning(
            f"Split {split!r}: no simulation reached {chunk_len} recorded steps; dataset is empty"
        )
    manifest = DatasetManifest(
        split=split,
        sim_params=params.to_dict(),
        label_mode=LabelMode(label_mode).value,
        palette=palette_to_dict(palette),
        chunk_len=chunk_len,
        stride=stride,
        height=params.height,
        width=params.width,
        simulations=simulations,
    )
    logger.info(f"Split {split!r}: {n_sims} simulation(s) -> {achieved} chunk(s)")
    return chunks, manifest


class ChunkDataset:
    """
    Model-facing view over a list of chunks.

    Inputs are the first t_obs frames rendered to [0, 1] floats; targets cover
    the remaining chunk timesteps.
    """

    def __init__(self, chunks: Sequence[Chunk], manifest: Optional[DatasetManifest] = None,
                 palette: Optional[Palette] = None):
        self.chunks = list(chunks)
        self.manifest = manifest
        if palette is None:
            palette = palette_from_dict(manifest.palette) if manifest else DEFAULT_PALETTE
        self.palette = palette
        self._table = _palette_table(palette)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ChunkDataset":
        chunks, manifest = read_dataset(path)
        return cls(chunks, manifest)

    def __len__(self) -> int:
        return len(self.chunks)

    @property
    def keys(self) -> List[Tuple[int, int]]:
        return [chunk.key for chunk in self.chunks]

    @property
    def grid_shape(self) -> Tuple[int, int]:
        if not self.chunks:
            if self.manifest is None:
                raise DatasetError("Empty dataset has no grid shape")
            return (self.manifest.height, self.manifest.width)
        return tuple(self.chunks[0].states.shape[1:])  # type: ignore[return-value]

    @property
    def label_mode(self) -> LabelMode:
        if self.manifest is None:
            return LabelMode.INSTANTANEOUS
        return LabelMode(self.manifest.label_mode)

    def observation_frames(self, indices: Sequence[int], t_obs: int,
                           dtype: Any = np.float32) -> np.ndarray:
        """(N, t_obs, 3, H, W) model inputs in [0, 1]."""
        states = np.stack([self.chunks[i].states[:t_obs] for i in indices])
        rgb = np.moveaxis(self._table[states], -1, -3)
        return frames_to_model_input(rgb, dtype)

    def aoi_targets(self, indices: Sequence[int], aoi: AOISpec, t_obs: int,
                    label_mode: Optional[Union[LabelMode, str]] = None,
                    dtype: Any = np.float32) -> np.ndarray:
        """(N, chunk_len - t_obs) AOI burning labels for the prediction window."""
        mode = self.label_mode if label_mode is None else label_mode
        return np.stack([
            extract_aoi_labels(self.chunks[i], aoi, mode)[t_obs:] for i in indices
        ]).astype(dtype)

    def mask_targets(self, indices: Sequence[int], t_obs: int,
                     label_mode: Optional[Union[LabelMode, str]] = None,
                     dtype: Any = np.float32) -> np.ndarray:
        """(N, chunk_len - t_obs, H, W) burning masks for the prediction window."""
        mode = LabelMode(self.label_mode if label_mode is None else label_mode)
        states = np.stack([self.chunks[i].states for i in indices])
        masks = np.isin(states, BURNING_CODES)
        if mode is LabelMode.LATCHED:
            masks = np.maximum.accumulate(masks, axis=1)
        return masks[:, t_obs:].astype(dtype)
