"""
Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"FCKP"  u16 format version  32-byte SHA-256 of the model spec
    u32 spec YAML length, spec YAML (UTF-8)
    32-byte SHA-256 of the tensor section below
    u32 tensor count
    per tensor: u16 name length, name (UTF-8), u8 kind (0 parameter, 1 buffer),
                u8 dtype code, u8 ndim, ndim x u32 extents, raw payload

Loading rebuilds the model from the embedded spec and refuses files whose
spec hash does not match their spec text or whose tensor section does not
match its checksum.
"""

import hashlib
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Dict, Sequence, Tuple, Union

import numpy as np
import yaml

from .exceptions import CheckpointError
from .models import Forecaster, ModelSpec, build_model

logger = logging.getLogger(__name__)

MAGIC = b"FCKP"
CHECKPOINT_VERSION = 2

KIND_PARAMETER = 0
KIND_BUFFER = 1

_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


@dataclass
class CheckpointInfo:
    """Header fields and tensor inventory of a checkpoint file."""
    version: int
    spec: ModelSpec
    spec_hash: str
    tensors: Dict[str, Tuple[int, Tuple[int, ...], str]] = field(default_factory=dict)

    @property
    def parameter_count(self) -> int:
        """Total parameter elements (buffers excluded)."""
        return sum(int(np.prod(shape)) for kind, shape, _ in self.tensors.values()
                   if kind == KIND_PARAMETER)


def checkpoint_name(variant: str, density: float, aoi: Tuple[int, int], seed: int) -> str:
    """File name encoding variant, density, AOI and seed."""
    return f"{variant}_d{density:g}_aoi{aoi[0]}-{aoi[1]}_s{seed}.ckpt"


def _read_exact(handle: BinaryIO, size: int, what: str) -> bytes:
    data = handle.read(size)
    if len(data) != size:
        raise CheckpointError(f"Checkpoint truncated while reading {what}")
    return data


def _unpack(handle: BinaryIO, fmt: str, what: str) -> Tuple[Any, ...]:
    return struct.unpack(fmt, _read_exact(handle, struct.calcsize(fmt), what))


def _tensor_section(entries: Sequence[Tuple[str, int, np.ndarray]]) -> bytes:
    buffer = io.BytesIO()
    buffer.write(struct.pack("<I", len(entries)))
    for name, kind, array in entries:
        dtype = array.dtype.newbyteorder("<")
        if dtype not in _DTYPE_CODES:
            raise CheckpointError(f"Unsupported dtype {array.dtype} for tensor {name}")
        encoded = name.encode("utf-8")
        buffer.write(struct.pack("<H", len(encoded)))
        buffer.write(encoded)
        buffer.write(struct.pack("<BBB", kind, _DTYPE_CODES[dtype], array.ndim))
        buffer.write(struct.pack(f"<{array.ndim}I", *array.shape))
        buffer.write(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return buffer.getvalue()


def save_checkpoint(model: Forecaster, path: Union[str, Path]) -> Path:
    """
    Serialize a model's parameters and buffers together with its spec.

    Args:
        model: Model to save
        path: Destination file

    Returns:
        Path of the written file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    spec_text = model.spec.to_yaml().encode("utf-8")
    entries = [(name, KIND_PARAMETER, param.data) for name, param in model.named_parameters()]
    entries += [(name, KIND_BUFFER, buf) for name, buf in model.named_buffers()]
    section = _tensor_section(entries)

    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<H", CHECKPOINT_VERSION))
        handle.write(bytes.fromhex(model.spec.spec_hash()))
        handle.write(struct.pack("<I", len(spec_text)))
        handle.write(spec_text)
        handle.write(hashlib.sha256(section).digest())
        handle.write(section)

    logger.info(f"Saved {model.spec.variant.value} checkpoint to {path}")
    return path


def _read(path: Union[str, Path]) -> Tuple[CheckpointInfo, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")

    with open(path, "rb") as handle:
        if _read_exact(handle, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a firecast checkpoint")
        (version,) = _unpack(handle, "<H", "version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"Unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )
        stored_hash = _read_exact(handle, 32, "spec hash").hex()
        (spec_len,) = _unpack(handle, "<I", "spec length")
        spec_text = _read_exact(handle, spec_len, "spec").decode("utf-8")
        spec = ModelSpec.from_dict(yaml.safe_load(spec_text))
        if spec.spec_hash() != stored_hash:
            raise CheckpointError(f"Spec hash mismatch in {path}")

        stored_digest = _read_exact(handle, 32, "payload checksum")
        section = handle.read()

    info = CheckpointInfo(version=version, spec=spec, spec_hash=stored_hash)
    tensors: Dict[str, np.ndarray] = {}
    with io.BytesIO(section) as handle:
        (count,) = _unpack(handle, "<I", "tensor count")
        for _ in range(count):
            (name_len,) = _unpack(handle, "<H", "tensor name length")
            name = _read_exact(handle, name_len, "tensor name").decode("utf-8")
            kind, code, ndim = _unpack(handle, "<BBB", f"header of {name}")
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"Unknown dtype code {code} for tensor {name}")
            shape = _unpack(handle, f"<{ndim}I", f"shape of {name}")
            dtype = _CODE_DTYPES[code]
            size = int(np.prod(shape)) * dtype.itemsize
            payload = _read_exact(handle, size, f"payload of {name}")
            tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
            info.tensors[name] = (kind, tuple(shape), str(dtype))
        if handle.read(1):
            raise CheckpointError(f"Trailing bytes after {count} tensors in {path}")
    if hashlib.sha256(section).digest() != stored_digest:
        raise CheckpointError(f"Tensor payload checksum mismatch in {path}")
    return info, tensors


def inspect_checkpoint(path: Union[str, Path]) -> CheckpointInfo:
    """Read only the header and tensor inventory of a checkpoint."""
    info, _ = _read(path)
    return info


def load_checkpoint(path: Union[str, Path]) -> Forecaster:
    """
    Rebuild a model from a checkpoint.

    Returns:
        Model in eval mode with the stored parameters and buffers

    Raises:
        CheckpointError: On malformed files, spec-hash or tensor-name mismatch
    """
    info, tensors = _read(path)
    dtypes = {array.dtype for array in tensors.values()}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.float32
    model = build_model(info.spec, dtype=dtype)
    model.load_state_dict(tensors)
    model.eval()
    logger.info(
        f"Loaded {info.spec.variant.value} checkpoint from {path} "
        f"({info.parameter_count} parameters)"
    )
    return model
