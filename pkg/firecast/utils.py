"""
Utility functions shared across firecast modules.
"""

import contextlib
import logging
from typing import Any, Iterator, Mapping, Optional

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

logger = logging.getLogger(__name__)


def format_count(value: float) -> str:
    """
    Format a parameter or activation count the way cost tables print them.

    Args:
        value: Count to format

    Returns:
        String such as "262.7k" or "103.8M"
    """
    magnitude = abs(value)
    if magnitude >= 1e9:
        return f"{value / 1e9:.1f}G"
    if magnitude >= 1e6:
        return f"{value / 1e6:.1f}M"
    if magnitude >= 1e3:
        return f"{value / 1e3:.1f}k"
    return f"{value:g}"


def derive_seed(base_seed: int, *keys: int) -> int:
    """
    Derive an independent 64-bit seed from a base seed and integer keys.

    Args:
        base_seed: Run-level seed
        *keys: Identifiers such as a simulation id or an AOI index

    Returns:
        Deterministic 64-bit integer seed
    """
    sequence = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF, *keys])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def log_config(title: str, config: Mapping[str, Any], level: int = logging.DEBUG):
    """
    Log a configuration mapping as compact YAML.

    Args:
        title: Label printed before the mapping
        config: Nested mapping of plain values
        level: Logging level
    """
    if not logger.isEnabledFor(level):
        return
    rendered = yaml.safe_dump(dict(config), sort_keys=False, default_flow_style=None)
    logger.log(level, f"{title}:\n{rendered.rstrip()}")


def log_array_summary(name: str, array: np.ndarray, level: int = logging.DEBUG):
    """
    Log shape, dtype and value range of an array without dumping its payload.

    Args:
        name: Label for the array
        array: Array to summarize
        level: Logging level
    """
    if not logger.isEnabledFor(level):
        return
    if array.size == 0:
        logger.log(level, f"{name}: shape={array.shape} dtype={array.dtype} (empty)")
        return
    logger.log(
        level,
        f"{name}: shape={array.shape} dtype={array.dtype} "
        f"min={float(np.min(array)):.6g} max={float(np.max(array)):.6g}",
    )


@contextlib.contextmanager
def limit_threads(threads: Optional[int]) -> Iterator[None]:
    """
    Cap BLAS/OpenMP thread pools for the duration of the block.

    Args:
        threads: Maximum threads, or None to leave pools untouched
    """
    if threads is None:
        yield
        return
    with threadpool_limits(limits=threads):
        logger.debug(f"Thread pools limited to {threads}")
        yield
