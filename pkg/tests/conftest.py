"""
Shared fixtures: toy model specs and synthetic chunk datasets small enough
for unit tests.
"""

import numpy as np
import pytest

from firecast.dataset import CHUNK_LEN, Chunk, ChunkDataset, DatasetManifest
from firecast.models import ModelSpec
from firecast.simulator import CellState

TOY_GRID = 8
TOY_AOI = (4, 4)


def make_toy_spec(variant="aoi", **overrides):
    """8x8 geometry: three 3x3 same convs with 2x2 pools (8 -> 4 -> 2 -> 1)."""
    fields = dict(
        variant=variant,
        height=TOY_GRID,
        width=TOY_GRID,
        encoder_widths=(4, 4, 4),
        conv_kernels=(3, 3, 3),
        conv_strides=(1, 1, 1),
        conv_paddings=(1, 1, 1),
        pool_kernel=2,
        pool_stride=2,
        latent_dim=8,
        decoder_hidden=8,
        recon_channels=4,
        recon_widths=(4, 4),
        convlstm_widths=(4, 4),
    )
    fields.update(overrides)
    return ModelSpec(**fields)


def make_toy_chunk(sim_id, start_step, positive, rng, grid=TOY_GRID, aoi=TOY_AOI):
    """
    A chunk whose AOI burns from step 40 on when positive. Positive chunks
    show a fire next to the AOI during observation so the label is learnable.
    """
    states = np.full((CHUNK_LEN, grid, grid), CellState.TREE, dtype=np.uint8)
    empty = rng.random((grid, grid)) < 0.2
    states[:, empty] = CellState.EMPTY
    x, y = aoi
    states[:, y, x] = CellState.TREE
    if positive:
        states[:10, y, x - 1] = CellState.FIRE
        states[10:, y, x - 1] = CellState.BURNED_OUT
        states[40:, y, x] = CellState.EMBER
    return Chunk(sim_id=sim_id, start_step=start_step, states=states)


def make_toy_chunks(count=8, seed=0, first_sim_id=0):
    rng = np.random.default_rng(seed)
    return [
        make_toy_chunk(first_sim_id + i // 2, 10 * (i % 2), positive=i % 4 < 2, rng=rng)
        for i in range(count)
    ]


def toy_manifest(split="train"):
    return DatasetManifest(split=split, height=TOY_GRID, width=TOY_GRID)


@pytest.fixture
def toy_spec():
    return make_toy_spec


@pytest.fixture
def toy_train():
    return ChunkDataset(make_toy_chunks(8, seed=0, first_sim_id=0), toy_manifest("train"))


@pytest.fixture
def toy_test():
    return ChunkDataset(make_toy_chunks(8, seed=1, first_sim_id=100), toy_manifest("test"))
