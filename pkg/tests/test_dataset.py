"""
Tests for chunking, rendering, labeling and the dataset container.
"""

import numpy as np
import pytest
import yaml

from firecast.cli import EXIT_DATA, exit_code_for
from firecast.dataset import (
    CHUNK_LEN,
    DEFAULT_PALETTE,
    MANIFEST_NAME,
    PAYLOAD_NAME,
    AOISpec,
    Chunk,
    ChunkDataset,
    DatasetManifest,
    LabelMode,
    SimulationRecord,
    aoi_grid_coords,
    check_split_hygiene,
    chunk_trajectory,
    decode_rgb,
    expected_chunk_count,
    extract_aoi_labels,
    generate_split,
    read_dataset,
    render_rgb,
    write_dataset,
    write_ppm,
)
from firecast.exceptions import (
    ChecksumMismatchError,
    ChunkLayoutError,
    ConfigurationError,
    DimensionError,
    FormatVersionError,
    PaletteError,
    SplitLeakError,
    TruncatedDatasetError,
)
from firecast.simulator import CellState, SimParams, SimState, burning_mask, run

from .conftest import TOY_AOI, make_toy_chunks, toy_manifest


def fake_trajectory(length, grid=4):
    """States whose grid at step t is filled with t % 5."""
    return [
        SimState(states=np.full((grid, grid), t % 5, dtype=np.uint8),
                 heat=np.zeros((grid, grid)), step_index=t)
        for t in range(length)
    ]


def aoi_chunk(column):
    """An 8x8 chunk whose (2, 3) cell follows the given 60-step state column."""
    states = np.full((CHUNK_LEN, 8, 8), CellState.TREE, dtype=np.uint8)
    states[:, 3, 2] = column
    return Chunk(sim_id=0, start_step=0, states=states)


class TestChunking:
    """Test cases for cutting trajectories into chunks."""

    @pytest.mark.parametrize("length,starts", [
        (60, [0]),
        (69, [0]),
        (70, [0, 10]),
        (200, list(range(0, 141, 10))),
        (59, []),
    ])
    def test_chunk_starts(self, length, starts):
        """Test chunk start steps for several trajectory lengths."""
        chunks = chunk_trajectory(fake_trajectory(length), sim_id=3)
        assert [chunk.start_step for chunk in chunks] == starts
        assert all(chunk.states.shape == (CHUNK_LEN, 4, 4) for chunk in chunks)
        assert all(chunk.sim_id == 3 for chunk in chunks)

    def test_consecutive_chunks_overlap(self):
        """Test that neighboring chunks share 50 bit-identical grids."""
        first, second = chunk_trajectory(fake_trajectory(70))[:2]
        assert np.array_equal(first.states[10:], second.states[:50])
        assert first.states[0, 0, 0] == 0
        assert second.states[0, 0, 0] == 10 % 5

    def test_invalid_stride(self):
        """Test that non-positive lengths and strides are rejected."""
        with pytest.raises(ConfigurationError, match="stride"):
            chunk_trajectory(fake_trajectory(60), stride=0)

    def test_expected_chunk_count(self):
        """Test the closed-form recount."""
        assert expected_chunk_count([60, 69, 70, 200, 59]) == 1 + 1 + 2 + 15 + 0
        assert expected_chunk_count([]) == 0

    def test_chunks_are_copies(self):
        """Test that chunks do not alias each other."""
        first, second = chunk_trajectory(fake_trajectory(70))[:2]
        first.states[10:] = 99
        assert second.states[0, 0, 0] != 99


class TestRendering:
    """Test cases for RGB rendering and decoding."""

    def test_empty_grid_is_black(self):
        """Test that Empty cells render as (0, 0, 0)."""
        frame = render_rgb(np.zeros((5, 6), dtype=np.uint8))
        assert frame.shape == (3, 5, 6)
        assert frame.dtype == np.uint8
        assert not frame.any()

    def test_single_tree_single_pixel(self):
        """Test that one tree gives exactly one non-black pixel."""
        states = np.zeros((4, 4), dtype=np.uint8)
        states[0, 0] = CellState.TREE
        frame = render_rgb(states)

        assert np.count_nonzero(frame.any(axis=0)) == 1
        assert tuple(frame[:, 0, 0]) == DEFAULT_PALETTE[CellState.TREE]

    def test_stack_of_grids(self):
        """Test that (T, H, W) renders to (T, 3, H, W)."""
        frames = render_rgb(np.zeros((7, 4, 5), dtype=np.uint8))
        assert frames.shape == (7, 3, 4, 5)

    def test_decode_round_trip(self):
        """Test that decoding inverts rendering for every cell state."""
        states = np.array([[0, 1, 2], [3, 4, 0]], dtype=np.uint8)
        assert np.array_equal(decode_rgb(render_rgb(states)), states)

    def test_non_injective_palette_cannot_decode(self):
        """Test that two states sharing a color are rejected on decode."""
        palette = dict(DEFAULT_PALETTE)
        palette[CellState.EMBER] = palette[CellState.FIRE]
        frame = render_rgb(np.zeros((2, 2), dtype=np.uint8), palette)
        with pytest.raises(PaletteError, match="injective"):
            decode_rgb(frame, palette)

    def test_empty_must_be_black(self):
        """Test that a palette coloring Empty cells is rejected."""
        palette = dict(DEFAULT_PALETTE)
        palette[CellState.EMPTY] = (1, 1, 1)
        with pytest.raises(PaletteError, match="Empty"):
            render_rgb(np.zeros((2, 2), dtype=np.uint8), palette)

    def test_incomplete_palette(self):
        """Test that a palette missing a state is rejected."""
        palette = {state: color for state, color in DEFAULT_PALETTE.items()
                   if state is not CellState.BURNED_OUT}
        with pytest.raises(PaletteError, match="BURNED_OUT"):
            render_rgb(np.zeros((2, 2), dtype=np.uint8), palette)

    def test_unknown_color_cannot_decode(self):
        """Test that pixels outside the palette are rejected."""
        frame = np.full((3, 2, 2), 7, dtype=np.uint8)
        with pytest.raises(PaletteError, match="outside"):
            decode_rgb(frame)

    def test_write_ppm(self, tmp_path):
        """Test the binary PPM header and payload size."""
        frame = render_rgb(np.ones((3, 5), dtype=np.uint8))
        path = tmp_path / "frame.ppm"
        write_ppm(frame, path)

        data = path.read_bytes()
        header = b"P6\n5 3\n255\n"
        assert data.startswith(header)
        assert len(data) == len(header) + 3 * 5 * 3


class TestLabels:
    """Test cases for AOI labels and AOI coordinates."""

    def test_tree_aoi_is_never_burning(self):
        """Test that an AOI that stays a tree is labeled 0 throughout."""
        chunk = aoi_chunk(np.full(CHUNK_LEN, CellState.TREE))
        for mode in LabelMode:
            assert not extract_aoi_labels(chunk, AOISpec(2, 3), mode).any()

    def test_instantaneous_and_latched(self):
        """Test labels of an AOI that ignites at step 30 and burns for 5 steps."""
        column = np.full(CHUNK_LEN, CellState.TREE)
        column[30] = CellState.FIRE
        column[31:35] = CellState.EMBER
        column[35:] = CellState.BURNED_OUT
        chunk = aoi_chunk(column)

        instantaneous = extract_aoi_labels(chunk, AOISpec(2, 3), LabelMode.INSTANTANEOUS)
        latched = extract_aoi_labels(chunk, AOISpec(2, 3), "latched")

        assert np.flatnonzero(instantaneous).tolist() == list(range(30, 35))
        assert np.flatnonzero(latched).tolist() == list(range(30, 60))
        assert instantaneous.shape == (CHUNK_LEN,)

    def test_empty_aoi(self):
        """Test that an AOI on an Empty cell is labeled 0 in both modes."""
        chunk = aoi_chunk(np.full(CHUNK_LEN, CellState.EMPTY))
        assert not extract_aoi_labels(chunk, AOISpec(2, 3), LabelMode.LATCHED).any()

    def test_out_of_bounds_aoi(self):
        """Test that an AOI outside the grid is rejected."""
        chunk = aoi_chunk(np.full(CHUNK_LEN, CellState.TREE))
        with pytest.raises(ConfigurationError, match="outside"):
            extract_aoi_labels(chunk, AOISpec(8, 0))

    def test_labels_match_burning_mask(self):
        """Test that instantaneous labels equal the burning mask at the AOI."""
        trajectory = run(SimParams(density=90, width=24, height=24, max_steps=80, rng_seed=2))
        chunks = chunk_trajectory(trajectory)
        if not chunks:
            pytest.skip("fire went out before one chunk was recorded")
        chunk = chunks[0]
        seed_y, seed_x = np.argwhere(trajectory[0].states == CellState.FIRE)[0]
        aoi = AOISpec(int(seed_x), int(seed_y))
        labels = extract_aoi_labels(chunk, aoi)
        expected = [burning_mask(state)[aoi.y, aoi.x] for state in trajectory[:CHUNK_LEN]]
        assert labels.tolist() == expected

    def test_grid_coords_full_scale(self):
        """Test patch centers on a 251 x 251 grid."""
        coords = aoi_grid_coords(251, 251)
        assert len(coords) == 9
        assert AOISpec(125, 125) in coords
        assert coords[0] == AOISpec(41, 41)
        assert coords[1] == AOISpec(125, 41)
        assert {c.x for c in coords} == {41, 125, 209}

    def test_grid_coords_small(self):
        """Test that 3 x 3 yields every cell and 9 x 9 yields {1, 4, 7}."""
        assert {c.as_tuple() for c in aoi_grid_coords(3, 3)} == {
            (x, y) for x in range(3) for y in range(3)
        }
        assert {c.x for c in aoi_grid_coords(9, 9)} == {1, 4, 7}
        with pytest.raises(ConfigurationError, match="3x3"):
            aoi_grid_coords(2, 5)

    def test_parse_aoi(self):
        """Test parsing x,y from the command line."""
        assert AOISpec.parse("12,7") == AOISpec(12, 7)
        with pytest.raises(ConfigurationError, match="x,y"):
            AOISpec.parse("12")


class TestContainer:
    """Test cases for writing and reading datasets."""

    def test_round_trip_is_bit_identical(self, tmp_path):
        """Test that chunks and manifest survive a write/read cycle."""
        chunks = make_toy_chunks(4)
        written = write_dataset(chunks, toy_manifest(), tmp_path / "train")
        loaded, manifest = read_dataset(tmp_path / "train")

        assert len(loaded) == 4
        for original, copy in zip(chunks, loaded):
            assert copy.key == original.key
            assert copy.states.dtype == np.uint8
            assert np.array_equal(copy.states, original.states)
        assert manifest == written
        assert [r.offset for r in manifest.chunks] == [i * CHUNK_LEN * 64 for i in range(4)]

    def test_empty_round_trip(self, tmp_path):
        """Test that an empty dataset reads back empty."""
        write_dataset([], toy_manifest(), tmp_path)
        chunks, manifest = read_dataset(tmp_path)
        assert chunks == []
        assert manifest.chunks == []

    def test_corrupt_payload_names_chunk(self, tmp_path):
        """Test that a flipped byte raises a checksum error naming the chunk."""
        chunks = make_toy_chunks(3)
        write_dataset(chunks, toy_manifest(), tmp_path)
        payload = bytearray((tmp_path / PAYLOAD_NAME).read_bytes())
        payload[CHUNK_LEN * 64 + 5] ^= 0xFF
        (tmp_path / PAYLOAD_NAME).write_bytes(bytes(payload))

        with pytest.raises(ChecksumMismatchError, match="chunk 1") as excinfo:
            read_dataset(tmp_path)
        assert excinfo.value.sim_id == chunks[1].sim_id
        assert excinfo.value.start_step == chunks[1].start_step

    def test_truncated_payload(self, tmp_path):
        """Test that a short payload file is rejected."""
        write_dataset(make_toy_chunks(2), toy_manifest(), tmp_path)
        payload = (tmp_path / PAYLOAD_NAME).read_bytes()
        (tmp_path / PAYLOAD_NAME).write_bytes(payload[:-10])

        with pytest.raises(TruncatedDatasetError, match="bytes"):
            read_dataset(tmp_path)

    def test_unsupported_version(self, tmp_path):
        """Test that an unknown format version is rejected."""
        write_dataset(make_toy_chunks(1), toy_manifest(), tmp_path)
        path = tmp_path / MANIFEST_NAME
        data = yaml.safe_load(path.read_text())
        data["format_version"] = 99
        path.write_text(yaml.safe_dump(data))

        with pytest.raises(FormatVersionError, match="99"):
            read_dataset(tmp_path)

    @pytest.mark.parametrize("edit", [
        lambda data: data.update(height=7),
        lambda data: data["chunks"][1].update(length=CHUNK_LEN * 64 - 8),
    ])
    def test_layout_disagrees_with_manifest(self, tmp_path, edit):
        """Test that a chunk length that does not fit the manifest shape names the chunk."""
        write_dataset(make_toy_chunks(3), toy_manifest(), tmp_path)
        path = tmp_path / MANIFEST_NAME
        data = yaml.safe_load(path.read_text())
        edit(data)
        path.write_text(yaml.safe_dump(data))

        with pytest.raises(ChunkLayoutError, match="manifest shape") as excinfo:
            read_dataset(tmp_path)
        assert excinfo.value.chunk_index in (0, 1)
        assert exit_code_for(excinfo.value) == EXIT_DATA

    def test_shape_mismatch_on_write(self, tmp_path):
        """Test that a chunk of the wrong grid size is rejected."""
        manifest = DatasetManifest(height=4, width=4)
        with pytest.raises(DimensionError, match="manifest expects"):
            write_dataset(make_toy_chunks(1), manifest, tmp_path)

    def test_split_hygiene(self):
        """Test that manifests sharing a sim_id are rejected."""
        train = manifest_with_sims([0, 1, 2])
        test = manifest_with_sims([3, 4])
        check_split_hygiene(train, test)

        leaky = manifest_with_sims([2, 5], split="test")
        with pytest.raises(SplitLeakError, match=r"\[2\]"):
            check_split_hygiene(train, leaky)


def manifest_with_sims(sim_ids, split="train"):
    return DatasetManifest(
        split=split,
        simulations=[SimulationRecord(sim_id=i, rng_seed=i, length=60) for i in sim_ids],
    )


class TestGenerateSplit:
    """Test cases for simulating a whole split."""

    def test_chunk_count_matches_recount(self, tmp_path):
        """Test that the chunk count equals the closed form over recorded lengths."""
        params = SimParams(density=90, width=24, height=24, max_steps=120, rng_seed=4)
        chunks, manifest = generate_split(params, 3, first_sim_id=10, split="test",
                                          max_workers=2)

        lengths = [record.length for record in manifest.simulations]
        assert len(chunks) == expected_chunk_count(lengths)
        assert [record.sim_id for record in manifest.simulations] == [10, 11, 12]
        assert manifest.split == "test"
        assert manifest.density == 90
        assert (manifest.height, manifest.width) == (24, 24)

        write_dataset(chunks, manifest, tmp_path)
        loaded, reread = read_dataset(tmp_path)
        seeds = {record.sim_id: record.rng_seed for record in reread.simulations}
        for chunk in loaded:
            assert chunk.params.rng_seed == seeds[chunk.sim_id]
            assert chunk.start_step % 10 == 0

    def test_split_is_reproducible(self):
        """Test that the same parameters give the same chunks."""
        params = SimParams(density=90, width=16, height=16, max_steps=70, rng_seed=1)
        first, _ = generate_split(params, 2)
        second, _ = generate_split(params, 2, max_workers=1)

        assert [c.key for c in first] == [c.key for c in second]
        for a, b in zip(first, second):
            assert np.array_equal(a.states, b.states)


class TestChunkDataset:
    """Test cases for the model-facing dataset view."""

    def test_observation_frames(self, toy_train):
        """Test input shape, dtype and range."""
        frames = toy_train.observation_frames([0, 1, 2], t_obs=10)
        assert frames.shape == (3, 10, 3, 8, 8)
        assert frames.dtype == np.float32
        assert frames.min() >= 0.0
        assert frames.max() <= 1.0

    def test_aoi_targets(self, toy_train):
        """Test that AOI targets cover the prediction window."""
        targets = toy_train.aoi_targets([0, 2], AOISpec(*TOY_AOI), t_obs=10)
        assert targets.shape == (2, 50)
        assert targets[0, -1] == 1.0
        assert targets[1, -1] == 0.0
        assert targets[0, :30].sum() == 0.0

    def test_mask_targets(self, toy_train):
        """Test burning-mask targets in both label modes."""
        instantaneous = toy_train.mask_targets([0], t_obs=10)
        latched = toy_train.mask_targets([0], t_obs=10, label_mode="latched")

        assert instantaneous.shape == (1, 50, 8, 8)
        x, y = TOY_AOI
        assert instantaneous[0, -1, y, x] == 1.0
        assert np.all(latched >= instantaneous)

    def test_grid_shape_and_keys(self, toy_train):
        """Test grid shape and chunk keys."""
        assert toy_train.grid_shape == (8, 8)
        assert toy_train.keys[:2] == [(0, 0), (0, 10)]
        assert len(toy_train) == 8

    def test_load(self, tmp_path):
        """Test loading a written dataset through ChunkDataset."""
        write_dataset(make_toy_chunks(2), toy_manifest("test"), tmp_path)
        dataset = ChunkDataset.load(tmp_path)
        assert len(dataset) == 2
        assert dataset.manifest.split == "test"
        assert dataset.label_mode is LabelMode.INSTANTANEOUS
