"""
Tests for the forecasters and their parameter and activation accounting.
"""

from unittest.mock import patch

import numpy as np
import pytest
from scipy.special import expit

from firecast.dataset import AOISpec
from firecast.exceptions import ConfigurationError, DimensionError
from firecast.models import (
    ModelSpec,
    RolloutOutput,
    Variant,
    build_model,
    count_activations,
    count_params,
    describe_layers,
    encoder_trace,
)
from firecast.optim import gradcheck

from .conftest import TOY_AOI, make_toy_spec

PAPER_PARAMS = {
    Variant.AOI: 254_145,
    Variant.RECONSTRUCTION: 286_257,
    Variant.CONVLSTM: 252_689,
}
REFERENCE_PARAMS = {
    Variant.AOI: 262_700,
    Variant.RECONSTRUCTION: 295_600,
    Variant.CONVLSTM: 250_600,
}


def toy_frames(n=2, t_obs=10, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).random((n, t_obs, 3, 8, 8)).astype(dtype)


class TestPaperScaleAccounting:
    """Test cases for layer tables at the 251 x 251 calibration."""

    def test_encoder_trace(self):
        """Test spatial sizes after each conv and pool."""
        assert encoder_trace(ModelSpec()) == [123, 61, 30, 14, 6, 2]

    @pytest.mark.parametrize("variant", list(Variant))
    def test_parameter_counts(self, variant):
        """Test exact counts and the reference band."""
        params = count_params(ModelSpec(variant=variant))
        assert params == PAPER_PARAMS[variant]
        reference = REFERENCE_PARAMS[variant]
        assert 0.85 * reference <= params <= 1.15 * reference

    @pytest.mark.parametrize("variant", list(Variant))
    def test_built_model_matches_table(self, variant):
        """Test that instantiated models hold exactly the tabulated parameters."""
        spec = ModelSpec(variant=variant)
        model = build_model(spec)
        assert model.num_parameters() == count_params(spec)

    def test_lstm_row(self):
        """Test the 64 -> 64 LSTM parameter count."""
        rows = {row.name: row for row in describe_layers(ModelSpec())}
        assert rows["lstm.gates_pre"].params == 33_280
        assert rows["lstm.hidden"].output_shape == (64,)

    def test_activation_ordering(self):
        """Test that the AOI model is the leanest and the ConvLSTM the heaviest."""
        aoi, recon, convlstm = (count_activations(ModelSpec(variant=v)) for v in Variant)
        assert aoi < recon < convlstm
        assert convlstm / aoi >= 5

    def test_convlstm_state_is_counted(self):
        """Test that 60 steps of 64 x 61 x 61 hidden and cell maps are included."""
        spec = ModelSpec(variant=Variant.CONVLSTM)
        rows = {row.name: row for row in describe_layers(spec)}
        for name in ("cell.cell", "cell.hidden"):
            assert rows[name].output_shape == (64, 61, 61)
            assert rows[name].calls(spec.t_obs, spec.t_pred) == 60

        without_state = [row for row in describe_layers(spec)
                         if row.name not in ("cell.cell", "cell.hidden")]
        state = count_activations(spec) - sum(row.size * row.calls(10, 50) for row in without_state)
        assert state == 28_577_280

    def test_convlstm_model_state_shape(self):
        """Test that the built ConvLSTM cell carries 64 x 61 x 61 hidden and cell states."""
        model = build_model(ModelSpec(variant=Variant.CONVLSTM))
        h, c = model.cell.initial_state(2, model.state_h, model.state_w)
        assert h.shape == c.shape == (2, 64, 61, 61)

    def test_no_prediction_steps(self):
        """Test that T_pred = 0 leaves only the observation phase."""
        spec = ModelSpec(t_obs=60, t_pred=0)
        zero_pred = count_activations(spec)
        obs_only = sum(row.size * 60 for row in describe_layers(spec) if row.phase != "pred")
        assert zero_pred == obs_only
        assert count_activations(ModelSpec(), t_obs=60, t_pred=0) == zero_pred

    def test_reconstruction_blocks(self):
        """Test the number of x2 upconvolutions needed to cover the grid."""
        assert ModelSpec(variant="reconstruction").reconstruction_blocks() == 7
        assert make_toy_spec("reconstruction").reconstruction_blocks() == 2

    def test_grid_too_small(self):
        """Test that the default encoder rejects a small grid."""
        with pytest.raises(DimensionError):
            build_model(ModelSpec(height=20, width=20))


class TestModelSpec:
    """Test cases for spec validation and serialization."""

    @pytest.mark.parametrize("overrides,match", [
        ({"hidden_size": 32}, "hidden_size"),
        ({"t_obs": 10, "t_pred": 40}, "t_obs"),
        ({"conv_kernels": (7, 3)}, "conv_kernels"),
        ({"variant": "reconstruction", "recon_widths": (8, 8)}, "recon_widths"),
    ])
    def test_invalid(self, overrides, match):
        """Test that invalid fields are named."""
        with pytest.raises(ConfigurationError, match=match):
            ModelSpec(**overrides)

    def test_unknown_variant(self):
        """Test that variants are restricted to the three forecasters."""
        with pytest.raises(ValueError):
            ModelSpec(variant="transformer")

    def test_dict_round_trip_keeps_hash(self):
        """Test that the model spec hash survives plain-data serialization."""
        spec = make_toy_spec("convlstm")
        again = ModelSpec.from_dict(spec.to_dict())
        assert again == spec
        assert again.spec_hash() == spec.spec_hash()
        assert make_toy_spec("aoi").spec_hash() != spec.spec_hash()

    def test_unknown_field(self):
        """Test that unknown fields are rejected."""
        with pytest.raises(ConfigurationError, match="dropout"):
            ModelSpec.from_dict({"dropout": 0.1})


class TestForecasters:
    """Test cases for toy-sized rollouts."""

    @pytest.mark.parametrize("variant,shape", [
        ("aoi", (2, 50)),
        ("reconstruction", (2, 50, 8, 8)),
        ("convlstm", (2, 50, 8, 8)),
    ])
    def test_output_shapes(self, variant, shape):
        """Test probability shapes, range and hidden trace."""
        model = build_model(make_toy_spec(variant))
        output = model.predict(toy_frames(dtype=np.float32), with_trace=True)

        assert isinstance(output, RolloutOutput)
        assert output.probs.shape == shape
        assert output.probs.min() >= 0.0
        assert output.probs.max() <= 1.0
        assert output.hidden_trace.shape == (2, 60, 64)
        assert model.aoi_series(output, AOISpec(*TOY_AOI)).shape == (2, 50)

    def test_map_aoi_series(self):
        """Test that the AOI series of a map is its AOI pixel."""
        model = build_model(make_toy_spec("reconstruction"))
        probs = model.predict(toy_frames(dtype=np.float32)).probs
        series = model.aoi_series(probs, AOISpec(3, 5))
        assert np.array_equal(series, probs[:, :, 5, 3])

    def test_no_trace_by_default(self):
        """Test that the hidden trace is only collected on request."""
        model = build_model(make_toy_spec())
        assert model.predict(toy_frames(dtype=np.float32)).hidden_trace is None

    def test_zero_prediction_steps(self):
        """Test an observation-only rollout."""
        model = build_model(make_toy_spec(t_obs=60, t_pred=0))
        output = model.predict(toy_frames(t_obs=60, dtype=np.float32), with_trace=True)
        assert output.probs.shape == (2, 0)
        assert output.hidden_trace.shape == (2, 60, 64)

    def test_zeroed_network_is_constant(self):
        """Test that zero weights give sigmoid of the output bias everywhere."""
        model = build_model(make_toy_spec(), dtype=np.float64)
        for _, param in model.named_parameters():
            param.data[...] = 0.0
        model.decoder.fc2.bias.data[...] = 0.3

        probs = model.predict(toy_frames()).probs
        assert np.allclose(probs, expit(0.3))

    def test_seeded_initialization(self):
        """Test that the seed alone determines the weights."""
        first = build_model(make_toy_spec(), seed=3).state_dict()
        second = build_model(make_toy_spec(), seed=3).state_dict()
        other = build_model(make_toy_spec(), seed=4).state_dict()

        assert all(np.array_equal(first[name], second[name]) for name in first)
        assert not np.array_equal(first["fc1.weight"], other["fc1.weight"])

    def test_encoder_sees_all_frames_at_once(self):
        """Test that observed frames go through the encoder as one batch."""
        model = build_model(make_toy_spec())
        with patch.object(model.encoder, "forward", wraps=model.encoder.forward) as spy:
            model.predict(toy_frames(n=3, dtype=np.float32))
        spy.assert_called_once()
        assert spy.call_args[0][0].shape == (30, 3, 8, 8)

    @pytest.mark.parametrize("variant", ["aoi", "reconstruction", "convlstm"])
    def test_rollout_is_causal(self, variant):
        """Test that changing observed frame k leaves every earlier hidden state bit-identical."""
        model = build_model(make_toy_spec(variant)).eval()
        frames = toy_frames()
        k = 6
        changed = frames.copy()
        changed[:, k] = 1.0 - changed[:, k]

        before = model.predict(frames, with_trace=True)
        after = model.predict(changed, with_trace=True)
        assert np.array_equal(before.hidden_trace[:, :k], after.hidden_trace[:, :k])
        assert not np.array_equal(before.hidden_trace[:, k], after.hidden_trace[:, k])
        assert not np.array_equal(before.probs, after.probs)

    @pytest.mark.parametrize("shape,axis", [
        ((2, 9, 3, 8, 8), "time"),
        ((2, 11, 3, 8, 8), "time"),
        ((2, 10, 1, 8, 8), "channels"),
        ((2, 10, 3, 7, 8), "height"),
        ((2, 10, 3, 8, 7), "width"),
        ((10, 3, 8, 8), "rank"),
    ])
    def test_wrong_frames(self, shape, axis):
        """Test that malformed inputs name the offending axis."""
        model = build_model(make_toy_spec())
        with pytest.raises(DimensionError) as excinfo:
            model.forward(np.zeros(shape, dtype=np.float32))
        assert excinfo.value.axis == axis

    @pytest.mark.parametrize("variant", ["aoi", "reconstruction", "convlstm"])
    def test_backward_shapes(self, variant):
        """Test that backward returns a gradient per input frame and fills every parameter."""
        model = build_model(make_toy_spec(variant))
        frames = toy_frames(dtype=np.float32)
        probs, cache = model.forward(frames)
        dframes = model.backward(np.ones_like(probs), cache)

        assert dframes.shape == frames.shape
        grads = {name: param.grad for name, param in model.named_parameters()}
        assert grads["encoder.blocks.0.conv.weight"].any()


class TestEndToEndGradients:
    """Finite-difference checks through whole rollouts."""

    def test_aoi_model(self):
        """Test the AOI forecaster through observation and prediction."""
        model = build_model(make_toy_spec(), seed=1, dtype=np.float64)
        report = gradcheck(model, [toy_frames(seed=1)], tolerance=1e-4, max_checks=4, seed=1)
        assert report.max_rel_error < 1e-4, report.errors

    @pytest.mark.slow
    @pytest.mark.parametrize("variant", ["reconstruction", "convlstm"])
    def test_map_models(self, variant):
        """Test the map forecasters through observation and prediction."""
        model = build_model(make_toy_spec(variant), seed=2, dtype=np.float64)
        report = gradcheck(model, [toy_frames(seed=2)], tolerance=1e-4, max_checks=3, seed=2)
        assert report.max_rel_error < 1e-4, report.errors
