from contextlib import nullcontext as does_not_raise

import numpy as np
import pytest

from rotaquant.core import autodiff as ad
from rotaquant.model import (
    DEFAULT_BITS,
    LINEARS,
    ROLES,
    QuantSite,
    ToyTransformerConfig,
    build_model,
    build_sites,
    fold_norm_gains,
)
from rotaquant.pipeline import initialize_sites
from rotaquant.quantizer import QuantSpec
from rotaquant.rotation import kurtosis


class TestToyTransformerConfig:
    """Test suite for the model configuration."""

    def test_defaults(self):
        """Defaults describe a W4A8 model with 16-bit SiLU outputs."""
        config = ToyTransformerConfig()
        assert config.hidden_dim == 64
        assert config.head_dim == 16
        assert config.bits == DEFAULT_BITS

    @pytest.mark.parametrize(
        "kwargs, expected_exception",
        [
            ({}, does_not_raise()),
            ({"hidden_dim": 48}, pytest.raises(ValueError)),
            ({"num_heads": 3}, pytest.raises(ValueError)),
            ({"num_layers": 0}, pytest.raises(ValueError)),
            ({"outlier_layer": 2}, pytest.raises(ValueError)),
            ({"outlier_layer": None}, does_not_raise()),
            ({"outlier_channel": 256}, pytest.raises(ValueError)),
            ({"weight_outlier_rate": 0.0}, does_not_raise()),
            ({"weight_outlier_rate": 1.0}, pytest.raises(ValueError)),
            ({"weight_outlier_scale": 0.5}, pytest.raises(ValueError)),
            ({"bits": {"key": 4}}, does_not_raise()),
            ({"bits": {"key": 5}}, pytest.raises(ValueError)),
            ({"bits": {"query": 8}}, pytest.raises(ValueError)),
        ],
    )
    def test_validation(self, kwargs, expected_exception):
        """Invalid shapes, outlier positions and bits are rejected."""
        with expected_exception:
            ToyTransformerConfig(**kwargs)

    def test_partial_bits_are_merged(self):
        """Roles missing from ``bits`` keep their defaults."""
        config = ToyTransformerConfig(bits={"linear_weight": 8})
        assert config.bits["linear_weight"] == 8
        assert config.bits["silu_output"] == DEFAULT_BITS["silu_output"]

    def test_dict_round_trip(self, small_config):
        """to_dict output rebuilds an equal config."""
        data = small_config.to_dict()
        assert ToyTransformerConfig.from_dict(data) == small_config

    @pytest.mark.parametrize(
        "data", [{"hidden": 16}, [("hidden_dim", 16)]], ids=["key", "list"]
    )
    def test_from_dict_rejects_invalid(self, data):
        """Unknown keys and non-mappings are rejected."""
        with pytest.raises(ValueError):
            ToyTransformerConfig.from_dict(data)

    def test_with_bits(self, small_config):
        """with_bits overrides only weight and input-activation bits."""
        config = small_config.with_bits(weight_bits=8, act_bits=16)
        assert config.bits["linear_weight"] == 8
        assert config.bits["linear_input_act"] == 16
        assert config.bits["key"] == small_config.bits["key"]
        assert small_config.with_bits() == small_config


class TestSites:
    """Test suite for the site layout."""

    def test_site_count(self, small_config):
        """Every layer has 18 sites, plus 3 for the excluded lm_head."""
        sites = build_sites(small_config)
        assert len(sites) == 18 * small_config.num_layers + 3
        assert {s.role for s in sites.values()} == set(ROLES)
        assert {s.linear for s in sites.values()} == set(LINEARS) | {
            "lm_head"
        }

    def test_stage_assignment(self, small_model):
        """Stage one holds rotated inputs and all weights."""
        one = {s.site_id for s in small_model.sites_in_stage("one")}
        two = {s.site_id for s in small_model.sites_in_stage("two")}
        excluded = small_model.sites_in_stage("excluded")
        assert len(one) == 10 * 2
        assert len(two) == 8 * 2
        assert {s.linear for s in excluded} == {"lm_head"}
        assert "layers.0.q_proj.linear_input_act" in one
        assert "layers.1.down_proj.linear_weight" in one
        assert "layers.0.down_proj.linear_input_act" in two
        assert "layers.0.k_proj.key" in two

    def test_weight_sites_are_per_channel(self, small_model):
        """Weights are quantized per output channel."""
        for site in small_model.sites.values():
            if site.is_weight:
                assert site.spec.per_channel
                assert site.spec.axis == 0

    @pytest.mark.parametrize("rotated", [True, False])
    def test_tensor_class(self, small_config, rotated):
        """down_proj inputs are unrotated even in a rotated model."""
        sites = build_sites(small_config, rotated=rotated)
        q_input = sites["layers.0.q_proj.linear_input_act"].spec
        down_input = sites["layers.0.down_proj.linear_input_act"].spec
        expected = "rotated" if rotated else "unrotated"
        assert q_input.tensor_class == expected
        assert down_input.tensor_class == "unrotated"

    def test_down_proj_input_has_8_bit_floor(self, small_config):
        """The unrotated down_proj input is never below 8 bits."""
        sites = build_sites(small_config.with_bits(act_bits=4))
        assert sites["layers.0.q_proj.linear_input_act"].spec.bits == 4
        assert sites["layers.0.down_proj.linear_input_act"].spec.bits == 8

    def test_stage_one_only_for_inputs_and_weights(self):
        """Other roles cannot be assigned to stage one."""
        with pytest.raises(ValueError, match="stage one"):
            QuantSite(
                "layers.0.k_proj.key", 0, "k_proj", "key", QuantSpec(8), "one"
            )


class TestToyTransformer:
    """Test suite for the forward pass."""

    def test_logit_shape(self, small_model, small_batches):
        """Logits are (batch, seq, vocab) float32."""
        logits = small_model.logits(small_batches[0])
        assert logits.shape == (2, 8, 32)
        assert logits.dtype == np.float32

    def test_rotation_preserves_fp32_output(self, small_config, small_batches):
        """Fusing the rotations leaves the fp32 function unchanged."""
        rotated = build_model(small_config, seed=0, rotated=True)
        plain = build_model(small_config, seed=0, rotated=False)
        assert rotated.rotated and not plain.rotated
        for batch in small_batches:
            np.testing.assert_allclose(
                rotated.teacher_logits(batch),
                plain.teacher_logits(batch),
                rtol=1e-3,
                atol=1e-3,
            )

    def test_same_seed_same_model(self, small_config, small_batches):
        """Models built from one seed are bit-identical."""
        a = build_model(small_config, seed=3)
        b = build_model(small_config, seed=3)
        np.testing.assert_array_equal(
            a.logits(small_batches[0]), b.logits(small_batches[0])
        )

    def test_attention_weights_carry_outliers(self):
        """Attention projections are heavy-tailed, the MLP stays Gaussian."""
        config = ToyTransformerConfig()
        plain = build_model(
            ToyTransformerConfig(weight_outlier_rate=0.0), 0, rotated=False
        )
        spiky = build_model(config, 0, rotated=False)
        for name in ("q_proj", "k_proj", "v_proj", "o_proj"):
            assert kurtosis(spiky.weights[f"layers.0.{name}"]) > 10
            assert abs(kurtosis(plain.weights[f"layers.0.{name}"])) < 1
        assert abs(kurtosis(spiky.weights["layers.1.gate_proj"])) < 1
        # rescaled to the variance of the plain draw
        std = np.std(spiky.weights["layers.1.o_proj"])
        assert 0.6 / np.sqrt(64) < std < 1.4 / np.sqrt(64)

    def test_uninitialized_sites_do_not_quantize(
        self, small_model, small_batches
    ):
        """Sites without parameters pass values through."""
        batch = small_batches[0]
        np.testing.assert_array_equal(
            small_model.logits(batch), small_model.teacher_logits(batch)
        )

    def test_quantization_disabled(self, small_model, small_batches):
        """The context manager runs the fp32 model and restores the flag."""
        initialize_sites(small_model, small_batches)
        batch = small_batches[0]
        quantized = small_model.logits(batch)
        with small_model.quantization_disabled():
            fp32 = small_model.logits(batch)
        assert not np.array_equal(quantized, fp32)
        np.testing.assert_array_equal(
            fp32, small_model.teacher_logits(batch)
        )
        assert small_model.quantization_enabled
        with pytest.raises(KeyError):
            with small_model.quantization_disabled():
                raise KeyError("boom")
        assert small_model.quantization_enabled

    def test_stage_selection(self, small_model, small_batches):
        """Only sites of the requested stages quantize."""
        initialize_sites(small_model, small_batches)
        batch = small_batches[0]
        np.testing.assert_array_equal(
            small_model.logits(batch, stages=()),
            small_model.teacher_logits(batch),
        )
        site = small_model.sites["layers.0.q_proj.linear_input_act"]
        assert small_model.is_active(site, ("one",))
        assert not small_model.is_active(site, ("two",))

    def test_observer_sees_every_site(self, small_model, small_batches):
        """The observer is called at every site, in forward order."""
        seen = []
        small_model.forward(
            small_batches[0], observer=lambda i, v: seen.append(i)
        )
        assert seen == list(small_model.sites)

    def test_forward_records_on_given_tape(self, small_model, small_batches):
        """A caller-supplied tape receives the operations."""
        tape = ad.Tape()
        small_model.forward(small_batches[0], tape=tape)
        assert len(tape.nodes) > 0

    @pytest.mark.parametrize(
        "tokens",
        [
            np.zeros(4, dtype=np.int32),
            np.zeros((1, 4), dtype=np.float32),
            np.zeros((1, 9), dtype=np.int32),
            np.full((1, 4), 32, dtype=np.int32),
            np.full((1, 4), -1, dtype=np.int32),
        ],
        ids=["1d", "float", "too_long", "id_too_large", "negative"],
    )
    def test_invalid_tokens(self, small_model, tokens):
        """Tokens must be integer ids of shape (batch, seq)."""
        with pytest.raises(ValueError):
            small_model.logits(tokens)

    def test_weight_values(self, small_model):
        """Weight values include the fused rotations."""
        values = small_model.weight_values()
        weight_sites = [s for s in small_model.sites.values() if s.is_weight]
        assert set(values) == {s.site_id for s in weight_sites}
        r1 = small_model.rotations["R1"].matrix
        np.testing.assert_allclose(
            values["layers.0.q_proj.linear_weight"],
            small_model.weights["layers.0.q_proj"] @ r1,
            atol=1e-5,
        )

    def test_repr(self, small_model):
        """The repr summarizes the model."""
        assert "rotated=True" in repr(small_model)
        assert "sites=39" in repr(small_model)


def test_fold_norm_gains(rng):
    """A folded gain gives the same output as an explicit one."""
    x = rng.standard_normal((3, 8)).astype(np.float32)
    w = rng.standard_normal((4, 8)).astype(np.float32)
    gain = rng.uniform(0.5, 1.5, 8).astype(np.float32)
    np.testing.assert_allclose(
        (x * gain) @ w.T, x @ fold_norm_gains(w, gain).T, atol=1e-5
    )
