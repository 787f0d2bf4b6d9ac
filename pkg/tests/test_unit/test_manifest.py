import copy
import json

import numpy as np
import pytest

from rotaquant.io.manifest import (
    FORMAT_VERSION,
    apply_manifest,
    build_manifest,
    load_manifest,
    manifest_to_json,
    matrix_digest,
    model_from_manifest,
    save_manifest,
)
from rotaquant.model import ToyTransformerConfig, build_model
from rotaquant.pipeline import calibrate
from rotaquant.sensitivity import PrecisionPlan


@pytest.fixture
def calibrated(small_model, small_batches, quick_optim):
    """Return a calibrated model and its manifest."""
    result = calibrate(small_model, small_batches, quick_optim)
    manifest = build_manifest(
        small_model, plan=result.plan, metrics={"output_mse": 0.5}
    )
    return small_model, manifest


class TestBuildManifest:
    """Test suite for describing a model as a manifest."""

    def test_fields(self, calibrated):
        """Every site and rotation of the model is recorded."""
        model, manifest = calibrated
        assert manifest["format_version"] == FORMAT_VERSION
        assert manifest["seed"] == 0
        assert manifest["rotated"] is True
        assert list(manifest["sites"]) == list(model.sites)
        assert set(manifest["rotations"]) == {
            "R1",
            "layers.0.R2",
            "layers.1.R2",
        }
        assert manifest["precision_plan"]["high_bits"] == 16
        assert manifest["metrics"] == {"output_mse": 0.5}

    def test_site_entry(self, calibrated):
        """Per-channel weights store one scale per output channel."""
        _, manifest = calibrated
        entry = manifest["sites"]["layers.0.q_proj.linear_weight"]
        assert entry["granularity"] == "per_channel"
        assert len(entry["scale"]) == 16
        assert entry["stage"] == "one"
        excluded = manifest["sites"]["lm_head.linear_weight"]
        assert excluded["scale"] is None
        assert excluded["stage"] == "excluded"

    def test_json_is_canonical(self, calibrated):
        """Keys are sorted and the text ends with a newline."""
        _, manifest = calibrated
        text = manifest_to_json(manifest)
        assert text.endswith("}\n")
        assert json.loads(text) == json.loads(
            json.dumps(manifest, sort_keys=True)
        )
        assert text == manifest_to_json(json.loads(text))

    def test_digest(self):
        """Digests are hex SHA-256 strings that track the values."""
        digest = matrix_digest(np.eye(4))
        assert len(digest) == 64
        assert digest == matrix_digest(np.eye(4, dtype=np.float32))
        assert digest != matrix_digest(-np.eye(4))


class TestSaveLoad:
    """Test suite for manifest files."""

    def test_save_and_load(self, calibrated, tmp_path):
        """A saved manifest loads back unchanged."""
        _, manifest = calibrated
        path = save_manifest(manifest, tmp_path / "manifest.json")
        loaded = load_manifest(path)
        assert loaded == json.loads(manifest_to_json(manifest))

    def test_save_refuses_to_overwrite(self, calibrated, existing_file):
        """Existing files are never overwritten."""
        _, manifest = calibrated
        with pytest.raises(FileExistsError):
            save_manifest(manifest, existing_file["file_path"])

    def test_invalid_json(self, tmp_path):
        """Unparseable files are reported as ValueError."""
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ValueError, match="not valid JSON"):
            load_manifest(path)

    def test_missing_field(self, calibrated, tmp_path):
        """The error names the missing field."""
        _, manifest = calibrated
        del manifest["metrics"]
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps(manifest))
        with pytest.raises(ValueError, match="'metrics'"):
            load_manifest(path)

    def test_missing_site_field(self, calibrated, tmp_path):
        """Missing per-site fields are named with their site."""
        _, manifest = calibrated
        del manifest["sites"]["layers.0.k_proj.key"]["scale"]
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps(manifest))
        with pytest.raises(ValueError, match="layers.0.k_proj.key"):
            load_manifest(path)


class TestRestore:
    """Test suite for rebuilding a model from a manifest."""

    def test_round_trip(self, calibrated, small_batches):
        """A rebuilt model has the same manifest and the same logits."""
        model, manifest = calibrated
        text = manifest_to_json(manifest)
        loaded = json.loads(text)
        rebuilt = model_from_manifest(loaded)
        again = build_manifest(
            rebuilt,
            plan=PrecisionPlan.from_dict(loaded["precision_plan"]),
            metrics=loaded["metrics"],
        )
        assert manifest_to_json(again) == text
        np.testing.assert_array_equal(
            rebuilt.logits(small_batches[0]), model.logits(small_batches[0])
        )

    def test_uncalibrated_round_trip(self, small_config):
        """Sites without parameters stay without parameters."""
        model = build_model(small_config, seed=4, rotated=False)
        manifest = json.loads(manifest_to_json(build_manifest(model)))
        rebuilt = model_from_manifest(manifest)
        assert not rebuilt.rotated
        assert all(s.params is None for s in rebuilt.sites.values())

    def test_disabled_site_round_trip(self, calibrated):
        """The enabled flag is restored."""
        _, manifest = calibrated
        manifest["sites"]["layers.0.k_proj.key"]["enabled"] = False
        rebuilt = model_from_manifest(manifest)
        assert not rebuilt.sites["layers.0.k_proj.key"].enabled

    def test_config_check_ignores_bits(self, calibrated, small_config):
        """A matching shape is accepted even with other bit-widths."""
        _, manifest = calibrated
        config = small_config.with_bits(weight_bits=8)
        model_from_manifest(manifest, config=config)
        with pytest.raises(ValueError, match="different model config"):
            model_from_manifest(
                manifest, config=ToyTransformerConfig(hidden_dim=32)
            )

    @pytest.mark.parametrize(
        "tamper, match",
        [
            (lambda m: m.update(seed=1), "seed"),
            (lambda m: m.update(rotated=False), "rotated"),
            (lambda m: m["sites"].pop("layers.0.k_proj.key"), "missing"),
            (
                lambda m: m["rotations"]["R1"].update(digest="0" * 64),
                "digest",
            ),
            (
                lambda m: m["rotations"]["R1"].update(seed=123),
                "different model",
            ),
            (
                lambda m: m["sites"]["layers.0.k_proj.key"].update(
                    stage="one"
                ),
                "role/stage",
            ),
        ],
        ids=["seed", "rotated", "site", "digest", "rotation_seed", "stage"],
    )
    def test_mismatch_is_rejected(self, calibrated, tamper, match):
        """Manifests of other models cannot be applied."""
        model, manifest = calibrated
        tampered = copy.deepcopy(manifest)
        tamper(tampered)
        with pytest.raises(ValueError, match=match):
            apply_manifest(model, tampered)
