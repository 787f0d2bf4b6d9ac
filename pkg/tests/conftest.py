"""Fixtures and configurations applied to the entire test suite."""

import json
import logging
import os
from pathlib import Path
from unittest.mock import mock_open, patch

import numpy as np
import pytest

from rotaquant.logging import configure_logging
from rotaquant.model import ToyTransformerConfig, build_model
from rotaquant.pipeline import OptimConfig
from rotaquant.sample_data import calibration_batches

SMALL_CONFIG = {
    "hidden_dim": 16,
    "num_heads": 2,
    "mlp_dim": 32,
    "num_layers": 2,
    "vocab_size": 32,
    "seq_len": 8,
}
WIDE_CONFIG = {
    "hidden_dim": 256,
    "num_heads": 4,
    "mlp_dim": 1024,
    "num_layers": 1,
    "vocab_size": 64,
    "seq_len": 16,
}


@pytest.fixture(autouse=True)
def setup_logging(tmp_path):
    """Set up logging for the test module.
    Redirects all logging to a temporary directory.
    """
    configure_logging(
        log_level=logging.DEBUG,
        logger_name="rotaquant",
        log_directory=(tmp_path / ".rotaquant"),
    )


@pytest.fixture
def rng():
    """Return a seeded random generator."""
    return np.random.default_rng(42)


@pytest.fixture
def small_config():
    """Return the configuration of a model small enough for unit tests."""
    return ToyTransformerConfig(**SMALL_CONFIG)


@pytest.fixture
def small_model(small_config):
    """Return a rotated toy model with uninitialized sites."""
    return build_model(small_config, seed=0)


@pytest.fixture
def small_batches(small_config):
    """Return two synthetic batches of two sequences."""
    return calibration_batches(
        small_config, seed=0, num_batches=2, batch_size=2
    )


@pytest.fixture
def quick_optim():
    """Return a Stage One configuration with a handful of steps."""
    return OptimConfig(steps=3, warmup_local_loss_steps=2, batch_size=2)


@pytest.fixture
def small_config_file(tmp_path):
    """Return the path of a JSON file holding the small model config."""
    file_path = tmp_path / "model.json"
    file_path.write_text(json.dumps(SMALL_CONFIG))
    return file_path


@pytest.fixture
def wide_config():
    """Return a one-layer model with 256-wide rows."""
    return ToyTransformerConfig(**WIDE_CONFIG)


@pytest.fixture
def wide_config_file(tmp_path):
    """Return the path of a JSON file holding the wide model config."""
    file_path = tmp_path / "wide.json"
    file_path.write_text(json.dumps(WIDE_CONFIG))
    return file_path


@pytest.fixture
def unreadable_file(tmp_path):
    """Return a dictionary containing the file path and
    expected permission for an unreadable .qtns file.
    """
    file_path = tmp_path / "unreadable.qtns"
    file_mock = mock_open()
    file_mock.return_value.read.side_effect = PermissionError
    with (
        patch("builtins.open", side_effect=file_mock),
        patch.object(Path, "exists", return_value=True),
    ):
        yield {
            "file_path": file_path,
            "expected_permission": "r",
        }


@pytest.fixture
def unwriteable_file(tmp_path):
    """Return a dictionary containing the file path and
    expected permission for an unwriteable .json file.
    """
    unwriteable_dir = tmp_path / "no_write"
    unwriteable_dir.mkdir()
    original_access = os.access

    def mock_access(path, mode):
        if path == unwriteable_dir and mode == os.W_OK:
            return False
        # Ensure that the original access function is called
        # for all other cases
        return original_access(path, mode)

    with patch("os.access", side_effect=mock_access):
        file_path = unwriteable_dir / "unwriteable.json"
        yield {
            "file_path": file_path,
            "expected_permission": "w",
        }


@pytest.fixture
def existing_file(tmp_path):
    """Return a dictionary containing the path of an existing file
    that is about to be written to.
    """
    file_path = tmp_path / "existing.json"
    file_path.write_text("{}")
    return {
        "file_path": file_path,
        "expected_permission": "w",
    }


@pytest.fixture
def wrong_ext_file(tmp_path):
    """Return a dictionary containing the file path,
    expected permission, and expected suffix for a file
    with an incorrect extension.
    """
    file_path = tmp_path / "wrong_extension.txt"
    with open(file_path, "w") as f:
        f.write("")
    return {
        "file_path": file_path,
        "expected_permission": "r",
        "expected_suffix": [".qtns", ".json"],
    }


@pytest.fixture
def nonexistent_file(tmp_path):
    """Return a dictionary containing the file path and
    expected permission for a nonexistent file.
    """
    file_path = tmp_path / "nonexistent.qtns"
    return {
        "file_path": file_path,
        "expected_permission": "r",
    }


@pytest.fixture
def directory(tmp_path):
    """Return a dictionary containing the file path and
    expected permission for a directory.
    """
    file_path = tmp_path / "directory"
    file_path.mkdir()
    return {
        "file_path": file_path,
        "expected_permission": "r",
    }
