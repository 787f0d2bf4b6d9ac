"""Test suite for the sample_data module."""

from contextlib import nullcontext as does_not_raise

import numpy as np
import pytest

from rotaquant.sample_data import (
    DEFAULT_NUM_BATCHES,
    calibration_batches,
    gaussian_with_outlier,
    make_batches,
    student_t,
    synthetic_tokens,
)


class TestSyntheticTokens:
    """Test suite for the token generators."""

    def test_tokens_are_seeded(self):
        """The same seed gives the same ids, in range."""
        a = synthetic_tokens(4, 8, 32, seed=1)
        b = synthetic_tokens(4, 8, 32, seed=1)
        assert a.dtype == np.int32
        assert a.shape == (4, 8)
        np.testing.assert_array_equal(a, b)
        assert a.min() >= 0 and a.max() < 32
        assert not np.array_equal(a, synthetic_tokens(4, 8, 32, seed=2))

    @pytest.mark.parametrize(
        "args", [(0, 8, 32), (4, 0, 32), (4, 8, 0)], ids=["n", "len", "vocab"]
    )
    def test_invalid_token_arguments(self, args):
        """Sizes must be positive."""
        with pytest.raises(ValueError):
            synthetic_tokens(*args, seed=0)

    @pytest.mark.parametrize(
        "batch_size, expected_sizes, expected_exception",
        [
            (2, [2, 2, 1], does_not_raise()),
            (5, [5], does_not_raise()),
            (10, [5], does_not_raise()),
            (0, None, pytest.raises(ValueError)),
        ],
    )
    def test_make_batches(
        self, batch_size, expected_sizes, expected_exception
    ):
        """The last batch holds the remainder."""
        tokens = np.arange(10).reshape(5, 2)
        with expected_exception:
            batches = make_batches(tokens, batch_size)
            assert [len(b) for b in batches] == expected_sizes
            np.testing.assert_array_equal(np.concatenate(batches), tokens)

    def test_calibration_batches(self, small_config):
        """Batches match the model's vocabulary and sequence length."""
        batches = calibration_batches(small_config, seed=0)
        assert len(batches) == DEFAULT_NUM_BATCHES
        assert all(b.shape == (4, small_config.seq_len) for b in batches)
        short = calibration_batches(
            small_config, seed=0, num_batches=1, seq_len=3
        )
        assert short[0].shape == (4, 3)

    def test_calibration_batches_need_one_batch(self, small_config):
        """At least one batch is required."""
        with pytest.raises(ValueError):
            calibration_batches(small_config, seed=0, num_batches=0)


class TestActivationSamples:
    """Test suite for the activation-like vectors."""

    def test_gaussian_with_outlier(self):
        """Outliers sit at +-magnitude; the rest is a normal core."""
        x = gaussian_with_outlier(1000, seed=3, num_outliers=2)
        assert x.dtype == np.float32
        assert np.sum(np.abs(x) == 64.0) == 2
        core = x[np.abs(x) != 64.0]
        assert np.abs(core).max() < 10
        np.testing.assert_array_equal(x, gaussian_with_outlier(1000, 3, 2))

    def test_custom_magnitude(self):
        """The outlier magnitude is configurable."""
        x = gaussian_with_outlier(100, seed=0, outlier_magnitude=16.0)
        assert np.abs(x).max() == 16.0

    @pytest.mark.parametrize("num_outliers", [-1, 11])
    def test_invalid_outlier_count(self, num_outliers):
        """The number of outliers must fit in the vector."""
        with pytest.raises(ValueError):
            gaussian_with_outlier(10, seed=0, num_outliers=num_outliers)

    def test_student_t(self):
        """Student-t samples are heavier-tailed than Gaussian ones."""
        x = student_t(10000, seed=0)
        assert x.dtype == np.float32
        assert np.abs(x).max() > 8
        with pytest.raises(ValueError):
            student_t(10, seed=0, df=0)
