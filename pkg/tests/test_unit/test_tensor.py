from contextlib import nullcontext as does_not_raise

import numpy as np
import pytest

from rotaquant.core.tensor import as_tensor, matmul, round_half_even


class TestTensor:
    """Test suite for the tensor module."""

    def test_as_tensor_converts_to_float32(self):
        """Lists and float64 arrays become C-contiguous float32 arrays."""
        tensor = as_tensor(np.arange(6, dtype=np.float64).reshape(2, 3).T)
        assert tensor.dtype == np.float32
        assert tensor.flags["C_CONTIGUOUS"]
        np.testing.assert_array_equal(tensor, [[0, 3], [1, 4], [2, 5]])

    @pytest.mark.parametrize(
        "value, expected_exception",
        [
            ([[1.0, 2.0]], does_not_raise()),
            (3.0, does_not_raise()),
            (np.zeros((2, 0)), pytest.raises(ValueError)),
            ([1.0, np.nan], pytest.raises(ValueError)),
            ([np.inf], pytest.raises(ValueError)),
        ],
    )
    def test_as_tensor_validation(self, value, expected_exception):
        """Empty dimensions and non-finite values are rejected."""
        with expected_exception:
            as_tensor(value)

    @pytest.mark.parametrize(
        "a_shape, b_shape, expected",
        [
            ((2, 3), (3, 4), does_not_raise((2, 4))),
            ((5, 2, 3), (5, 3, 4), does_not_raise((5, 2, 4))),
            ((3,), (3, 4), pytest.raises(ValueError)),
            ((2, 3), (4, 4), pytest.raises(ValueError)),
            ((5, 2, 3), (4, 3, 4), pytest.raises(ValueError)),
        ],
    )
    def test_matmul_shapes(self, a_shape, b_shape, expected, rng):
        """Shapes must agree on the inner and batch dimensions."""
        a = rng.standard_normal(a_shape).astype(np.float32)
        b = rng.standard_normal(b_shape).astype(np.float32)
        with expected as expected_shape:
            assert matmul(a, b).shape == expected_shape

    def test_matmul_matches_triple_loop(self, rng):
        """Entries equal the textbook sum over the inner index."""
        a, b = (
            (rng.standard_normal((8, 8)) / np.sqrt(8)).astype(np.float32)
            for _ in range(2)
        )
        expected = np.zeros((8, 8))
        for i in range(8):
            for j in range(8):
                for k in range(8):
                    expected[i, j] += float(a[i, k]) * float(b[k, j])
        np.testing.assert_allclose(matmul(a, b), expected, atol=1e-6)

    def test_matmul_is_associative(self, rng):
        """(AB)C and A(BC) agree up to float32 rounding."""
        a, b, c = (
            (rng.standard_normal((8, 8)) / np.sqrt(8)).astype(np.float32)
            for _ in range(3)
        )
        np.testing.assert_allclose(
            matmul(matmul(a, b), c), matmul(a, matmul(b, c)), atol=1e-4
        )

    @pytest.mark.parametrize(
        "a, b, expected",
        [
            ([[1.0, 0.0], [0.0, 1.0]], [[2.0, 3.0], [4.0, 5.0]], None),
            ([[1.0, 2.0]], [[3.0], [4.0]], [[11.0]]),
        ],
    )
    def test_matmul_examples(self, a, b, expected):
        """The identity leaves a matrix unchanged; a row times a column."""
        a = np.asarray(a, dtype=np.float32)
        b = np.asarray(b, dtype=np.float32)
        np.testing.assert_array_equal(
            matmul(a, b), b if expected is None else expected
        )

    def test_matmul_is_deterministic(self, rng):
        """Repeated products are bit-identical."""
        a = rng.standard_normal((8, 16)).astype(np.float32)
        b = rng.standard_normal((16, 8)).astype(np.float32)
        np.testing.assert_array_equal(matmul(a, b), matmul(a, b))

    def test_round_half_even(self):
        """Ties go to the even neighbour."""
        np.testing.assert_array_equal(
            round_half_even([0.5, 1.5, 2.5, -0.5, -1.5, 2.4]),
            [0.0, 2.0, 2.0, 0.0, -2.0, 2.0],
        )
