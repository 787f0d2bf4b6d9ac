import numpy as np
import pytest

from rotaquant.core import autodiff as ad


def numeric_grad(loss_fn, value, eps=1e-6):
    """Central finite differences of a scalar function of an array."""
    grad = np.zeros_like(value)
    for index in np.ndindex(value.shape):
        plus, minus = value.copy(), value.copy()
        plus[index] += eps
        minus[index] -= eps
        grad[index] = (loss_fn(plus) - loss_fn(minus)) / (2 * eps)
    return grad


def tape_grad(build, value):
    """Value and gradient of ``build(tape, parameter)`` at ``value``."""
    tape = ad.Tape()
    p = tape.parameter("p", value)
    loss = build(tape, p)
    return float(loss.value), tape.backward(loss)["p"]


def check_gradient(build, value):
    def loss_fn(v):
        return tape_grad(build, v)[0]

    _, analytic = tape_grad(build, value)
    np.testing.assert_allclose(
        analytic, numeric_grad(loss_fn, value), rtol=1e-5, atol=1e-7
    )


class TestAutodiff:
    """Test suite for the reverse-mode tape."""

    @pytest.mark.parametrize(
        "build",
        [
            lambda t, p: ad.sum(ad.square(p)),
            lambda t, p: ad.mean(ad.mul(p, p)),
            lambda t, p: ad.sum(ad.silu(p)),
            lambda t, p: ad.sum(
                ad.mul(ad.softmax(p), np.arange(4.0).reshape(1, 4))
            ),
            lambda t, p: ad.sum(
                ad.mul(ad.rms_norm(p), np.linspace(-1, 1, 12).reshape(3, 4))
            ),
            lambda t, p: ad.sum(
                ad.square(ad.linear(t.constant(np.ones((2, 4))), p))
            ),
            lambda t, p: ad.sum(
                ad.square(ad.transpose(ad.reshape(p, (4, 3)), (1, 0)))
            ),
            lambda t, p: ad.sum(
                ad.square(ad.sub(ad.add(p, 1.0), ad.scale(p, 0.5)))
            ),
        ],
        ids=[
            "square",
            "mul",
            "silu",
            "softmax",
            "rms_norm",
            "linear",
            "reshape_transpose",
            "add_sub_scale",
        ],
    )
    def test_gradients_match_finite_differences(self, build):
        """Analytic gradients match central differences at 108 points."""
        for seed in range(9):
            value = np.random.default_rng(seed).standard_normal((3, 4))
            check_gradient(build, value)

    def test_matmul_gradient(self, rng):
        """Gradients flow through batched matrix products."""
        other = rng.standard_normal((2, 4, 5))

        def build(t, p):
            return ad.sum(ad.square(ad.matmul(p, t.constant(other))))

        check_gradient(build, rng.standard_normal((2, 3, 4)))

    def test_embedding_gradient(self, rng):
        """Repeated ids accumulate into the same row."""
        ids = np.array([[0, 2, 2]])

        def build(t, p):
            return ad.sum(ad.square(ad.embedding(p, ids)))

        check_gradient(build, rng.standard_normal((3, 2)))

    def test_cayley_gradient(self, rng):
        """The Cayley transform is differentiable in its free parameters."""
        weights = rng.standard_normal((4, 4))

        def build(t, p):
            r = ad.cayley(ad.skew_symmetric(p, 4))
            return ad.sum(ad.mul(r, weights))

        check_gradient(build, 0.3 * rng.standard_normal(6))

    def test_block_diagonal_gradient(self, rng):
        """Each copy of the block contributes to its gradient."""
        weights = rng.standard_normal((6, 6))

        def build(t, p):
            return ad.sum(ad.mul(ad.block_diagonal(p, 3), weights))

        check_gradient(build, rng.standard_normal((2, 2)))

    def test_cayley_is_orthogonal(self, rng):
        """The Cayley transform of a skew matrix is orthogonal."""
        tape = ad.Tape()
        a = ad.skew_symmetric(tape.constant(rng.standard_normal(28)), 8)
        r = ad.cayley(a).value
        np.testing.assert_allclose(a.value, -a.value.T)
        np.testing.assert_allclose(r.T @ r, np.eye(8), atol=1e-10)

    def test_cayley_ill_conditioned_raises(self):
        """A numerically singular I + A is rejected."""
        theta = np.zeros(6)
        theta[0] = 1e9
        tape = ad.Tape()
        with pytest.raises(np.linalg.LinAlgError):
            ad.cayley(ad.skew_symmetric(tape.constant(theta), 4))

    def test_unused_parameter_gets_zero_gradient(self):
        """Parameters that do not influence the loss get zeros."""
        tape = ad.Tape()
        used = tape.parameter("used", np.ones(3))
        tape.parameter("unused", np.ones((2, 2)))
        grads = tape.backward(ad.sum(ad.scale(used, 2.0)))
        np.testing.assert_array_equal(grads["used"], [2.0, 2.0, 2.0])
        np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))

    def test_non_scalar_loss_raises(self):
        """Only scalar losses can be back-propagated."""
        tape = ad.Tape()
        p = tape.parameter("p", np.ones(3))
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(ad.scale(p, 2.0))

    def test_duplicate_parameter_raises(self):
        """Parameter names are unique per tape."""
        tape = ad.Tape()
        tape.parameter("p", np.ones(1))
        with pytest.raises(ValueError, match="already"):
            tape.parameter("p", np.ones(1))

    def test_mixing_tapes_raises(self):
        """Variables of two tapes cannot be combined."""
        a = ad.Tape().parameter("a", np.ones(2))
        b = ad.Tape().parameter("b", np.ones(2))
        with pytest.raises(ValueError, match="two tapes"):
            ad.add(a, b)

    def test_cycle_raises(self):
        """A node depending on itself is reported as an internal error."""
        tape = ad.Tape()
        p = tape.parameter("p", np.ones(2))
        y = ad.scale(p, 2.0)
        y.parents = (y,)
        with pytest.raises(RuntimeError, match="Cycle"):
            tape.backward(ad.sum(y))

    def test_backward_helper(self):
        """The module-level helper uses the loss's own tape."""
        tape = ad.Tape()
        p = tape.parameter("p", np.array([3.0]))
        grads = ad.backward(ad.sum(ad.square(p)))
        np.testing.assert_array_equal(grads["p"], [6.0])

    def test_operator_overloads(self):
        """Arithmetic operators build tape operations."""
        tape = ad.Tape()
        p = tape.parameter("p", np.array([2.0]))
        loss = ad.sum(-(p * p + 1.0 - p))
        assert float(loss.value) == -3.0
        np.testing.assert_array_equal(tape.backward(loss)["p"], [-3.0])
