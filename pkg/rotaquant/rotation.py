"""Orthogonal rotations: Hadamard, randomized Hadamard and Cayley factors.

Rotations are applied offline: they are fused into the weights of the
linears that read from (input side) or write to (output side) the rotated
space, so the fp32 computation is unchanged while the distributions seen by
the quantizers become smoother.
"""

import logging
from typing import Literal, Optional, Union

import numpy as np
from attrs import define, field, validators

from rotaquant.core import autodiff as ad
from rotaquant.core.tensor import Tensor
from rotaquant.logging import log_error

logger = logging.getLogger(__name__)

ORTHOGONALITY_TOLERANCE = 1e-5


def _as_matrix(value) -> np.ndarray:
    return np.ascontiguousarray(value, dtype=np.float32)


@define
class RotationHandle:
    """An orthogonal matrix with its provenance.

    Attributes
    ----------
    size : int
        Dimension ``n`` of the square matrix.
    matrix : numpy.ndarray
        The (n, n) float32 rotation.
    kind : {"sylvester", "randomized", "cayley"}
        How the matrix was built. Learnable rotations (a Hadamard base
        refined by a Cayley factor) report "cayley".
    site : {"R1", "R2"}
        Fusion site. R1 rotates the residual stream, R2 the per-head value
        space. Default "R1".
    seed : int, optional
        Seed of the random sign diagonal, if any.
    cayley_params : numpy.ndarray, optional
        Free (strictly upper triangular) parameters of the Cayley factor.

    """

    size: int = field(validator=validators.instance_of(int))
    matrix: np.ndarray = field(converter=_as_matrix)
    kind: Literal["sylvester", "randomized", "cayley"] = field(
        validator=validators.in_(["sylvester", "randomized", "cayley"])
    )
    site: Literal["R1", "R2"] = field(
        default="R1", validator=validators.in_(["R1", "R2"])
    )
    seed: Optional[int] = field(default=None)
    cayley_params: Optional[np.ndarray] = field(default=None)

    @matrix.validator
    def _validate_matrix(self, attribute, value):
        if value.shape != (self.size, self.size):
            raise log_error(
                ValueError,
                f"Expected `{attribute.name}` of shape "
                f"({self.size}, {self.size}), but got {value.shape}.",
            )
        error = orthogonality_error(value)
        if error > ORTHOGONALITY_TOLERANCE:
            raise log_error(
                ValueError,
                f"Rotation is not orthogonal: max |R^T R - I| = {error:.3g}.",
            )


@define(frozen=True)
class RotationStatReport:
    """Norm and mean of a vector before and after a rotation."""

    norm_ratio: float
    mean_in: float
    mean_out: float


def orthogonality_error(matrix: np.ndarray) -> float:
    """Return ``max |R^T R - I|``."""
    r = np.asarray(matrix, dtype=np.float64)
    return float(np.abs(r.T @ r - np.eye(r.shape[0])).max())


def _check_power_of_two(n: int) -> None:
    if not isinstance(n, (int, np.integer)) or n < 1 or n & (n - 1):
        raise log_error(
            ValueError, f"Expected a power of two, but got n={n}."
        )


def _sylvester(n: int) -> np.ndarray:
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h / np.sqrt(n)


def sylvester_hadamard(n: int, site: str = "R1") -> RotationHandle:
    """Build the normalized Sylvester Hadamard matrix of size ``n``.

    Parameters
    ----------
    n : int
        Matrix size, a power of two.
    site : {"R1", "R2"}, optional
        Fusion site recorded on the handle. Default "R1".

    Returns
    -------
    RotationHandle
        Entries are ``+-1/sqrt(n)``, so that ``H^T H = I``.

    Examples
    --------
    >>> sylvester_hadamard(2).matrix * np.sqrt(2)
    array([[ 1.,  1.],
           [ 1., -1.]], dtype=float32)

    """
    _check_power_of_two(n)
    return RotationHandle(int(n), _sylvester(n), "sylvester", site=site)


def random_signs(n: int, seed: int) -> np.ndarray:
    """Draw the ``+-1`` diagonal of a randomized Hadamard matrix."""
    rng = np.random.default_rng(seed)
    return rng.choice(np.array([-1.0, 1.0]), size=n)


def randomized_hadamard(n: int, seed: int, site: str = "R1") -> RotationHandle:
    """Build ``D @ H`` with a seeded random sign diagonal ``D``.

    Parameters
    ----------
    n : int
        Matrix size, a power of two.
    seed : int
        Seed of the sign generator.
    site : {"R1", "R2"}, optional
        Fusion site recorded on the handle. Default "R1".

    Returns
    -------
    RotationHandle
        The rotation; identical across runs for equal seeds.

    """
    _check_power_of_two(n)
    matrix = random_signs(n, seed)[:, None] * _sylvester(n)
    return RotationHandle(
        int(n), matrix, "randomized", site=site, seed=int(seed)
    )


def num_cayley_params(n: int) -> int:
    """Number of free parameters of an (n, n) skew-symmetric matrix."""
    return n * (n - 1) // 2


def cayley_rotation(params: np.ndarray, site: str = "R1") -> RotationHandle:
    """Build ``(I - A)(I + A)^-1`` from a skew-symmetric matrix ``A``.

    Parameters
    ----------
    params : numpy.ndarray
        Either the (n, n) skew-symmetric matrix ``A`` or its
        ``n (n - 1) / 2`` strictly upper triangular entries, row-major.
    site : {"R1", "R2"}, optional
        Fusion site recorded on the handle. Default "R1".

    Returns
    -------
    RotationHandle
        The Cayley rotation; ``cayley_params`` holds the free entries.

    Raises
    ------
    ValueError
        If a square ``params`` is not skew-symmetric, or a vector has no
        matching matrix size.
    numpy.linalg.LinAlgError
        If ``I + A`` is numerically singular.

    See Also
    --------
    LearnableRotation : The differentiable form used during optimization.

    """
    params = np.asarray(params, dtype=np.float64)
    if params.ndim == 2:
        n = params.shape[0]
        if params.shape != (n, n) or not np.allclose(
            params, -params.T, atol=1e-12
        ):
            raise log_error(
                ValueError, "Expected a square skew-symmetric matrix."
            )
        theta = params[np.triu_indices(n, k=1)]
    else:
        theta = params.reshape(-1)
        n = int(round((1 + np.sqrt(1 + 8 * theta.size)) / 2))
        if num_cayley_params(n) != theta.size:
            raise log_error(
                ValueError,
                f"{theta.size} free parameters do not form a "
                "skew-symmetric matrix.",
            )
    tape = ad.Tape()
    a = ad.skew_symmetric(tape.parameter("theta", theta), n)
    r = ad.cayley(a)
    return RotationHandle(
        n, r.value, "cayley", site=site, cayley_params=theta
    )


def fuse_into_weight(
    w: Tensor,
    r: Union[RotationHandle, np.ndarray],
    side: Literal["input", "output"],
) -> Tensor:
    """Fold a rotation into a linear weight of shape (out, in).

    Parameters
    ----------
    w : Tensor
        Weight matrix; the layer computes ``x @ w.T``.
    r : RotationHandle or numpy.ndarray
        The rotation.
    side : {"input", "output"}
        "input" returns ``w @ r`` (the layer then reads ``x @ r``);
        "output" returns ``r.T @ w`` (the layer writes ``y @ r``).

    Returns
    -------
    Tensor
        The fused float32 weight.

    Raises
    ------
    ValueError
        If the rotated axis of ``w`` does not match the rotation size, or
        ``side`` is unknown.

    """
    matrix = r.matrix if isinstance(r, RotationHandle) else np.asarray(r)
    w = np.asarray(w)
    axis = {"input": 1, "output": 0}.get(side)
    if axis is None:
        raise log_error(
            ValueError, f"Expected side 'input' or 'output', got '{side}'."
        )
    if w.shape[axis] != matrix.shape[0]:
        raise log_error(
            ValueError,
            f"Cannot fuse a rotation of size {matrix.shape[0]} into the "
            f"{side} side of a weight of shape {w.shape}.",
        )
    w64 = w.astype(np.float64)
    r64 = matrix.astype(np.float64)
    fused = w64 @ r64 if side == "input" else r64.T @ w64
    return fused.astype(np.float32)


def rotation_stat_check(
    x: Tensor, r: Union[RotationHandle, np.ndarray]
) -> RotationStatReport:
    """Compare the norm and mean of a flattened vector before/after ``r``.

    Raises
    ------
    ValueError
        If the flattened length differs from the rotation size, or ``x``
        is all zeros.

    """
    matrix = r.matrix if isinstance(r, RotationHandle) else np.asarray(r)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != matrix.shape[0]:
        raise log_error(
            ValueError,
            f"Expected a vector of length {matrix.shape[0]}, "
            f"but got {x.size}.",
        )
    norm_in = np.linalg.norm(x)
    if norm_in == 0:
        raise log_error(ValueError, "Cannot compare norms of a zero vector.")
    y = matrix.astype(np.float64) @ x
    return RotationStatReport(
        norm_ratio=float(np.linalg.norm(y) / norm_in),
        mean_in=float(x.mean()),
        mean_out=float(y.mean()),
    )


def kurtosis(x: np.ndarray) -> float:
    """Excess kurtosis of all elements (0 for a Gaussian)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    centered = x - x.mean()
    var = np.mean(centered**2)
    if var == 0:
        return 0.0
    return float(np.mean(centered**4) / var**2 - 3.0)


class LearnableRotation:
    """A fixed randomized Hadamard base refined by a Cayley factor.

    The rotation is ``base @ cayley(A)``, with ``A`` built from
    ``theta``. ``theta`` starts at zero, so the initial rotation equals the
    base; every update keeps the product exactly orthogonal.

    Parameters
    ----------
    size : int
        Rotation size, a power of two.
    seed : int
        Seed of the base's sign diagonal.
    site : {"R1", "R2"}
        Fusion site.
    name : str
        Parameter name on the optimization tape.

    """

    def __init__(self, size: int, seed: int, site: str, name: str):
        self.base = randomized_hadamard(size, seed, site=site)
        self.theta = np.zeros(num_cayley_params(size), dtype=np.float32)
        self.site = site
        self.name = name

    @property
    def size(self) -> int:
        """Rotation size."""
        return self.base.size

    @property
    def matrix(self) -> Tensor:
        """Current rotation as a float32 matrix."""
        return self.handle().matrix

    def on_tape(self, tape: ad.Tape) -> ad.Variable:
        """Record the rotation on a tape, with ``theta`` as a parameter."""
        theta = tape.parameter(self.name, self.theta)
        factor = ad.cayley(ad.skew_symmetric(theta, self.size))
        return ad.matmul(tape.constant(self.base.matrix), factor)

    def handle(self) -> RotationHandle:
        """Freeze the current rotation into a :class:`RotationHandle`."""
        factor = cayley_rotation(self.theta, site=self.site).matrix
        matrix = (
            self.base.matrix.astype(np.float64) @ factor.astype(np.float64)
        )
        return RotationHandle(
            self.size,
            matrix,
            "cayley",
            site=self.site,
            seed=self.base.seed,
            cayley_params=self.theta.copy(),
        )
