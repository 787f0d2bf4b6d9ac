"""Dense float32 tensors and the deterministic kernels built on them."""

from typing import Any

import numpy as np
import numpy.typing as npt

from rotaquant.logging import log_error

Tensor = npt.NDArray[np.float32]
"""A C-contiguous, row-major float32 ``numpy.ndarray``."""

IntTensor = npt.NDArray[np.int32]
"""An int32 ``numpy.ndarray`` holding quantized values or token ids."""


def as_tensor(value: Any, name: str = "tensor") -> Tensor:
    """Convert a value into a validated float32 tensor.

    Parameters
    ----------
    value : array-like
        Any value accepted by ``numpy.asarray``.
    name : str, optional
        Name used in error messages. Defaults to "tensor".

    Returns
    -------
    Tensor
        A C-contiguous float32 copy (or view) of ``value``.

    Raises
    ------
    ValueError
        If the tensor has a zero-sized dimension or contains NaN/Inf.

    """
    array = np.ascontiguousarray(value, dtype=np.float32)
    if array.ndim > 0 and 0 in array.shape:
        raise log_error(
            ValueError,
            f"Expected `{name}` to have positive dimension sizes, "
            f"but got shape {array.shape}.",
        )
    if not np.all(np.isfinite(array)):
        raise log_error(
            ValueError, f"Expected `{name}` to contain only finite values."
        )
    return array


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Multiply two matrices (or two equal-sized stacks of matrices).

    Parameters
    ----------
    a : Tensor
        Array of shape (..., m, k).
    b : Tensor
        Array of shape (..., k, n), with the same leading shape as ``a``.

    Returns
    -------
    Tensor
        The product of shape (..., m, n), in the dtype of the operands.

    Raises
    ------
    ValueError
        If the operands are not at least 2-dimensional, if their inner
        dimensions disagree, or if their leading (batch) shapes differ.

    """
    if a.ndim < 2 or b.ndim < 2:
        raise log_error(
            ValueError,
            "Expected matrices with at least 2 dimensions, "
            f"but got shapes {a.shape} and {b.shape}.",
        )
    if a.shape[-1] != b.shape[-2]:
        raise log_error(
            ValueError,
            f"Inner dimensions do not agree: {a.shape} x {b.shape}.",
        )
    if a.shape[:-2] != b.shape[:-2]:
        raise log_error(
            ValueError,
            f"Batch dimensions do not agree: {a.shape} x {b.shape}.",
        )
    return np.matmul(a, b)


def round_half_even(x: npt.ArrayLike) -> npt.NDArray:
    """Round to the nearest integer, breaking ties towards the even one."""
    return np.rint(x)
