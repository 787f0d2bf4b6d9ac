"""Uniform affine quantizers and their straight-through gradients."""

import logging
from typing import Literal, Optional, Union

import numpy as np
import numpy.typing as npt
from attrs import define, field, validators

from rotaquant.core import autodiff as ad
from rotaquant.core.stats import RunningStats
from rotaquant.core.tensor import IntTensor, Tensor, round_half_even
from rotaquant.logging import log_error

logger = logging.getLogger(__name__)

SCALE_FLOOR = 1e-8
"""Smallest scale ever produced; constant tensors map onto it."""

SUPPORTED_BITS = (4, 8, 16)


@define(frozen=True)
class QuantSpec:
    """Static configuration of one quantizer.

    Attributes
    ----------
    bits : int
        Bit-width, one of 4, 8 or 16.
    symmetric : bool
        If True the zero-point is fixed at 0. Default True.
    granularity : {"per_tensor", "per_channel"}
        One parameter set for the whole tensor, or one per index along
        ``axis``. Default "per_tensor".
    axis : int
        Channel axis for per-channel quantization. Default 0.
    signed : bool
        Signed integer grid ``[-2^(b-1), 2^(b-1)-1]`` or unsigned
        ``[0, 2^b-1]``. Default True.
    tensor_class : {"rotated", "unrotated"}
        Whether the quantized tensor sits behind a rotation. Drives the
        initialization policy. Default "rotated".

    """

    bits: int = field(validator=validators.in_(SUPPORTED_BITS))
    symmetric: bool = field(default=True, kw_only=True)
    granularity: Literal["per_tensor", "per_channel"] = field(
        default="per_tensor",
        validator=validators.in_(["per_tensor", "per_channel"]),
        kw_only=True,
    )
    axis: int = field(default=0, kw_only=True)
    signed: bool = field(default=True, kw_only=True)
    tensor_class: Literal["rotated", "unrotated"] = field(
        default="rotated",
        validator=validators.in_(["rotated", "unrotated"]),
        kw_only=True,
    )

    @property
    def q_min(self) -> int:
        """Smallest representable integer."""
        return -(2 ** (self.bits - 1)) if self.signed else 0

    @property
    def q_max(self) -> int:
        """Largest representable integer."""
        return 2 ** (self.bits - 1) - 1 if self.signed else 2**self.bits - 1

    @property
    def per_channel(self) -> bool:
        """Whether parameters are kept per channel."""
        return self.granularity == "per_channel"

    @property
    def channel_axis(self) -> Optional[int]:
        """Axis reduced separately, or None for per-tensor specs."""
        return self.axis if self.per_channel else None


def _scale_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float32)


def _zero_point_array(value) -> np.ndarray:
    return np.asarray(round_half_even(value), dtype=np.int32)


@define
class QuantParams:
    """Scale(s) and zero-point(s) of one quantizer.

    Attributes
    ----------
    scale : numpy.ndarray
        Positive float32 scale; a 0-d array (per-tensor) or a vector with
        one entry per channel.
    zero_point : numpy.ndarray
        int32 zero-point with the same shape as ``scale``.
    learnable : bool
        Whether Stage One may update these parameters. Default False.

    """

    scale: np.ndarray = field(converter=_scale_array)
    zero_point: np.ndarray = field(converter=_zero_point_array)
    learnable: bool = field(default=False, kw_only=True)

    @scale.validator
    def _validate_scale(self, attribute, value):
        if not np.all(np.isfinite(value)) or np.any(value <= 0):
            raise log_error(
                ValueError,
                f"Expected every `{attribute.name}` to be positive and "
                f"finite, but got {value}.",
            )

    @zero_point.validator
    def _validate_zero_point(self, attribute, value):
        if value.shape != self.scale.shape:
            raise log_error(
                ValueError,
                f"Expected `{attribute.name}` to have shape "
                f"{self.scale.shape}, but got {value.shape}.",
            )


def make_params(
    scale: npt.ArrayLike,
    zero_point: npt.ArrayLike,
    spec: QuantSpec,
    learnable: bool = False,
) -> QuantParams:
    """Build parameters, flooring the scale and clamping the zero-point.

    Symmetric specs always receive a zero zero-point.
    """
    scale = np.maximum(np.asarray(scale, dtype=np.float64), SCALE_FLOOR)
    if spec.symmetric:
        zero_point = np.zeros_like(scale)
    else:
        zero_point = np.clip(
            round_half_even(np.broadcast_to(zero_point, scale.shape)),
            spec.q_min,
            spec.q_max,
        )
    return QuantParams(scale, zero_point, learnable=learnable)


def broadcast_params(value: np.ndarray, x_shape: tuple, spec: QuantSpec):
    """Reshape per-channel parameters so they broadcast against ``x``."""
    if value.ndim == 0:
        return value
    if not spec.per_channel:
        raise log_error(
            ValueError,
            "Got per-channel parameters for a per-tensor quantizer.",
        )
    axis = spec.axis % len(x_shape)
    if value.shape[0] != x_shape[axis]:
        raise log_error(
            ValueError,
            f"Expected {x_shape[axis]} channel parameters along axis "
            f"{spec.axis}, but got {value.shape[0]}.",
        )
    shape = [1] * len(x_shape)
    shape[axis] = value.shape[0]
    return value.reshape(shape)


def _require(spec: QuantSpec, symmetric: bool, operation: str) -> None:
    if spec.symmetric != symmetric:
        kind = "symmetric" if symmetric else "asymmetric"
        raise log_error(
            ValueError, f"`{operation}` requires a {kind} QuantSpec."
        )


def symmetric_scale(stats: RunningStats, spec: QuantSpec) -> QuantParams:
    """Symmetric scale ``max|X| / (2^(b-1) - 1)`` with a zero zero-point.

    Parameters
    ----------
    stats : RunningStats
        Calibration statistics (per-tensor or per-channel).
    spec : QuantSpec
        A symmetric spec.

    Returns
    -------
    QuantParams
        The parameters. All-zero tensors get the scale floor (1e-8).

    """
    _require(spec, True, "symmetric_scale")
    scale = stats.abs_max / (2 ** (spec.bits - 1) - 1)
    return make_params(scale, 0, spec)


def asymmetric_params(stats: RunningStats, spec: QuantSpec) -> QuantParams:
    """Asymmetric scale ``(max - min) / (2^b - 1)`` and matching zero-point.

    The zero-point is ``q_min + round(-min / scale)``, clamped into the
    integer grid, so that ``min`` maps onto ``q_min``. Constant tensors get
    the scale floor and ``zero_point = q_min``.

    Parameters
    ----------
    stats : RunningStats
        Calibration statistics (per-tensor or per-channel).
    spec : QuantSpec
        An asymmetric spec.

    Returns
    -------
    QuantParams
        The parameters.

    """
    _require(spec, False, "asymmetric_params")
    levels = 2**spec.bits - 1
    span = stats.max - stats.min
    degenerate = span <= 0
    safe_span = np.where(degenerate, 1.0, span)
    scale = np.where(degenerate, SCALE_FLOOR, safe_span / levels)
    scale = np.maximum(scale, SCALE_FLOOR)
    # -min / scale, written so that exact ties stay exact
    offset = -stats.min * levels / safe_span
    zero_point = np.where(
        degenerate, spec.q_min, spec.q_min + round_half_even(offset)
    )
    return make_params(scale, zero_point, spec)


def quantize(x: Tensor, params: QuantParams, spec: QuantSpec) -> IntTensor:
    """Map real values onto the integer grid.

    ``q = clamp(round(x / scale + zero_point), q_min, q_max)`` with
    round-half-to-even, evaluated in float32.
    """
    x = np.asarray(x, dtype=np.float32)
    scale = broadcast_params(params.scale, x.shape, spec)
    zero_point = broadcast_params(params.zero_point, x.shape, spec).astype(
        np.float32
    )
    q = round_half_even(x / scale + zero_point)
    return np.clip(q, spec.q_min, spec.q_max).astype(np.int32)


def dequantize(
    q: IntTensor, params: QuantParams, spec: Optional[QuantSpec] = None
) -> Tensor:
    """Map integers back to reals, ``scale * (q - zero_point)``.

    ``spec`` is needed only to locate the channel axis of per-channel
    parameters.
    """
    q = np.asarray(q)
    if spec is None:
        if params.scale.ndim:
            raise log_error(
                ValueError, "Per-channel parameters need a QuantSpec."
            )
        scale, zero_point = params.scale, params.zero_point
    else:
        scale = broadcast_params(params.scale, q.shape, spec)
        zero_point = broadcast_params(params.zero_point, q.shape, spec)
    return (scale * (q - zero_point).astype(np.float32)).astype(np.float32)


def fake_quantize(x: Tensor, params: QuantParams, spec: QuantSpec) -> Tensor:
    """Simulate quantization in real arithmetic, ``dequantize(quantize(x))``.

    See Also
    --------
    fake_quantize_on_tape : The same operation with STE gradients.

    """
    return dequantize(quantize(x, params, spec), params, spec)


def ste_grad_scale(
    x: npt.ArrayLike,
    s: npt.ArrayLike,
    zp: npt.ArrayLike,
    q_min: int,
    q_max: int,
) -> np.ndarray:
    """Straight-through derivative of the fake-quantized value w.r.t. scale.

    For ``v = x / s + zp``: ``round(v) - x / s - zp`` if
    ``q_min < v < q_max``, ``q_min - zp`` if ``v <= q_min`` and
    ``q_max - zp`` if ``v >= q_max``. Boundary points take the clipped
    branch.

    Notes
    -----
    The in-range branch is written as ``round(v) - x/s - zp``; grouping the
    zero-point with the rounded term or with ``x/s`` gives the same value.

    """
    x = np.asarray(x, dtype=np.float32)
    s = np.asarray(s, dtype=np.float32)
    zp = np.asarray(zp, dtype=np.float32)
    v = x / s + zp
    in_range = (v > q_min) & (v < q_max)
    clipped = np.where(v <= q_min, q_min - zp, q_max - zp)
    return np.where(in_range, round_half_even(v) - x / s - zp, clipped)


def ste_grad_zero_point(
    x: npt.ArrayLike,
    s: npt.ArrayLike,
    zp: npt.ArrayLike,
    q_min: int,
    q_max: int,
) -> np.ndarray:
    """Straight-through derivative w.r.t. the zero-point.

    0 if ``q_min < x / s + zp < q_max``, ``-s`` otherwise.
    """
    x = np.asarray(x, dtype=np.float32)
    s = np.asarray(s, dtype=np.float32)
    zp = np.asarray(zp, dtype=np.float32)
    v = x / s + zp
    in_range = (v > q_min) & (v < q_max)
    return np.where(in_range, np.float32(0.0), -s)


def gradient_scale_factor(num_elements: int, q_max: int) -> float:
    """Gradient scaling factor ``1 / sqrt(num_elements * q_max)``.

    Parameters
    ----------
    num_elements : int
        Number of elements sharing one scale / zero-point.
    q_max : int
        Largest representable integer of the quantizer.

    Returns
    -------
    float
        The factor multiplied into scale and zero-point gradients.

    Raises
    ------
    ValueError
        If either argument is not a positive integer.

    """
    for name, value in (("num_elements", num_elements), ("q_max", q_max)):
        if int(value) != value or value <= 0:
            raise log_error(
                ValueError,
                f"Expected `{name}` to be a positive integer, "
                f"but got {value}.",
            )
    return float(1.0 / np.sqrt(float(num_elements) * float(q_max)))


def local_quant_loss(x: Tensor, params: QuantParams, spec: QuantSpec) -> float:
    """Squared L2 reconstruction error ``||DQ(Q(x)) - x||^2``."""
    x = np.asarray(x, dtype=np.float32)
    diff = fake_quantize(x, params, spec).astype(np.float64) - x
    return float(np.sum(diff**2))


def _reduce_to(value: np.ndarray, like: np.ndarray, spec: QuantSpec):
    """Sum an elementwise gradient down to the parameter's shape."""
    if like.ndim == 0:
        return np.asarray(value.sum(), dtype=like.dtype)
    axis = spec.axis % value.ndim
    other = tuple(i for i in range(value.ndim) if i != axis)
    return value.sum(axis=other).astype(like.dtype)


def fake_quantize_on_tape(
    x: ad.Variable,
    scale: ad.Variable,
    zero_point: Optional[ad.Variable],
    spec: QuantSpec,
) -> ad.Variable:
    """Fake-quantize a tape variable with straight-through gradients.

    Parameters
    ----------
    x : Variable
        The tensor to quantize.
    scale : Variable
        Scale leaf, 0-d or one entry per channel.
    zero_point : Variable or None
        Real-valued zero-point leaf; rounded and clamped in the forward
        pass. None for symmetric quantizers.
    spec : QuantSpec
        Quantizer configuration.

    Returns
    -------
    Variable
        The fake-quantized tensor. Its backward rule passes the gradient
        straight through to ``x`` inside the grid (zero where clipped), and
        applies the scale / zero-point rules of :func:`ste_grad_scale` and
        :func:`ste_grad_zero_point`.

    """
    s_value = np.maximum(scale.value, SCALE_FLOOR).astype(np.float32)
    s = broadcast_params(s_value, x.shape, spec)
    if zero_point is None:
        zp = np.zeros_like(s)
    else:
        zp_value = np.clip(
            round_half_even(zero_point.value), spec.q_min, spec.q_max
        ).astype(np.float32)
        zp = broadcast_params(zp_value, x.shape, spec)
    v = x.value / s + zp
    in_range = (v > spec.q_min) & (v < spec.q_max)
    q = np.clip(round_half_even(v), spec.q_min, spec.q_max)
    out = (s * (q - zp)).astype(x.value.dtype)

    def backward(g):
        grad_x = g * in_range
        grad_s = _reduce_to(
            g * ste_grad_scale(x.value, s, zp, spec.q_min, spec.q_max),
            scale.value,
            spec,
        )
        grads = [grad_x.astype(x.value.dtype), grad_s]
        if zero_point is not None:
            grad_zp = ste_grad_zero_point(
                x.value, s, zp, spec.q_min, spec.q_max
            )
            grads.append(_reduce_to(g * grad_zp, zero_point.value, spec))
        return grads

    parents = (x, scale) if zero_point is None else (x, scale, zero_point)
    return x.tape.record(out, parents, backward)


def local_quant_loss_on_tape(
    x: Union[ad.Variable, np.ndarray],
    scale: ad.Variable,
    zero_point: Optional[ad.Variable],
    spec: QuantSpec,
    reduction: Literal["sum", "mean"] = "sum",
) -> ad.Variable:
    """Local quantization error loss, differentiable w.r.t. the params only.

    The activation itself is treated as a constant. ``reduction="sum"``
    gives the squared L2 norm of :func:`local_quant_loss`;
    ``reduction="mean"`` divides it by the number of elements.
    """
    if reduction not in ("sum", "mean"):
        raise log_error(
            ValueError,
            f"Expected reduction 'sum' or 'mean', but got '{reduction}'.",
        )
    value = x.value if isinstance(x, ad.Variable) else x
    x_const = scale.tape.constant(value)
    fq = fake_quantize_on_tape(x_const, scale, zero_point, spec)
    squared = ad.square(ad.sub(fq, x_const))
    return ad.sum(squared) if reduction == "sum" else ad.mean(squared)
