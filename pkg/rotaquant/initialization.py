"""Quantization-parameter initialization and the rotation-aware policy.

Rotated tensors are close to Gaussian, so a scale derived from their mean
and standard deviation (a ``3 sigma`` range) keeps rounding error low even
at 4 bits. Unrotated tensors keep their outliers; they are initialized from
the full value range and never quantized below 8 bits.
"""

import logging
from typing import Literal, Union

import numpy as np
from attrs import define, evolve, field, validators

from rotaquant.core.stats import RunningStats, collect_stats
from rotaquant.logging import log_error
from rotaquant.quantizer import (
    SCALE_FLOOR,
    SUPPORTED_BITS,
    QuantParams,
    QuantSpec,
    asymmetric_params,
    fake_quantize,
    make_params,
    symmetric_scale,
)

logger = logging.getLogger(__name__)

UNROTATED_MIN_BITS = 8

CLIP_BASELINES = {"clip_99": 99.0, "clip_99.9": 99.9, "clip_99.99": 99.99}
"""Percentile-clipping baselines accepted by :func:`init_quality_probe`."""


@define(frozen=True)
class InitPolicy:
    """Initialization method and the bit-width floor for one tensor.

    Attributes
    ----------
    method : {"mean_based", "max_min"}
        Initialization formula.
    min_bits : int
        Lowest bit-width the tensor may be quantized to.
    tensor_class : {"rotated", "unrotated"}
        Class the policy was selected for. Default "rotated".

    """

    method: Literal["mean_based", "max_min"] = field(
        validator=validators.in_(["mean_based", "max_min"])
    )
    min_bits: int = field(validator=validators.in_(SUPPORTED_BITS))
    tensor_class: Literal["rotated", "unrotated"] = field(
        default="rotated",
        validator=validators.in_(["rotated", "unrotated"]),
        kw_only=True,
    )

    @min_bits.validator
    def _unrotated_floor(self, attribute, value):
        if self.tensor_class == "unrotated" and value < UNROTATED_MIN_BITS:
            raise log_error(
                ValueError,
                f"Unrotated tensors need at least {UNROTATED_MIN_BITS} "
                f"bits, but `{attribute.name}` is {value}.",
            )

    def apply(self, spec: QuantSpec) -> QuantSpec:
        """Raise ``spec.bits`` to the policy's floor if needed."""
        if spec.bits >= self.min_bits:
            return spec
        return evolve(spec, bits=self.min_bits)


def mean_based_init(stats: RunningStats, spec: QuantSpec) -> QuantParams:
    """Initialize a symmetric scale from the ``mu +- 3 sigma`` range.

    ``scale = max(|mu - 3 sigma|, |mu + 3 sigma|) / 2^(b-1)``, with the
    zero-point fixed at 0. Per-channel statistics give one scale per
    channel.

    Examples
    --------
    >>> stats = collect_stats(np.array([-1.0, 1.0]))
    >>> float(mean_based_init(stats, QuantSpec(4)).scale)
    0.375

    """
    mu, sigma = stats.mean, stats.std
    magnitude = np.maximum(np.abs(mu - 3 * sigma), np.abs(mu + 3 * sigma))
    scale = np.maximum(magnitude / 2 ** (spec.bits - 1), SCALE_FLOOR)
    return QuantParams(scale, np.zeros_like(scale))


def max_min_init(stats: RunningStats, spec: QuantSpec) -> QuantParams:
    """Initialize from the full value range.

    Asymmetric specs use ``(max - min) / (2^b - 1)`` with a matching
    zero-point; symmetric specs use ``max|X| / (2^(b-1) - 1)``.
    """
    if spec.symmetric:
        return symmetric_scale(stats, spec)
    return asymmetric_params(stats, spec)


def select_policy(
    tensor_class: Literal["rotated", "unrotated"], requested_bits: int
) -> InitPolicy:
    """Choose the initialization policy for a tensor.

    Parameters
    ----------
    tensor_class : {"rotated", "unrotated"}
        Whether the tensor is behind a rotation.
    requested_bits : int
        Bit-width asked for by the configuration.

    Returns
    -------
    InitPolicy
        ``mean_based`` at the requested bits for rotated tensors;
        ``max_min`` with at least 8 bits for unrotated ones.

    """
    if requested_bits not in SUPPORTED_BITS:
        raise log_error(
            ValueError,
            f"Expected bits in {SUPPORTED_BITS}, but got {requested_bits}.",
        )
    if tensor_class == "rotated":
        return InitPolicy("mean_based", requested_bits)
    if tensor_class == "unrotated":
        return InitPolicy(
            "max_min",
            max(requested_bits, UNROTATED_MIN_BITS),
            tensor_class="unrotated",
        )
    raise log_error(
        ValueError,
        f"Expected 'rotated' or 'unrotated', but got '{tensor_class}'.",
    )


INIT_METHODS = {"mean_based": mean_based_init, "max_min": max_min_init}


def initialize(
    stats: RunningStats, spec: QuantSpec, method: str
) -> QuantParams:
    """Dispatch to the named initialization method."""
    if method not in INIT_METHODS:
        raise log_error(
            ValueError,
            f"Unknown initialization method '{method}'. "
            f"Expected one of {sorted(INIT_METHODS)}.",
        )
    return INIT_METHODS[method](stats, spec)


def _clip_params(x: np.ndarray, spec: QuantSpec, percentile: float):
    magnitude = np.abs(x.astype(np.float64))
    if spec.per_channel:
        magnitude = np.moveaxis(magnitude, spec.axis, 0).reshape(
            magnitude.shape[spec.axis], -1
        )
        threshold = np.percentile(magnitude, percentile, axis=1)
    else:
        threshold = np.percentile(magnitude, percentile)
    return make_params(threshold / (2 ** (spec.bits - 1) - 1), 0, spec)


def init_quality_probe(
    x: np.ndarray, spec: QuantSpec, policy: Union[InitPolicy, str]
) -> float:
    """Relative error ``||fq(x) - x||^2 / ||x||^2`` of an initialization.

    Parameters
    ----------
    x : numpy.ndarray
        The tensor to quantize.
    spec : QuantSpec
        Quantizer configuration.
    policy : InitPolicy or str
        An :class:`InitPolicy` (whose bit floor is applied to ``spec``), or
        a method name: "mean_based", "max_min", or one of the clipping
        baselines "clip_99", "clip_99.9", "clip_99.99" (symmetric scale
        from the given percentile of ``|x|``).

    Returns
    -------
    float
        The relative squared error; 0 for an all-zero ``x``.

    """
    x = np.asarray(x, dtype=np.float32)
    if isinstance(policy, InitPolicy):
        spec = policy.apply(spec)
        method = policy.method
    else:
        method = policy
    if method in CLIP_BASELINES:
        params = _clip_params(x, spec, CLIP_BASELINES[method])
    else:
        stats = collect_stats(x, channel_axis=spec.channel_axis)
        params = initialize(stats, spec, method)
    error = np.sum(
        (fake_quantize(x, params, spec).astype(np.float64) - x) ** 2
    )
    reference = np.sum(x.astype(np.float64) ** 2)
    if reference == 0:
        return float(error)
    return float(error / reference)
