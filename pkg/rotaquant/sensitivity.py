"""Quantization sensitivity, mixed-precision planning and error analysis.

The sensitivity ratio is the mean relative error of a low-bit Max-Min
quantization of a tensor. Sites whose ratio is close to 1 are dominated by
outliers; the planner promotes the most sensitive ones to 16 bits. The
error decomposition splits the squared quantization error into a rounding
part (elements inside the integer grid) and a clipping part (the rest).
"""

import logging
import math
from collections.abc import Sequence

import numpy as np
import xarray as xr
from attrs import define, field, validators

from rotaquant.core.stats import collect_stats
from rotaquant.initialization import max_min_init
from rotaquant.logging import log_error
from rotaquant.quantizer import (
    QuantParams,
    QuantSpec,
    broadcast_params,
    fake_quantize,
    make_params,
)
from rotaquant.utils.reports import log_to_attrs

logger = logging.getLogger(__name__)

RATIO_EPSILON = 1e-8


def _non_negative(instance, attribute, value):
    if not value >= 0:
        raise log_error(
            ValueError,
            f"Expected `{attribute.name}` >= 0, but got {value}.",
        )


@define(frozen=True)
class SensitivityReport:
    """Sensitivity ratio of one site.

    Attributes
    ----------
    site_id : str
        The probed site.
    ratio : float
        Mean relative quantization error; 0 for a lossless quantization.
    bits : int
        Bit-width used for the probe.
    index : int
        Position of the site in model order; breaks ties when ranking.

    """

    site_id: str
    ratio: float = field(converter=float, validator=_non_negative)
    bits: int = 8
    index: int = 0

    @property
    def role(self) -> str:
        """Tensor role, the last component of the site id."""
        return self.site_id.rsplit(".", 1)[-1]


@define(frozen=True)
class PrecisionPlan:
    """Bit-width assigned to each probed site.

    Attributes
    ----------
    promote_fraction : float
        Fraction of sites promoted to the high bit-width.
    bits : dict
        Bit-width per site id, in probe order.
    high_bits : int
        Bit-width of promoted sites. Default 16.

    """

    promote_fraction: float = field(
        converter=float,
        validator=[validators.ge(0.0), validators.le(1.0)],
    )
    bits: dict[str, int] = field(factory=dict)
    high_bits: int = 16

    @property
    def promoted(self) -> list[str]:
        """Sites that received the high bit-width."""
        return [s for s, b in self.bits.items() if b == self.high_bits]

    def to_dict(self) -> dict:
        """Return a JSON-serializable form."""
        return {
            "promote_fraction": self.promote_fraction,
            "bits": dict(self.bits),
            "high_bits": self.high_bits,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PrecisionPlan":
        """Inverse of :meth:`to_dict`."""
        return cls(
            data["promote_fraction"],
            {site: int(b) for site, b in data["bits"].items()},
            int(data.get("high_bits", 16)),
        )


@define(frozen=True)
class ErrorDecomposition:
    """Squared quantization error split by whether elements were clipped.

    ``e_total`` is always ``e_rounding + e_clipping``.
    """

    e_rounding: float = field(converter=float, validator=_non_negative)
    e_clipping: float = field(converter=float, validator=_non_negative)
    e_total: float = field(converter=float, validator=_non_negative)

    def __add__(self, other: "ErrorDecomposition") -> "ErrorDecomposition":
        """Sum two decompositions (over disjoint sets of elements)."""
        e_rounding = self.e_rounding + other.e_rounding
        e_clipping = self.e_clipping + other.e_clipping
        return ErrorDecomposition(
            e_rounding, e_clipping, e_rounding + e_clipping
        )

    @classmethod
    def zero(cls) -> "ErrorDecomposition":
        """The empty decomposition."""
        return cls(0.0, 0.0, 0.0)


def sensitivity_ratio(
    x: np.ndarray, params: QuantParams, spec: QuantSpec
) -> float:
    """Mean relative error ``mean(|dq - x| / (|x| + 1e-8))``.

    Parameters
    ----------
    x : numpy.ndarray
        The tensor; must not be empty.
    params : QuantParams
        Parameters used to fake-quantize ``x``.
    spec : QuantSpec
        Quantizer configuration.

    Returns
    -------
    float
        The ratio. It is not clamped and may exceed 1 when dequantized
        values overshoot.

    """
    x = np.asarray(x, dtype=np.float32)
    if x.size == 0:
        raise log_error(ValueError, "Cannot compute the ratio of no values.")
    dq = fake_quantize(x, params, spec).astype(np.float64)
    x64 = x.astype(np.float64)
    return float(np.mean(np.abs(dq - x64) / (np.abs(x64) + RATIO_EPSILON)))


def probe_ratio(x: np.ndarray, probe_bits: int = 8) -> float:
    """Sensitivity ratio of ``x`` under a per-tensor Max-Min quantizer."""
    spec = QuantSpec(probe_bits, tensor_class="unrotated")
    params = max_min_init(collect_stats(x), spec)
    return sensitivity_ratio(x, params, spec)


def plan_mixed_precision(
    reports: Sequence[SensitivityReport],
    promote_fraction: float = 0.10,
    low_bits: int = 8,
    high_bits: int = 16,
) -> PrecisionPlan:
    """Promote the most sensitive sites to the high bit-width.

    Parameters
    ----------
    reports : sequence of SensitivityReport
        One report per candidate site.
    promote_fraction : float, optional
        Fraction of sites to promote, in [0, 1]. Default 0.10.
    low_bits, high_bits : int, optional
        Bit-widths of kept and promoted sites. Default 8 and 16.

    Returns
    -------
    PrecisionPlan
        Exactly ``ceil(promote_fraction * len(reports))`` sites get
        ``high_bits``: those with the largest ratios, ties going to the
        site that comes first in model order.

    Examples
    --------
    >>> reports = [
    ...     SensitivityReport(f"s{i}", i / 30, index=i) for i in range(30)
    ... ]
    >>> len(plan_mixed_precision(reports, 0.1).promoted)
    3

    """
    if not reports:
        raise log_error(ValueError, "Cannot plan precision for no sites.")
    if not 0.0 <= promote_fraction <= 1.0:
        raise log_error(
            ValueError,
            f"Expected promote_fraction in [0, 1], got {promote_fraction}.",
        )
    # round away representation error, e.g. 0.1 * 30 = 3.0000000000000004
    count = math.ceil(round(promote_fraction * len(reports), 9))
    ranked = sorted(reports, key=lambda r: (-r.ratio, r.index))
    promoted = {r.site_id for r in ranked[:count]}
    bits = {
        r.site_id: high_bits if r.site_id in promoted else low_bits
        for r in reports
    }
    logger.info(
        f"Promoted {count} of {len(reports)} sites to {high_bits} bits: "
        f"{sorted(promoted)}"
    )
    return PrecisionPlan(promote_fraction, bits, high_bits)


def format_sensitivity_report(reports: Sequence[SensitivityReport]) -> str:
    """One line per site (id, role, ratio), most sensitive first."""
    ranked = sorted(reports, key=lambda r: (-r.ratio, r.index))
    return "\n".join(
        f"{r.site_id} {r.role} {r.ratio:.6f}" for r in ranked
    )


def _grid_position(x: np.ndarray, params: QuantParams, spec: QuantSpec):
    """Return ``x / s + zp`` as computed by the quantizer."""
    scale = broadcast_params(params.scale, x.shape, spec)
    zero_point = broadcast_params(params.zero_point, x.shape, spec)
    return x / scale + zero_point.astype(np.float32)


def error_decomposition(
    x: np.ndarray, params: QuantParams, spec: QuantSpec
) -> ErrorDecomposition:
    """Split the squared quantization error into rounding and clipping.

    Elements with ``q_min <= x / s + zp <= q_max`` contribute to
    ``e_rounding``, all others to ``e_clipping``.
    """
    x = np.asarray(x, dtype=np.float32)
    squared = (fake_quantize(x, params, spec).astype(np.float64) - x) ** 2
    v = _grid_position(x, params, spec)
    in_range = (v >= spec.q_min) & (v <= spec.q_max)
    e_rounding = float(squared[in_range].sum())
    e_clipping = float(squared[~in_range].sum())
    return ErrorDecomposition(
        e_rounding, e_clipping, e_rounding + e_clipping
    )


@log_to_attrs
def sweep_scale_tradeoff(
    x: np.ndarray, spec: QuantSpec, scale_grid: Sequence[float]
) -> xr.Dataset:
    """Evaluate the error decomposition over a grid of scales.

    Parameters
    ----------
    x : numpy.ndarray
        The tensor to quantize.
    spec : QuantSpec
        Quantizer configuration; the zero-point is 0 for symmetric specs
        and ``q_min`` otherwise.
    scale_grid : sequence of float
        Positive scales to evaluate.

    Returns
    -------
    xarray.Dataset
        Variables ``e_rounding``, ``e_clipping`` and ``e_total`` along the
        ``scale`` dimension.

    """
    grid = np.asarray(scale_grid, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise log_error(ValueError, "The scale grid is empty.")
    if np.any(grid <= 0):
        raise log_error(ValueError, "Every scale in the grid must be > 0.")
    rows = [
        error_decomposition(x, make_params(s, spec.q_min, spec), spec)
        for s in grid
    ]
    return xr.Dataset(
        {
            name: ("scale", np.array([getattr(r, name) for r in rows]))
            for name in ("e_rounding", "e_clipping", "e_total")
        },
        coords={"scale": grid},
        attrs={"bits": spec.bits},
    )
