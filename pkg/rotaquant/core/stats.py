"""Streaming calibration statistics (min, max, mean, variance)."""

from collections.abc import Iterable
from typing import Optional

import numpy as np
from attrs import define, field

from rotaquant.logging import log_error


def _as_float64(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


@define
class RunningStats:
    """Single-pass statistics over every element seen so far.

    Fields are 0-d arrays for per-tensor statistics, or 1-d arrays with one
    entry per channel for per-channel statistics. Mean and the sum of
    squared deviations (``m2``) are accumulated in float64 with Welford's
    update, and batches are combined with the pairwise merge rule so that
    the result does not depend on how the data were split.

    Attributes
    ----------
    count : int
        Number of elements reduced into each statistic.
    min, max : numpy.ndarray
        Exact running minimum and maximum.
    mean : numpy.ndarray
        Running mean.
    m2 : numpy.ndarray
        Running sum of squared deviations from the mean.

    """

    count: int = field(default=0)
    min: np.ndarray = field(factory=lambda: _as_float64(np.inf))
    max: np.ndarray = field(factory=lambda: _as_float64(-np.inf))
    mean: np.ndarray = field(factory=lambda: _as_float64(0.0))
    m2: np.ndarray = field(factory=lambda: _as_float64(0.0))

    @count.validator
    def _validate_count(self, attribute, value):
        if value < 0:
            raise log_error(
                ValueError, f"Expected `{attribute.name}` to be >= 0."
            )

    @property
    def variance(self) -> np.ndarray:
        """Population variance, ``m2 / count``."""
        if self.count == 0:
            return np.zeros_like(self.m2)
        return np.maximum(self.m2 / self.count, 0.0)

    @property
    def std(self) -> np.ndarray:
        """Population standard deviation."""
        return np.sqrt(self.variance)

    @property
    def abs_max(self) -> np.ndarray:
        """Largest magnitude seen, ``max(|min|, |max|)``."""
        return np.maximum(np.abs(self.min), np.abs(self.max))

    def merge(self, other: "RunningStats") -> "RunningStats":
        """Combine two sets of statistics into a new one.

        Parameters
        ----------
        other : RunningStats
            Statistics over a disjoint set of elements.

        Returns
        -------
        RunningStats
            Statistics over the union of both element sets.

        """
        if other.count == 0:
            return RunningStats(
                self.count, self.min, self.max, self.mean, self.m2
            )
        if self.count == 0:
            return RunningStats(
                other.count, other.min, other.max, other.mean, other.m2
            )
        count = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / count)
        m2 = (
            self.m2
            + other.m2
            + delta**2 * (self.count * other.count / count)
        )
        low = np.minimum(self.min, other.min)
        high = np.maximum(self.max, other.max)
        return RunningStats(count, low, high, np.clip(mean, low, high), m2)

    def update(
        self, batch: np.ndarray, channel_axis: Optional[int] = None
    ) -> "RunningStats":
        """Reduce one more batch into the statistics.

        Parameters
        ----------
        batch : numpy.ndarray
            Values to add.
        channel_axis : int, optional
            If given, reduce over every axis except this one and keep one
            statistic per channel. Defaults to None (per-tensor).

        Returns
        -------
        RunningStats
            The updated statistics (``self`` is left unchanged).

        """
        return self.merge(_batch_stats(batch, channel_axis))


def _batch_stats(
    batch: np.ndarray, channel_axis: Optional[int]
) -> RunningStats:
    """Compute exact statistics of a single batch."""
    values = np.asarray(batch, dtype=np.float64)
    if values.size == 0:
        return RunningStats()
    if channel_axis is None:
        values = values.reshape(1, -1)
    else:
        values = np.moveaxis(values, channel_axis, 0)
        values = values.reshape(values.shape[0], -1)
    count = values.shape[1]
    mean = values.mean(axis=1)
    m2 = ((values - mean[:, None]) ** 2).sum(axis=1)
    low = values.min(axis=1)
    high = values.max(axis=1)
    if channel_axis is None:
        mean, m2, low, high = mean[0], m2[0], low[0], high[0]
    return RunningStats(
        count,
        _as_float64(low),
        _as_float64(high),
        np.clip(_as_float64(mean), low, high),
        _as_float64(m2),
    )


def collect_stats(
    batches: Iterable[np.ndarray], channel_axis: Optional[int] = None
) -> RunningStats:
    """Collect calibration statistics over a sequence of batches.

    Batches are merged in the order they are given.

    Parameters
    ----------
    batches : iterable of numpy.ndarray
        Calibration batches. A single array is treated as one batch.
    channel_axis : int, optional
        Keep one statistic per index along this axis (per-channel
        statistics). Defaults to None (per-tensor).

    Returns
    -------
    RunningStats
        Statistics over every element of every batch.

    Raises
    ------
    ValueError
        If no element was seen.

    Examples
    --------
    >>> stats = collect_stats([np.array([1.0, 2.0]), np.array([3.0])])
    >>> float(stats.mean), float(stats.variance)
    (2.0, 0.6666666666666666)

    """
    if isinstance(batches, np.ndarray):
        batches = [batches]
    stats = RunningStats()
    for batch in batches:
        stats = stats.update(batch, channel_axis=channel_axis)
    if stats.count == 0:
        raise log_error(
            ValueError,
            "Empty calibration: no elements were seen while collecting "
            "statistics.",
        )
    return stats
