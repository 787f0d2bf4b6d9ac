"""Provenance logging and plain-text reports."""

import logging
from datetime import datetime
from functools import wraps

import numpy as np

logger = logging.getLogger(__name__)


def _describe(value):
    """Keep log entries small: arrays are recorded by shape only."""
    if isinstance(value, np.ndarray):
        return f"array(shape={value.shape}, dtype={value.dtype})"
    return value


def log_to_attrs(func):
    """Log the operation performed by the wrapped function.

    This decorator appends log entries to the "log" attribute of the
    returned xarray object. The wrapped function's first argument is the
    data being analysed and is not recorded; the remaining arguments are,
    with arrays summarized by shape and dtype.
    """

    @wraps(func)
    def wrapper(*args, **kwargs):
        result = func(*args, **kwargs)

        log_entry = {
            "operation": func.__name__,
            "datetime": str(datetime.now()),
            **{
                f"arg_{i}": _describe(arg)
                for i, arg in enumerate(args[1:], start=1)
            },
            **{key: _describe(value) for key, value in kwargs.items()},
        }

        if result is not None and hasattr(result, "attrs"):
            if "log" not in result.attrs:
                result.attrs["log"] = []
            result.attrs["log"].append(log_entry)

        return result

    return wrapper


def emit_report(report: str, print_report: bool = True) -> str:
    """Write a report to the logger at INFO and optionally print it.

    Parameters
    ----------
    report : str
        The report text.
    print_report : bool, optional
        Whether to also print the report to the console. Default True.

    Returns
    -------
    str
        The report, unchanged.

    """
    logger.info(report)
    if print_report:
        print(report)
    return report
