"""Logging for calibration runs.

Every module logs to a child of the ``rotaquant`` logger. The package
writes one rotating log file per logger name; the directory is
``~/.rotaquant`` unless ``ROTAQUANT_LOG_DIR`` points elsewhere.
"""

import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

FORMAT = (
    "%(asctime)s - %(levelname)s - "
    "%(processName)s %(filename)s:%(lineno)s - %(message)s"
)
CONSOLE_FORMAT = "rotaquant %(levelname)s: %(message)s"
LOG_DIR_VARIABLE = "ROTAQUANT_LOG_DIR"
MAX_LOG_BYTES = 5 * 1024 * 1024
LOG_BACKUPS = 2


def default_log_directory() -> Path:
    """Directory of the log file, honouring ``ROTAQUANT_LOG_DIR``."""
    override = os.environ.get(LOG_DIR_VARIABLE)
    return Path(override) if override else Path.home() / ".rotaquant"


def _file_handler(logger: logging.Logger) -> Optional[RotatingFileHandler]:
    for handler in logger.handlers:
        if isinstance(handler, RotatingFileHandler):
            return handler
    return None


def configure_logging(
    log_level: int = logging.DEBUG,
    logger_name: str = "rotaquant",
    log_directory: Optional[Path] = None,
    console_level: Optional[int] = None,
):
    """Send the package's log records to a rotating file.

    A 512-step calibration at DEBUG level logs every step, so the file is
    capped at 5 MB with two backups. Calling this again with the same
    file keeps the existing handlers.

    Parameters
    ----------
    log_level : int, optional
        Level of the logger. Defaults to logging.DEBUG.
    logger_name : str, optional
        Logger to configure; also names the file. Defaults to "rotaquant".
    log_directory : pathlib.Path, optional
        Where the log file goes. Defaults to :func:`default_log_directory`.
    console_level : int, optional
        If given, records at this level and above are also written to
        stderr.

    """
    log_directory = log_directory or default_log_directory()
    log_directory.mkdir(parents=True, exist_ok=True)
    log_file = (log_directory / f"{logger_name}.log").as_posix()
    logger = logging.getLogger(logger_name)

    current = _file_handler(logger)
    if current is not None and current.baseFilename == log_file:
        if console_level is None:
            return
    else:
        logger.handlers.clear()
        logger.setLevel(log_level)
        handler = RotatingFileHandler(
            log_file, maxBytes=MAX_LOG_BYTES, backupCount=LOG_BACKUPS
        )
        handler.setFormatter(logging.Formatter(FORMAT))
        logger.addHandler(handler)

    if console_level is not None:
        logger.handlers = [
            h for h in logger.handlers if isinstance(h, RotatingFileHandler)
        ]
        console = logging.StreamHandler(sys.stderr)
        console.setLevel(console_level)
        console.setFormatter(logging.Formatter(CONSOLE_FORMAT))
        logger.addHandler(console)


def log_error(error, message: str, logger_name: str = "rotaquant"):
    """Log ``message`` at ERROR level and return ``error(message)``.

    Used as ``raise log_error(ValueError, "...")`` so the failure reaches
    the log file before the exception propagates.
    """
    logging.getLogger(logger_name).error(message)
    return error(message)


def log_warning(message: str, logger_name: str = "rotaquant"):
    """Log ``message`` at WARNING level."""
    logging.getLogger(logger_name).warning(message)
