"""`attrs` classes for validating file paths, token data and manifests."""

import os
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Literal, Union

import numpy as np
import yaml
from attrs import define, field, validators

from rotaquant.logging import log_error, log_warning


@define
class ValidFile:
    """Class for validating file paths.

    Parameters
    ----------
    path : str or pathlib.Path
        Path to the file.
    expected_permission : {'r', 'w', 'rw'}
        Expected access permission(s) for the file. If 'r', the file is
        expected to be readable. If 'w', the file is expected to be writable
        and must not exist yet. If 'rw', the file is expected to be both
        readable and writable. Default: 'r'.
    expected_suffix : list of str
        Expected suffix(es) for the file. If an empty list (default), this
        check is skipped.

    Raises
    ------
    IsADirectoryError
        If the path points to a directory.
    PermissionError
        If the file does not have the expected access permission(s).
    FileNotFoundError
        If the file does not exist when `expected_permission` is 'r' or 'rw'.
    FileExistsError
        If the file exists when `expected_permission` is 'w'.
    ValueError
        If the file does not have one of the expected suffix(es).

    """

    path: Path = field(converter=Path, validator=validators.instance_of(Path))
    expected_permission: Literal["r", "w", "rw"] = field(
        default="r", validator=validators.in_(["r", "w", "rw"]), kw_only=True
    )
    expected_suffix: list[str] = field(factory=list, kw_only=True)

    @path.validator
    def path_is_not_dir(self, attribute, value):
        """Ensure that the path does not point to a directory."""
        if value.is_dir():
            raise log_error(
                IsADirectoryError,
                f"Expected a file path but got a directory: {value}.",
            )

    @path.validator
    def file_exists_when_expected(self, attribute, value):
        """Ensure that the file exists (or not) as needed."""
        if "r" in self.expected_permission:
            if not value.exists():
                raise log_error(
                    FileNotFoundError, f"File {value} does not exist."
                )
        elif value.exists():
            raise log_error(FileExistsError, f"File {value} already exists.")

    @path.validator
    def file_has_access_permissions(self, attribute, value):
        """Ensure that the file has the expected access permission(s)."""
        file_is_readable = os.access(value, os.R_OK)
        parent_is_writeable = os.access(value.parent, os.W_OK)
        if ("r" in self.expected_permission) and (not file_is_readable):
            raise log_error(
                PermissionError,
                f"Unable to read file: {value}. "
                "Make sure that you have read permissions.",
            )
        if ("w" in self.expected_permission) and (not parent_is_writeable):
            raise log_error(
                PermissionError,
                f"Unable to write to file: {value}. "
                "Make sure that you have write permissions.",
            )

    @path.validator
    def file_has_expected_suffix(self, attribute, value):
        """Ensure that the file has one of the expected suffix(es)."""
        if self.expected_suffix and value.suffix not in self.expected_suffix:
            raise log_error(
                ValueError,
                f"Expected file with suffix(es) {self.expected_suffix} "
                f"but got suffix {value.suffix} instead.",
            )


@define(kw_only=True)
class ValidTokenArray:
    """Class for validating a block of token sequences.

    Attributes
    ----------
    tokens : numpy.ndarray
        Integer array of shape (n_sequences, seq_len).
    vocab_size : int
        Every id must lie in ``[0, vocab_size)``.
    seq_len : int
        Longest sequence length the model accepts.

    """

    tokens: np.ndarray = field()
    vocab_size: int = field(validator=validators.ge(1))
    seq_len: int = field(validator=validators.ge(1))

    @tokens.validator
    def _validate_tokens(self, attribute, value):
        if not isinstance(value, np.ndarray):
            raise log_error(
                ValueError, f"Expected a numpy array, but got {type(value)}."
            )
        if not np.issubdtype(value.dtype, np.integer):
            raise log_error(
                ValueError,
                f"Expected `{attribute.name}` to hold integer ids, "
                f"but got dtype {value.dtype}.",
            )
        if value.ndim != 2 or 0 in value.shape:
            raise log_error(
                ValueError,
                f"Expected `{attribute.name}` of shape (n_sequences, "
                f"seq_len), but got {value.shape}.",
            )

    def __attrs_post_init__(self):
        """Check the ids against the model's vocabulary and length."""
        if self.tokens.min() < 0 or self.tokens.max() >= self.vocab_size:
            raise log_error(
                ValueError,
                f"Token ids must lie in [0, {self.vocab_size}).",
            )
        if self.tokens.shape[1] > self.seq_len:
            raise log_error(
                ValueError,
                f"Sequences of length {self.tokens.shape[1]} exceed "
                f"seq_len {self.seq_len}.",
            )


MANIFEST_FIELDS = (
    "format_version",
    "tool_version",
    "seed",
    "rotated",
    "model_config",
    "rotations",
    "sites",
    "precision_plan",
    "metrics",
)

SITE_FIELDS = (
    "role",
    "stage",
    "bits",
    "granularity",
    "axis",
    "symmetric",
    "signed",
    "tensor_class",
    "enabled",
    "init_method",
    "scale",
    "zero_point",
)


@define
class ValidManifest:
    """Class for validating the structure of a calibration manifest.

    Raises
    ------
    ValueError
        If a top-level or per-site field is missing; the message names the
        field.

    """

    content: dict = field()

    @content.validator
    def _validate_content(self, attribute, value):
        if not isinstance(value, Mapping):
            raise log_error(ValueError, "Manifest must be a JSON object.")
        for name in MANIFEST_FIELDS:
            if name not in value:
                raise log_error(
                    ValueError, f"Manifest is missing field '{name}'."
                )
        if not isinstance(value["sites"], Mapping):
            raise log_error(ValueError, "Manifest field 'sites' is invalid.")
        for site_id, entry in value["sites"].items():
            for name in SITE_FIELDS:
                if name not in entry:
                    raise log_error(
                        ValueError,
                        f"Manifest site '{site_id}' is missing field "
                        f"'{name}'.",
                    )


def load_model_config(file_path: Union[str, Path]) -> dict[str, Any]:
    """Read a model configuration (JSON or YAML) into a dictionary.

    Raises
    ------
    ValueError
        If the file cannot be parsed or is not a mapping.

    """
    file = ValidFile(
        file_path,
        expected_permission="r",
        expected_suffix=[".json", ".yaml", ".yml"],
    )
    try:
        with open(file.path) as f:
            content = yaml.safe_load(f)
    except yaml.YAMLError as error:
        raise log_error(
            ValueError, f"Could not parse model config {file.path}: {error}"
        ) from error
    if content is None:
        log_warning(f"Model config {file.path} is empty; using defaults.")
        content = {}
    if not isinstance(content, Mapping):
        raise log_error(
            ValueError, f"Model config {file.path} is not a mapping."
        )
    return dict(content)
