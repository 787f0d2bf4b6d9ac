"""Read and write tensors in the QTNS binary format.

Layout (all integers little-endian)::

    magic    4 bytes   b"QTNS"
    version  uint16    1
    dtype    uint8     1 = float32, 2 = int32
    rank     uint32
    dims     rank x uint64
    payload  row-major values, little-endian
"""

import logging
import math
import struct
from pathlib import Path
from typing import Union

import numpy as np

from rotaquant.io.validators import ValidFile
from rotaquant.logging import log_error

logger = logging.getLogger(__name__)

MAGIC = b"QTNS"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<i4")}
_HEADER = struct.Struct("<4sHBI")


def _dtype_code(array: np.ndarray) -> int:
    for code, dtype in DTYPE_CODES.items():
        if (array.dtype.kind, array.dtype.itemsize) == (
            dtype.kind,
            dtype.itemsize,
        ):
            return code
    raise log_error(
        TypeError,
        f"QTNS stores float32 or int32 tensors, but got {array.dtype}.",
    )


def encode_tensor(array: np.ndarray) -> bytes:
    """Serialize a float32 or int32 array to QTNS bytes."""
    array = np.asarray(array)
    code = _dtype_code(array)
    header = _HEADER.pack(MAGIC, VERSION, code, array.ndim)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()
    return header + dims + payload


def decode_tensor(data: bytes) -> np.ndarray:
    """Parse QTNS bytes into a native-endian array.

    Raises
    ------
    ValueError
        With a distinct message for a wrong magic, an unsupported version,
        an unknown dtype code, a truncated file or trailing bytes.

    """
    if data[:4] != MAGIC:
        raise log_error(
            ValueError,
            f"Bad QTNS magic: expected {MAGIC!r}, got {bytes(data[:4])!r}.",
        )
    if len(data) < _HEADER.size:
        raise log_error(ValueError, "Truncated QTNS header.")
    _, version, code, rank = _HEADER.unpack_from(data)
    if version != VERSION:
        raise log_error(
            ValueError,
            f"Unsupported QTNS version {version} (expected {VERSION}).",
        )
    if code not in DTYPE_CODES:
        raise log_error(ValueError, f"Unknown QTNS dtype code {code}.")
    offset = _HEADER.size + 8 * rank
    if len(data) < offset:
        raise log_error(ValueError, "Truncated QTNS dimensions.")
    dims = struct.unpack_from(f"<{rank}Q", data, _HEADER.size)
    dtype = DTYPE_CODES[code]
    # exact integer product, hostile dims must not wrap around
    expected = dtype.itemsize * math.prod(dims)
    payload = data[offset:]
    if len(payload) < expected:
        raise log_error(
            ValueError,
            f"Truncated QTNS payload: expected {expected} bytes, "
            f"got {len(payload)}.",
        )
    if len(payload) > expected:
        raise log_error(
            ValueError,
            f"QTNS payload has {len(payload) - expected} trailing bytes.",
        )
    array = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return array.astype(dtype.newbyteorder("="))


def save_tensor(array: np.ndarray, file_path: Union[str, Path]) -> Path:
    """Write a tensor to a new ``.qtns`` file.

    Parameters
    ----------
    array : numpy.ndarray
        A float32 or int32 array.
    file_path : str or pathlib.Path
        Destination; must not exist yet.

    Returns
    -------
    pathlib.Path
        The written path.

    """
    file = ValidFile(
        file_path, expected_permission="w", expected_suffix=[".qtns"]
    )
    file.path.write_bytes(encode_tensor(array))
    logger.info(f"Saved tensor of shape {np.shape(array)} to {file.path}.")
    return file.path


def load_tensor(file_path: Union[str, Path]) -> np.ndarray:
    """Read a tensor from a ``.qtns`` file."""
    file = ValidFile(
        file_path, expected_permission="r", expected_suffix=[".qtns"]
    )
    array = decode_tensor(file.path.read_bytes())
    logger.debug(f"Loaded tensor of shape {array.shape} from {file.path}.")
    return array
