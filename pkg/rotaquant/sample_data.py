"""Module for generating synthetic calibration data.

Nothing is downloaded: every sample is drawn from a seeded
:func:`numpy.random.default_rng`, so the same seed always gives the same
data. Besides token batches for the toy model, the module provides the
activation-like vectors used to study initialization and rotations: a
Gaussian core with a few large outliers, and heavy-tailed Student-t samples.
"""

import logging
from typing import Optional

import numpy as np

from rotaquant.logging import log_error
from rotaquant.model import ToyTransformerConfig

logger = logging.getLogger(__name__)

DEFAULT_NUM_BATCHES = 8


def synthetic_tokens(
    num_sequences: int, seq_len: int, vocab_size: int, seed: int
) -> np.ndarray:
    """Draw uniformly random token ids.

    Returns
    -------
    numpy.ndarray
        int32 array of shape (num_sequences, seq_len).

    """
    if num_sequences < 1 or seq_len < 1 or vocab_size < 1:
        raise log_error(
            ValueError,
            "num_sequences, seq_len and vocab_size must all be >= 1.",
        )
    rng = np.random.default_rng(seed)
    return rng.integers(
        0, vocab_size, size=(num_sequences, seq_len), dtype=np.int32
    )


def make_batches(tokens: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Split token sequences into consecutive batches.

    The last batch is shorter when ``batch_size`` does not divide the number
    of sequences.
    """
    if batch_size < 1:
        raise log_error(
            ValueError, f"Expected batch_size >= 1, but got {batch_size}."
        )
    tokens = np.asarray(tokens)
    return [
        tokens[start : start + batch_size]
        for start in range(0, len(tokens), batch_size)
    ]


def calibration_batches(
    config: ToyTransformerConfig,
    seed: int,
    num_batches: int = DEFAULT_NUM_BATCHES,
    batch_size: int = 4,
    seq_len: Optional[int] = None,
) -> list[np.ndarray]:
    """Synthetic calibration batches for a toy model.

    Parameters
    ----------
    config : ToyTransformerConfig
        Supplies the vocabulary size and the default sequence length.
    seed : int
        Seed of the token generator.
    num_batches : int, optional
        Number of batches. Default 8.
    batch_size : int, optional
        Sequences per batch. Default 4.
    seq_len : int, optional
        Sequence length; defaults to ``config.seq_len``.

    """
    if num_batches < 1:
        raise log_error(
            ValueError, f"Expected num_batches >= 1, but got {num_batches}."
        )
    tokens = synthetic_tokens(
        num_batches * batch_size,
        seq_len or config.seq_len,
        config.vocab_size,
        seed,
    )
    logger.debug(
        f"Generated {num_batches} synthetic batches of shape "
        f"({batch_size}, {tokens.shape[1]}) from seed {seed}."
    )
    return make_batches(tokens, batch_size)


def gaussian_with_outlier(
    n: int,
    seed: int,
    num_outliers: int = 1,
    outlier_magnitude: float = 64.0,
) -> np.ndarray:
    """Standard-normal samples with a few large outliers.

    The outliers take the value ``±outlier_magnitude`` (random signs) at
    random positions.

    Returns
    -------
    numpy.ndarray
        float32 vector of length ``n``.

    """
    if not 0 <= num_outliers <= n:
        raise log_error(
            ValueError,
            f"Expected 0 <= num_outliers <= {n}, but got {num_outliers}.",
        )
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    positions = rng.choice(n, size=num_outliers, replace=False)
    signs = rng.choice([-1.0, 1.0], size=num_outliers)
    x[positions] = signs * outlier_magnitude
    return x.astype(np.float32)


def student_t(n: int, seed: int, df: float = 3.0) -> np.ndarray:
    """Heavy-tailed Student-t samples as a float32 vector."""
    if df <= 0:
        raise log_error(ValueError, f"Expected df > 0, but got {df}.")
    rng = np.random.default_rng(seed)
    return rng.standard_t(df, size=n).astype(np.float32)
