"""Input validation helpers shared by the estimator facade and the CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .nanoformer import ConfigError


def check_token_sequences(X, name: str = "X", vocab_size: int | None = None, min_id: int = 0) -> list[list[int]]:
    """Coerce ``X`` into a list of integer id lists and range-check it."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = X.tolist()
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise TypeError(f"{name} must be a sequence of token-id sequences")
    out = []
    for k, row in enumerate(X):
        arr = np.asarray(row)
        if arr.ndim != 1 or (arr.size and not np.issubdtype(arr.dtype, np.integer)):
            raise TypeError(f"{name}[{k}] is not a 1-D integer sequence")
        ids = [int(v) for v in arr]
        if ids and (min(ids) < min_id or (vocab_size is not None and max(ids) >= vocab_size)):
            hi = "inf" if vocab_size is None else vocab_size
            raise ValueError(f"{name}[{k}] has ids outside [{min_id}, {hi})")
        out.append(ids)
    return out


def check_parallel(X, y, src_vocab: int | None = None, tgt_vocab: int | None = None, min_id: int = 0):
    X = check_token_sequences(X, "X", src_vocab, min_id)
    y = check_token_sequences(y, "y", tgt_vocab, min_id)
    if len(X) != len(y):
        raise ValueError(f"X and y have different lengths: {len(X)} vs {len(y)}")
    if not X:
        raise ValueError("need at least one sentence pair")
    return X, y


def check_fractions(fractions: Sequence[float]) -> list[float]:
    fr = [float(f) for f in fractions]
    if not fr or fr[0] != 0.0:
        raise ConfigError("fraction grid must start at 0")
    if any(b <= a for a, b in zip(fr, fr[1:])) or fr[-1] > 1.0:
        raise ConfigError("fraction grid must increase strictly and end at or below 1")
    return fr


def check_probability(value: float, name: str) -> float:
    v = float(value)
    if not 0.0 <= v <= 1.0:
        raise ConfigError(f"{name} must lie in [0, 1], got {value}")
    return v
