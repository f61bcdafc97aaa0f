"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .data import SessionRecord


def check_session(x, position: int = 0) -> SessionRecord:
    """Accept a SessionRecord, an ``(items, timestamps)`` pair or a mapping."""
    if isinstance(x, SessionRecord):
        s = x
    elif isinstance(x, dict):
        s = SessionRecord(str(x.get("session_id", position)), list(x["items"]), list(x["timestamps"]))
    else:
        try:
            items, stamps = x
        except (TypeError, ValueError):
            raise TypeError(
                f"session {position}: expected SessionRecord or (items, timestamps), got {type(x).__name__}"
            ) from None
        s = SessionRecord(str(position), list(items), list(stamps))
    if len(s) == 0:
        raise ValueError(f"session {position} is empty")
    return s


def check_sessions(X, n_items=None) -> list:
    if isinstance(X, (SessionRecord, dict)):
        raise TypeError("expected a sequence of sessions, got a single session")
    sessions = [check_session(x, k) for k, x in enumerate(X)]
    if not sessions:
        raise ValueError("no sessions given")
    if n_items is not None:
        for s in sessions:
            bad = [i for i in s.items if not (0 <= int(i) < n_items)]
            if bad:
                raise ValueError(
                    f"session {s.session_id!r} has item ids {bad} outside [0, {n_items})"
                )
    return sessions


def check_targets(y, n_samples: int, n_items=None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"expected {n_samples} targets, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("targets must be integer item indices")
    if n_items is not None and (y.min() < 0 or y.max() >= n_items):
        raise ValueError(f"targets outside [0, {n_items})")
    return y.astype(np.int64)


def check_is_fitted(estimator, attr: str = "params_"):
    if not hasattr(estimator, attr):
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit first")
