"""Input validation helpers in the style of ``sklearn.utils.validation``."""
import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from .errors import ConfigError

N_CHANNELS = 7


def check_sequences(X, y=None, n_communities=None, battery_buckets=None):
    """Validate a token-window array and, optionally, community targets.

    Returns float64 ``X`` of shape (n, L, 7) and, when given, int64 ``y``.
    Token ids must be integral and inside their vocabularies; targets must
    lie in ``[1, n_communities]``.
    """
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 3 or X.shape[2] != N_CHANNELS:
        raise ConfigError(f"expected X of shape (n_samples, window_len, {N_CHANNELS}), "
                          f"got {X.shape}")
    ids = X[..., :3]
    if np.any(ids != np.round(ids)) or np.any(ids < 0):
        raise ConfigError("token id channels must hold non-negative integers")
    if n_communities is not None and np.any(X[..., :2] > n_communities):
        raise ConfigError(f"community token outside [0, {n_communities}]")
    if battery_buckets is not None and np.any(X[..., 2] > battery_buckets):
        raise ConfigError(f"battery token outside [0, {battery_buckets}]")
    if np.any(X[:, -1, 0] == 0):
        raise ConfigError("the most recent token of every window must be a real trip")
    if y is None:
        return X
    y = np.asarray(y)
    if y.ndim != 1:
        raise ConfigError("y must be one-dimensional")
    check_consistent_length(X, y)
    if np.any(y != np.round(y)):
        raise ConfigError("targets must be integer community ids")
    y = y.astype(np.int64)
    if n_communities is not None and (np.any(y < 1) or np.any(y > n_communities)):
        raise ConfigError(f"targets must lie in [1, {n_communities}]")
    return X, y


def check_fraction(value, name, low_open=False):
    value = float(value)
    ok = (0.0 < value <= 1.0) if low_open else (0.0 <= value <= 1.0)
    if not ok:
        raise ConfigError(f"{name}={value} is outside the allowed range")
    return value
