"""Small input-validation helpers shared across the package."""
import numbers

import numpy as np
from sklearn.utils import check_random_state as _sk_check_random_state


def check_random_state(seed):
    """Turn ``seed`` into a :class:`numpy.random.Generator`.

    Accepts None, an int, a Generator, or a legacy ``RandomState`` (whose
    stream is used to seed a new Generator).
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, numbers.Integral):
        return np.random.default_rng(seed)
    rs = _sk_check_random_state(seed)
    return np.random.default_rng(rs.randint(0, 2**31 - 1))


def check_finite(x, name="array"):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_unit_interval(x, name="array"):
    x = np.asarray(x, dtype=np.float64)
    check_finite(x, name)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")
    return x


def check_frames(frames, n_sensors=None, name="frames"):
    """Coerce IR frames to a 2-D float array of shape (n_frames, n_sensors)."""
    X = np.asarray(frames, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D (n_frames, n_sensors), got shape {X.shape}")
    if n_sensors is not None and X.shape[1] != n_sensors:
        raise ValueError(f"{name} must have {n_sensors} sensors per frame, got {X.shape[1]}")
    check_finite(X, name)
    return X


def check_nonempty_sample(x, name="sample"):
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError(f"{name} must be non-empty")
    check_finite(x, name)
    return x
