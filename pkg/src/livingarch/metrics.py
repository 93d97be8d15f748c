"""Engagement measurement: IR calibration, per-minute engagement, active
interaction counts and the Mann-Whitney U test."""
import csv
import math
from collections import defaultdict

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_frames, check_nonempty_sample

ACTIVE_THRESHOLD = 0.25
SAMPLE_RATE = 10.0
EXACT_MAX_N = 8

BLOCKED_STD = 0.005
BLOCKED_MEAN = 0.5


class IRCalibrator(TransformerMixin, BaseEstimator):
    """Two-step IR calibration fitted on a visitor-free window.

    ``fit`` takes the frames recorded while nobody was under the sculpture.
    Sensors that barely move yet read high there are flagged as blocked,
    and every sensor's mean becomes its baseline offset. ``transform``
    drops the blocked sensors, subtracts the offsets and clamps to [0, 1].

    Parameters
    ----------
    blocked_std : float
        A sensor is blocked if its standard deviation over the window is
        below this value ...
    blocked_mean : float
        ... while its mean exceeds this value.
    """

    def __init__(self, blocked_std=BLOCKED_STD, blocked_mean=BLOCKED_MEAN):
        self.blocked_std = blocked_std
        self.blocked_mean = blocked_mean

    def fit(self, X, y=None):
        X = check_frames(X)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        self.n_features_in_ = X.shape[1]
        self.baseline_offsets_ = mean
        self.blocked_ = np.flatnonzero((std < self.blocked_std) & (mean > self.blocked_mean))
        self.kept_ = np.setdiff1d(np.arange(X.shape[1]), self.blocked_)
        return self

    @classmethod
    def from_profile(cls, profile):
        cal = cls()
        offsets = np.asarray(profile.baseline_offsets, dtype=np.float64)
        cal.n_features_in_ = len(offsets)
        cal.baseline_offsets_ = offsets
        cal.blocked_ = np.array(sorted(profile.blocked_sensors), dtype=int)
        cal.kept_ = np.setdiff1d(np.arange(len(offsets)), cal.blocked_)
        return cal

    def transform(self, X):
        check_is_fitted(self, "baseline_offsets_")
        X = check_frames(X, self.n_features_in_)
        return np.clip(X[:, self.kept_] - self.baseline_offsets_[self.kept_], 0.0, 1.0)

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "kept_")
        return np.array([f"ir{i}" for i in self.kept_], dtype=object)


class CalibrationProfile:
    """Blocked sensors, per-sensor offsets and the window they came from."""

    def __init__(self, blocked_sensors, baseline_offsets, no_visitor_window=(None, None)):
        self.blocked_sensors = frozenset(int(s) for s in blocked_sensors)
        self.baseline_offsets = np.asarray(baseline_offsets, dtype=np.float64)
        if not np.all(np.isfinite(self.baseline_offsets)):
            raise ValueError("baseline offsets must be finite")
        if not self.blocked_sensors <= set(range(len(self.baseline_offsets))):
            raise ValueError("blocked sensors must be valid sensor ids")
        self.no_visitor_window = tuple(no_visitor_window)

    @classmethod
    def from_window(cls, frames, window=(None, None), **kwargs):
        cal = IRCalibrator(**kwargs).fit(frames)
        return cls(cal.blocked_.tolist(), cal.baseline_offsets_, window)


def calibrate(frames, profile):
    """Apply a calibration profile to raw frames (analysis only)."""
    X = check_frames(frames)
    if X.shape[1] != len(profile.baseline_offsets):
        raise ValueError(f"profile covers {len(profile.baseline_offsets)} sensors, frames have {X.shape[1]}")
    return IRCalibrator.from_profile(profile).transform(X)


def engagement(window):
    """Mean IR reading over all frames and sensors of a window, in [0, 1]."""
    X = check_frames(window)
    if X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError("engagement of an empty window is undefined")
    return float(X.sum() / (X.shape[0] * X.shape[1]))


def active_count(window, sample_rate=SAMPLE_RATE, threshold=ACTIVE_THRESHOLD):
    """Readings at or above ``threshold`` in the window, divided by the rate."""
    if not sample_rate > 0:
        raise ValueError("sample rate must be positive")
    X = check_frames(window)
    if X.shape[0] == 0:
        raise ValueError("active count of an empty window is undefined")
    return float(np.count_nonzero(X >= threshold) / sample_rate)


def minute_buckets(timestamps):
    """Group frame indices by wall-clock minute; partial buckets are kept."""
    buckets = defaultdict(list)
    for i, t in enumerate(timestamps):
        buckets[int(math.floor(t / 60.0))].append(i)
    return dict(sorted(buckets.items()))


def per_minute(timestamps, frames, sample_rate=SAMPLE_RATE):
    """Per-minute (minute_start, engagement, active_count) rows."""
    X = check_frames(frames)
    rows = []
    for minute, idx in minute_buckets(timestamps).items():
        w = X[idx]
        rows.append((60.0 * minute, engagement(w), active_count(w, sample_rate)))
    return rows


def write_minute_csv(path, rows):
    """rows: iterables of (minute_start, mode, e, n_active[, variant])."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["minute_start", "mode", "e", "n_active", "variant"])
        for row in rows:
            row = list(row) + ["raw"] * (5 - len(row))
            w.writerow(row)


# Mann-Whitney U ----------------------------------------------------------

def _midranks(x):
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_p(ranks2, n, u2_obs, nm):
    """Two-sided exact p on the doubled scale (midranks become integers).

    ``ranks2`` are doubled midranks of the pooled sample, ``u2_obs`` is 2U.
    Counts n-subsets per doubled rank sum by dynamic programming.
    """
    max_sum = sum(sorted(ranks2)[-n:])
    counts = [[0] * (max_sum + 1) for _ in range(n + 1)]
    counts[0][0] = 1
    for r in ranks2:
        for k in range(n, 0, -1):
            row, prev = counts[k], counts[k - 1]
            for s in range(max_sum, r - 1, -1):
                if prev[s - r]:
                    row[s] += prev[s - r]
    dev_obs = abs(u2_obs - nm)
    hits = sum(c for s2, c in enumerate(counts[n]) if c and abs(s2 - n * (n + 1) - nm) >= dev_obs)
    return hits / math.comb(len(ranks2), n)


def mann_whitney_u(sample_a, sample_b, method="auto"):
    """Two-sided Mann-Whitney U test.

    Returns ``(U, p)`` where U counts, over all pairs, how often a value of
    ``sample_a`` exceeds one of ``sample_b`` (ties count one half).

    ``method`` is ``"exact"`` (permutation distribution of the midrank sum,
    enumerated exactly), ``"normal"`` (normal approximation with continuity
    and tie correction) or ``"auto"`` (exact when both samples have at most
    eight values).
    """
    a = check_nonempty_sample(sample_a, "sample_a")
    b = check_nonempty_sample(sample_b, "sample_b")
    n, m = len(a), len(b)
    ranks = _midranks(np.concatenate([a, b]))
    u = float(ranks[:n].sum() - n * (n + 1) / 2.0)
    if method == "auto":
        method = "exact" if max(n, m) <= EXACT_MAX_N else "normal"
    if method == "exact":
        ranks2 = [int(round(2 * r)) for r in ranks]
        return u, _exact_p(ranks2, n, int(round(2 * u)), n * m)
    if method != "normal":
        raise ValueError(f"unknown method {method!r}")
    N = n + m
    _, counts = np.unique(np.concatenate([a, b]), return_counts=True)
    tie = float(np.sum(counts ** 3 - counts))
    var = n * m / 12.0 * ((N + 1) - tie / (N * (N - 1))) if N > 1 else 0.0
    if var <= 0:
        return u, 1.0
    z = (abs(u - n * m / 2.0) - 0.5) / math.sqrt(var)
    p = math.erfc(max(z, 0.0) / math.sqrt(2.0))
    return u, min(1.0, p)
