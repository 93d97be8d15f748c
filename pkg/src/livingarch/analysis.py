"""Action-space analysis: K-Means clustering of the learner's actions,
centroid-vs-default differences and quantile tables."""
import csv

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.decomposition import PCA
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import check_nonempty_sample
from .behaviour import ACTION_FIELDS, ActionScaler, normalize_params, ParamVector


def _sq_dists(X, C):
    # squared Euclidean distances, shape (n_samples, n_centers)
    d = (X * X).sum(axis=1)[:, None] - 2.0 * X @ C.T + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(X, k, rng, sample_weight=None):
    """k-means++ seeding: each new center drawn with probability ~ w(x) D(x)^2."""
    n = len(X)
    w = np.ones(n) if sample_weight is None else sample_weight
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[_draw(w, rng)]
    closest = _sq_dists(X, centers[:1])[:, 0]
    for i in range(1, k):
        score = w * closest
        idx = _draw(score, rng) if score.sum() > 0 else rng.integers(n)
        centers[i] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, centers[i:i + 1])[:, 0])
    return centers


def _draw(weights, rng):
    cum = np.cumsum(weights)
    return min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(weights) - 1)


def lloyd(X, centers, max_iter=300, sample_weight=None):
    """Lloyd iterations until the assignment stops changing.

    Returns ``(centers, labels, inertia, history)`` where ``history`` holds
    the (weighted) inertia after every assignment and every update step.
    """
    w = np.ones(len(X)) if sample_weight is None else sample_weight
    centers = centers.copy()
    labels = None
    history = []
    rows = np.arange(len(X))
    for it in range(max_iter):
        d = _sq_dists(X, centers)
        new = d.argmin(axis=1)
        history.append(float(w @ d[rows, new]))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(centers)):
            mask = labels == j
            if mask.any():
                centers[j] = w[mask] @ X[mask] / w[mask].sum()
            else:
                # empty cluster takes over the worst-served point
                worst = int((w * d[rows, labels]).argmax())
                centers[j] = X[worst]
                labels[worst] = j
        history.append(float(w @ ((X - centers[labels]) ** 2).sum(axis=1)))
    labels = _sq_dists(X, centers).argmin(axis=1)
    inertia = float(w @ ((X - centers[labels]) ** 2).sum(axis=1))
    return centers, labels, inertia, history


class ActionKMeans(ClusterMixin, TransformerMixin, BaseEstimator):
    """K-Means with k-means++ seeding and best-of-``n_init`` restarts.

    Parameters
    ----------
    n_clusters : int, default=6
    n_init : int, default=10
        Number of seeded restarts; the lowest inertia wins.
    max_iter : int, default=300
    random_state : int or None

    Attributes
    ----------
    cluster_centers_ : ndarray of shape (n_clusters, n_features)
    labels_ : ndarray of shape (n_samples,)
    inertia_ : float
    inertia_history_ : list of float
        Inertia after each half-step of Lloyd's algorithm for the winning
        restart.
    """

    def __init__(self, n_clusters=6, n_init=10, max_iter=300, random_state=None):
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.n_clusters > len(X):
            raise ValueError(f"n_clusters={self.n_clusters} exceeds n_samples={len(X)}")
        # clustering the distinct rows weighted by multiplicity makes the
        # result independent of row order and of repeated rows
        U, inverse, counts = np.unique(X, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.ravel()
        if len(U) < self.n_clusters:
            U, inverse, counts = X, np.arange(len(X)), np.ones(len(X))
        w = counts.astype(np.float64)
        seeds = np.random.SeedSequence(self.random_state).spawn(self.n_init)
        best = None
        for seq in seeds:
            rng = np.random.default_rng(seq)
            result = lloyd(U, kmeans_plusplus(U, self.n_clusters, rng, w), self.max_iter, w)
            if best is None or result[2] < best[2]:
                best = result
        self.cluster_centers_, labels, self.inertia_, self.inertia_history_ = best
        self.labels_ = labels[inverse]
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return _sq_dists(X, self.cluster_centers_).argmin(axis=1)

    def transform(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return np.sqrt(_sq_dists(X, self.cluster_centers_))


def kmeans(dataset, k=6, seed=0):
    return ActionKMeans(n_clusters=k, random_state=seed).fit(dataset)


def pb_default_normalized():
    """Behaviour defaults in normalized action coordinates, clipped to [-1, 1]."""
    return np.clip(normalize_params(ParamVector()), -1.0, 1.0)


def centroid_vs_pb(centers):
    """Signed difference ``centroid - default`` per cluster and dimension."""
    C = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    return C - pb_default_normalized()[None, :]


def qq_table(sample_a, sample_b, n_quantiles=100):
    """Paired percentiles ``(Q_q(a), Q_q(b))`` for q = 0..n_quantiles."""
    a = check_nonempty_sample(sample_a, "sample_a")
    b = check_nonempty_sample(sample_b, "sample_b")
    q = np.linspace(0.0, 100.0, n_quantiles + 1)
    return np.column_stack([q, np.percentile(a, q, method="linear"), np.percentile(b, q, method="linear")])


def principal_axes(X, n_components=2):
    """2-D projection of the actions for plotting."""
    X = check_array(X, dtype=np.float64)
    n = min(n_components, X.shape[1], len(X))
    return PCA(n_components=n).fit_transform(X)


def write_cluster_csvs(out_dir, X, model, timestamps=None, days=None):
    """Assignments, centroids (normalized and physical) and the diff matrix."""
    X = check_array(X, dtype=np.float64)
    proj = principal_axes(X) if len(X) > 1 else np.zeros((len(X), 2))
    with open(f"{out_dir}/assignments.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "t", "day", "cluster", "pc1", "pc2"] + list(ACTION_FIELDS))
        for i, row in enumerate(X):
            t = "" if timestamps is None else timestamps[i]
            d = "" if days is None else days[i]
            pc = list(proj[i]) + [0.0] * (2 - proj.shape[1])
            w.writerow([i, t, d, int(model.labels_[i]), *pc[:2], *row])
    phys = ActionScaler().transform(model.cluster_centers_)
    with open(f"{out_dir}/centroids.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "units"] + list(ACTION_FIELDS))
        for j, c in enumerate(model.cluster_centers_):
            w.writerow([j, "normalized", *c])
            w.writerow([j, "physical", *phys[j]])
    with open(f"{out_dir}/centroid_diff.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster"] + list(ACTION_FIELDS))
        for j, row in enumerate(centroid_vs_pb(model.cluster_centers_)):
            w.writerow([j, *row])


def write_qq_csv(path, table, labels=("a", "b")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["q", *labels])
        for row in table:
            w.writerow(list(row))
