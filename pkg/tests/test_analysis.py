import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import adjusted_rand_score

from livingarch.analysis import (
    ActionKMeans, centroid_vs_pb, kmeans, pb_default_normalized, principal_axes, qq_table,
    write_cluster_csvs, write_qq_csv,
)
from livingarch.behaviour import ACTION_FIELDS


def blobs(seed, k=6, per=50, sigma=0.02, sep=10):
    rng = np.random.default_rng(seed)
    centers = []
    while len(centers) < k:
        c = rng.uniform(-0.8, 0.8, 11)
        if all(np.linalg.norm(c - o) >= sep * sigma for o in centers):
            centers.append(c)
    centers = np.array(centers)
    labels = np.repeat(np.arange(k), per)
    return centers[labels] + rng.normal(0, sigma, (k * per, 11)), labels, centers


def test_recovers_separated_blobs():
    X, y, _ = blobs(0)
    model = ActionKMeans(random_state=0).fit(X)
    assert adjusted_rand_score(y, model.labels_) >= 0.99
    assert np.array_equal(model.predict(X), model.labels_)
    assert model.transform(X).shape == (len(X), 6)


def test_two_blobs_centroids_are_blob_means():
    X, y, _ = blobs(1, k=2)
    model = kmeans(X, k=2, seed=0)
    means = np.array([X[y == j].mean(axis=0) for j in range(2)])
    order = np.argsort(model.cluster_centers_[:, 0])
    assert np.allclose(model.cluster_centers_[order], means[np.argsort(means[:, 0])], atol=1e-6)


def test_k_equals_rows():
    X = np.random.default_rng(2).random((7, 11))
    model = kmeans(X, k=7)
    assert model.inertia_ == 0.0
    assert sorted(map(tuple, model.cluster_centers_)) == sorted(map(tuple, X))


def test_too_many_clusters():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 11)), k=4)


def test_duplicated_dataset_gives_same_centroids():
    X = np.random.default_rng(3).random((60, 11))
    a = kmeans(X, k=6, seed=5)
    b = kmeans(np.vstack([X, X]), k=6, seed=5)
    assert np.array_equal(a.cluster_centers_, b.cluster_centers_)
    assert np.array_equal(np.tile(a.labels_, 2), b.labels_)


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_inertia_never_increases(seed, k):
    X = np.random.default_rng(seed).normal(size=(40, 11))
    model = ActionKMeans(n_clusters=k, n_init=3, random_state=seed).fit(X)
    h = np.array(model.inertia_history_)
    assert np.all(np.diff(h) <= 1e-9 * max(1.0, h[0]))
    again = ActionKMeans(n_clusters=k, n_init=3, random_state=seed).fit(X)
    assert np.array_equal(model.labels_, again.labels_)


def test_centroid_differences():
    assert not centroid_vs_pb(pb_default_normalized()).any()
    c = pb_default_normalized().copy()
    c[ACTION_FIELDS.index("t_ru_m")] = 0.0
    assert centroid_vs_pb(c)[0, ACTION_FIELDS.index("t_ru_m")] == pytest.approx(0.4)
    d = centroid_vs_pb(np.random.default_rng(0).uniform(-1, 1, (20, 11)))
    assert d.shape == (20, 11) and np.all(np.abs(d) <= 2.0)


def test_qq_examples():
    a = np.arange(1.0, 101.0)
    t = qq_table(a, a)
    assert np.array_equal(t[:, 1], t[:, 2])
    assert t[75, 1] == pytest.approx(75.25)
    shifted = qq_table(a, a + 1)
    assert np.allclose(shifted[:, 2] - shifted[:, 1], 1.0)
    with pytest.raises(ValueError):
        qq_table([], a)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_qq_endpoints(a, b):
    t = qq_table(a, b)
    assert t[0, 1] == min(a) and t[-1, 1] == max(a)
    assert t[0, 2] == min(b) and t[-1, 2] == max(b)
    assert np.all(np.diff(t[:, 1]) >= 0)


def test_cluster_csvs(tmp_path):
    X, _, _ = blobs(4, per=10)
    model = kmeans(X)
    write_cluster_csvs(str(tmp_path), X, model, timestamps=np.arange(len(X)), days=np.zeros(len(X), int))
    rows = list(csv.reader(open(tmp_path / "assignments.csv")))
    assert len(rows) == len(X) + 1 and rows[0][:4] == ["row", "t", "day", "cluster"]
    cent = list(csv.reader(open(tmp_path / "centroids.csv")))
    assert len(cent) == 1 + 2 * 6
    diff = list(csv.reader(open(tmp_path / "centroid_diff.csv")))
    assert len(diff) == 7 and diff[0][1:] == list(ACTION_FIELDS)
    write_qq_csv(tmp_path / "qq.csv", qq_table([1, 2], [3, 4]), ("PB", "PLA"))
    assert next(csv.reader(open(tmp_path / "qq.csv"))) == ["q", "PB", "PLA"]
    assert principal_axes(X).shape == (len(X), 2)
