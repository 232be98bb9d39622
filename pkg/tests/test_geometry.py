import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailpcc.geometry import (
    downsample,
    estimate_normals,
    farthest_point_sampling,
    knn,
    nearest_assignment,
)
from tailpcc.pcio import PointCloud, generate_synthetic


def brute_knn(ref, q, k):
    d2 = ((q[:, None] - ref[None]) ** 2).sum(-1)
    idx = np.array([sorted(range(len(ref)), key=lambda i: (row[i], i))[:k] for row in d2])
    return idx, np.sqrt(np.take_along_axis(d2, idx, axis=1))


def brute_fps(x, m):
    c = x.mean(0)
    out = [min(range(len(x)), key=lambda i: (((x[i] - c) ** 2).sum(), i))]
    while len(out) < m:
        best, best_d = None, -1.0
        for i in range(len(x)):
            d = min(((x[i] - x[j]) ** 2).sum() for j in out)
            if d > best_d:
                best, best_d = i, d
        out.append(best)
    return np.array(out)


class TestKnn:
    def test_single_neighbour(self):
        nb = knn([[0, 0, 0], [1, 0, 0]], [[0.4, 0, 0]], 1)
        assert nb.indices[0, 0] == 0
        assert nb.distances[0, 0] == pytest.approx(0.4, abs=1e-15)

    def test_tie_goes_to_lower_index(self):
        ref = np.array([[5, 5, 5], [6, 6, 6], [1, 0, 0], [7, 7, 7], [8, 8, 8], [-1, 0, 0]], float)
        assert knn(ref, [[0, 0, 0]], 1).indices[0, 0] == 2

    def test_large_tie_group(self):
        # 20 reference points on a circle around the query: all equidistant
        t = np.linspace(0, 2 * np.pi, 20, endpoint=False)
        ref = np.stack([np.cos(t), np.sin(t), np.zeros(20)], 1)
        ref = np.vstack([ref * 1.0, [[5.0, 0, 0]]])
        nb = knn(ref, [[0, 0, 0]], 4)
        bi, bd = brute_knn(ref, np.zeros((1, 3)), 4)
        np.testing.assert_array_equal(nb.indices, bi)
        axes = np.vstack([np.eye(3), -np.eye(3), [[9.0, 9, 9]]])
        assert knn(axes, [[0, 0, 0]], 4).indices[0].tolist() == [0, 1, 2, 3]

    def test_matches_brute_force(self, rng):
        x = rng.uniform(size=(300, 3))
        nb = knn(x, x, 4)
        bi, bd = brute_knn(x, x, 4)
        np.testing.assert_array_equal(nb.indices, bi)
        np.testing.assert_allclose(nb.distances, bd, atol=1e-15)

    def test_grid_data_with_ties(self):
        g = np.stack(np.meshgrid(*[np.arange(5.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
        nb = knn(g, g, 7)
        bi, _ = brute_knn(g, g, 7)
        np.testing.assert_array_equal(nb.indices, bi)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            knn(np.zeros((2, 3)), np.zeros((1, 3)), 3)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_property_brute_force(self, n, k, seed):
        r = np.random.default_rng(seed)
        ref = np.round(r.uniform(size=(n, 3)) * 4) / 4  # coarse grid invites ties
        q = np.round(r.uniform(size=(7, 3)) * 4) / 4
        k = min(k, n)
        bi, _ = brute_knn(ref, q, k)
        np.testing.assert_array_equal(knn(ref, q, k).indices, bi)


class TestDownsample:
    def test_half(self, rng):
        idx, ds = downsample(PointCloud(rng.normal(size=(8, 3))), 0.5)
        assert ds.n == 4 and len(set(idx)) == 4

    def test_single_point(self):
        idx, ds = downsample(PointCloud([[1.0, 2.0, 3.0]]), 0.25)
        assert list(idx) == [0]
        np.testing.assert_array_equal(ds.coords, [[1, 2, 3]])

    def test_target_count(self, rng):
        x = rng.uniform(size=(200, 3))
        idx, _ = downsample(x, 20)
        np.testing.assert_array_equal(idx, brute_fps(x, 20))

    def test_seed_is_centroid_nearest(self, rng):
        x = rng.normal(size=(50, 3))
        first = farthest_point_sampling(x, 1)[0]
        assert first == np.argmin(((x - x.mean(0)) ** 2).sum(1))

    def test_ceil_factors(self, rng):
        x = rng.uniform(size=(7, 3))
        assert downsample(x, 1 / 3)[1].n == 3
        assert downsample(x, 0.25)[1].n == 2


class TestAssignment:
    def test_identity(self, rng):
        x = rng.uniform(size=(30, 3))
        a = nearest_assignment(x, x)
        np.testing.assert_array_equal(a.nearest, np.arange(30))
        assert all(len(b) == 1 for b in a.buckets)

    def test_one_sample(self, rng):
        x = rng.uniform(size=(30, 3))
        a = nearest_assignment(x, x[:1])
        assert a.counts.tolist() == [30]

    def test_matches_argmin_scan(self, rng):
        x = rng.uniform(size=(400, 3))
        ds = x[rng.choice(400, 25, replace=False)]
        a = nearest_assignment(x, ds)
        d2 = ((x[:, None] - ds[None]) ** 2).sum(-1)
        np.testing.assert_array_equal(a.nearest, d2.argmin(1))
        for i, b in enumerate(a.buckets):
            np.testing.assert_array_equal(b, np.nonzero(a.nearest == i)[0])


class TestNormals:
    def test_plane(self, rng):
        x = np.column_stack([rng.uniform(size=(300, 2)), np.zeros(300)])
        n = estimate_normals(PointCloud(x)).normals
        np.testing.assert_allclose(np.abs(n[:, 2]), 1.0, atol=1e-6)

    def test_sphere(self):
        pc = generate_synthetic("sphere_surface", 2000, 1.0, seed=0)
        n = estimate_normals(pc, 16).normals
        radial = pc.coords - 0.5
        radial /= np.linalg.norm(radial, axis=1, keepdims=True)
        assert (np.abs((n * radial).sum(1)) >= 0.99).mean() >= 0.95

    def test_collinear_flagged(self):
        x = np.column_stack([np.arange(20.0), np.zeros(20), np.zeros(20)])
        out = estimate_normals(PointCloud(x), 16)
        assert out.degenerate.all()
        np.testing.assert_array_equal(out.normals, np.tile([0, 0, 1.0], (20, 1)))
