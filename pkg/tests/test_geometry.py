import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pcbdet import geometry
from pcbdet.geometry import (
    Dataset,
    OffParseError,
    SHAPE_NAMES,
    distance_gradient,
    generate_shape,
    load_dataset,
    load_off_mesh,
    nearest_point_index,
    normalize_cloud,
    point_to_cloud_distance,
    sample_mesh,
    save_dataset,
)

finite_coords = st.floats(min_value=-10, max_value=10, allow_nan=False, allow_infinity=False)


def clouds(min_points=1, max_points=12):
    return hnp.arrays(
        np.float64,
        st.tuples(st.integers(min_points, max_points), st.just(3)),
        elements=finite_coords,
    )


class TestDistance:
    def test_single_point_pythagoras(self):
        assert point_to_cloud_distance([0, 0, 0], [[3, 4, 0]]) == 5.0

    def test_coincident_point(self):
        assert point_to_cloud_distance([1, 1, 1], [[1, 1, 1], [2, 2, 2]]) == 0.0

    def test_minimum_over_three(self):
        X = [[1, 0, 0], [0, 2, 0], [0, 0, 3]]
        assert point_to_cloud_distance([0, 0, 0], X) == 1.0

    def test_empty_cloud_rejected(self):
        with pytest.raises(ValueError):
            point_to_cloud_distance([0, 0, 0], np.empty((0, 3)))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            point_to_cloud_distance([np.nan, 0, 0], [[1, 2, 3]])
        with pytest.raises(ValueError):
            point_to_cloud_distance([0, 0, 0], [[np.inf, 2, 3]])

    @given(clouds(min_points=1), hnp.arrays(np.float64, (3,), elements=finite_coords),
           hnp.arrays(np.float64, (3,), elements=finite_coords))
    def test_monotone_under_insertion(self, X, c, y):
        bigger = np.vstack([X, y[None, :]])
        assert point_to_cloud_distance(c, bigger) <= point_to_cloud_distance(c, X)

    @given(clouds(min_points=2), hnp.arrays(np.float64, (3,), elements=finite_coords),
           st.randoms(use_true_random=False))
    def test_permutation_invariant(self, X, c, rnd):
        perm = list(range(len(X)))
        rnd.shuffle(perm)
        assert point_to_cloud_distance(c, X[perm]) == point_to_cloud_distance(c, X)


class TestDistanceGradient:
    def test_unit_direction_away_from_nearest(self):
        np.testing.assert_array_equal(distance_gradient([2, 0, 0], [[0, 0, 0]]), [1, 0, 0])

    def test_coincidence_convention_zero(self):
        np.testing.assert_array_equal(distance_gradient([1, 1, 1], [[1, 1, 1]]), [0, 0, 0])

    def test_tie_breaks_to_lowest_index(self):
        g = distance_gradient([0, 0, 0], [[1, 0, 0], [-1, 0, 0]])
        np.testing.assert_array_equal(g, [-1, 0, 0])

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(31)
        checked = 0
        while checked < 50:
            X = rng.normal(size=(rng.integers(2, 9), 3))
            c = rng.normal(size=3)
            d = point_to_cloud_distance(c, X)
            d2 = np.sum((X - c) ** 2, axis=1)
            gap = np.sort(np.sqrt(d2))
            # Only probe where the nearest point is unique and well separated.
            if d < 1e-3 or (len(gap) > 1 and gap[1] - gap[0] < 1e-3):
                continue
            h = 1e-5
            fd = np.empty(3)
            for j in range(3):
                e = np.zeros(3)
                e[j] = h
                fd[j] = (
                    point_to_cloud_distance(c + e, X) - point_to_cloud_distance(c - e, X)
                ) / (2 * h)
            g = distance_gradient(c, X)
            assert np.linalg.norm(g - fd) <= 1e-4 * max(1.0, np.linalg.norm(fd))
            checked += 1


class TestNormalize:
    def test_center_then_scale(self):
        out = normalize_cloud([[1, 1, 1], [3, 3, 3]])
        s = 1 / math.sqrt(3)
        np.testing.assert_allclose(out, [[-s, -s, -s], [s, s, s]], atol=1e-12)

    def test_degenerate_scale_skipped(self):
        np.testing.assert_array_equal(normalize_cloud([[5, 5, 5]]), [[0, 0, 0]])

    def test_identity_when_already_normalized(self):
        X = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
        np.testing.assert_allclose(normalize_cloud(X), X, atol=1e-12)

    @given(clouds(min_points=2))
    def test_idempotent(self, X):
        once = normalize_cloud(X)
        twice = normalize_cloud(once)
        np.testing.assert_allclose(twice, once, atol=1e-9)

    @given(clouds(min_points=2))
    def test_postconditions(self, X):
        out = normalize_cloud(X)
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)
        maxnorm = np.linalg.norm(out, axis=1).max()
        assert maxnorm <= 1 + 1e-9
        pre = X - X.mean(axis=0)
        if np.linalg.norm(pre, axis=1).max() >= 1e-9:
            assert maxnorm == pytest.approx(1.0, abs=1e-9)


class TestGenerateShape:
    def test_deterministic(self):
        a = generate_shape(0, 256, seed=7)
        b = generate_shape(0, 256, seed=7)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = generate_shape(0, 256, seed=7)
        b = generate_shape(0, 256, seed=8)
        assert not np.array_equal(a, b)

    @pytest.mark.parametrize("seed", [0, 3, 11])
    def test_sphere_norms_and_centroid(self, seed):
        X = generate_shape(0, 256, seed=seed)
        norms = np.linalg.norm(X, axis=1)
        # Jitter sigma = 0.02; normalized sphere points stay within a few
        # sigma of the unit radius.
        assert norms.min() >= 1 - 3 * 0.02 * 4
        assert norms.max() <= 1 + 1e-9
        assert np.linalg.norm(X.mean(axis=0)) <= 1e-9

    def test_cube_bounds(self):
        X = generate_shape(1, 128, seed=1)
        assert X.shape == (128, 3)
        assert np.abs(X).max() <= 1.0

    def test_every_family_produces_normalized_clouds(self):
        for cid in range(len(SHAPE_NAMES)):
            X = generate_shape(cid, 64, seed=5)
            assert X.shape == (64, 3)
            assert np.linalg.norm(X, axis=1).max() == pytest.approx(1.0, abs=1e-9)

    def test_unknown_class_rejected(self):
        with pytest.raises(ValueError):
            generate_shape(len(SHAPE_NAMES), 64, seed=0)

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            generate_shape(0, 8, seed=0)


CUBE_OFF = """OFF
8 12 0
0 0 0
1 0 0
1 1 0
0 1 0
0 0 1
1 0 1
1 1 1
0 1 1
3 0 2 1
3 0 3 2
3 4 5 6
3 4 6 7
3 0 1 5
3 0 5 4
3 1 2 6
3 1 6 5
3 2 3 7
3 2 7 6
3 3 0 4
3 3 4 7
"""


class TestOffMesh:
    def test_parse_cube(self, tmp_path):
        p = tmp_path / "cube.off"
        p.write_text(CUBE_OFF)
        mesh = load_off_mesh(p)
        assert mesh.vertices.shape == (8, 3)
        assert mesh.faces.shape == (12, 3)

    def test_bad_header_names_line_one(self, tmp_path):
        p = tmp_path / "bad.off"
        p.write_text("OFS\n8 12 0\n")
        with pytest.raises(OffParseError, match="line 1"):
            load_off_mesh(p)

    def test_non_triangle_face_rejected(self, tmp_path):
        p = tmp_path / "quad.off"
        p.write_text("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
        with pytest.raises(OffParseError, match="line 7"):
            load_off_mesh(p)

    def test_out_of_range_index_rejected(self, tmp_path):
        p = tmp_path / "oob.off"
        p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 9\n")
        with pytest.raises(OffParseError, match="line 6"):
            load_off_mesh(p)

    def test_samples_lie_on_cube_faces(self, tmp_path):
        p = tmp_path / "cube.off"
        p.write_text(CUBE_OFF)
        mesh = load_off_mesh(p)
        pts = sample_mesh(mesh, 1000, seed=3)
        # The mesh is normalized before sampling: centroid (0.5,0.5,0.5) maps
        # to the origin and the half-diagonal to norm 1, so faces become the
        # planes coordinate = +-1/sqrt(3).
        half = 1 / math.sqrt(3)
        on_face = np.min(np.abs(np.abs(pts) - half), axis=1)
        assert on_face.max() <= 1e-9
        assert np.abs(pts).max() <= half + 1e-9

    def test_sampling_deterministic(self, tmp_path):
        p = tmp_path / "cube.off"
        p.write_text(CUBE_OFF)
        mesh = load_off_mesh(p)
        np.testing.assert_array_equal(sample_mesh(mesh, 100, seed=5), sample_mesh(mesh, 100, seed=5))


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        ds = Dataset(
            clouds=[generate_shape(0, 32, 1), generate_shape(1, 48, 2)],
            labels=np.array([0, 1]),
            num_classes=2,
        )
        p = tmp_path / "split.txt"
        save_dataset(ds, p)
        back = load_dataset(p)
        assert back.num_classes == 2
        assert list(back.labels) == [0, 1]
        for a, b in zip(ds.clouds, back.clouds):
            np.testing.assert_allclose(a, b, rtol=1e-8)

    def test_nine_digit_stability(self, tmp_path):
        ds = Dataset(clouds=[generate_shape(2, 20, 9)], labels=np.array([0]), num_classes=1)
        p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
        save_dataset(ds, p1)
        save_dataset(load_dataset(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_label_validation(self):
        with pytest.raises(ValueError):
            Dataset(clouds=[np.zeros((4, 3))], labels=np.array([5]), num_classes=2)
