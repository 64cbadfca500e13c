import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from spheregen import geometry as g

from conftest import random_unit


def forward_reference(r, theta):
    """Scalar loop over the textbook hyperspherical formulas."""
    d = len(theta) + 1
    x = np.empty(d)
    s = r
    for i in range(d - 1):
        x[i] = s * np.cos(theta[i])
        s *= np.sin(theta[i])
    x[d - 1] = s
    return x


class TestToSpherical:
    def test_axis_points(self):
        r, th = g.to_spherical([1.0, 0.0, 0.0])
        assert r == 1.0 and np.array_equal(th, [0.0, 0.0])
        r, th = g.to_spherical([0.0, 0.0, 2.0])
        assert r == 2.0
        np.testing.assert_allclose(th, [np.pi / 2, np.pi / 2], rtol=0, atol=1e-15)

    def test_ones_five_dim(self):
        x = np.ones(5)
        r, th = g.to_spherical(x)
        assert abs(r - np.sqrt(5)) < 1e-15
        np.testing.assert_allclose(forward_reference(r, th), x, rtol=1e-10)

    def test_zero_vector_gives_zero_angles(self):
        r, th = g.to_spherical(np.zeros(4))
        assert r == 0.0 and np.array_equal(th, np.zeros(3))

    def test_negative_zero_does_not_flip_to_minus_pi(self):
        _, th = g.to_spherical([-1.0, -0.0])
        assert th[0] == np.pi

    def test_zero_tail_conventions(self):
        _, th = g.to_spherical([2.0, 0.0, 0.0, 0.0])
        assert np.array_equal(th, [0.0, 0.0, 0.0])
        _, th = g.to_spherical([-2.0, 0.0, 0.0, 0.0])
        assert np.array_equal(th, [np.pi, 0.0, 0.0])

    @pytest.mark.parametrize("bad", [[np.nan, 1.0], [np.inf, 0.0]])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(ValueError):
            g.to_spherical(bad)

    def test_rejects_one_dim(self):
        with pytest.raises(ValueError):
            g.to_spherical([1.0])

    def test_matches_reference_loop(self, rng):
        for d in (2, 3, 6):
            x = rng.standard_normal((50, d)) * 3
            r, th = g.to_spherical(x)
            for i in range(50):
                np.testing.assert_allclose(forward_reference(r[i], th[i]), x[i], rtol=1e-12, atol=1e-13)


class TestFromSpherical:
    def test_axis_points(self):
        np.testing.assert_allclose(g.from_spherical(1.0, [0.0, 0.0]), [1, 0, 0], atol=1e-16)
        np.testing.assert_allclose(g.from_spherical(2.0, [np.pi / 2, np.pi / 2]), [0, 0, 2], atol=1e-15)

    def test_norm_equals_radius(self, rng):
        theta = np.column_stack([rng.uniform(0, np.pi, (1000, 4)), rng.uniform(-np.pi, np.pi, 1000)])
        r = rng.uniform(0, 10, 1000)
        x = g.from_spherical(r, theta)
        np.testing.assert_allclose(np.linalg.norm(x, axis=1), r, rtol=1e-12)

    @pytest.mark.parametrize("theta", [[-0.1, 0.0], [np.pi + 1e-9, 0.0], [0.5, -np.pi], [0.5, 3.2]])
    def test_out_of_range_rejected(self, theta):
        with pytest.raises(ValueError):
            g.from_spherical(1.0, theta)

    def test_negative_radius_rejected(self):
        with pytest.raises(ValueError):
            g.from_spherical(-1.0, [0.1])

    @pytest.mark.parametrize("d", [2, 3, 5, 10])
    def test_round_trips(self, rng, d):
        theta = np.column_stack([rng.uniform(0, np.pi, (10_000, d - 2)), rng.uniform(-np.pi, np.pi, 10_000)])
        r = rng.exponential(size=10_000)
        r2, th2 = g.to_spherical(g.from_spherical(r, theta))
        np.testing.assert_allclose(r2, r, rtol=1e-10)
        np.testing.assert_allclose(th2, theta, rtol=0, atol=1e-10)
        x = rng.standard_normal((10_000, d))
        back = g.from_spherical(*g.to_spherical(x))
        rel = np.linalg.norm(back - x, axis=1) / np.linalg.norm(x, axis=1)
        assert rel.max() < 1e-10


class TestUnitProject:
    def test_examples(self):
        np.testing.assert_allclose(g.unit_project([3.0, 4.0]), [0.6, 0.8], rtol=1e-15)
        w = np.array([0.6, 0.8])
        np.testing.assert_allclose(g.unit_project(w), w, rtol=1e-15)

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            g.unit_project([0.0, 0.0, 0.0])

    @given(arrays(float, 6, elements=st.floats(-1e3, 1e3)), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, x, c):
        if np.linalg.norm(x) < 1e-6:
            return
        w = g.unit_project(x)
        np.testing.assert_allclose(g.unit_project(c * x), w, atol=1e-14)
        assert abs(np.linalg.norm(w) - 1) < 1e-12
        _, a1 = g.to_spherical(x)
        _, a2 = g.to_spherical(c * x)
        np.testing.assert_allclose(a1, a2, atol=1e-12)


class TestAngularDistance:
    def test_examples(self):
        e1, e2 = np.eye(3)[:2]
        assert g.angular_distance(e1, e1) == 0.0
        assert abs(g.angular_distance(e1, e2) - np.pi / 2) < 1e-15
        assert g.angular_distance(e1, -e1) == np.pi

    def test_clamps_rounding(self):
        x = np.array([1.0, 1.0, 1.0]) / np.sqrt(3)
        assert np.isfinite(g.angular_distance(x, x * (1 + 1e-15)))

    def test_metric_on_random_triples(self, rng):
        a, b, c = (random_unit(rng, 10_000, 4) for _ in range(3))
        dab = g.angular_distance(a, b)
        assert np.array_equal(dab, g.angular_distance(b, a))
        assert np.all((dab >= 0) & (dab <= np.pi))
        assert np.all(dab <= g.angular_distance(a, c) + g.angular_distance(c, b) + 1e-12)


class TestGeodesic:
    def test_endpoints(self, rng):
        a, b = random_unit(rng, 2, 5)
        np.testing.assert_allclose(g.geodesic_point(a, b, 0.0), a, atol=1e-15)
        np.testing.assert_allclose(g.geodesic_point(a, b, 1.0), b, atol=1e-15)

    def test_midpoint(self):
        e1, e2 = np.eye(4)[:2]
        np.testing.assert_allclose(g.geodesic_point(e1, e2, 0.5), [2**-0.5, 2**-0.5, 0, 0], atol=1e-15)

    def test_arc_fraction_and_norm(self, rng):
        a, b = random_unit(rng, 1000, 5), random_unit(rng, 1000, 5)
        t = rng.uniform(size=1000)
        p = g.geodesic_point(a, b, t)
        assert np.max(np.abs(np.linalg.norm(p, axis=1) - 1)) < 1e-12
        omega = g.angular_distance(a, b)
        np.testing.assert_allclose(g.angular_distance(a, p), t * omega, atol=1e-9)

    def test_antipodal_rejected(self):
        e1 = np.eye(3)[0]
        with pytest.raises(g.AntipodalPairError):
            g.geodesic_point(e1, -e1, 0.3)
        near = g.unit_project(-e1 + np.array([0, 1e-8, 0]))
        with pytest.raises(g.AntipodalPairError):
            g.geodesic_velocity(e1, near, 0.3)

    def test_equal_points_zero_velocity(self, rng):
        a = random_unit(rng, 1, 3)[0]
        np.testing.assert_allclose(g.geodesic_velocity(a, a, 0.4), 0.0, atol=1e-15)
        np.testing.assert_allclose(g.geodesic_point(a, a, 0.4), a, atol=1e-15)

    def test_velocity_matches_finite_differences(self, rng):
        a, b = random_unit(rng, 200, 6), random_unit(rng, 200, 6)
        t = rng.uniform(0.05, 0.95, 200)
        h = 1e-5
        fd = (g.geodesic_point(a, b, t + h) - g.geodesic_point(a, b, t - h)) / (2 * h)
        v = g.geodesic_velocity(a, b, t)
        rel = np.linalg.norm(fd - v, axis=1) / np.linalg.norm(v, axis=1)
        assert rel.max() < 1e-6
        # constant speed omega along the path
        omega = g.angular_distance(a, b)
        np.testing.assert_allclose(np.linalg.norm(fd, axis=1), omega, rtol=1e-6)

    def test_velocity_tangent_with_norm_omega(self, rng):
        a, b = random_unit(rng, 1000, 4), random_unit(rng, 1000, 4)
        t = rng.uniform(size=1000)
        v = g.geodesic_velocity(a, b, t)
        p = g.geodesic_point(a, b, t)
        assert np.max(np.abs(np.sum(v * p, axis=1))) < 1e-9
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), g.angular_distance(a, b), atol=1e-9)

    def test_tiny_arc_is_stable(self):
        a = np.array([1.0, 0.0, 0.0])
        b = g.unit_project([1.0, 1e-12, 0.0])
        v = g.geodesic_velocity(a, b, 0.5)
        assert np.all(np.isfinite(v))
        assert abs(np.linalg.norm(v) - 1e-12) < 1e-20


class TestTangentProject:
    def test_parallel_and_tangent(self, rng):
        x = random_unit(rng, 1, 5)[0]
        np.testing.assert_allclose(g.tangent_project(x, 3.0 * x), 0.0, atol=1e-15)
        v = g.tangent_project(x, rng.standard_normal(5))
        np.testing.assert_allclose(g.tangent_project(x, v), v, atol=1e-15)

    @settings(max_examples=200)
    @given(arrays(float, (2, 5), elements=st.floats(-10, 10)))
    def test_orthogonal_and_idempotent(self, arr):
        if np.linalg.norm(arr[0]) < 1e-3:
            return
        x = arr[0] / np.linalg.norm(arr[0])
        p = g.tangent_project(x, arr[1])
        assert abs(p @ x) < 1e-12 * max(1.0, np.linalg.norm(arr[1]))
        np.testing.assert_allclose(g.tangent_project(x, p), p, atol=1e-13)
