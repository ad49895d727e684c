import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridgaze import geometry as G
from hybridgaze.geometry import EyeballState, GazeAngles

mp.mp.dps = 40
DEG80 = math.radians(80)


def _mp_vector(theta, phi):
    t, p = mp.mpf(theta), mp.mpf(phi)
    return [mp.sin(p) * mp.cos(t), mp.sin(t), -mp.cos(t) * mp.cos(p)]


def _fd_jacobian(iris, eye, r, h=1e-5):
    x = np.array([*iris, *eye, r], dtype=float)
    out = np.zeros((2, 5))
    for k in range(5):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        fp = G.reconstruct_gaze(xp[0:2], xp[2:4], xp[4])
        fm = G.reconstruct_gaze(xm[0:2], xm[2:4], xm[4])
        out[:, k] = (fp - fm) / (2 * h)
    return out


class TestAngleVector:
    def test_frontal(self):
        np.testing.assert_allclose(G.angles_to_vector(GazeAngles(0, 0)), [0, 0, -1], atol=0)

    def test_pitch_limit(self):
        v = G.angles_to_vector(GazeAngles(math.pi / 2 - 1e-9, 0))
        assert v[0] == 0 and v[1] == pytest.approx(1.0) and -1e-8 < v[2] < 0

    def test_thirty_thirty(self):
        expected = [float(c) for c in _mp_vector(mp.pi / 6, mp.pi / 6)]
        np.testing.assert_allclose(G.angles_to_vector(GazeAngles(math.pi / 6, math.pi / 6)),
                                   expected, atol=1e-15)
        np.testing.assert_allclose(expected, [0.4330127018922193, 0.5, -0.75], atol=1e-15)

    def test_inverse_examples(self):
        np.testing.assert_allclose(G.vector_to_angles([0, 0, -1]), [0, 0], atol=0)
        np.testing.assert_allclose(G.vector_to_angles([0, 0.5, -math.sqrt(3) / 2]),
                                   [math.pi / 6, 0], atol=1e-15)
        v = G.angles_to_vector([math.pi / 6, math.pi / 6])
        np.testing.assert_allclose(G.vector_to_angles(v), [math.pi / 6, math.pi / 6], atol=1e-15)

    @pytest.mark.parametrize("vec", [[0, 0, 1], [0, 0, 0.0], [0.1, 0.1, -0.5], [1, 0, 0]])
    def test_inverse_domain(self, vec):
        with pytest.raises(G.GeometryDomainError):
            G.vector_to_angles(vec)

    @given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
    def test_round_trip(self, theta, phi):
        v = G.angles_to_vector([theta, phi])
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)
        assert v[2] < 0
        np.testing.assert_allclose(G.vector_to_angles(v), [theta, phi], atol=1e-9)

    def test_invalid_angles(self):
        with pytest.raises(G.GeometryDomainError):
            GazeAngles(math.pi / 2, 0)


class TestProjection:
    def test_frontal_center(self):
        pts = G.project_landmarks(EyeballState(32, 48, 20, 0.35), GazeAngles(0, 0))
        np.testing.assert_allclose(pts[0], [32, 48], atol=1e-12)
        np.testing.assert_allclose(pts[1], [32, 48], atol=0)

    def test_pitch_only(self):
        pts = G.project_landmarks(EyeballState(0, 0, 10, 0.35), GazeAngles(math.pi / 6, 0))
        np.testing.assert_allclose(pts[0], [0, 5], atol=1e-12)

    def test_scalar_example(self):
        pts = G.project_landmarks(EyeballState(10, 20, 12, 0.3), GazeAngles(0.2, -0.4))
        t, p = mp.mpf("0.2"), mp.mpf("-0.4")
        expected = [float(10 + 12 * mp.sin(p) * mp.cos(t)), float(20 + 12 * mp.sin(t))]
        np.testing.assert_allclose(pts[0], expected, atol=1e-12)
        np.testing.assert_allclose(pts[0], [5.42013, 22.38403], atol=1e-5)

    def test_rim_frontal_equidistant(self):
        eye = EyeballState(40, 30, 18, 0.4)
        pts = G.project_landmarks(eye, GazeAngles(0, 0))
        d = np.linalg.norm(pts[2:] - pts[0], axis=1)
        np.testing.assert_allclose(d, 18 * math.sin(0.4), atol=1e-6)

    def test_rim_order(self):
        pts = G.project_landmarks(EyeballState(0, 0, 10, 0.35), GazeAngles(0, 0))
        rim = pts[2:]
        assert np.argmax(rim[:, 0]) == 0          # starts at the rightmost point
        assert rim[2, 1] < 0                      # quarter turn goes up on screen (y down)
        ang = np.unwrap(np.arctan2(-rim[:, 1], rim[:, 0]))
        assert np.all(np.diff(ang) > 0)           # counter-clockwise as displayed

    def test_rim_foreshortening(self):
        pts = G.project_landmarks(EyeballState(0, 0, 10, 0.35), GazeAngles(0, 0.8))
        rim = pts[2:]
        width = rim[:, 0].max() - rim[:, 0].min()
        height = rim[:, 1].max() - rim[:, 1].min()
        assert width < height


class TestReconstruction:
    def test_examples(self):
        np.testing.assert_allclose(G.reconstruct_gaze([0, 5], [0, 0], 10), [math.pi / 6, 0], atol=1e-15)
        np.testing.assert_allclose(G.reconstruct_gaze([3, 4], [3, 4], 7), [0, 0], atol=0)
        pts = G.project_landmarks(EyeballState(10, 20, 12, 0.3), GazeAngles(0.2, -0.4))
        np.testing.assert_allclose(G.reconstruct_gaze(pts[0], [10, 20], 12), [0.2, -0.4], atol=1e-12)

    def test_round_trip_bulk(self):
        rng = np.random.default_rng(0)
        n = 10_000
        th = rng.uniform(-DEG80, DEG80, n)
        ph = rng.uniform(-DEG80, DEG80, n)
        r = rng.uniform(5, 50, n)
        c = rng.uniform(-100, 100, (n, 2))
        g = np.stack([th, ph], 1)
        v = G.angles_to_vector(g)
        iris = c + r[:, None] * v[:, :2]
        rec = G.reconstruct_gaze(iris, c, r)
        assert np.max(np.abs(rec - g)) < 1e-9

    def test_radius_domain(self):
        with pytest.raises(G.GeometryDomainError):
            G.reconstruct_gaze([0, 0], [0, 0], 0.0)

    def test_degenerate_flag(self):
        angles, flag = G.reconstruct_gaze_with_flags([0, 15], [0, 0], 10)
        assert flag
        assert angles[0] == pytest.approx(math.asin(1 - 1e-7))
        _, flag = G.reconstruct_gaze_with_flags([1, 2], [0, 0], 10)
        assert not flag

    @settings(max_examples=200)
    @given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-0.9, 0.9), st.floats(-0.9, 0.9),
           st.floats(5, 50))
    def test_translation_equivariance(self, ox, oy, a, b, r):
        iris = np.array([r * b * math.sqrt(1 - a * a), r * a])
        base = G.reconstruct_gaze(iris, [0.0, 0.0], r)
        shifted = G.reconstruct_gaze(iris + [ox, oy], [ox, oy], r)
        # exact up to the rounding of the shifted coordinates themselves
        np.testing.assert_allclose(shifted, base, atol=1e-12)

    def test_translation_exact_on_representable_offsets(self):
        iris = np.array([3.25, -4.5])
        base = G.reconstruct_gaze(iris, [0.0, 0.0], 12.0)
        shifted = G.reconstruct_gaze(iris + 64.0, [64.0, 64.0], 12.0)
        assert np.array_equal(base, shifted)

    @given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9), st.floats(5, 50), st.floats(0.01, 100))
    def test_scale_invariance(self, a, b, r, k):
        d = np.array([r * b * math.sqrt(1 - a * a), r * a])
        np.testing.assert_allclose(G.reconstruct_gaze(k * d, [0, 0], k * r),
                                   G.reconstruct_gaze(d, [0, 0], r), atol=1e-12)


class TestJacobian:
    def test_frontal(self):
        j = G.recon_jacobian([0, 0], [0, 0], 10)
        assert j[0, 1] == pytest.approx(0.1)
        assert j[1, 0] == pytest.approx(0.1)
        assert j[0, 0] == 0

    def test_difference_structure(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            r = rng.uniform(5, 50)
            iris, eye = rng.uniform(-0.5, 0.5, 2) * r, rng.uniform(-3, 3, 2)
            j = G.recon_jacobian(iris + eye, eye, r)
            assert j[0, 3] == -j[0, 1]
            assert j[1, 2] == -j[1, 0]

    def test_finite_differences(self):
        rng = np.random.default_rng(2)
        checked = 0
        while checked < 1000:
            r = rng.uniform(5, 50)
            g = rng.uniform(-1.3, 1.3, 2)
            eye = rng.uniform(-50, 50, 2)
            iris = eye + r * G.angles_to_vector(g)[:2]
            a = (iris[1] - eye[1]) / r
            b = (iris[0] - eye[0]) / (r * math.sqrt(1 - a * a))
            if max(abs(a), abs(b)) >= 1 - 1e-3:
                continue
            ana = G.recon_jacobian(iris, eye, r)
            num = _fd_jacobian(iris, eye, r)
            small = np.abs(ana) < 1e-3
            np.testing.assert_allclose(num[small], ana[small], atol=1e-7)
            np.testing.assert_allclose(num[~small], ana[~small], rtol=1e-4)
            checked += 1

    def test_clamped_zero_gradient(self):
        j = G.recon_jacobian([0, 12], [0, 0], 10)
        np.testing.assert_array_equal(j[0], 0.0)


class TestNormalization:
    def test_on_axis_identity(self):
        np.testing.assert_allclose(G.normalization_rotation([0, 0, 600]), np.eye(3), atol=1e-15)

    @given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.05, 2))
    def test_orthonormal(self, x, y, z):
        R = G.normalization_rotation([x, y, z])
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)
        c = np.array([x, y, z]) / np.linalg.norm([x, y, z])
        np.testing.assert_allclose(R @ c, [0, 0, 1], atol=1e-9)

    def test_45_degrees_about_y(self):
        R = G.normalization_rotation(np.array([1, 0, 1]) / math.sqrt(2))
        s = math.sqrt(0.5)
        expected = np.array([[s, 0, -s], [0, 1, 0], [s, 0, s]])   # rotation by -45 deg about y
        np.testing.assert_allclose(R, expected, atol=1e-15)
        np.testing.assert_allclose(R @ (np.array([1, 0, 1]) / math.sqrt(2)), [0, 0, 1], atol=1e-15)

    def test_x_axis_fallback(self):
        R = G.normalization_rotation([3, 0, 0])
        np.testing.assert_allclose(R @ [1, 0, 0], [0, 0, 1], atol=1e-15)
        assert np.linalg.det(R) == pytest.approx(1.0)

    def test_zero(self):
        with pytest.raises(G.GeometryDomainError):
            G.normalization_rotation([0, 0, 0])

    def test_normalize_gaze_preserves_angles_between(self):
        R = G.normalization_rotation([0.1, -0.2, 1.0])
        a, b = np.array([0.1, 0.2]), np.array([-0.3, 0.05])
        assert G.angular_error(G.normalize_gaze(R, a), G.normalize_gaze(R, b)) == pytest.approx(
            G.angular_error(a, b), abs=1e-9)


class TestAngularError:
    def test_identity(self):
        assert G.angular_error([0.3, -0.2], [0.3, -0.2]) == 0.0

    def test_orthogonal(self):
        assert G.angular_error([0, 0], [0, math.pi / 2 - 1e-9]) == pytest.approx(90.0, abs=1e-6)

    def test_example(self):
        a, b = _mp_vector("0.1", "0.2"), _mp_vector("0.15", "0.25")
        rad = mp.acos(sum(x * y for x, y in zip(a, b)))
        assert G.angular_error([0.1, 0.2], [0.15, 0.25]) == pytest.approx(float(rad * 180 / mp.pi), abs=1e-9)
        assert float(rad) == pytest.approx(0.0704315, abs=1e-7)

    def test_symmetry_and_triangle(self):
        rng = np.random.default_rng(3)
        a, b, c = (rng.uniform(-1.3, 1.3, (2000, 2)) for _ in range(3))
        np.testing.assert_allclose(G.angular_error(a, b), G.angular_error(b, a), atol=0)
        assert np.all(G.angular_error(a, c) <= G.angular_error(a, b) + G.angular_error(b, c) + 1e-9)


class TestBatchProjection:
    def test_matches_scalar(self):
        rng = np.random.default_rng(3)
        c = rng.uniform(-40, 40, (50, 2))
        r = rng.uniform(5, 40, 50)
        a = rng.uniform(-1.3, 1.3, (50, 2))
        psi = rng.uniform(0.2, 0.6, 50)
        batch = G.project_landmarks_batch(c, r, a, psi)
        for i in range(50):
            one = G.project_landmarks(EyeballState(*c[i], r[i], psi[i]), GazeAngles(*a[i]))
            np.testing.assert_array_equal(batch[i], one)
        assert batch.shape == (50, 10, 2)
