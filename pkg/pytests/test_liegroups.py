import unittest

import numpy as np
import pytest

from ctmv_slam.errors import AngleNearPi
from ctmv_slam.liegroups import (
    Pose,
    act,
    adjoint,
    boxminus,
    boxplus,
    compose,
    exp_map,
    geodesic,
    inverse,
    log_map,
    pose_distance,
    random_pose,
    so3_exp,
    so3_log,
    v_matrix,
)


class MyUnitTest(unittest.TestCase):
    def _assertTupleAlmostEquals(self, expected, actual, places, msg=None):
        for i, j in zip(actual, expected):
            self.assertAlmostEqual(i, j, places, msg=msg)


def series_exp(xi, terms=20):
    rho, phi = xi[:3], xi[3:]
    m = np.zeros((4, 4))
    m[:3, :3] = np.array([[0, -phi[2], phi[1]], [phi[2], 0, -phi[0]], [-phi[1], phi[0], 0]])
    m[:3, 3] = rho
    result, term = np.eye(4), np.eye(4)
    for k in range(1, terms):
        term = term @ m / k
        result = result + term
    return result


class TestExpLog(MyUnitTest):
    def test_zero_twist(self):
        p = exp_map(np.zeros(6))
        np.testing.assert_array_equal(p.matrix(), np.eye(4))
        np.testing.assert_array_equal(log_map(Pose.identity()), np.zeros(6))

    def test_quarter_turn(self):
        p = exp_map([0, 0, 0, 0, 0, np.pi / 2])
        np.testing.assert_allclose(p.rotation, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
        np.testing.assert_allclose(p.translation, np.zeros(3), atol=1e-15)

    def test_half_turn_against_series(self):
        xi = np.array([1.0, 0, 0, 0, 0, np.pi])
        p = exp_map(xi)
        np.testing.assert_allclose(p.translation, v_matrix(xi[3:]) @ xi[:3], atol=1e-12)
        np.testing.assert_allclose(p.matrix(), series_exp(xi, 30), atol=1e-9)

    def test_roundtrip(self):
        rng = np.random.default_rng(1)
        for _ in range(10_000):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            xi = np.concatenate(
                [rng.uniform(-10, 10, 3), axis * rng.uniform(0, np.pi - 1e-3)]
            )
            np.testing.assert_allclose(log_map(exp_map(xi)), xi, atol=1e-9)

    def test_exp_of_log(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            p = random_pose(rng, 5.0, np.pi - 1e-3)
            q = exp_map(log_map(p))
            np.testing.assert_allclose(q.matrix(), p.matrix(), atol=1e-9)

    def test_branch_continuity(self):
        axis = np.array([0.3, -0.5, 0.8])
        axis /= np.linalg.norm(axis)
        small = so3_exp(axis * 1e-7)
        above = so3_exp(axis * (1e-8 + 1e-15))
        below = so3_exp(axis * (1e-8 - 1e-15))
        np.testing.assert_allclose(above, below, atol=1e-12)
        k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        exact = np.eye(3) + np.sin(1e-7) * k + (1 - np.cos(1e-7)) * k @ k
        np.testing.assert_allclose(small, exact, atol=1e-12)

    def test_half_turn_log_raises(self):
        with pytest.raises(AngleNearPi):
            log_map(exp_map([0, 0, 0, np.pi, 0, 0]))

    def test_log_close_to_pi(self):
        phi = np.array([0.0, np.pi - 1e-3, 0.0])
        np.testing.assert_allclose(so3_log(so3_exp(phi)), phi, atol=1e-9)

    def test_orthonormal(self):
        rng = np.random.default_rng(3)
        p = random_pose(rng)
        for _ in range(100):
            p = compose(p, random_pose(rng)).inverse()
        r = p.rotation
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-9)
        self.assertAlmostEqual(np.linalg.det(r), 1.0, 9)


class TestGroup(MyUnitTest):
    def setUp(self):
        self.rng = np.random.default_rng(4)

    def test_identity(self):
        p = random_pose(self.rng)
        np.testing.assert_allclose(compose(p, Pose.identity()).matrix(), p.matrix())
        x = self.rng.normal(size=3)
        np.testing.assert_allclose(act(Pose.identity(), x), x)

    def test_inverse(self):
        p = random_pose(self.rng, 10.0)
        np.testing.assert_allclose(compose(p, inverse(p)).matrix(), np.eye(4), atol=1e-9)

    def test_associative_action(self):
        for _ in range(100):
            a, b = random_pose(self.rng, 3.0), random_pose(self.rng, 3.0)
            x = self.rng.normal(size=3)
            np.testing.assert_allclose(act(compose(a, b), x), act(a, act(b, x)), atol=1e-10)

    def test_act_many(self):
        p = random_pose(self.rng)
        xs = self.rng.normal(size=(5, 3))
        many = p.act(xs)
        for x, y in zip(xs, many):
            np.testing.assert_allclose(p.act(x), y, atol=1e-12)

    def test_adjoint(self):
        p = random_pose(self.rng, 2.0, 1.0)
        xi = self.rng.normal(size=6) * 0.1
        lhs = p.compose(exp_map(xi)).compose(p.inverse())
        np.testing.assert_allclose(lhs.matrix(), exp_map(adjoint(p) @ xi).matrix(), atol=1e-9)

    def test_boxplus_boxminus(self):
        p = random_pose(self.rng)
        xi = self.rng.normal(size=6) * 0.2
        np.testing.assert_allclose(boxminus(boxplus(xi, p), p), xi, atol=1e-9)

    def test_geodesic(self):
        a = Pose.identity()
        b = Pose(translation=[2.0, 0.0, 0.0])
        self._assertTupleAlmostEquals((1.0, 0.0, 0.0), geodesic(a, b, 0.5).translation, 12)
        np.testing.assert_allclose(geodesic(a, b, 1.0).matrix(), b.matrix(), atol=1e-12)

    def test_pose_distance(self):
        a = Pose.identity()
        b = exp_map([3.0, 4.0, 0.0, 0.0, 0.0, 0.0])
        d, r = pose_distance(a, b)
        self.assertAlmostEqual(d, 5.0, 12)
        self.assertAlmostEqual(r, 0.0, 12)
