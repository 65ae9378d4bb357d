import unittest

import numpy as np
import pytest

from ctmv_slam.camerarig import CameraModel
from ctmv_slam.errors import ConfigError, NumericalFailure
from ctmv_slam.liegroups import Pose, exp_map, log_map, random_pose, relative
from ctmv_slam.nlls import (
    LMConfig,
    Problem,
    ResidualTerm,
    RobustLoss,
    huber,
    numeric_jacobian,
    solve_lm,
)
from ctmv_slam.trajectory import SplineTrajectory


class MyUnitTest(unittest.TestCase):
    def _assertTupleAlmostEquals(self, expected, actual, places, msg=None):
        for i, j in zip(actual, expected):
            self.assertAlmostEqual(i, j, places, msg=msg)


def camera():
    k = [[400.0, 0.0, 320.0], [0.0, 400.0, 240.0], [0.0, 0.0, 1.0]]
    return CameraModel(0, k, Pose(), (640, 480))


def rosenbrock(values):
    x, y = values[0]
    return np.array([10.0 * (y - x * x), 1.0 - x])


class TestHuber(MyUnitTest):
    def test_values(self):
        loss = huber(1.0)
        value, slope = loss.rho(np.array([0.25, 1.0, 4.0]))
        self._assertTupleAlmostEquals((0.25, 1.0, 3.0), value, 14)
        self._assertTupleAlmostEquals((1.0, 1.0, 0.5), slope, 14)

    def test_c1_at_boundary(self):
        loss = huber(2.0)
        h = 1e-7
        s = 4.0
        left = (loss.rho(s)[0] - loss.rho(s - h)[0]) / h
        right = (loss.rho(s + h)[0] - loss.rho(s)[0]) / h
        self.assertAlmostEqual(float(loss.rho(s - 1e-12)[0]), float(loss.rho(s + 1e-12)[0]), 9)
        self.assertLess(abs(left - right), 1e-6)
        self.assertAlmostEqual(float(loss.rho(s - 1e-12)[1]), float(loss.rho(s + 1e-12)[1]), 9)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            RobustLoss("huber", 0.0)
        with pytest.raises(ConfigError):
            RobustLoss("cauchy", 1.0)

    def test_chunked_cost(self):
        p = Problem()
        b = p.add_block([3.0, 4.0])
        p.add_residual(ResidualTerm([b], lambda v: v[0], loss=huber(1.0), chunk=2))
        self.assertAlmostEqual(p.cost(), 9.0, 12)


class TestSolver(MyUnitTest):
    def test_bowl(self):
        p = Problem()
        b = p.add_block([0.0])
        p.add_residual(ResidualTerm([b], lambda v: v[0] - 3.0))
        result = solve_lm(p)
        self.assertLess(abs(b.value[0] - 3.0), 1e-10)
        self.assertLessEqual(result.iterations, 5)
        self.assertTrue(result.converged)

    def test_rosenbrock(self):
        p = Problem()
        b = p.add_block([-1.2, 1.0])
        p.add_residual(ResidualTerm([b], rosenbrock))
        result = solve_lm(p, max_iters=200)
        np.testing.assert_allclose(b.value, [1.0, 1.0], atol=1e-6)
        self.assertTrue(all(a > c for a, c in zip(result.history, result.history[1:])))

    def test_analytic_row_subsets(self):
        p = Problem()
        a = p.add_block([0.0, 0.0])
        b = p.add_block([0.0, 0.0, 0.0])
        p.add_residual(
            ResidualTerm(
                [a, b],
                lambda v: np.concatenate([v[0] - [1.0, 2.0], v[1] - [3.0, 4.0, 5.0]]),
                jacobian=lambda v: [([0, 1], np.eye(2)), ([2, 3, 4], np.eye(3))],
                chunk=1,
            )
        )
        p.add_residual(
            ResidualTerm(
                [a, b],
                lambda v: np.array([v[0][0] + 2.0 * v[1][2] - 11.0]),
                jacobian=lambda v: [np.array([[1.0, 0.0]]), np.array([[0.0, 0.0, 2.0]])],
            )
        )
        result = solve_lm(p)
        self.assertLess(result.cost, 1e-12)
        np.testing.assert_allclose(a.value, [1.0, 2.0], atol=1e-6)
        np.testing.assert_allclose(b.value, [3.0, 4.0, 5.0], atol=1e-6)

    def test_frozen_block(self):
        cam = camera()
        rng = np.random.default_rng(31)
        truth = exp_map([0.2, -0.1, 0.3, 0.02, 0.05, -0.03])
        landmarks = np.column_stack(
            [rng.uniform(-4, 4, 12), rng.uniform(-3, 3, 12), rng.uniform(6, 15, 12)]
        )
        p = Problem()
        pose = p.add_block(exp_map([0.1, 0.1, -0.1, 0.0, 0.0, 0.0]).compose(truth), "pose")
        frozen = landmarks[0].copy()
        blocks = [p.add_block(x, frozen=True) for x in landmarks]
        for block, x in zip(blocks, landmarks):
            uv = cam.project(x, truth)
            p.add_residual(
                ResidualTerm([pose, block], lambda v, uv=uv: uv - cam.project(v[1], v[0]))
            )
        result = solve_lm(p)
        self.assertTrue(np.array_equal(blocks[0].value, frozen))
        self.assertLess(result.cost, 1e-12)
        err = log_map(relative(truth, pose.value))
        self.assertLess(np.abs(err).max(), 1e-6)

    def test_order_invariance(self):
        def solve(order):
            p = Problem()
            b = p.add_block([0.5, 0.5, 0.5])
            data = [(i, float(i) * 0.3 - 1.0) for i in range(6)]

            def residual(v, k, t):
                return np.array([v[0][k % 3] ** 2 - t * t + v[0][(k + 1) % 3]])

            for i in order:
                k, target = data[i]
                p.add_residual(
                    ResidualTerm(
                        [b],
                        lambda v, k=k, t=target: residual(v, k, t),
                        loss=huber(0.5),
                    )
                )
            solve_lm(p, max_iters=100)
            return b.value

        np.testing.assert_allclose(solve(range(6)), solve([5, 3, 1, 0, 2, 4]), atol=1e-6)

    def test_non_finite(self):
        p = Problem()
        b = p.add_block([1.0])
        p.add_residual(ResidualTerm([b], lambda v: np.array([np.nan])))
        with pytest.raises(NumericalFailure):
            solve_lm(p)

    def test_foreign_block(self):
        p, q = Problem(), Problem()
        b = q.add_block([1.0])
        with pytest.raises(ValueError):
            p.add_residual(ResidualTerm([b], lambda v: v[0]))

    def test_all_frozen(self):
        p = Problem()
        b = p.add_block([2.0], frozen=True)
        p.add_residual(ResidualTerm([b], lambda v: v[0]))
        result = solve_lm(p)
        self.assertEqual(result.iterations, 0)
        self.assertEqual(b.value[0], 2.0)

    def test_config(self):
        with pytest.raises(ConfigError):
            LMConfig(lm_max_iterations=0).validate()
        self.assertEqual(LMConfig.from_defaults().lm_max_iterations, 50)


class TestNumericJacobian(MyUnitTest):
    def test_linear(self):
        a = np.arange(12, dtype=float).reshape(4, 3) - 5.0
        jac = numeric_jacobian(lambda x: a @ x, np.array([0.3, -1.0, 2.0]))
        np.testing.assert_allclose(jac, a, atol=1e-9)

    def test_projection(self):
        cam = camera()
        body = exp_map([0.1, 0.2, -0.3, 0.01, 0.02, 0.03])
        x = body.act(np.array([0.5, -0.4, 7.0]))
        _, _, du_dx = cam.project_jacobians(x, body)
        jac = numeric_jacobian(lambda y: cam.project(y, body), x, 1e-6)
        self.assertLess(np.abs(jac - du_dx).max() / np.abs(du_dx).max(), 1e-5)

    def test_spline_pose(self):
        rng = np.random.default_rng(32)
        times = np.cumsum(rng.uniform(0.2, 0.4, 6))
        traj = SplineTrajectory([random_pose(rng, 2.0, 0.5) for _ in times], times)
        t = 0.5 * (times[2] + times[3])
        jacobians = traj.pose_jacobians(t)
        base_inv = traj.evaluate(t).inverse()
        direction = rng.normal(size=6)
        direction /= np.linalg.norm(direction)
        h = 1e-5
        for m, jac in jacobians.items():
            pose = traj.control_poses[m]

            def moved(s):
                moved_pose = exp_map(s * direction).compose(pose)
                return log_map(traj.evaluate(t, {m: moved_pose}).compose(base_inv))

            fd = (moved(h) - moved(-h)) / (2 * h)
            np.testing.assert_allclose(jac @ direction, fd, atol=1e-4)

    def test_non_finite(self):
        with pytest.raises(NumericalFailure):
            numeric_jacobian(lambda x: np.log(x), np.array([0.0]))
