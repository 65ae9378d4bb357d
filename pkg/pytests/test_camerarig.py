import json
import os
import tempfile
import unittest

import numpy as np
import pytest

from ctmv_slam.camerarig import CameraModel, RigCalibration, triangulate
from ctmv_slam.errors import BehindCamera, CalibrationError, DegenerateGeometry, NegativeDepth
from ctmv_slam.liegroups import Pose, exp_map, random_pose
from ctmv_slam.simulator import make_rig


class MyUnitTest(unittest.TestCase):
    def _assertTupleAlmostEquals(self, expected, actual, places, msg=None):
        for i, j in zip(actual, expected):
            self.assertAlmostEqual(i, j, places, msg=msg)


def simple_camera(camera_id=0, extrinsic=None):
    k = [[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]]
    return CameraModel(camera_id, k, extrinsic or Pose(), (100, 100))


class TestProjection(MyUnitTest):
    def test_optical_axis(self):
        uv = simple_camera().project(np.array([0.0, 0.0, 5.0]), Pose())
        self._assertTupleAlmostEquals((50.0, 50.0), uv, 12)

    def test_offset_point(self):
        uv = simple_camera().project(np.array([1.0, 0.0, 5.0]), Pose())
        self._assertTupleAlmostEquals((70.0, 50.0), uv, 12)

    def test_behind(self):
        with pytest.raises(BehindCamera):
            simple_camera().project(np.array([0.0, 0.0, -1.0]), Pose())

    def test_project_many(self):
        cam = simple_camera()
        uv, valid = cam.project_many(np.array([[1.0, 0.0, 5.0], [0.0, 0.0, -2.0]]), Pose())
        self.assertEqual(valid.tolist(), [True, False])
        self._assertTupleAlmostEquals((70.0, 50.0), uv[0], 12)

    def test_in_image(self):
        cam = simple_camera()
        inside = cam.in_image(np.array([[0, 0], [99.5, 10], [100, 10]]))
        self.assertEqual(inside.tolist(), [True, True, False])

    def test_jacobians(self):
        rng = np.random.default_rng(11)
        rig = make_rig()
        body = random_pose(rng, 2.0, 0.3)
        for cam in rig.cameras:
            x = body.compose(cam.extrinsic.inverse()).act(np.array([0.4, -0.3, 8.0]))
            uv, du_deps, du_dx = cam.project_jacobians(x, body)
            self._assertTupleAlmostEquals(cam.project(x, body), uv, 9)
            h = 1e-6
            for k in range(6):
                step = np.zeros(6)
                step[k] = h
                plus = cam.project(x, exp_map(step).compose(body))
                minus = cam.project(x, exp_map(-step).compose(body))
                np.testing.assert_allclose((plus - minus) / (2 * h), du_deps[:, k], atol=1e-4)
            for k in range(3):
                step = np.zeros(3)
                step[k] = h
                diff = (cam.project(x + step, body) - cam.project(x - step, body)) / (2 * h)
                np.testing.assert_allclose(diff, du_dx[:, k], atol=1e-4)


class TestTriangulation(MyUnitTest):
    def test_two_views(self):
        cam = simple_camera()
        x = np.array([0.3, -0.2, 6.0])
        pose_a, pose_b = Pose(), Pose(translation=[0.5, 0.0, 0.0])
        y = triangulate(
            (cam, pose_a, cam.project(x, pose_a)), (cam, pose_b, cam.project(x, pose_b))
        )
        np.testing.assert_allclose(y, x, atol=1e-8)

    def test_roundtrip(self):
        rng = np.random.default_rng(12)
        rig = make_rig()
        cam_a, cam_b = rig.camera(0), rig.camera(1)
        for _ in range(50):
            body = random_pose(rng, 5.0, 0.5)
            depth = rng.uniform(2.0, 25.0)
            spread = np.array([1.0, rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2)])
            local = depth * spread
            x = body.act(local)
            uv_a, uv_b = cam_a.project(x, body), cam_b.project(x, body)
            y = triangulate((cam_a, body, uv_a), (cam_b, body, uv_b))
            self.assertLess(np.abs(cam_a.project(y, body) - uv_a).max(), 1e-6)
            self.assertLess(np.abs(cam_b.project(y, body) - uv_b).max(), 1e-6)

    def test_same_center(self):
        cam = simple_camera()
        uv = np.array([60.0, 50.0])
        with pytest.raises(DegenerateGeometry):
            triangulate((cam, Pose(), uv), (cam, Pose(), uv))

    def test_parallel_rays(self):
        cam = simple_camera()
        with pytest.raises(DegenerateGeometry):
            triangulate(
                (cam, Pose(), np.array([50.0, 50.0])),
                (cam, Pose(translation=[0.0, 0.0, 1.0]), np.array([50.0, 50.0])),
            )

    def test_behind_one_camera(self):
        cam = simple_camera()
        with pytest.raises(NegativeDepth):
            triangulate(
                (cam, Pose(), np.array([70.0, 50.0])),
                (cam, Pose(translation=[0.0, 0.0, 10.0]), np.array([30.0, 50.0])),
            )


class TestCalibration(MyUnitTest):
    def setUp(self):
        self.rig = make_rig()

    def test_json(self):
        rig = RigCalibration.from_json(json.loads(json.dumps(self.rig.to_json())))
        self.assertEqual(rig.camera_ids, self.rig.camera_ids)
        self.assertEqual(rig.overlap_pairs, [(0, 1)])
        self.assertEqual(rig.init_pair, (0, 1))
        for a, b in zip(rig.cameras, self.rig.cameras):
            np.testing.assert_allclose(a.intrinsics, b.intrinsics)
            np.testing.assert_allclose(a.extrinsic.matrix(), b.extrinsic.matrix(), atol=1e-12)
            self.assertAlmostEqual(a.fire_offset, b.fire_offset, 12)

    def test_missing_field(self):
        data = self.rig.to_json()
        del data["cameras"][2]["fx"]
        with pytest.raises(CalibrationError, match=r"cameras\[2\]\.fx"):
            RigCalibration.from_json(data)

    def test_missing_top_level(self):
        data = self.rig.to_json()
        del data["sweep_period_s"]
        with pytest.raises(CalibrationError, match="sweep_period_s"):
            RigCalibration.from_json(data)

    def test_bad_extrinsic(self):
        data = self.rig.to_json()
        data["cameras"][0]["T_kb"] = [1.0] * 12
        with pytest.raises(CalibrationError, match="T_kb"):
            RigCalibration.from_json(data)

    def test_init_pair_not_overlapping(self):
        data = self.rig.to_json()
        data["init_pair"] = [0, 2]
        with pytest.raises(CalibrationError, match="init_pair"):
            RigCalibration.from_json(data)

    def test_principal_point_outside(self):
        data = self.rig.to_json()
        data["cameras"][1]["cx"] = 5000.0
        with pytest.raises(CalibrationError, match="principal point"):
            RigCalibration.from_json(data)

    def test_duplicate_ids(self):
        data = self.rig.to_json()
        data["cameras"][3]["id"] = 2
        with pytest.raises(CalibrationError, match="unique"):
            RigCalibration.from_json(data)

    def test_load_syntax_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            filename = os.path.join(tmp, "calibration.json")
            with open(filename, "w") as fd:
                fd.write('{\n  "cameras": [\n  oops\n}')
            with pytest.raises(CalibrationError, match=r"calibration.json:3:"):
                RigCalibration.load(filename)

    def test_save_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            filename = os.path.join(tmp, "calibration.json")
            self.rig.save(filename)
            self.assertEqual(RigCalibration.load(filename).camera_ids, list(range(7)))

    def test_surround_cameras(self):
        ring = self.rig.surround_cameras()
        self.assertEqual([c.camera_id for c in ring], [2, 3, 4, 5, 6])
        self.assertEqual(self.rig.overlapping(1), [0])
        self.assertEqual(self.rig.overlapping(4), [])

    def test_unknown_camera(self):
        with pytest.raises(CalibrationError):
            self.rig.camera(42)
