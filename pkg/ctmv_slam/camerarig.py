#
# Copyright 2026 The ctmv-slam authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#

"""Pinhole cameras, rig calibration and two-view triangulation"""

import json
import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .errors import BehindCamera, CalibrationError, DegenerateGeometry, NegativeDepth
from .liegroups import Pose, skew

logger = logging.getLogger(__name__)

MIN_DEPTH = 1e-6
PARALLEL_RAYS = 1e-8


@dataclass
class CameraModel:
    camera_id: int
    intrinsics: np.ndarray
    extrinsic: Pose  # T_kb, body -> camera
    image_size: Tuple[int, int]
    fire_offset: float = 0.0

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=float)
        self._k_inv = np.linalg.inv(self.intrinsics)

    @property
    def fx(self):
        return self.intrinsics[0, 0]

    @property
    def fy(self):
        return self.intrinsics[1, 1]

    @property
    def principal_point(self):
        return self.intrinsics[:2, 2]

    def validate(self):
        w, h = self.image_size
        cx, cy = self.principal_point
        if self.fx <= 0 or self.fy <= 0:
            raise CalibrationError(f"camera {self.camera_id}: focal lengths must be positive")
        if not (0 <= cx <= w and 0 <= cy <= h):
            raise CalibrationError(f"camera {self.camera_id}: principal point outside image")
        r = self.extrinsic.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or np.linalg.det(r) < 0:
            raise CalibrationError(f"camera {self.camera_id}: T_kb is not a rigid transform")

    def world_to_camera(self, body_pose):
        """T_kb · T_wb⁻¹"""
        return self.extrinsic.compose(body_pose.inverse())

    def center(self, body_pose):
        return body_pose.compose(self.extrinsic.inverse()).translation

    def in_image(self, uv, margin=0.0):
        w, h = self.image_size
        uv = np.asarray(uv)
        return (
            (uv[..., 0] >= -margin)
            & (uv[..., 0] < w + margin)
            & (uv[..., 1] >= -margin)
            & (uv[..., 1] < h + margin)
        )

    def normalize(self, uv):
        """Pixel(s) -> normalized image coordinates"""
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        xy = (uv - self.intrinsics[:2, 2]) @ np.linalg.inv(self.intrinsics[:2, :2]).T
        return xy

    def _pixels(self, q):
        return q[..., :2] / q[..., 2:3] @ self.intrinsics[:2, :2].T + self.intrinsics[:2, 2]

    def project(self, x_world, body_pose):
        q = self.world_to_camera(body_pose).act(x_world)
        if q[2] <= MIN_DEPTH:
            raise BehindCamera(f"depth {q[2]:.3g} in camera {self.camera_id}")
        return self._pixels(q)

    def project_many(self, x_world, body_pose):
        """Pixels and a validity mask (depth > MIN_DEPTH) for an (n, 3) array"""
        q = self.world_to_camera(body_pose).act(np.atleast_2d(x_world))
        valid = q[:, 2] > MIN_DEPTH
        z = np.where(valid, q[:, 2], 1.0)
        uv = q[:, :2] / z[:, None] @ self.intrinsics[:2, :2].T + self.intrinsics[:2, 2]
        return uv, valid

    def project_jacobians(self, x_world, body_pose):
        """Pixels plus d(uv)/dε for a left world perturbation of T_wb and d(uv)/dX"""
        t_cw = self.world_to_camera(body_pose)
        q = t_cw.act(x_world)
        if q[2] <= MIN_DEPTH:
            raise BehindCamera(f"depth {q[2]:.3g} in camera {self.camera_id}")
        inv_z = 1.0 / q[2]
        dn_dq = np.array(
            [
                [inv_z, 0.0, -q[0] * inv_z * inv_z],
                [0.0, inv_z, -q[1] * inv_z * inv_z],
            ]
        )
        du_dq = self.intrinsics[:2, :2] @ dn_dq
        r = t_cw.rotation  # R_kb · R_wbᵀ
        du_dx = du_dq @ r
        du_deps = du_dq @ r @ np.hstack([-np.eye(3), skew(x_world)])
        return self._pixels(q), du_deps, du_dx


@dataclass
class RigCalibration:
    cameras: List[CameraModel]
    overlap_pairs: List[Tuple[int, int]] = field(default_factory=list)
    init_pair: Tuple[int, int] = (0, 1)
    sweep_period: float = 0.1

    def __post_init__(self):
        self.overlap_pairs = sorted({tuple(sorted(p)) for p in self.overlap_pairs})
        self.init_pair = tuple(self.init_pair)
        self._by_id = {c.camera_id: c for c in self.cameras}

    def validate(self):
        ids = [c.camera_id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise CalibrationError("camera ids are not unique")
        for cam in self.cameras:
            cam.validate()
        for a, b in self.overlap_pairs:
            if a not in self._by_id or b not in self._by_id:
                raise CalibrationError(f"overlap pair ({a}, {b}) names an unknown camera")
        if tuple(sorted(self.init_pair)) not in self.overlap_pairs:
            raise CalibrationError(f"init_pair {self.init_pair} is not an overlap pair")
        if self.sweep_period <= 0:
            raise CalibrationError("sweep_period_s must be positive")
        return self

    @property
    def camera_ids(self):
        return [c.camera_id for c in self.cameras]

    def camera(self, camera_id):
        try:
            return self._by_id[camera_id]
        except KeyError:
            raise CalibrationError(f"unknown camera id {camera_id}") from None

    def overlapping(self, camera_id):
        """Cameras sharing a field of view with camera_id"""
        partners = []
        for a, b in self.overlap_pairs:
            if a == camera_id:
                partners.append(b)
            elif b == camera_id:
                partners.append(a)
        return partners

    def surround_cameras(self):
        """Cameras not in a stereo overlap pair, ordered by heading"""
        paired = {c for p in self.overlap_pairs for c in p}
        ring = [c for c in self.cameras if c.camera_id not in paired]

        def heading(cam):
            axis = cam.extrinsic.rotation.T @ np.array([0.0, 0.0, 1.0])
            return np.arctan2(axis[1], axis[0]) % (2 * np.pi)

        return sorted(ring, key=heading)

    #
    # JSON
    #

    @classmethod
    def from_json(cls, data):
        def need(obj, key, where):
            if not isinstance(obj, dict) or key not in obj:
                raise CalibrationError(f"missing field '{where}{key}'")
            return obj[key]

        cams = []
        for i, c in enumerate(need(data, "cameras", "")):
            where = f"cameras[{i}]."
            try:
                k = np.array(
                    [
                        [float(need(c, "fx", where)), 0.0, float(need(c, "cx", where))],
                        [0.0, float(need(c, "fy", where)), float(need(c, "cy", where))],
                        [0.0, 0.0, 1.0],
                    ]
                )
                t_kb = np.asarray(need(c, "T_kb", where), dtype=float)
                if t_kb.size != 16:
                    raise CalibrationError(f"field '{where}T_kb' needs 16 values")
                cams.append(
                    CameraModel(
                        camera_id=int(need(c, "id", where)),
                        intrinsics=k,
                        extrinsic=Pose.from_matrix(t_kb.reshape(4, 4)),
                        image_size=(
                            int(need(c, "width", where)),
                            int(need(c, "height", where)),
                        ),
                        fire_offset=float(need(c, "fire_offset_s", where)),
                    )
                )
            except (TypeError, ValueError) as ex:
                raise CalibrationError(f"invalid value in '{where[:-1]}': {ex}") from ex

        rig = cls(
            cameras=cams,
            overlap_pairs=[tuple(p) for p in need(data, "overlap_pairs", "")],
            init_pair=tuple(need(data, "init_pair", "")),
            sweep_period=float(need(data, "sweep_period_s", "")),
        )
        return rig.validate()

    def to_json(self):
        return {
            "cameras": [
                {
                    "id": c.camera_id,
                    "fx": c.fx,
                    "fy": c.fy,
                    "cx": c.principal_point[0],
                    "cy": c.principal_point[1],
                    "width": c.image_size[0],
                    "height": c.image_size[1],
                    "T_kb": c.extrinsic.matrix().ravel().tolist(),
                    "fire_offset_s": c.fire_offset,
                }
                for c in self.cameras
            ],
            "overlap_pairs": [list(p) for p in self.overlap_pairs],
            "init_pair": list(self.init_pair),
            "sweep_period_s": self.sweep_period,
        }

    @classmethod
    def load(cls, filename):
        with open(filename, "r") as fd:
            try:
                data = json.load(fd)
            except json.JSONDecodeError as ex:
                raise CalibrationError(
                    f"{filename}:{ex.lineno}:{ex.colno}: {ex.msg}"
                ) from ex
        try:
            return cls.from_json(data)
        except CalibrationError as ex:
            raise CalibrationError(f"{filename}: {ex}") from ex

    def save(self, filename):
        with open(filename, "w") as fd:
            json.dump(self.to_json(), fd, indent=2)


#
# Triangulation
#


def _reprojection_step(x, observations):
    rows, jac = [], []
    for cam, body_pose, uv in observations:
        pred, _, du_dx = cam.project_jacobians(x, body_pose)
        rows.append(np.asarray(uv, dtype=float) - pred)
        jac.append(du_dx)
    r = np.concatenate(rows)
    j = np.vstack(jac)
    dx, *_ = np.linalg.lstsq(j, r, rcond=None)
    return x + dx


def triangulate(obs_a, obs_b):
    """Point seen by two (camera, body pose, pixel) observations

    Linear DLT in normalized coordinates followed by one Gauss-Newton step on
    the pixel reprojection error.
    """
    projections, rays, centers = [], [], []
    for cam, body_pose, uv in (obs_a, obs_b):
        t_cw = cam.world_to_camera(body_pose)
        p = np.hstack([t_cw.rotation, t_cw.translation[:, None]])
        xy = cam.normalize(uv)[0]
        projections.append((p, xy))
        ray = t_cw.rotation.T @ np.array([xy[0], xy[1], 1.0])
        rays.append(ray / np.linalg.norm(ray))
        centers.append(-t_cw.rotation.T @ t_cw.translation)

    if np.linalg.norm(centers[0] - centers[1]) < 1e-12:
        raise DegenerateGeometry("identical camera centres")
    if np.linalg.norm(np.cross(rays[0], rays[1])) < PARALLEL_RAYS:
        raise DegenerateGeometry("parallel viewing rays")

    a = np.vstack(
        [np.vstack([xy[0] * p[2] - p[0], xy[1] * p[2] - p[1]]) for p, xy in projections]
    )
    _, _, vt = np.linalg.svd(a)
    xh = vt[-1]
    if abs(xh[3]) < 1e-12:
        raise DegenerateGeometry("point at infinity")
    x = xh[:3] / xh[3]

    for p, _ in projections:
        if p[2, :3] @ x + p[2, 3] <= MIN_DEPTH:
            raise NegativeDepth("triangulated point behind a camera")

    x = _reprojection_step(x, (obs_a, obs_b))

    for p, _ in projections:
        if p[2, :3] @ x + p[2, 3] <= MIN_DEPTH:
            raise NegativeDepth("refined point behind a camera")
    return x
