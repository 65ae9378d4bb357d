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

"""Synthetic asynchronous multi-camera rig

Body frame: x forward, y left, z up. Camera frame: z optical axis, x right,
y down. Camera ids 0 and 1 are a forward stereo pair firing together, ids
2 .. M+1 form a ring with headings 2πj/M. Every other camera fires in its
own slot, the slots are evenly spaced over the sweep period.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .camerarig import CameraModel, RigCalibration
from .defaults import from_defaults, get_default
from .errors import ConfigError
from .evaluation import SampledTrajectory, write_tum
from .liegroups import Pose, exp_map, so3_exp
from .utils import Timer
from .worldstate import CameraFrame, write_stream

logger = logging.getLogger(__name__)

MIN_OUTLIER_PX = 20.0
MAX_OUTLIER_PX = 60.0


#
# Rig
#


def camera_extrinsic(heading, center):
    """T_kb of a horizontal camera looking along `heading` (CCW from body x)"""
    s, c = np.sin(heading), np.cos(heading)
    r_kb = np.array(
        [
            [s, -c, 0.0],  # camera x, right
            [0.0, 0.0, -1.0],  # camera y, down
            [c, s, 0.0],  # optical axis
        ]
    )
    return Pose(r_kb, -r_kb @ np.asarray(center, dtype=float))


def make_rig(
    ring_cameras=5,
    stereo_baseline=0.5,
    image_size=(960, 600),
    focal=480.0,
    sweep_period=0.1,
    ring_radius=0.3,
):
    """Forward stereo pair plus a ring of surround cameras, 90° FOV by default"""
    w, h = image_size
    k = np.array([[focal, 0.0, w / 2], [0.0, focal, h / 2], [0.0, 0.0, 1.0]])
    slot = sweep_period / (ring_cameras + 1)
    half = stereo_baseline / 2

    cameras = [
        CameraModel(0, k, camera_extrinsic(0.0, (0.0, half, 0.0)), (w, h), 0.0),
        CameraModel(1, k, camera_extrinsic(0.0, (0.0, -half, 0.0)), (w, h), 0.0),
    ]
    for j in range(ring_cameras):
        heading = 2 * np.pi * j / ring_cameras
        center = ring_radius * np.array([np.cos(heading), np.sin(heading), 0.0])
        cameras.append(
            CameraModel(2 + j, k, camera_extrinsic(heading, center), (w, h), (j + 1) * slot)
        )

    return RigCalibration(
        cameras=cameras,
        overlap_pairs=[(0, 1)],
        init_pair=(0, 1),
        sweep_period=sweep_period,
    ).validate()


#
# Ground truth motion
#


def yaw_pose(x, y, yaw):
    return Pose(so3_exp(np.array([0.0, 0.0, yaw])), np.array([x, y, 0.0]))


class ScrewPath:
    """Constant body twist, a straight line for zero yaw rate"""

    period = None

    def __init__(self, speed, yaw_rate=0.0):
        self.speed = speed
        self.twist = np.array([speed, 0.0, 0.0, 0.0, 0.0, yaw_rate])

    def pose(self, t):
        return exp_map(t * self.twist)


class SquarePath:
    """Square with rounded corners driven counter-clockwise at constant speed

    The straight at index 0 starts at (r, 0) heading along +x. With a non zero
    `revisit_yaw` the body yaw drifts away from the driving direction over
    the last `ramp` meters of the first lap and keeps that offset afterwards.
    """

    def __init__(self, side, radius, speed, revisit_yaw=0.0, ramp=None):
        if side <= 2 * radius:
            raise ConfigError("square side must exceed twice the corner radius")
        self.side = side
        self.radius = radius
        self.speed = speed
        self.revisit_yaw = revisit_yaw
        self.straight = side - 2 * radius
        self.leg = self.straight + np.pi * radius / 2
        self.perimeter = 4 * self.leg
        self.ramp = self.straight / 2 if ramp is None else ramp

        self.starts = [np.array([radius, 0.0])]
        for k in range(3):
            self.starts.append(self._corner_end(k))

    @property
    def period(self):
        return self.perimeter / self.speed

    @staticmethod
    def _direction(heading):
        return np.array([np.cos(heading), np.sin(heading)])

    @staticmethod
    def _left(heading):
        return np.array([-np.sin(heading), np.cos(heading)])

    def _corner_center(self, k):
        heading = k * np.pi / 2
        end = self.starts[k] + self.straight * self._direction(heading)
        return end + self.radius * self._left(heading)

    def _corner_end(self, k):
        return self._corner_center(k) - self.radius * self._left((k + 1) * np.pi / 2)

    def at(self, s):
        """Position and driving direction at arclength s"""
        s = s % self.perimeter
        k = min(int(s // self.leg), 3)
        u = s - k * self.leg
        heading = k * np.pi / 2
        if u < self.straight:
            return self.starts[k] + u * self._direction(heading), heading
        theta = (u - self.straight) / self.radius
        center = self._corner_center(k)
        return center - self.radius * self._left(heading + theta), heading + theta

    def yaw_offset(self, s):
        begin = self.perimeter - self.ramp
        if self.revisit_yaw == 0.0 or s <= begin:
            return 0.0
        if s >= self.perimeter:
            return self.revisit_yaw
        u = (s - begin) / self.ramp
        return self.revisit_yaw * (1 - np.cos(np.pi * u)) / 2

    def pose(self, t):
        s = self.speed * t
        p, heading = self.at(s)
        return yaw_pose(p[0], p[1], heading + self.yaw_offset(s))


#
# Scenario
#

SCENARIOS = {
    "straight": dict(speed=10.0, duration=10.0),
    "square-loop": dict(speed=10.0, side_length=100.0, corner_radius=10.0, laps=1.1),
    "yawed-revisit": dict(
        speed=5.0, side_length=30.0, corner_radius=5.0, laps=1.05, revisit=True
    ),
}


@dataclass
class SimScenario:
    name: str = "straight"
    duration: Optional[float] = None  # s, derived from laps for loops
    speed: float = 10.0  # m/s
    yaw_rate: float = 0.0  # rad/s, screw motion of straight drives
    side_length: Optional[float] = None  # m, None is a straight drive
    corner_radius: float = 10.0
    laps: float = 1.0
    revisit: bool = False  # yaw the body by 2π/M before closing the loop
    ring_cameras: int = 5
    stereo_baseline: float = 0.5
    image_size: Tuple[int, int] = (960, 600)
    focal: float = 480.0
    sweep_period: float = 0.1
    landmark_density: float = 5.0  # per meter of path
    lateral_range: Tuple[float, float] = (4.0, 30.0)
    height_range: Tuple[float, float] = (-1.5, 4.0)
    depth_range: Tuple[float, float] = (0.5, 60.0)
    noise_px: float = 1.0
    outlier_fraction: float = 0.0
    bit_flip: float = 0.02
    max_level: int = 3
    level_sigma_base: float = 1.2
    seed: int = 0

    @classmethod
    def from_defaults(cls, **overrides):
        return from_defaults(cls, **overrides)

    @classmethod
    def named(cls, name, **overrides):
        if name not in SCENARIOS:
            raise ConfigError(
                f"unknown scenario '{name}', expected one of {', '.join(SCENARIOS)}"
            )
        return cls.from_defaults(name=name, **{**SCENARIOS[name], **overrides})

    def validate(self):
        if self.speed <= 0:
            raise ConfigError("speed must be positive")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ConfigError("outlier_fraction must be in [0, 1]")
        if self.noise_px < 0:
            raise ConfigError("noise_px must not be negative")
        if self.ring_cameras < 1:
            raise ConfigError("a rig needs at least one ring camera")
        if self.side_length is None and self.duration is None:
            raise ConfigError("straight drives need a duration")
        return self

    def path(self):
        if self.side_length is None:
            return ScrewPath(self.speed, self.yaw_rate)
        revisit_yaw = 2 * np.pi / self.ring_cameras if self.revisit else 0.0
        return SquarePath(self.side_length, self.corner_radius, self.speed, revisit_yaw)

    def total_time(self, path=None):
        if self.duration is not None:
            return self.duration
        path = path or self.path()
        return self.laps * path.period


@dataclass
class SimulationResult:
    scenario: SimScenario
    rig: RigCalibration
    path: object
    frames: List[CameraFrame]
    landmarks: np.ndarray
    landmark_descriptors: np.ndarray
    # seq -> landmark id per keypoint, -1 for planted outliers
    truth: Dict[int, np.ndarray] = field(default_factory=dict)

    def ground_truth(self, t):
        return self.path.pose(t)

    def sample_ground_truth(self, rate=100.0):
        end = self.scenario.total_time(self.path)
        times = np.arange(0.0, end + 0.5 / rate, 1.0 / rate)
        return SampledTrajectory(times, [self.path.pose(t) for t in times])

    def outlier_ratio(self):
        ids = np.concatenate([np.zeros(0, dtype=int), *self.truth.values()])
        return float(np.mean(ids < 0)) if len(ids) else 0.0


#
# Generation
#


def centerline(path, scenario, step=0.5):
    """Positions and unit tangents along the driven route, one lap for loops"""
    if path.period is not None:
        times = np.arange(0.0, path.period, step / scenario.speed)
    else:
        margin = scenario.depth_range[1] / scenario.speed
        times = np.arange(-margin, scenario.total_time(path) + margin, step / scenario.speed)
    positions = np.array([path.pose(t).translation for t in times])
    tangents = np.gradient(positions, axis=0)
    tangents /= np.maximum(np.linalg.norm(tangents, axis=1, keepdims=True), 1e-12)
    return positions, tangents


def place_landmarks(path, scenario, rng):
    positions, tangents = centerline(path, scenario)
    length = np.linalg.norm(np.diff(positions, axis=0), axis=1).sum()
    count = int(round(scenario.landmark_density * length))

    anchor = rng.integers(0, len(positions), count)
    side = rng.choice([-1.0, 1.0], count)
    lateral = rng.uniform(*scenario.lateral_range, count) * side
    normals = np.column_stack([-tangents[anchor, 1], tangents[anchor, 0], np.zeros(count)])
    points = positions[anchor] + lateral[:, None] * normals
    points[:, 2] = rng.uniform(*scenario.height_range, count)

    # keep the road itself free
    tree = cKDTree(positions[:, :2])
    clearance, _ = tree.query(points[:, :2])
    return points[clearance >= scenario.lateral_range[0] * 0.5]


def _flip_bits(descriptors, probability, rng):
    flips = rng.random((len(descriptors), 256)) < probability
    return np.bitwise_xor(descriptors, np.packbits(flips, axis=1))


def _displace(uv, camera, rng):
    """Move pixels by 20..60 px, staying inside the image"""
    out = np.empty_like(uv)
    center = camera.principal_point
    for i, p in enumerate(uv):
        magnitude = rng.uniform(MIN_OUTLIER_PX, MAX_OUTLIER_PX)
        angle = rng.uniform(0.0, 2 * np.pi)
        q = p + magnitude * np.array([np.cos(angle), np.sin(angle)])
        if not camera.in_image(q):
            towards = center - p
            norm = np.linalg.norm(towards)
            towards = towards / norm if norm > 1e-9 else np.array([1.0, 0.0])
            q = p + magnitude * towards
        out[i] = q
    return out


def observe(camera, body_pose, landmarks, candidates, scenario, rng):
    """Keypoints, levels and landmark ids of one camera frame"""
    if len(candidates) == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=int), np.zeros(0, dtype=int)

    points = landmarks[candidates]
    depth = camera.world_to_camera(body_pose).act(points)[:, 2]
    uv, valid = camera.project_many(points, body_pose)
    near, far = scenario.depth_range
    keep = valid & (depth >= near) & (depth <= far) & camera.in_image(uv)
    ids = np.asarray(candidates)[keep]
    uv = uv[keep]

    order = rng.permutation(len(ids))
    ids, uv = ids[order], uv[order]
    levels = rng.integers(0, scenario.max_level + 1, len(ids))
    if scenario.noise_px > 0:
        sigma = scenario.noise_px * scenario.level_sigma_base**levels
        uv = uv + rng.normal(size=uv.shape) * sigma[:, None]
        inside = camera.in_image(uv)
        ids, uv, levels = ids[inside], uv[inside], levels[inside]

    n_out = int(round(scenario.outlier_fraction * len(ids)))
    if n_out > 0:
        chosen = rng.choice(len(ids), n_out, replace=False)
        uv[chosen] = _displace(uv[chosen], camera, rng)
        ids = ids.copy()
        ids[chosen] = -1 - ids[chosen]  # keep the landmark for the descriptor

    return uv, levels, ids


def generate(scenario, timeit=None):
    """Camera frames of a scenario in capture order plus its ground truth"""
    scenario.validate()
    timeit = get_default("timeit") if timeit is None else timeit
    rng = np.random.default_rng(scenario.seed)

    with Timer(timeit, scenario.name, "generate scenario") as t:
        rig = make_rig(
            ring_cameras=scenario.ring_cameras,
            stereo_baseline=scenario.stereo_baseline,
            image_size=scenario.image_size,
            focal=scenario.focal,
            sweep_period=scenario.sweep_period,
        )
        path = scenario.path()
        landmarks = place_landmarks(path, scenario, rng)
        base_descriptors = rng.integers(0, 256, (len(landmarks), 32), dtype=np.uint8)
        tree = cKDTree(landmarks)

        schedule = sorted(rig.cameras, key=lambda c: (c.fire_offset, c.camera_id))
        sweeps = int(np.floor(scenario.total_time(path) / scenario.sweep_period + 1e-9))

        frames, truth = [], {}
        for k in range(sweeps):
            for camera in schedule:
                time = k * scenario.sweep_period + camera.fire_offset
                body_pose = path.pose(time)
                center = camera.center(body_pose)
                candidates = sorted(tree.query_ball_point(center, scenario.depth_range[1]))
                uv, levels, ids = observe(
                    camera, body_pose, landmarks, candidates, scenario, rng
                )

                landmark = np.where(ids < 0, -1 - ids, ids)
                descriptors = _flip_bits(base_descriptors[landmark], scenario.bit_flip, rng)
                seq = len(frames)
                frames.append(
                    CameraFrame(camera.camera_id, time, uv, levels, descriptors, seq)
                )
                truth[seq] = np.where(ids < 0, -1, ids)

        t.info = f"{len(frames)} frames, {len(landmarks)} landmarks"

    logger.info(
        "scenario %s: %d frames, %d landmarks over %.1f s",
        scenario.name,
        len(frames),
        len(landmarks),
        scenario.total_time(path),
    )
    return SimulationResult(
        scenario=scenario,
        rig=rig,
        path=path,
        frames=frames,
        landmarks=landmarks,
        landmark_descriptors=base_descriptors,
        truth=truth,
    )


def write_simulation(result, out_dir, gt_rate=100.0):
    """calibration.json, observations.ndjson and groundtruth.tum in out_dir"""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "calibration": os.path.join(out_dir, "calibration.json"),
        "observations": os.path.join(out_dir, "observations.ndjson"),
        "groundtruth": os.path.join(out_dir, "groundtruth.tum"),
    }
    result.rig.save(paths["calibration"])
    write_stream(result.frames, paths["observations"])
    gt = result.sample_ground_truth(gt_rate)
    write_tum(paths["groundtruth"], gt.times, gt.poses)
    return paths
