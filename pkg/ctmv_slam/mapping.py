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

"""Local mapping: windowed spline bundle adjustment, map point creation and culling"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .camerarig import triangulate
from .defaults import from_defaults
from .errors import (
    AngleNearPi,
    BehindCamera,
    ConfigError,
    DegenerateGeometry,
    MappingFailure,
    NegativeDepth,
    NumericalFailure,
    TooFewMatches,
)
from .liegroups import pose_distance
from .matching import filter_essential, match_ratio
from .nlls import LMConfig, Problem, ResidualTerm, huber, solve_lm
from .utils import rad

logger = logging.getLogger(__name__)


@dataclass
class MappingConfig:
    window_size: int = 11
    cull_reproj_px: float = 1.5
    cross_kmf_depth: int = 4
    ba_guard_translation: float = 6.0
    ba_guard_rotation_deg: float = 20.0
    ba_iterations: int = 20
    max_mapping_failures: int = 5
    min_parallax_deg: float = 0.1
    ratio_test: float = 0.7
    essential_iterations: int = 200
    essential_threshold_px: float = 1.0
    huber_delta: float = 1.0
    level_sigma_base: float = 1.2
    solver: LMConfig = field(default_factory=LMConfig)

    @classmethod
    def from_defaults(cls, **overrides):
        cfg = from_defaults(cls, **overrides)
        if "solver" not in overrides:
            cfg.solver = LMConfig.from_defaults()
        return cfg.validate()

    def validate(self):
        if self.window_size < 4:
            raise ConfigError("mapping.window_size must be >= 4 for a cubic spline")
        for name in (
            "cull_reproj_px",
            "cross_kmf_depth",
            "ba_guard_translation",
            "ba_guard_rotation_deg",
            "ba_iterations",
            "max_mapping_failures",
            "ratio_test",
            "essential_iterations",
            "essential_threshold_px",
            "huber_delta",
            "level_sigma_base",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"mapping.{name} must be positive")
        if self.min_parallax_deg < 0:
            raise ConfigError("mapping.min_parallax_deg must not be negative")
        return self


@dataclass
class BundleAdjustment:
    problem: Problem
    pose_blocks: Dict[int, object]
    point_blocks: Dict[int, object]
    window: List[int]


@dataclass
class BundleResult:
    initial_cost: float
    cost: float
    iterations: int
    status: str
    poses: int
    points: int


#
# Bundle adjustment
#


def window_indices(world, size):
    n = len(world.kmfs)
    return list(range(max(0, n - size), n))


def _image_term(
    traj, camera, t, indices, pose_blocks, point_ids, point_blocks, uv, info, loss
):
    """Reprojection residuals of the observations of one image, chunked per observation"""
    blocks = [pose_blocks[m] for m in indices] + [point_blocks[p] for p in point_ids]
    n_poses = len(indices)

    def evaluate(values):
        overrides = dict(zip(indices, values[:n_poses]))
        body = traj.evaluate(t, overrides)
        pred, valid = camera.project_many(np.array(values[n_poses:]), body)
        r = uv - pred
        r[~valid] = 1e3
        return r.ravel()

    def jacobian(values):
        overrides = dict(zip(indices, values[:n_poses]))
        body = traj.evaluate(t, overrides)
        spline = traj.pose_jacobians(t, overrides)
        m = 2 * len(point_ids)
        du_deps = np.zeros((m, 6))
        result = [None] * len(blocks)
        for k, x in enumerate(values[n_poses:]):
            try:
                _, d_eps, d_x = camera.project_jacobians(x, body)
            except BehindCamera:
                continue
            du_deps[2 * k : 2 * k + 2] = -d_eps
            result[n_poses + k] = (np.arange(2 * k, 2 * k + 2), -d_x)
        for j, index in enumerate(indices):
            result[j] = du_deps @ spline[index]
        return result

    return ResidualTerm(
        blocks,
        evaluate,
        information=info,
        loss=loss,
        jacobian=jacobian,
        chunk=2,
        tag=f"ba cam {camera.camera_id} t={t:.3f}",
    )


def build_problem(world, cfg, window=None, frozen=()):
    """Problem over the window control poses and the map points they observe

    Control poses before the window, index 0 and those in `frozen` are fixed.
    Points with a single observation inside the window are fixed too.
    """
    traj = world.trajectory
    window = window_indices(world, cfg.window_size) if window is None else sorted(window)
    free = set(window) - {0} - set(frozen)
    loss = huber(cfg.huber_delta)

    # observations per image, points by id
    images = []
    counts = {}
    for k in window:
        kmf = world.kmfs[k]
        for camera_id in kmf.camera_ids:
            obs = kmf.observations_of(camera_id)
            if obs:
                images.append((kmf, camera_id, obs))
                for _, point_id in obs:
                    counts[point_id] = counts.get(point_id, 0) + 1

    problem = Problem()
    pose_blocks, point_blocks = {}, {}
    poses = traj.control_poses

    def pose_block(m):
        if m not in pose_blocks:
            pose_blocks[m] = problem.add_block(poses[m].copy(), "pose", frozen=m not in free)
        return pose_blocks[m]

    for point_id in sorted(counts):
        point_blocks[point_id] = problem.add_block(
            world.points[point_id].position, "euclidean", frozen=counts[point_id] < 2
        )

    for kmf, camera_id, obs in images:
        frame = kmf.frames[camera_id]
        t = frame.time
        indices = traj.influencing_indices(t)
        for m in indices:
            pose_block(m)
        kps = np.array([k for k, _ in obs])
        sigma = cfg.level_sigma_base ** frame.levels[kps].astype(float)
        problem.add_residual(
            _image_term(
                traj,
                world.rig.camera(camera_id),
                t,
                indices,
                pose_blocks,
                [p for _, p in obs],
                point_blocks,
                frame.keypoints[kps],
                np.repeat(1.0 / sigma**2, 2),
                loss,
            )
        )
    return BundleAdjustment(problem, pose_blocks, point_blocks, window)


def bundle_adjust(world, cfg, window=None, frozen=()):
    """Joint LM over window control poses and observed map points, guarded"""
    ba = build_problem(world, cfg, window, frozen)
    before = {m: b.value for m, b in ba.pose_blocks.items() if not b.frozen}
    try:
        result = solve_lm(ba.problem, max_iters=cfg.ba_iterations, config=cfg.solver)
    except (NumericalFailure, AngleNearPi) as ex:
        raise MappingFailure(f"bundle adjustment failed: {ex}") from ex

    for m, old in before.items():
        translation, rotation = pose_distance(old, ba.pose_blocks[m].value)
        if translation > cfg.ba_guard_translation or rotation > rad(cfg.ba_guard_rotation_deg):
            raise MappingFailure(
                f"control pose {m} moved {translation:.2f} m / {np.degrees(rotation):.1f} deg"
            )

    world.trajectory.set_poses({m: ba.pose_blocks[m].value for m in before})
    for point_id, block in ba.point_blocks.items():
        if not block.frozen:
            world.points[point_id].position = block.value.copy()

    logger.debug(
        "ba window %s: cost %.6g -> %.6g (%s)",
        ba.window,
        result.initial_cost,
        result.cost,
        result.status,
    )
    return BundleResult(
        result.initial_cost,
        result.cost,
        result.iterations,
        result.status,
        len(before),
        sum(1 for b in ba.point_blocks.values() if not b.frozen),
    )


#
# Map point creation
#


def _unlinked(kmf, camera_id):
    frame = kmf.frames[camera_id]
    return np.array(
        [k for k in range(len(frame)) if (camera_id, k) not in kmf.links], dtype=int
    )


def _matched_pairs(frame_a, idx_a, frame_b, idx_b, cam_a, cam_b, cfg, rng):
    if len(idx_a) == 0 or len(idx_b) == 0:
        return []
    matches = match_ratio(
        frame_a.descriptors[idx_a], frame_b.descriptors[idx_b], cfg.ratio_test
    )
    try:
        matches = filter_essential(
            matches,
            frame_a.keypoints[idx_a],
            frame_b.keypoints[idx_b],
            cam_a,
            cam_b,
            cfg.essential_iterations,
            cfg.essential_threshold_px,
            rng,
        )
    except TooFewMatches:
        return []
    return [(int(idx_a[m.index_a]), int(idx_b[m.index_b])) for m in matches]


def _reprojection_ok(world, x, observations, threshold):
    traj = world.trajectory
    for kmf_id, camera_id, kp in observations:
        kmf = world.kmfs[kmf_id]
        frame = kmf.frames[camera_id]
        try:
            uv = world.rig.camera(camera_id).project(x, traj.evaluate(frame.time))
        except BehindCamera:
            return False
        if np.linalg.norm(uv - frame.keypoints[kp]) > threshold:
            return False
    return True


def _parallax(world, x, obs_a, obs_b):
    traj = world.trajectory
    rays = []
    for kmf_id, camera_id, _ in (obs_a, obs_b):
        t = world.kmfs[kmf_id].frames[camera_id].time
        center = world.rig.camera(camera_id).center(traj.evaluate(t))
        ray = x - center
        rays.append(ray / np.linalg.norm(ray))
    return float(np.arccos(np.clip(rays[0] @ rays[1], -1.0, 1.0)))


def _try_point(world, obs_a, obs_b, cfg):
    traj = world.trajectory
    views = []
    for kmf_id, camera_id, kp in (obs_a, obs_b):
        frame = world.kmfs[kmf_id].frames[camera_id]
        views.append(
            (world.rig.camera(camera_id), traj.evaluate(frame.time), frame.keypoints[kp])
        )
    try:
        x = triangulate(views[0], views[1])
    except (DegenerateGeometry, NegativeDepth, BehindCamera, np.linalg.LinAlgError):
        return None
    if _parallax(world, x, obs_a, obs_b) < rad(cfg.min_parallax_deg):
        return None
    if not _reprojection_ok(world, x, (obs_a, obs_b), cfg.cull_reproj_px):
        return None
    return x


def create_map_points(world, kmf, cfg, rng=None):
    """Triangulate overlap pairs within kmf and same-camera pairs to previous KMFs"""
    rng = np.random.default_rng(0) if rng is None else rng
    rig = world.rig
    created, extended = [], 0

    # (a) overlapping pairs inside the new KMF
    for cam_a, cam_b in rig.overlap_pairs:
        if cam_a not in kmf.frames or cam_b not in kmf.frames:
            continue
        pairs = _matched_pairs(
            kmf.frames[cam_a],
            _unlinked(kmf, cam_a),
            kmf.frames[cam_b],
            _unlinked(kmf, cam_b),
            rig.camera(cam_a),
            rig.camera(cam_b),
            cfg,
            rng,
        )
        for ka, kb in pairs:
            obs_a, obs_b = (kmf.index, cam_a, ka), (kmf.index, cam_b, kb)
            x = _try_point(world, obs_a, obs_b, cfg)
            if x is not None:
                created.append(world.add_map_point(x, [obs_a, obs_b]).id)

    # (b) same camera against previous KMFs
    first = max(0, kmf.index - cfg.cross_kmf_depth)
    for prev in reversed(world.kmfs[first : kmf.index]):
        for camera_id in kmf.camera_ids:
            if camera_id not in prev.frames:
                continue
            frame_prev = prev.frames[camera_id]
            pairs = _matched_pairs(
                kmf.frames[camera_id],
                _unlinked(kmf, camera_id),
                frame_prev,
                np.arange(len(frame_prev)),
                rig.camera(camera_id),
                rig.camera(camera_id),
                cfg,
                rng,
            )
            for k_new, k_prev in pairs:
                obs_new = (kmf.index, camera_id, k_new)
                if (camera_id, k_new) in kmf.links:
                    continue
                point_id = prev.links.get((camera_id, k_prev))
                if point_id is not None:
                    # an existing point, link the new observation if it fits
                    point = world.points[point_id]
                    seen = any(
                        o[0] == kmf.index and o[1] == camera_id for o in point.observations
                    )
                    if not seen and _reprojection_ok(
                        world, point.position, [obs_new], cfg.cull_reproj_px
                    ):
                        world.add_observation(point_id, obs_new)
                        extended += 1
                    continue
                obs_prev = (prev.index, camera_id, k_prev)
                x = _try_point(world, obs_new, obs_prev, cfg)
                if x is not None:
                    created.append(world.add_map_point(x, [obs_new, obs_prev]).id)

    logger.debug(
        "kmf %d: %d map points created, %d extended", kmf.index, len(created), extended
    )
    return created


#
# Culling
#


def point_errors(world, point):
    """Pixel reprojection error per observation, +inf behind the camera"""
    traj = world.trajectory
    errors = []
    for kmf_id, camera_id, kp in sorted(point.observations):
        frame = world.kmfs[kmf_id].frames[camera_id]
        try:
            uv = world.rig.camera(camera_id).project(point.position, traj.evaluate(frame.time))
        except BehindCamera:
            errors.append(np.inf)
            continue
        errors.append(float(np.linalg.norm(uv - frame.keypoints[kp])))
    return np.array(errors)


def cull_map_points(world, cfg, point_ids=None):
    """Remove points behind any observing camera or with a large mean reprojection error"""
    ids = world.point_ids() if point_ids is None else sorted(point_ids)
    removed = []
    for point_id in ids:
        point = world.points.get(point_id)
        if point is None:
            continue
        errors = point_errors(world, point)
        if (
            len(errors) < 2
            or not np.all(np.isfinite(errors))
            or errors.mean() > cfg.cull_reproj_px
        ):
            world.remove_map_point(point_id)
            removed.append(point_id)
    if removed:
        logger.debug("culled %d map points", len(removed))
    return removed


def window_point_ids(world, window):
    ids = set()
    for k in window:
        ids |= world.kmfs[k].point_ids()
    return ids
