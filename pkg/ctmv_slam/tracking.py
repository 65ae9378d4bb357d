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

"""Tracking a multi-frame against its reference key multi-frame

The multi-frame pose T_i at τ_i is the only unknown. Every observation is
evaluated at its own capture time through the linear motion model anchored
at the reference key multi-frame, see trajectory.LinearMotion.
"""

import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple

import numpy as np

from .defaults import from_defaults
from .errors import (
    AngleNearPi,
    BehindCamera,
    ConfigError,
    MissingHistory,
    NumericalFailure,
    TooFewMatches,
    TrackingFailure,
)
from .liegroups import exp_map, log_map, pose_distance, relative
from .matching import filter_essential, match_ratio
from .nlls import LMConfig, Problem, ResidualTerm, huber, solve_lm
from .trajectory import LinearMotion
from .utils import rad
from .worldstate import reobservation_ratio

logger = logging.getLogger(__name__)


@dataclass
class TrackingConfig:
    ransac_sample: int = 7
    min_inliers: int = 12
    inlier_threshold_px: float = 2.0
    ransac_confidence: float = 0.999
    ransac_max_iterations: int = 500
    tracking_lm_iterations: int = 10
    kmf_translation: float = 1.0
    kmf_rotation_deg: float = 1.0
    kmf_reobs_ratio: float = 0.35
    kmf_reobs_min_cams: int = 2
    kmf_staleness: int = 20
    ratio_test: float = 0.7
    essential_iterations: int = 200
    essential_threshold_px: float = 1.0
    huber_delta: float = 1.0
    level_sigma_base: float = 1.2
    synchronous: bool = False
    max_tracking_failures: int = 5
    solver: LMConfig = field(default_factory=LMConfig)

    @classmethod
    def from_defaults(cls, **overrides):
        cfg = from_defaults(cls, **overrides)
        if "solver" not in overrides:
            cfg.solver = LMConfig.from_defaults()
        return cfg.validate()

    def validate(self):
        for name in (
            "ransac_sample",
            "min_inliers",
            "inlier_threshold_px",
            "ransac_max_iterations",
            "tracking_lm_iterations",
            "kmf_translation",
            "kmf_rotation_deg",
            "kmf_reobs_ratio",
            "kmf_reobs_min_cams",
            "kmf_staleness",
            "ratio_test",
            "essential_iterations",
            "essential_threshold_px",
            "huber_delta",
            "level_sigma_base",
            "max_tracking_failures",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"tracking.{name} must be positive")
        if not 0 < self.ransac_confidence < 1:
            raise ConfigError("tracking.ransac_confidence must be in (0, 1)")
        return self


class Correspondence(NamedTuple):
    camera_id: int
    keypoint: int
    point_id: int
    hamming_distance: int


@dataclass
class TrackingResult:
    motion: LinearMotion
    inliers: List[Correspondence]
    correspondences: int
    rms_px: float
    iterations: int


@dataclass
class KmfDecision:
    insert: bool
    reason: str
    translation: float
    rotation: float
    reobservation: float


#
# Prediction
#


def predict_initial(mf_prev2, mf_prev1, t_new):
    """Constant velocity extrapolation from the two previous multi-frames"""
    if mf_prev1 is None or mf_prev1.pose is None:
        raise MissingHistory("no tracked predecessor")
    if mf_prev2 is None or mf_prev2.pose is None:
        raise MissingHistory("a single tracked predecessor")
    dt = mf_prev1.rep_time - mf_prev2.rep_time
    if dt == 0:
        return mf_prev1.pose.copy()
    beta = (t_new - mf_prev1.rep_time) / dt
    step = log_map(relative(mf_prev2.pose, mf_prev1.pose))
    return mf_prev1.pose.compose(exp_map(beta * step))


#
# Correspondences
#


def find_correspondences(mf, ref, rig, cfg, rng):
    """2D-3D matches of mf keypoints to map points linked in the reference KMF"""
    best = {}
    for camera_id in mf.camera_ids:
        frame = mf.frames[camera_id]
        cam = rig.camera(camera_id)
        for ref_id in [camera_id] + rig.overlapping(camera_id):
            ref_frame = ref.frames.get(ref_id)
            if ref_frame is None or len(frame) == 0 or len(ref_frame) == 0:
                continue
            matches = match_ratio(frame.descriptors, ref_frame.descriptors, cfg.ratio_test)
            try:
                matches = filter_essential(
                    matches,
                    frame.keypoints,
                    ref_frame.keypoints,
                    cam,
                    rig.camera(ref_id),
                    cfg.essential_iterations,
                    cfg.essential_threshold_px,
                    rng,
                )
            except TooFewMatches:
                continue
            for m in matches:
                point_id = ref.links.get((ref_id, m.index_b))
                if point_id is None:
                    continue
                key = (camera_id, m.index_a)
                if key not in best or m.hamming_distance < best[key].hamming_distance:
                    best[key] = Correspondence(
                        camera_id, m.index_a, point_id, m.hamming_distance
                    )

    # one keypoint per map point and camera
    per_point = {}
    for c in best.values():
        key = (c.camera_id, c.point_id)
        if key not in per_point or c.hamming_distance < per_point[key].hamming_distance:
            per_point[key] = c
    return sorted(per_point.values())


#
# Residuals
#


class _Observations:
    """Correspondences of one camera as arrays"""

    def __init__(self, camera, time, uv, points, sigma):
        self.camera = camera
        self.time = time
        self.uv = uv
        self.points = points
        self.information = np.repeat(1.0 / sigma**2, 2)


def group_observations(corrs, mf, world, cfg):
    groups = {}
    for c in corrs:
        groups.setdefault(c.camera_id, []).append(c)
    result = []
    for camera_id in sorted(groups):
        cs = groups[camera_id]
        frame = mf.frames[camera_id]
        idx = np.array([c.keypoint for c in cs])
        result.append(
            _Observations(
                world.rig.camera(camera_id),
                mf.rep_time if cfg.synchronous else frame.time,
                frame.keypoints[idx],
                np.array([world.points[c.point_id].position for c in cs]),
                cfg.level_sigma_base ** frame.levels[idx].astype(float),
            )
        )
    return result


def linear_jacobian(motion, pose, t, h=1e-6):
    """d ε_wb(t) / d ε_i of the linear model for left perturbations of T_i"""
    if t == motion.time:
        return np.eye(6)
    base = motion.evaluate(t, pose)
    base_inv = base.inverse()
    jac = np.empty((6, 6))
    for k in range(6):
        step = np.zeros(6)
        step[k] = h
        plus = motion.evaluate(t, exp_map(step).compose(pose))
        minus = motion.evaluate(t, exp_map(-step).compose(pose))
        jac[:, k] = (log_map(plus.compose(base_inv)) - log_map(minus.compose(base_inv))) / (
            2 * h
        )
    return jac


def _group_term(block, obs, motion, loss):
    def evaluate(values):
        body = motion.evaluate(obs.time, values[0])
        uv, valid = obs.camera.project_many(obs.points, body)
        r = obs.uv - uv
        # points behind the camera get a fixed large residual
        r[~valid] = 1e3
        return r.ravel()

    def jacobian(values):
        pose = values[0]
        body = motion.evaluate(obs.time, pose)
        j_lin = linear_jacobian(motion, pose, obs.time)
        jac = np.zeros((2 * len(obs.points), 6))
        for n, x in enumerate(obs.points):
            try:
                _, du_deps, _ = obs.camera.project_jacobians(x, body)
            except BehindCamera:
                continue
            jac[2 * n : 2 * n + 2] = -du_deps @ j_lin
        return [jac]

    return ResidualTerm(
        [block],
        evaluate,
        information=obs.information,
        loss=loss,
        jacobian=jacobian,
        chunk=2,
        tag=f"track cam {obs.camera.camera_id}",
    )


def refine(pose, groups, motion, cfg, max_iters):
    """LM on the pose T_i over the given observation groups"""
    problem = Problem()
    block = problem.add_block(pose.copy(), "pose")
    loss = huber(cfg.huber_delta)
    for obs in groups:
        if len(obs.points):
            problem.add_residual(_group_term(block, obs, motion, loss))
    result = solve_lm(problem, max_iters=max_iters, config=cfg.solver)
    return block.value, result.cost


def reprojection_errors(pose, groups, motion):
    """Pixel errors per group, +inf behind the camera"""
    errors = []
    for obs in groups:
        body = motion.evaluate(obs.time, pose)
        uv, valid = obs.camera.project_many(obs.points, body)
        e = np.linalg.norm(obs.uv - uv, axis=1)
        e[~valid] = np.inf
        errors.append(e)
    return errors


def _subset(groups, masks):
    result = []
    for obs, mask in zip(groups, masks):
        if mask.any():
            sub = _Observations(obs.camera, obs.time, obs.uv[mask], obs.points[mask], 1.0)
            sub.information = obs.information.reshape(-1, 2)[mask].ravel()
            result.append(sub)
    return result


def _required_iterations(inlier_ratio, sample, confidence, cap):
    w = inlier_ratio**sample
    if w <= 0:
        return cap
    if w >= 1:
        return 1
    return min(cap, int(np.ceil(np.log(1 - confidence) / np.log(1 - w))))


def track(mf, ref, world, cfg, initial=None, rng=None):
    """Asynchronous multi-view PnP: RANSAC over minimal samples, LM refined

    initial is the predicted pose at mf.rep_time, the reference pose when absent.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    traj = world.trajectory
    ref_pose = traj.evaluate(ref.rep_time)
    start = ref_pose.copy() if initial is None else initial
    motion = LinearMotion(start, mf.rep_time, ref.rep_time, ref_pose)

    corrs = find_correspondences(mf, ref, world.rig, cfg, rng)
    if len(corrs) < max(cfg.ransac_sample, cfg.min_inliers):
        raise TrackingFailure(f"mf {mf.id}: {len(corrs)} correspondences")

    # group ordering of the flat correspondence list
    groups = group_observations(corrs, mf, world, cfg)
    ordered = sorted(corrs, key=lambda c: c.camera_id)
    sizes = [len(g.points) for g in groups]
    offsets = np.cumsum([0] + sizes)
    n = len(ordered)

    best_pose, best_count, best_cost = None, -1, np.inf
    needed, it = cfg.ransac_max_iterations, 0
    while it < needed:
        it += 1
        sample = rng.choice(n, cfg.ransac_sample, replace=False)
        flat = np.zeros(n, dtype=bool)
        flat[sample] = True
        masks = [flat[offsets[g] : offsets[g + 1]] for g in range(len(groups))]
        try:
            pose, _ = refine(
                start, _subset(groups, masks), motion, cfg, cfg.tracking_lm_iterations
            )
        except (NumericalFailure, AngleNearPi, np.linalg.LinAlgError):
            # degenerate sample
            continue

        errors = np.concatenate(reprojection_errors(pose, groups, motion))
        inliers = errors < cfg.inlier_threshold_px
        count = int(inliers.sum())
        cost = float(np.sum(np.minimum(errors[inliers], 1e6) ** 2))
        if count > best_count or (count == best_count and cost < best_cost):
            best_pose, best_count, best_cost = pose, count, cost
            needed = _required_iterations(
                count / n, cfg.ransac_sample, cfg.ransac_confidence, cfg.ransac_max_iterations
            )

    if best_pose is None or best_count < cfg.min_inliers:
        raise TrackingFailure(f"mf {mf.id}: {max(best_count, 0)} inliers after RANSAC")

    errors = np.concatenate(reprojection_errors(best_pose, groups, motion))
    inliers = errors < cfg.inlier_threshold_px
    masks = [inliers[offsets[g] : offsets[g + 1]] for g in range(len(groups))]
    iterations = cfg.solver.lm_max_iterations
    pose, _ = refine(best_pose, _subset(groups, masks), motion, cfg, iterations)

    errors = np.concatenate(reprojection_errors(pose, groups, motion))
    inliers = errors < cfg.inlier_threshold_px
    count = int(inliers.sum())
    if count < cfg.min_inliers:
        raise TrackingFailure(f"mf {mf.id}: {count} inliers after refinement")

    motion = LinearMotion(pose, mf.rep_time, ref.rep_time, ref_pose)
    rms = float(np.sqrt(np.mean(errors[inliers] ** 2)))
    logger.debug(
        "mf %d: %d/%d inliers, rms %.3f px, %d hypotheses", mf.id, count, n, rms, it
    )
    return TrackingResult(
        motion,
        [c for c, keep in zip(ordered, inliers) if keep],
        n,
        rms,
        it,
    )


#
# Key multi-frame selection
#


def select_kmf(mf, ref_pose, ref_points, inliers, staleness, cfg):
    """Decide on a new KMF, reasons tested in the order motion, reobservation, staleness"""
    translation, rotation = pose_distance(ref_pose, mf.pose)
    ratio = reobservation_ratio(
        ref_points, [(c.camera_id, c.point_id) for c in inliers], cfg.kmf_reobs_min_cams
    )
    if translation > cfg.kmf_translation:
        reason = "translation"
    elif rotation > rad(cfg.kmf_rotation_deg):
        reason = "rotation"
    elif ratio < cfg.kmf_reobs_ratio:
        reason = "reobservation"
    elif staleness >= cfg.kmf_staleness:
        reason = "staleness"
    else:
        reason = ""
    return KmfDecision(bool(reason), reason, translation, rotation, ratio)
