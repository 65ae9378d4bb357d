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

"""Trajectory metrics: ATE, RPE, AUC and success rate, TUM file I/O

Samples that cannot be computed because the estimate ended early (or has a
gap) are padded with +inf, so failed runs depress the AUC instead of
vanishing from it.
"""

import bisect
import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
from scipy.spatial.transform import Rotation

from .defaults import preset
from .errors import InputError, NoOverlap
from .liegroups import Pose, geodesic, relative, rotation_angle

logger = logging.getLogger(__name__)


#
# Sampled trajectories and TUM files
#


class SampledTrajectory:
    """Time stamped poses with geodesic interpolation between samples"""

    def __init__(self, times, poses, max_gap=None):
        order = np.argsort(np.asarray(times, dtype=float), kind="stable")
        self.times = [float(times[i]) for i in order]
        self.poses = [poses[i] for i in order]
        self.max_gap = max_gap

    def __len__(self):
        return len(self.times)

    @property
    def span(self):
        if not self.times:
            return None
        return self.times[0], self.times[-1]

    def covers(self, t):
        if not self.times or not self.times[0] <= t <= self.times[-1]:
            return False
        if self.max_gap is None:
            return True
        i = bisect.bisect_left(self.times, t)
        if self.times[i] == t:
            return True
        return self.times[i] - self.times[i - 1] <= self.max_gap

    def pose_at(self, t):
        if not self.covers(t):
            return None
        i = bisect.bisect_left(self.times, t)
        if self.times[i] == t:
            return self.poses[i]
        t0, t1 = self.times[i - 1], self.times[i]
        return geodesic(self.poses[i - 1], self.poses[i], (t - t0) / (t1 - t0))

    def shifted(self, offset):
        return SampledTrajectory(
            [t + offset for t in self.times], self.poses, self.max_gap
        )


def write_tum(filename, times, poses):
    """timestamp tx ty tz qx qy qz qw, world from body"""
    with open(filename, "w") as fd:
        for t, pose in zip(times, poses):
            q = Rotation.from_matrix(pose.rotation).as_quat()
            tx, ty, tz = pose.translation
            fd.write(
                f"{t:.9f} {tx:.9f} {ty:.9f} {tz:.9f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n"
            )


def read_tum(filename, max_gap=None):
    times, poses = [], []
    with open(filename, "r") as fd:
        for lineno, line in enumerate(fd, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            values = line.replace(",", " ").split()
            if len(values) != 8:
                raise InputError(f"{filename}:{lineno}: expected 8 values, got {len(values)}")
            try:
                t, tx, ty, tz, qx, qy, qz, qw = (float(v) for v in values)
            except ValueError as ex:
                raise InputError(f"{filename}:{lineno}: {ex}") from ex
            rotation = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
            times.append(t)
            poses.append(Pose(rotation, [tx, ty, tz]))
    return SampledTrajectory(times, poses, max_gap)


#
# Metrics
#


def _overlap(est, gt):
    if not len(est) or not len(gt):
        raise NoOverlap("empty trajectory")
    start = max(est.times[0], gt.times[0])
    if start > min(est.times[-1], gt.times[-1]):
        raise NoOverlap(
            f"estimate [{est.times[0]:.3f}, {est.times[-1]:.3f}] and ground truth "
            f"[{gt.times[0]:.3f}, {gt.times[-1]:.3f}] do not overlap"
        )
    return start, gt.times[-1]


def _grid(start, end, rate):
    count = int(np.floor((end - start) * rate + 1e-9)) + 1
    return start + np.arange(count) / rate


def align_se3(src, dst):
    """Rotation and translation minimising Σ |dst - (R src + t)|², no scale"""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    w = (dst - mu_d).T @ (src - mu_s)
    u, _, vt = np.linalg.svd(w)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1
    r = u @ s @ vt
    return Pose(r, mu_d - r @ mu_s)


@dataclass
class ATEResult:
    times: np.ndarray
    errors: np.ndarray  # m, +inf where the estimate is missing
    alignment: Pose


def ate(est, gt, rate=None):
    """Absolute position error after a rigid alignment of estimate onto ground truth"""
    rate = preset("ate_rate", rate)
    start, end = _overlap(est, gt)
    times = _grid(start, end, rate)

    gt_pos, est_pos, present = [], [], []
    for t in times:
        g, e = gt.pose_at(t), est.pose_at(t)
        ok = g is not None and e is not None
        present.append(ok)
        gt_pos.append(g.translation if ok else np.zeros(3))
        est_pos.append(e.translation if ok else np.zeros(3))
    present = np.array(present)
    gt_pos, est_pos = np.array(gt_pos), np.array(est_pos)
    if not present.any():
        raise NoOverlap("no common sample on the evaluation grid")

    alignment = align_se3(est_pos[present], gt_pos[present])
    errors = np.full(len(times), np.inf)
    aligned = alignment.act(est_pos[present])
    errors[present] = np.linalg.norm(aligned - gt_pos[present], axis=1)
    return ATEResult(times, errors, alignment)


def path_length(traj, t0, t1, steps=10):
    ts = np.linspace(t0, t1, steps + 1)
    p = np.array([traj.pose_at(t).translation for t in ts])
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


@dataclass
class RPEResult:
    times: np.ndarray
    translation: np.ndarray  # cm/m
    rotation: np.ndarray  # rad/m


def rpe(est, gt, interval=None):
    """Relative pose error per traveled meter over `interval` seconds"""
    interval = preset("rpe_interval", interval)
    start, end = _overlap(est, gt)

    times, trans, rot = [], [], []
    grid = _grid(start, end - interval, 1.0 / interval) if end - start >= interval else []
    for t in grid:
        g0, g1 = gt.pose_at(t), gt.pose_at(t + interval)
        if g0 is None or g1 is None:
            continue
        length = path_length(gt, t, t + interval)
        if length < 1e-9:
            continue
        times.append(t)
        e0, e1 = est.pose_at(t), est.pose_at(t + interval)
        if e0 is None or e1 is None:
            trans.append(np.inf)
            rot.append(np.inf)
            continue
        error = relative(relative(g0, g1), relative(e0, e1))
        trans.append(100.0 * np.linalg.norm(error.translation) / length)
        rot.append(rotation_angle(error.rotation) / length)
    return RPEResult(np.array(times), np.array(trans), np.array(rot))


def auc(samples, threshold):
    """Area under the cumulative error curve on [0, threshold] in percent

    Exact integral of the empirical step curve: Σ max(0, T - e) / (n T).
    """
    e = np.asarray(samples, dtype=float)
    if len(e) == 0:
        return 0.0
    return float(np.sum(np.clip(threshold - e, 0.0, threshold)) / (len(e) * threshold) * 100)


def percentile(samples, q):
    """Nearest rank percentile, +inf entries allowed"""
    e = np.sort(np.asarray(samples, dtype=float))
    if len(e) == 0:
        return np.nan
    rank = int(np.ceil(q / 100.0 * len(e))) - 1
    return float(e[min(max(rank, 0), len(e) - 1)])


def median(samples):
    e = np.asarray(samples, dtype=float)
    return float(np.median(e)) if len(e) else np.nan


#
# Reports
#


@dataclass
class MetricsReport:
    ate: ATEResult
    rpe: RPEResult
    success: bool = True
    auc: Dict[str, float] = field(default_factory=dict)

    def summary(self):
        return {
            "success": self.success,
            "ate_median_m": median(self.ate.errors),
            "ate_p90_m": percentile(self.ate.errors, 90),
            "rpe_t_median_cmpm": median(self.rpe.translation),
            "rpe_r_median_radpm": median(self.rpe.rotation),
            **{f"auc_{k}": v for k, v in self.auc.items()},
        }

    def rows(self):
        """Per timestamp rows (t, ate_m, rpe_t_cmpm, rpe_r_radpm), blanks where absent"""
        rpe_at = {
            round(t, 6): (a, b)
            for t, a, b in zip(self.rpe.times, self.rpe.translation, self.rpe.rotation)
        }
        rows = []
        for t, e in zip(self.ate.times, self.ate.errors):
            a, b = rpe_at.get(round(t, 6), ("", ""))
            rows.append((float(t), float(e), a, b))
        return rows

    def write_csv(self, filename):
        with open(filename, "w", newline="") as fd:
            writer = csv.writer(fd)
            writer.writerow(["t", "ate_m", "rpe_t_cmpm", "rpe_r_radpm"])
            for row in self.rows():
                writer.writerow(row)


def evaluate(est, gt, success=True, thresholds=None):
    """MetricsReport of an estimate against ground truth"""
    thresholds = thresholds or {}
    ate_result = ate(est, gt)
    rpe_result = rpe(est, gt)
    report = MetricsReport(ate_result, rpe_result, success)
    report.auc = {
        "ate": auc(ate_result.errors, preset("auc_ate_threshold", thresholds.get("ate"))),
        "rpe_t": auc(
            rpe_result.translation, preset("auc_rpe_t_threshold", thresholds.get("rpe_t"))
        ),
        "rpe_r": auc(
            rpe_result.rotation, preset("auc_rpe_r_threshold", thresholds.get("rpe_r"))
        ),
    }
    logger.info(
        "ATE median %.4f m, RPE-T median %.4f cm/m, RPE-R median %.2e rad/m",
        median(ate_result.errors),
        median(rpe_result.translation),
        median(rpe_result.rotation),
    )
    return report


def summarize(reports: List[MetricsReport]):
    """Success rate plus medians and AUCs over all samples of several runs"""
    if not reports:
        return {"runs": 0, "sr": 0.0}
    ate_all = np.concatenate([r.ate.errors for r in reports])
    rpe_t_all = np.concatenate([r.rpe.translation for r in reports])
    rpe_r_all = np.concatenate([r.rpe.rotation for r in reports])
    return {
        "runs": len(reports),
        "sr": 100.0 * sum(r.success for r in reports) / len(reports),
        "ate_median_m": median(ate_all),
        "rpe_t_median_cmpm": median(rpe_t_all),
        "rpe_r_median_radpm": median(rpe_r_all),
        "auc_ate": auc(ate_all, preset("auc_ate_threshold", None)),
        "auc_rpe_t": auc(rpe_t_all, preset("auc_rpe_t_threshold", None)),
        "auc_rpe_r": auc(rpe_r_all, preset("auc_rpe_r_threshold", None)),
    }
