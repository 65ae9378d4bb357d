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

"""Continuous-time trajectories

SplineTrajectory is a cumulative cubic B-spline on SE(3) over non-uniform
knots. Segment i covers t in [τ_i, τ_(i+1)) and is shaped by control poses
i-1 .. i+2 and knots τ_(i-3) .. τ_(i+4). Indices outside 0 .. n-1 refer to
virtual control poses that continue the first / last relative motion, so the
spline can be evaluated on [τ_(-1), τ_n].

LinearMotion is the geodesic model used while tracking a single multi-frame.
"""

import bisect
import logging
from dataclasses import dataclass

import numpy as np
from cachetools import LRUCache, cached

from .errors import IndexOutOfRange, OutOfDomain, TooFewControlPoses
from .liegroups import Pose, exp_map, geodesic, log_map, relative

logger = logging.getLogger(__name__)

#
# B-spline bases
#


class KnotVector:
    def __init__(self, times):
        self.times = tuple(float(t) for t in times)
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("knot times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    def __getitem__(self, i):
        return self.times[i]


def _ratio(num, den):
    # 0/0 := 0 (repeated knots)
    return 0.0 if den == 0.0 else num / den


def basis(knots, l, k, t):
    """de Boor-Cox basis B_(l,k)(t) of order k (k=4 is cubic)"""
    b = knots.times if isinstance(knots, KnotVector) else tuple(knots)
    if l < 0 or k < 1 or l + k >= len(b):
        raise IndexOutOfRange(f"B({l},{k}) needs knots up to {l + k}, have {len(b)}")

    if k == 1:
        if b[l] <= t < b[l + 1]:
            return 1.0
        # close the last interval
        return 1.0 if (t == b[l + 1] == b[-1] and b[l] < b[l + 1]) else 0.0

    return _ratio(t - b[l], b[l + k - 1] - b[l]) * basis(b, l, k - 1, t) + _ratio(
        b[l + k] - t, b[l + k] - b[l + 1]
    ) * basis(b, l + 1, k - 1, t)


def segment_bases(knots, t):
    """The four cubic bases active on the middle span [knots[3], knots[4]] of 8 knots

    Evaluates the segment polynomial, so t = knots[4] is valid as well.
    """
    b = knots
    # triangular de Boor scheme, N[j] holds B_(3-d+j, d+1)
    n = [1.0]
    for d in range(1, 4):
        nxt = [0.0] * (d + 1)
        for j, value in enumerate(n):
            l = 3 - d + 1 + j  # index of B_(l, d) in the previous row
            left = _ratio(b[l + d] - t, b[l + d] - b[l])
            right = _ratio(t - b[l], b[l + d] - b[l])
            nxt[j] += left * value
            nxt[j + 1] += right * value
        n = nxt
    return n


@cached(cache=LRUCache(maxsize=65536))
def cumulative_bases(knots, t):
    """B̃_j = Σ_(l>=j) B_l for j = 0..3, keyed by a tuple of 8 knots"""
    n = segment_bases(knots, t)
    return (1.0, n[1] + n[2] + n[3], n[2] + n[3], n[3])


#
# Cumulative cubic B-spline
#


class SplineTrajectory:
    """T_wb(t) from control poses and representative times

    Mutation (append, set_pose) requires exclusive access; evaluation is
    re-entrant otherwise.
    """

    def __init__(self, control_poses=(), rep_times=()):
        if len(control_poses) != len(rep_times):
            raise ValueError("control poses and rep times differ in length")
        self._poses = [p.copy() for p in control_poses]
        self._times = [float(t) for t in rep_times]
        self._check_times()
        self._omegas = {}

    def _check_times(self):
        if any(b <= a for a, b in zip(self._times, self._times[1:])):
            raise ValueError("rep times must be strictly increasing")

    def __len__(self):
        return len(self._poses)

    @property
    def control_poses(self):
        return list(self._poses)

    @property
    def control_twists(self):
        return [log_map(p) for p in self._poses]

    @property
    def rep_times(self):
        return list(self._times)

    def copy(self):
        return SplineTrajectory(self._poses, self._times)

    def append(self, pose, t):
        if self._times and t <= self._times[-1]:
            raise ValueError(f"rep time {t} not after {self._times[-1]}")
        self._poses.append(pose.copy())
        self._times.append(float(t))
        self._omegas.clear()

    def set_pose(self, index, pose):
        self._poses[index] = pose.copy()
        self._omegas.clear()

    def set_poses(self, poses):
        for index, pose in poses.items():
            self._poses[index] = pose.copy()
        self._omegas.clear()

    #
    # virtual extension
    #

    def time_at(self, m):
        n = len(self._times)
        if 0 <= m < n:
            return self._times[m]
        if n < 2:
            raise TooFewControlPoses("virtual knots need two control poses")
        if m >= n:
            return self._times[-1] + (m - n + 1) * (self._times[-1] - self._times[-2])
        return self._times[0] + m * (self._times[1] - self._times[0])

    def _omega(self, m, overrides):
        """Log(T_(m-1)⁻¹ T_m), constant beyond either end"""
        n = len(self._poses)
        if n < 2:
            return np.zeros(6)
        m = min(max(m, 1), n - 1)
        if overrides and (m in overrides or m - 1 in overrides):
            a = overrides.get(m - 1, self._poses[m - 1])
            b = overrides.get(m, self._poses[m])
            return log_map(relative(a, b))
        omega = self._omegas.get(m)
        if omega is None:
            omega = log_map(relative(self._poses[m - 1], self._poses[m]))
            self._omegas[m] = omega
        return omega

    def pose_at_index(self, m, overrides=None):
        """Real or virtual control pose"""
        n = len(self._poses)
        if n == 0:
            raise TooFewControlPoses("empty trajectory")
        overrides = overrides or {}
        if 0 <= m < n:
            return overrides.get(m, self._poses[m])
        if m >= n:
            last = overrides.get(n - 1, self._poses[-1])
            return last.compose(exp_map((m - n + 1) * self._omega(n - 1, overrides)))
        first = overrides.get(0, self._poses[0])
        return first.compose(exp_map(m * self._omega(1, overrides)))

    @property
    def domain(self):
        n = len(self._times)
        if n == 0:
            raise TooFewControlPoses("empty trajectory")
        if n == 1:
            return (-np.inf, np.inf)
        return (self.time_at(-1), self.time_at(n))

    def segment(self, t):
        lo, hi = self.domain
        if not lo <= t <= hi:
            raise OutOfDomain(f"t={t:.6f} outside [{lo:.6f}, {hi:.6f}]")
        n = len(self._times)
        if t < self._times[0]:
            return -1
        return min(bisect.bisect_right(self._times, t) - 1, n - 1)

    def influencing_indices(self, t):
        """Real control pose indices that evaluate(t) depends on"""
        n = len(self._poses)
        if n == 1:
            return [0]
        i = self.segment(t)
        indices = set()
        for m in range(i - 1, i + 3):
            if m >= n:
                indices.update((n - 2, n - 1))
            elif m < 0:
                indices.update((0, 1))
            else:
                indices.add(m)
        return sorted(indices)

    #
    # evaluation
    #

    def evaluate(self, t, overrides=None):
        """Pose at time t; overrides maps control indices to substitute poses"""
        n = len(self._poses)
        if n == 0:
            raise TooFewControlPoses("empty trajectory")
        if n == 1:
            return (overrides or {}).get(0, self._poses[0]).copy()

        i = self.segment(t)
        knots = tuple(self.time_at(m) for m in range(i - 3, i + 5))
        weights = cumulative_bases(knots, float(t))

        pose = self.pose_at_index(i - 1, overrides)
        for j in range(1, 4):
            if weights[j] != 0.0:
                pose = pose.compose(exp_map(weights[j] * self._omega(i - 1 + j, overrides)))
        return pose

    def sample(self, times):
        return [self.evaluate(t) for t in times]

    def pose_jacobians(self, t, overrides=None, h=1e-6):
        """d ε_wb(t) / d ε_m for left perturbations of each influencing control pose m

        Central differences through evaluate, virtual control poses included.
        """
        overrides = dict(overrides or {})
        base_inv = self.evaluate(t, overrides).inverse()
        jacobians = {}
        for m in self.influencing_indices(t):
            pose = overrides.get(m, self._poses[m])
            jac = np.empty((6, 6))
            for k in range(6):
                step = np.zeros(6)
                step[k] = h
                overrides[m] = exp_map(step).compose(pose)
                plus = log_map(self.evaluate(t, overrides).compose(base_inv))
                overrides[m] = exp_map(-step).compose(pose)
                minus = log_map(self.evaluate(t, overrides).compose(base_inv))
                jac[:, k] = (plus - minus) / (2 * h)
            overrides[m] = pose
            jacobians[m] = jac
        return jacobians


def evaluate_spline(traj, t):
    return traj.evaluate(t)


def extrapolate_boundary(traj, side, count):
    """New trajectory with `count` virtual control poses made explicit on one side"""
    n = len(traj)
    if n < 2:
        raise TooFewControlPoses(f"extrapolation needs 2 control poses, have {n}")
    if side == "end":
        indices = range(n + count)
    elif side == "begin":
        indices = range(-count, n)
    else:
        raise ValueError(f"side must be 'begin' or 'end', not {side}")
    return SplineTrajectory(
        [traj.pose_at_index(m) for m in indices], [traj.time_at(m) for m in indices]
    )


#
# Tracking time linear model
#


@dataclass
class LinearMotion:
    """T(t) = T_i · Exp(α Log(T_i⁻¹ T_ref)), α = (τ_i - t) / (τ_i - τ_ref)"""

    pose: Pose
    time: float
    ref_time: float
    ref_pose: Pose

    def __post_init__(self):
        if self.time == self.ref_time:
            raise ValueError("reference time must differ from the multi-frame time")

    @property
    def pose_param(self):
        return log_map(self.pose)

    def alpha(self, t):
        return (self.time - t) / (self.time - self.ref_time)

    def evaluate(self, t, pose=None):
        """Pose at t, optionally for a substitute T_i (used by tracking)"""
        base = self.pose if pose is None else pose
        return geodesic(base, self.ref_pose, self.alpha(t))


def evaluate_linear(lm, t):
    return lm.evaluate(t)
