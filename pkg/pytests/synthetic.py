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

"""Shared fixtures: simulated drives and worlds linked from ground truth"""

import unittest

import numpy as np

from ctmv_slam.liegroups import exp_map, log_map, relative
from ctmv_slam.simulator import SimScenario, generate
from ctmv_slam.worldstate import MultiFrameGrouper, WorldState


class MyUnitTest(unittest.TestCase):
    def _assertTupleAlmostEquals(self, expected, actual, places, msg=None):
        for i, j in zip(actual, expected):
            self.assertAlmostEqual(i, j, places, msg=msg)

    def assertPoseAlmostEqual(self, expected, actual, tol=1e-9):
        err = np.abs(log_map(relative(expected, actual)))
        self.assertLess(float(err.max()), tol, msg=f"{expected} != {actual}")


def straight(duration=1.5, **overrides):
    values = dict(duration=duration, noise_px=0.0, outlier_fraction=0.0, seed=7)
    values.update(overrides)
    return generate(SimScenario.named("straight", **values))


def multiframes(sim):
    return list(MultiFrameGrouper(sim.rig.sweep_period).group(sim.frames))


def world_from_truth(sim, mfs, indices, min_obs=1):
    """KMFs at ground truth poses, map points at the landmarks they observe"""
    world = WorldState(sim.rig)
    kmfs = []
    for i in indices:
        mf = mfs[i]
        mf.pose = sim.ground_truth(mf.rep_time)
        kmfs.append(world.add_kmf(mf, mf.pose))

    observations = {}
    for kmf in kmfs:
        for camera_id, frame in sorted(kmf.frames.items()):
            for kp, landmark in enumerate(sim.truth[frame.seq]):
                if landmark >= 0:
                    observations.setdefault(int(landmark), []).append(
                        (kmf.index, camera_id, kp)
                    )
    for landmark in sorted(observations):
        if len(observations[landmark]) >= min_obs:
            world.add_map_point(sim.landmarks[landmark], observations[landmark])
    return world


def perturb(pose, rng, translation=0.05, rotation=0.01):
    twist = np.concatenate(
        [rng.normal(scale=translation, size=3), rng.normal(scale=rotation, size=3)]
    )
    return exp_map(twist).compose(pose)
