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

from dataclasses import fields

from .errors import ConfigError
from .utils import warn

_MISSING = object()


class Defaults:
    def __init__(self):
        self.reset_defaults()

    def get_defaults(self):
        return self.defaults

    def get_default(self, key, default_value=None):
        return self.defaults.get(key, default_value)

    def set_defaults(self, **kwargs):
        """Set defaults for the SLAM engine

        Valid keywords:

        MULTI-FRAMES
        - grouping_window:        Max spread of capture times inside one multi-frame in s (default=0.1)
        - synchronous:            Evaluate every observation at the representative time (default=False)

        MATCHING
        - ratio_test:             Lowe's ratio for nearest neighbour matching (default=0.7)
        - essential_iterations:   RANSAC iterations of the essential matrix filter (default=200)
        - essential_threshold_px: Symmetric epipolar distance for essential inliers (default=1.0)

        SOLVER
        - huber_delta:            Huber threshold in whitened residual units (default=1.0)
        - level_sigma_base:       Keypoint sigma = base ** scale_level pixels (default=1.2)
        - lm_max_iterations:      Levenberg-Marquardt iteration cap (default=50)
        - lm_tolerance:           Relative cost / gradient tolerance (default=1e-10)
        - lm_initial_lambda:      Initial damping relative to max diag(J^T J) (default=1e-4)
        - jacobian_step:          Central difference step (default=1e-6)

        TRACKING
        - ransac_sample:          Correspondences per PnP hypothesis (default=7)
        - min_inliers:            Tracking failure below this many inliers (default=12)
        - inlier_threshold_px:    PnP inlier reprojection threshold (default=2.0)
        - ransac_confidence:      Early exit confidence (default=0.999)
        - ransac_max_iterations:  PnP RANSAC iteration cap (default=500)
        - tracking_lm_iterations: LM iterations per hypothesis (default=10)
        - kmf_translation:        KMF motion trigger in m (default=1.0)
        - kmf_rotation_deg:       KMF motion trigger in degrees (default=1.0)
        - kmf_reobs_ratio:        KMF reobservation trigger (default=0.35)
        - kmf_reobs_min_cams:     Cameras needed to count a reobservation (default=2)
        - kmf_staleness:          KMF inserted after this many MFs at the latest (default=20)
        - max_tracking_failures:  Successive tracking failures that abort (default=5)

        MAPPING
        - window_size:            Bundle adjustment window N (default=11)
        - cull_reproj_px:         Map point culling threshold (default=1.5)
        - cross_kmf_depth:        Previous KMFs matched for new map points (default=4)
        - ba_guard_translation:   Reject BA updates moving a pose further in m (default=6.0)
        - ba_guard_rotation_deg:  Reject BA updates rotating a pose further in deg (default=20.0)
        - ba_iterations:          LM iterations of one bundle adjustment (default=20)
        - max_mapping_failures:   Successive BA failures that abort (default=5)
        - init_min_points:        Minimal number of map points at initialisation (default=50)
        - min_parallax_deg:       Smallest ray angle accepted when triangulating (default=0.1)

        LOOP CLOSING
        - loop_cooldown:          KMFs between two loop corrections (default=30)
        - loop_min_travel:        Odometry check distance in m (default=30.0)
        - loop_min_time:          Odometry check time in s (default=5.0)
        - loop_min_kmf_gap:       Odometry check KMF gap (default=30)
        - similarity_floor:       Absolute similarity floor (default=0.01)
        - similarity_top_fraction: Fraction of the top candidate score (default=0.9)
        - loop_min_pairs:         Matched camera pairs needed (default=2)
        - loop_min_essential_inliers, loop_min_associations, loop_min_pose_inliers (default=20 each)
        - loop_reproj_threshold_px: Relative pose inlier threshold (default=3.0)
        - horn_ransac_iterations: RANSAC iterations of the 3D-3D alignment (default=200)
        - pgo_edge_weight, pgo_reg_weight: Information diagonals of the pose graph (default=1.0)
        - bow_bits:               Descriptor bits hashed into one visual word (default=12)
        - fuse_radius_px:         Search radius for map point fusion (default=3.0)
        - fuse_max_hamming:       Descriptor distance accepted for fusion (default=64)

        EVALUATION
        - ate_rate:               ATE sampling rate in Hz (default=10.0)
        - rpe_interval:           RPE interval in s (default=1.0)
        - auc_ate_threshold:      AUC threshold of ATE in m (default=1000.0)
        - auc_rpe_t_threshold:    AUC threshold of RPE-T in cm/m (default=20.0)
        - auc_rpe_r_threshold:    AUC threshold of RPE-R in rad/m (default=5e-4)

        PIPELINE
        - mode:                   "slam" or "vo" (loop closing off) (default="slam")
        - schedule:               "sequential" or "threaded" (default="sequential")
        - seed:                   Seed of every random generator (default=0)
        - output_rate:            Rate of the emitted trajectory in Hz (default=10.0)
        - timeit:                 Log stage timings, levels = False, 0,1,2 (default=False)
        """

        for k, v in kwargs.items():
            if self.get_default(k, _MISSING) is _MISSING:
                warn(f"Parameter {k} is not a valid default")
            else:
                self.defaults[k] = v

    def reset_defaults(self):
        self.defaults = {
            #
            # multi-frames
            #
            "grouping_window": 0.1,
            "synchronous": False,
            #
            # matching
            #
            "ratio_test": 0.7,
            "essential_iterations": 200,
            "essential_threshold_px": 1.0,
            #
            # solver
            #
            "huber_delta": 1.0,
            "level_sigma_base": 1.2,
            "lm_max_iterations": 50,
            "lm_tolerance": 1e-10,
            "lm_initial_lambda": 1e-4,
            "jacobian_step": 1e-6,
            #
            # tracking
            #
            "ransac_sample": 7,
            "min_inliers": 12,
            "inlier_threshold_px": 2.0,
            "ransac_confidence": 0.999,
            "ransac_max_iterations": 500,
            "tracking_lm_iterations": 10,
            "kmf_translation": 1.0,
            "kmf_rotation_deg": 1.0,
            "kmf_reobs_ratio": 0.35,
            "kmf_reobs_min_cams": 2,
            "kmf_staleness": 20,
            "max_tracking_failures": 5,
            #
            # mapping
            #
            "window_size": 11,
            "cull_reproj_px": 1.5,
            "cross_kmf_depth": 4,
            "ba_guard_translation": 6.0,
            "ba_guard_rotation_deg": 20.0,
            "ba_iterations": 20,
            "max_mapping_failures": 5,
            "init_min_points": 50,
            "min_parallax_deg": 0.1,
            #
            # loop closing
            #
            "loop_cooldown": 30,
            "loop_min_travel": 30.0,
            "loop_min_time": 5.0,
            "loop_min_kmf_gap": 30,
            "similarity_floor": 0.01,
            "similarity_top_fraction": 0.9,
            "loop_min_pairs": 2,
            "loop_min_essential_inliers": 20,
            "loop_min_associations": 20,
            "loop_min_pose_inliers": 20,
            "loop_reproj_threshold_px": 3.0,
            "horn_ransac_iterations": 200,
            "pgo_edge_weight": 1.0,
            "pgo_reg_weight": 1.0,
            "bow_bits": 12,
            "fuse_radius_px": 3.0,
            "fuse_max_hamming": 64,
            #
            # evaluation
            #
            "ate_rate": 10.0,
            "rpe_interval": 1.0,
            "auc_ate_threshold": 1000.0,
            "auc_rpe_t_threshold": 20.0,
            "auc_rpe_r_threshold": 5e-4,
            #
            # pipeline
            #
            "mode": "slam",
            "schedule": "sequential",
            "seed": 0,
            "output_rate": 10.0,
            "timeit": False,
        }


def get_defaults():
    return DEFAULTS.get_defaults()


def get_default(key, default_value=None):
    return DEFAULTS.get_default(key, default_value)


def set_defaults(**kwargs):
    DEFAULTS.set_defaults(**kwargs)


def reset_defaults():
    DEFAULTS.reset_defaults()


def preset(key, value):
    return get_default(key) if value is None else value


def from_defaults(cls, **overrides):
    """Instantiate a config dataclass whose field names are registry keys"""
    args = {}
    for f in fields(cls):
        if f.name in overrides:
            args[f.name] = overrides.pop(f.name)
        else:
            value = get_default(f.name, _MISSING)
            if value is not _MISSING:
                args[f.name] = value
    if overrides:
        raise ConfigError(
            f"unknown {cls.__name__} field(s): {', '.join(sorted(overrides))}"
        )
    return cls(**args)


DEFAULTS = Defaults()
