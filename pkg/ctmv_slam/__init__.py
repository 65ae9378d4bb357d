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

from ._version import __version__ as cs_version
from ._version import __version_info__ as cs_version_info
from .camerarig import CameraModel, RigCalibration, triangulate
from .defaults import (
    get_default,
    get_defaults,
    reset_defaults,
    set_defaults,
)
from .errors import SlamError
from .evaluation import ate, auc, evaluate, read_tum, rpe, write_tum
from .liegroups import Pose, exp_map, log_map
from .pipeline import PipelineConfig, RunResult, run
from .simulator import SimScenario, generate
from .trajectory import LinearMotion, SplineTrajectory
from .utils import Timer, warn
from .worldstate import WorldState


def versions():
    print("ctmv_slam ", cs_version)
