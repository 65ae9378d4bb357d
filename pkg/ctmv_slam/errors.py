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

"""Exceptions raised by the engine"""


class SlamError(Exception):
    """Base class of every error raised by ctmv_slam"""


#
# Geometry
#


class AngleNearPi(SlamError):
    """Rotation angle too close to pi for a unique logarithm"""


class BehindCamera(SlamError):
    """Point depth in the camera frame is not positive"""


class DegenerateGeometry(SlamError):
    """Viewing rays are (nearly) parallel or camera centres coincide"""


class NegativeDepth(SlamError):
    """Triangulated point fails the cheirality check"""


#
# Trajectory
#


class IndexOutOfRange(SlamError):
    """Basis function index exceeds the knot vector"""


class OutOfDomain(SlamError):
    """Query time outside the (extrapolated) spline domain"""


class TooFewControlPoses(SlamError):
    """Operation needs more control poses than available"""


#
# Input
#


class InputError(SlamError):
    """Malformed input file or configuration"""


class CalibrationError(InputError):
    pass


class StreamFormatError(InputError):
    pass


class ConfigError(InputError):
    pass


class EmptyWindow(SlamError):
    """Grouping was asked to build a multi-frame from nothing"""


#
# Estimation
#


class TooFewMatches(SlamError):
    pass


class NumericalFailure(SlamError):
    """Non-finite cost or Jacobian during optimisation"""


class MissingHistory(SlamError):
    pass


class StageFailure(SlamError):
    """A recoverable failure of one pipeline stage, counted by the orchestrator"""

    stage = "unknown"


class TrackingFailure(StageFailure):
    stage = "tracking"


class MappingFailure(StageFailure):
    stage = "mapping"


class CorrectionFailure(StageFailure):
    stage = "loopclosing"


class InitFailure(StageFailure):
    stage = "initialization"


class NoScenario(SlamError):
    """No camera matching scenario passed the geometric check"""


class NoOverlap(SlamError):
    """Estimated and reference trajectories share no time range"""


class SequenceAborted(SlamError):
    def __init__(self, stage, message=""):
        self.stage = stage
        super().__init__(f"aborted({stage}){': ' + message if message else ''}")
