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

"""Multi-frames, key multi-frames, map points and their cross references"""

import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Dict, Optional, Set, Tuple

import numpy as np

from .errors import EmptyWindow, StreamFormatError
from .liegroups import Pose
from .trajectory import LinearMotion, SplineTrajectory
from .utils import (
    DESCRIPTOR_BYTES,
    descriptor_to_hex,
    hamming_matrix,
    hex_to_descriptor,
    median_time,
)

logger = logging.getLogger(__name__)

Observation = Tuple[int, int, int]  # (kmf_id, camera_id, keypoint_index)


@dataclass
class CameraFrame:
    camera_id: int
    time: float
    keypoints: np.ndarray  # (n, 2) pixels
    levels: np.ndarray  # (n,) scale levels
    descriptors: np.ndarray  # (n, 32) uint8
    seq: int = 0

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
        self.levels = np.asarray(self.levels, dtype=int).reshape(-1)
        self.descriptors = np.asarray(self.descriptors, dtype=np.uint8).reshape(
            -1, DESCRIPTOR_BYTES
        )
        if not len(self.keypoints) == len(self.levels) == len(self.descriptors):
            raise StreamFormatError(
                f"frame {self.seq}: {len(self.keypoints)} keypoints but "
                f"{len(self.descriptors)} descriptors"
            )

    def __len__(self):
        return len(self.keypoints)

    @classmethod
    def from_record(cls, record):
        try:
            kps = np.asarray(record["keypoints"], dtype=float).reshape(-1, 3)
            return cls(
                camera_id=int(record["camera_id"]),
                time=float(record["t"]),
                keypoints=kps[:, :2],
                levels=kps[:, 2].astype(int),
                descriptors=np.array(
                    [hex_to_descriptor(d) for d in record["descriptors"]], dtype=np.uint8
                ).reshape(-1, DESCRIPTOR_BYTES),
                seq=int(record.get("seq", 0)),
            )
        except KeyError as ex:
            raise StreamFormatError(f"missing field {ex}") from ex
        except (TypeError, ValueError) as ex:
            raise StreamFormatError(str(ex)) from ex

    def to_record(self):
        return {
            "seq": self.seq,
            "camera_id": self.camera_id,
            "t": self.time,
            "keypoints": [
                [float(u), float(v), int(l)]
                for (u, v), l in zip(self.keypoints, self.levels)
            ],
            "descriptors": [descriptor_to_hex(d) for d in self.descriptors],
        }

    def check_bounds(self, camera):
        if len(self) and not np.all(camera.in_image(self.keypoints)):
            raise StreamFormatError(
                f"frame {self.seq}: keypoints outside camera {self.camera_id} image"
            )


def read_stream(filename, rig=None):
    """Yield CameraFrames from a newline delimited observation file"""
    with open(filename, "r") as fd:
        for lineno, line in enumerate(fd, 1):
            if not line.strip():
                continue
            try:
                frame = CameraFrame.from_record(json.loads(line))
                if rig is not None:
                    frame.check_bounds(rig.camera(frame.camera_id))
            except (json.JSONDecodeError, StreamFormatError) as ex:
                raise StreamFormatError(f"{filename}:{lineno}: {ex}") from ex
            yield frame


def write_stream(frames, filename):
    with open(filename, "w") as fd:
        for frame in frames:
            fd.write(json.dumps(frame.to_record()) + "\n")


#
# Multi-frames
#


@dataclass
class MultiFrame:
    id: int
    frames: Dict[int, CameraFrame]
    rep_time: float
    motion: Optional[LinearMotion] = None
    pose: Optional[Pose] = None  # tracked T_wb(τ_i)

    @property
    def camera_ids(self):
        return sorted(self.frames)

    def capture_time(self, camera_id):
        return self.frames[camera_id].time

    def body_pose(self, t):
        """Tracked body pose at t from the linear model"""
        return self.motion.evaluate(t)


@dataclass
class KeyMultiFrame(MultiFrame):
    """A multi-frame carrying control pose `index` of the trajectory"""

    index: int = 0
    links: Dict[Tuple[int, int], int] = field(default_factory=dict)
    reason: str = ""

    @classmethod
    def promote(cls, mf, index, reason=""):
        return cls(
            id=mf.id,
            frames=mf.frames,
            rep_time=mf.rep_time,
            motion=mf.motion,
            pose=mf.pose,
            index=index,
            reason=reason,
        )

    def point_ids(self):
        return set(self.links.values())

    def observations_of(self, camera_id):
        """(keypoint index, map point id) pairs of one camera"""
        return sorted((k, p) for (c, k), p in self.links.items() if c == camera_id)


def _split_repeats(frames):
    """Start a new part at every camera already present in the current one"""
    parts, seen = [[]], set()
    for f in frames:
        if f.camera_id in seen:
            logger.warning(
                "camera %d fired twice within one window (t=%.6f), starting a new multi-frame",
                f.camera_id,
                f.time,
            )
            parts.append([])
            seen = set()
        parts[-1].append(f)
        seen.add(f.camera_id)
    return parts


def split_window(frames, window):
    """Split time sorted frames recursively at the largest gap until each part fits

    A part holds one frame per camera, a repeated camera opens the next part.
    """
    if not frames:
        raise EmptyWindow("no frames to group")
    times = [f.time for f in frames]
    if times[-1] - times[0] <= window or len(frames) == 1:
        return _split_repeats(frames)
    gaps = np.diff(times)
    cut = int(np.argmax(gaps)) + 1
    return split_window(frames[:cut], window) + split_window(frames[cut:], window)


def _make_multiframe(mf_id, frames):
    return MultiFrame(
        id=mf_id,
        frames={f.camera_id: f for f in frames},
        rep_time=median_time([f.time for f in frames]),
    )


def group_multiframe(frames, window, first_id=0):
    """MultiFrames from time sorted frames of one or more sweep windows"""
    return [
        _make_multiframe(first_id + i, part)
        for i, part in enumerate(split_window(list(frames), window))
    ]


class MultiFrameGrouper:
    """Streaming grouper, a repeated camera or an exceeded window closes a group"""

    def __init__(self, window):
        self.window = window
        self.pending = []
        self.next_id = 0

    def _close(self):
        parts = split_window(self.pending, self.window)
        self.pending = []
        mfs = []
        for part in parts:
            mfs.append(_make_multiframe(self.next_id, part))
            self.next_id += 1
        return mfs

    def push(self, frame):
        closed = []
        if self.pending:
            if self.pending[-1].time > frame.time:
                raise StreamFormatError(
                    f"frame {frame.seq} at t={frame.time} is out of order"
                )
            seen = {f.camera_id for f in self.pending}
            if frame.camera_id in seen or frame.time - self.pending[0].time > self.window:
                closed = self._close()
        self.pending.append(frame)
        return closed

    def flush(self):
        return self._close() if self.pending else []

    def group(self, frames):
        for frame in frames:
            yield from self.push(frame)
        yield from self.flush()


def reobservation_ratio(reference_points, links, min_cams=2):
    """Fraction of reference map points matched in at least min_cams cameras

    links is an iterable of (camera_id, map point id).
    """
    reference = set(reference_points)
    if not reference:
        return 0.0
    cams = {}
    for camera_id, point_id in links:
        if point_id in reference:
            cams.setdefault(point_id, set()).add(camera_id)
    hits = sum(1 for c in cams.values() if len(c) >= min_cams)
    return hits / len(reference)


#
# Map
#


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    observations: Set[Observation] = field(default_factory=set)
    descriptor: Optional[np.ndarray] = None


class WorldState:
    """Key multi-frames, map points and the spline; `lock` guards writers"""

    def __init__(self, rig):
        self.rig = rig
        self.kmfs = []
        self.points = {}
        self.trajectory = SplineTrajectory()
        self.lock = threading.RLock()
        self._next_point = 0

    #
    # key multi-frames
    #

    def add_kmf(self, mf, pose, rep_time=None, reason=""):
        rep_time = mf.rep_time if rep_time is None else rep_time
        kmf = KeyMultiFrame.promote(mf, len(self.kmfs), reason)
        kmf.rep_time = rep_time
        self.trajectory.append(pose, rep_time)
        self.kmfs.append(kmf)
        return kmf

    def reset(self):
        """Drop every KMF, map point and control pose"""
        self.kmfs = []
        self.points = {}
        self.trajectory = SplineTrajectory()
        self._next_point = 0

    def kmf(self, index):
        return self.kmfs[index]

    def control_pose(self, kmf):
        return self.trajectory.control_poses[kmf.index]

    #
    # map points
    #

    def _frame(self, obs):
        kmf_id, camera_id, _ = obs
        return self.kmfs[kmf_id].frames[camera_id]

    def descriptor_of(self, obs):
        return self._frame(obs).descriptors[obs[2]]

    def add_map_point(self, position, observations):
        point = MapPoint(self._next_point, np.asarray(position, dtype=float).copy())
        self._next_point += 1
        self.points[point.id] = point
        for obs in observations:
            self.add_observation(point.id, obs, refresh=False)
        self.refresh_descriptor(point.id)
        return point

    def add_observation(self, point_id, obs, refresh=True):
        kmf_id, camera_id, kp = obs
        links = self.kmfs[kmf_id].links
        current = links.get((camera_id, kp))
        if current is not None and current != point_id:
            self.remove_observation(current, obs)
        links[(camera_id, kp)] = point_id
        self.points[point_id].observations.add(tuple(obs))
        if refresh:
            self.refresh_descriptor(point_id)

    def remove_observation(self, point_id, obs):
        kmf_id, camera_id, kp = obs
        self.points[point_id].observations.discard(tuple(obs))
        links = self.kmfs[kmf_id].links
        if links.get((camera_id, kp)) == point_id:
            del links[(camera_id, kp)]

    def remove_map_point(self, point_id):
        point = self.points.pop(point_id)
        for kmf_id, camera_id, kp in point.observations:
            links = self.kmfs[kmf_id].links
            if links.get((camera_id, kp)) == point_id:
                del links[(camera_id, kp)]
        return point

    def merge_points(self, keep_id, drop_id):
        """Move every observation of drop onto keep, drop is removed"""
        drop = self.points.pop(drop_id)
        keep = self.points[keep_id]
        for obs in sorted(drop.observations):
            kmf_id, camera_id, kp = obs
            links = self.kmfs[kmf_id].links
            if links.get((camera_id, kp)) == drop_id:
                del links[(camera_id, kp)]
            # one point per (kmf, camera) keeps the observation unambiguous
            if any(o[0] == kmf_id and o[1] == camera_id for o in keep.observations):
                continue
            links[(camera_id, kp)] = keep_id
            keep.observations.add(obs)
        self.refresh_descriptor(keep_id)
        return keep

    def refresh_descriptor(self, point_id):
        """Medoid of the observed descriptors"""
        point = self.points[point_id]
        obs = sorted(point.observations)
        if not obs:
            return
        descs = np.array([self.descriptor_of(o) for o in obs])
        if len(descs) <= 2:
            point.descriptor = descs[0].copy()
            return
        d = hamming_matrix(descs, descs).sum(axis=1)
        point.descriptor = descs[int(np.argmin(d))].copy()

    def point_ids(self):
        return sorted(self.points)

    def check_integrity(self):
        """Problems with the bidirectional links, empty when consistent"""
        problems = []
        for point_id in sorted(self.points):
            for kmf_id, camera_id, kp in sorted(self.points[point_id].observations):
                if kmf_id >= len(self.kmfs) or camera_id not in self.kmfs[kmf_id].frames:
                    problems.append(f"point {point_id}: unknown frame ({kmf_id}, {camera_id})")
                elif self.kmfs[kmf_id].links.get((camera_id, kp)) != point_id:
                    problems.append(
                        f"point {point_id}: ({kmf_id}, {camera_id}, {kp}) does not link back"
                    )
        for kmf in self.kmfs:
            for (camera_id, kp), point_id in sorted(kmf.links.items()):
                point = self.points.get(point_id)
                if point is None or (kmf.index, camera_id, kp) not in point.observations:
                    problems.append(
                        f"kmf {kmf.index}: ({camera_id}, {kp}) links to missing point {point_id}"
                    )
        return problems
