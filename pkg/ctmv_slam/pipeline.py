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

"""Orchestration: initialisation, tracking, local mapping and loop closing

Stages:

    camera frames -> MultiFrameGrouper -> track -> select_kmf
        -> (KMF) bundle_adjust -> create_map_points -> cull_map_points
        -> (slam mode) LoopCloser.process

The sequential schedule runs every stage inline. The threaded schedule runs
mapping and loop closing in worker threads fed by queues of KMF indices;
each stage holds the world lock while it writes and tracking waits for a
KMF to leave the loop stage before it tracks the next multi-frame. Both
schedules compute the same trajectory and the threaded one is no faster.
"""

import json
import logging
import math
import os
import queue
import threading
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional

import numpy as np

from .camerarig import RigCalibration
from .defaults import from_defaults, get_default
from .errors import (
    ConfigError,
    CorrectionFailure,
    InitFailure,
    MappingFailure,
    MissingHistory,
    SequenceAborted,
    StageFailure,
    TrackingFailure,
)
from .evaluation import MetricsReport, SampledTrajectory, evaluate, read_tum, write_tum
from .liegroups import Pose
from .loopclosure import LoopCloser, LoopConfig
from .mapping import (
    MappingConfig,
    bundle_adjust,
    create_map_points,
    cull_map_points,
    window_indices,
    window_point_ids,
)
from .nlls import LMConfig
from .trace import RunLog
from .tracking import TrackingConfig, predict_initial, select_kmf, track
from .utils import Timer
from .worldstate import MultiFrameGrouper, WorldState, read_stream

logger = logging.getLogger(__name__)

EXIT_COMPLETED = 0
EXIT_ABORTED = 2
EXIT_INVALID_INPUT = 3

_SECTIONS = {
    "tracking": TrackingConfig,
    "mapping": MappingConfig,
    "loop": LoopConfig,
}

#
# Configuration
#


@dataclass
class PipelineConfig:
    mode: str = "slam"
    schedule: str = "sequential"
    seed: int = 0
    synchronous: bool = False
    grouping_window: float = 0.1
    init_min_points: int = 50
    output_rate: float = 10.0
    timeit: bool = False
    calibration: Optional[str] = None
    observations: Optional[str] = None
    groundtruth: Optional[str] = None
    out_dir: Optional[str] = None
    tracking: TrackingConfig = None
    mapping: MappingConfig = None
    loop: LoopConfig = None
    solver: LMConfig = None

    @classmethod
    def from_defaults(cls, **overrides):
        sections = {k: overrides.pop(k, None) for k in (*_SECTIONS, "solver")}
        cfg = from_defaults(cls, **overrides)
        cfg.solver = sections["solver"] or LMConfig.from_defaults()
        for name, section_cls in _SECTIONS.items():
            section = sections[name]
            if section is None:
                extra = {"seed": cfg.seed} if name == "loop" else {}
                section = section_cls.from_defaults(solver=cfg.solver, **extra)
            setattr(cfg, name, section)
        cfg.tracking.synchronous = cfg.tracking.synchronous or cfg.synchronous
        return cfg.validate()

    @classmethod
    def from_json(cls, data, base_dir="."):
        """Config document: top level fields, `paths` and one object per section"""
        if not isinstance(data, dict):
            raise ConfigError("the configuration must be a JSON object")
        data = dict(data)
        paths = data.pop("paths", {}) or {}
        solver = LMConfig.from_defaults(**data.pop("solver", {}))
        sections = {name: data.pop(name, {}) or {} for name in _SECTIONS}
        unknown = set(paths) - {"calibration", "observations", "groundtruth", "out_dir"}
        if unknown:
            raise ConfigError(f"unknown path(s): {', '.join(sorted(unknown))}")
        for key, value in paths.items():
            data[key] = value if value is None else os.path.join(base_dir, value)

        seed = data.get("seed", get_default("seed"))
        built = {}
        for name, section_cls in _SECTIONS.items():
            values = dict(sections[name])
            if name == "loop":
                values.setdefault("seed", seed)
            built[name] = section_cls.from_defaults(solver=solver, **values)
        return cls.from_defaults(solver=solver, **built, **data)

    @classmethod
    def load(cls, filename):
        with open(filename, "r") as fd:
            try:
                data = json.load(fd)
            except json.JSONDecodeError as ex:
                raise ConfigError(f"{filename}:{ex.lineno}:{ex.colno}: {ex.msg}") from ex
        return cls.from_json(data, os.path.dirname(os.path.abspath(filename)))

    def with_overrides(self, **changes):
        """Copy with top level changes, None values are ignored"""
        changes = {k: v for k, v in changes.items() if v is not None}
        cfg = replace(self, **changes)
        if "seed" in changes:
            cfg.loop = replace(cfg.loop, seed=cfg.seed)
        if changes.get("synchronous"):
            cfg.tracking = replace(cfg.tracking, synchronous=True)
        return cfg.validate()

    def validate(self, rig=None):
        if self.mode not in ("slam", "vo"):
            raise ConfigError(f"mode must be 'slam' or 'vo', not '{self.mode}'")
        if self.schedule not in ("sequential", "threaded"):
            raise ConfigError(
                f"schedule must be 'sequential' or 'threaded', not '{self.schedule}'"
            )
        if self.grouping_window <= 0 or self.output_rate <= 0:
            raise ConfigError("grouping_window and output_rate must be positive")
        if self.init_min_points < 1:
            raise ConfigError("init_min_points must be >= 1")
        if rig is not None:
            for camera_id in rig.init_pair:
                if camera_id not in rig.camera_ids:
                    raise ConfigError(f"init_pair camera {camera_id} is not in the rig")
        return self

    def to_json(self):
        top = {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if f.name not in (*_SECTIONS, "solver")
        }
        keys = ("calibration", "observations", "groundtruth", "out_dir")
        paths = {k: top.pop(k) for k in keys}
        result = {**top, "paths": paths}
        for name in (*_SECTIONS, "solver"):
            section = getattr(self, name)
            result[name] = {
                f.name: getattr(section, f.name) for f in fields(section) if f.name != "solver"
            }
        return result


#
# Results
#


@dataclass
class RunResult:
    status: str  # "completed" or "aborted"
    reason: str = ""
    world: Optional[WorldState] = None
    trajectory: Optional[SampledTrajectory] = None
    report: Optional[MetricsReport] = None
    counters: Dict[str, int] = field(default_factory=dict)
    corrections: List[object] = field(default_factory=list)
    log: Optional[RunLog] = None

    @property
    def completed(self):
        return self.status == "completed"

    @property
    def exit_code(self):
        return EXIT_COMPLETED if self.completed else EXIT_ABORTED


#
# Initialisation
#


def initialize(mf, world, cfg, rng=None):
    """First KMF at the world origin with map points from the overlapping pairs

    τ_0 is the firing time of the init pair, not the median capture time.
    """
    rig = world.rig
    a, b = rig.init_pair
    if a not in mf.frames or b not in mf.frames:
        raise InitFailure(f"mf {mf.id} lacks an image of init pair ({a}, {b})")

    tau0 = 0.5 * (mf.capture_time(a) + mf.capture_time(b))
    mf.rep_time = tau0
    mf.pose = Pose.identity()
    with world.lock:
        kmf = world.add_kmf(mf, Pose.identity(), rep_time=tau0, reason="initialization")
        created = create_map_points(world, kmf, cfg.mapping, rng)
        if len(created) < cfg.init_min_points:
            world.reset()
            raise InitFailure(
                f"mf {mf.id}: {len(created)} map points, {cfg.init_min_points} needed"
            )
    logger.info("initialized at t=%.6f with %d map points", tau0, len(created))
    return kmf


#
# Orchestrator
#


def _synchronized(mf):
    """All frames stamped with the representative time"""
    mf.frames = {c: replace(f, time=mf.rep_time) for c, f in mf.frames.items()}
    return mf


class Pipeline:
    """Stateful run over a stream of camera frames"""

    def __init__(self, cfg, rig, log=None):
        self.cfg = cfg.validate(rig)
        self.rig = rig
        self.world = WorldState(rig)
        self.log = RunLog() if log is None else log
        self.loop_closer = LoopCloser(cfg.loop, cfg.mapping) if cfg.mode == "slam" else None
        self.rng_tracking = np.random.default_rng([cfg.seed, 1])
        self.rng_mapping = np.random.default_rng([cfg.seed, 2])
        self.history = []
        self.staleness = 0
        self.counters = {
            "multi_frames": 0,
            "tracked": 0,
            "kmfs": 0,
            "tracking_failures": 0,
            "mapping_failures": 0,
            "loops": 0,
        }
        self.failures = {"tracking": 0, "mapping": 0, "initialization": 0}
        self.corrections = []
        self.last_time = None

    @property
    def initialized(self):
        return len(self.world.kmfs) > 0

    #
    # failure accounting
    #

    def _limit(self, stage):
        if stage == "mapping":
            return self.cfg.mapping.max_mapping_failures
        return self.cfg.tracking.max_tracking_failures

    def _failed(self, t, ex):
        stage = ex.stage
        self.failures[stage] = self.failures.get(stage, 0) + 1
        self.log.event(t, stage, "failure", message=str(ex), count=self.failures[stage])
        logger.info("%s failure %d: %s", stage, self.failures[stage], ex)
        if self.failures[stage] >= self._limit(stage):
            raise SequenceAborted(stage, str(ex))

    def _succeeded(self, stage):
        self.failures[stage] = 0

    #
    # stages
    #

    def track_multiframe(self, mf):
        """Track one MF, returns the new KMF or None"""
        self.counters["multi_frames"] += 1
        if self.cfg.synchronous:
            _synchronized(mf)
        self.last_time = max(f.time for f in mf.frames.values())

        if not self.initialized:
            try:
                kmf = initialize(mf, self.world, self.cfg, self.rng_mapping)
            except InitFailure as ex:
                self._failed(mf.rep_time, ex)
                return None
            self._succeeded("initialization")
            self.history = [kmf]
            self.counters["kmfs"] += 1
            self.log.event(
                kmf.rep_time, "initialization", "kmf", index=0, points=len(self.world.points)
            )
            return None

        with Timer(self.cfg.timeit, f"mf {mf.id}", "track", 1):
            ref = self.world.kmfs[-1]
            prev2 = self.history[-2] if len(self.history) > 1 else None
            prev1 = self.history[-1] if self.history else None
            try:
                initial = predict_initial(prev2, prev1, mf.rep_time)
            except MissingHistory:
                initial = None

            try:
                with self.world.lock:
                    result = track(
                        mf, ref, self.world, self.cfg.tracking, initial, self.rng_tracking
                    )
                    ref_pose = self.world.trajectory.evaluate(ref.rep_time)
            except TrackingFailure as ex:
                self.counters["tracking_failures"] += 1
                self._failed(mf.rep_time, ex)
                return None
        self._succeeded("tracking")
        self.counters["tracked"] += 1

        mf.motion = result.motion
        mf.pose = result.motion.pose
        self.history = (self.history + [mf])[-2:]
        self.staleness += 1
        self.log.event(
            mf.rep_time,
            "tracking",
            "tracked",
            mf=mf.id,
            inliers=len(result.inliers),
            correspondences=result.correspondences,
            rms_px=result.rms_px,
        )

        decision = select_kmf(
            mf, ref_pose, ref.point_ids(), result.inliers, self.staleness, self.cfg.tracking
        )
        if not decision.insert:
            return None

        with self.world.lock:
            kmf = self.world.add_kmf(mf, mf.pose, reason=decision.reason)
            for c in result.inliers:
                point = self.world.points.get(c.point_id)
                if point is None or any(
                    o[0] == kmf.index and o[1] == c.camera_id for o in point.observations
                ):
                    continue
                self.world.add_observation(c.point_id, (kmf.index, c.camera_id, c.keypoint))
        self.history[-1] = kmf
        self.staleness = 0
        self.counters["kmfs"] += 1
        self.log.event(
            kmf.rep_time,
            "tracking",
            "kmf",
            index=kmf.index,
            reason=decision.reason,
            translation=decision.translation,
            rotation=decision.rotation,
            reobservation=decision.reobservation,
        )
        logger.info("kmf %d inserted (%s) at t=%.3f", kmf.index, decision.reason, kmf.rep_time)
        return kmf

    def map_kmf(self, kmf):
        cfg = self.cfg.mapping
        with Timer(self.cfg.timeit, f"kmf {kmf.index}", "local mapping", 1):
            with self.world.lock:
                window = window_indices(self.world, cfg.window_size)
                try:
                    ba = bundle_adjust(self.world, cfg, window)
                except MappingFailure as ex:
                    self.counters["mapping_failures"] += 1
                    self._failed(kmf.rep_time, ex)
                    ba = None
                else:
                    self._succeeded("mapping")
                created = create_map_points(self.world, kmf, cfg, self.rng_mapping)
                culled = cull_map_points(self.world, cfg, window_point_ids(self.world, window))

        self.log.event(
            kmf.rep_time,
            "mapping",
            "kmf_mapped",
            index=kmf.index,
            created=len(created),
            culled=len(culled),
            cost=None if ba is None else ba.cost,
            status=None if ba is None else ba.status,
            ba_points=None if ba is None else ba.points,
        )

    def close_loops(self, kmf):
        if self.loop_closer is None:
            return None
        with Timer(self.cfg.timeit, f"kmf {kmf.index}", "loop closing", 1):
            with self.world.lock:
                try:
                    correction = self.loop_closer.process(kmf, self.world)
                except CorrectionFailure as ex:
                    self.log.event(kmf.rep_time, "loopclosing", "failure", message=str(ex))
                    logger.info("loop correction failed: %s", ex)
                    return None
        if correction is not None:
            self.counters["loops"] += 1
            self.corrections.append(correction)
            self.log.event(
                kmf.rep_time,
                "loopclosing",
                "loop",
                query=correction.constraint.query,
                candidate=correction.constraint.candidate,
                scenario=correction.constraint.scenario,
                inliers=correction.constraint.inliers,
                cost=correction.cost,
                fused=correction.fused_points,
            )
        return correction

    #
    # output
    #

    def output_times(self):
        if not self.initialized or self.last_time is None:
            return []
        lo, hi = self.world.trajectory.domain
        start = max(lo, self.world.kmfs[0].rep_time)
        end = min(hi, self.last_time)
        rate = self.cfg.output_rate
        first = math.ceil(start * rate - 1e-9)
        last = math.floor(end * rate + 1e-9)
        return [k / rate for k in range(first, last + 1) if lo <= k / rate <= hi]

    def trajectory(self):
        times = self.output_times()
        return SampledTrajectory(times, self.world.trajectory.sample(times))


#
# Schedules
#


def _run_sequential(pipeline, frames):
    grouper = MultiFrameGrouper(pipeline.cfg.grouping_window)
    for mf in grouper.group(frames):
        kmf = pipeline.track_multiframe(mf)
        if kmf is not None:
            pipeline.map_kmf(kmf)
            pipeline.close_loops(kmf)


class _Worker(threading.Thread):
    """Consumes KMF indices, hands them on, records the first exception"""

    def __init__(self, name, stage, inbox, outbox, done, failed):
        super().__init__(name=name, daemon=True)
        self.stage = stage
        self.inbox = inbox
        self.outbox = outbox
        self.done = done
        self.failed = failed
        self.error = None

    def run(self):
        while True:
            kmf = self.inbox.get()
            if kmf is None:
                if self.outbox is not None:
                    self.outbox.put(None)
                return
            try:
                if not self.failed.is_set():
                    self.stage(kmf)
            except Exception as ex:  # pylint: disable=broad-except
                self.error = ex
                self.failed.set()
            if self.outbox is not None:
                self.outbox.put(kmf)
            else:
                self.done.put(kmf.index)


def _run_threaded(pipeline, frames):
    """Mapping and loop closing on worker threads, one KMF in flight at a time

    Tracking blocks on `done` after every KMF, so stages never overlap and the
    run takes as long as the sequential one. The schedule keeps the stage
    hand-off and locking of a concurrent system with a reproducible result.
    """
    to_mapping, to_loop, done = queue.Queue(), queue.Queue(), queue.Queue()
    failed = threading.Event()
    mapper = _Worker("mapping", pipeline.map_kmf, to_mapping, to_loop, done, failed)
    closer = _Worker("loopclosing", pipeline.close_loops, to_loop, None, done, failed)
    mapper.start()
    closer.start()

    def check():
        for worker in (mapper, closer):
            if worker.error is not None:
                raise worker.error

    try:
        grouper = MultiFrameGrouper(pipeline.cfg.grouping_window)
        for mf in grouper.group(frames):
            kmf = pipeline.track_multiframe(mf)
            if kmf is not None:
                to_mapping.put(kmf)
                index = done.get()
                assert index == kmf.index
                check()
    finally:
        to_mapping.put(None)
        mapper.join()
        closer.join()
    check()


#
# Entry points
#


def load_inputs(cfg):
    if cfg.calibration is None or cfg.observations is None:
        raise ConfigError("paths.calibration and paths.observations are required")
    rig = RigCalibration.load(cfg.calibration)
    cfg.validate(rig)
    frames = read_stream(cfg.observations, rig)
    ground_truth = None if cfg.groundtruth is None else read_tum(cfg.groundtruth)
    return rig, frames, ground_truth


def write_outputs(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    outputs = {"trajectory": os.path.join(out_dir, "trajectory.tum")}
    traj = result.trajectory
    write_tum(outputs["trajectory"], traj.times, traj.poses)
    if result.report is not None:
        outputs["metrics"] = os.path.join(out_dir, "metrics.csv")
        result.report.write_csv(outputs["metrics"])
    return outputs


def run(cfg, rig=None, frames=None, ground_truth=None):
    """Run the engine over a frame stream, RunResult with trajectory and metrics

    rig, frames and ground_truth are read from cfg's paths when not given.
    """
    if rig is None or frames is None:
        rig, frames, ground_truth = load_inputs(cfg)

    log_file = None if cfg.out_dir is None else os.path.join(cfg.out_dir, "runlog.ndjson")
    if cfg.out_dir is not None:
        os.makedirs(cfg.out_dir, exist_ok=True)

    with RunLog(log_file) as log:
        pipeline = Pipeline(cfg, rig, log)
        status, reason = "completed", ""
        with Timer(cfg.timeit, cfg.mode, "run"):
            try:
                if cfg.schedule == "threaded":
                    _run_threaded(pipeline, frames)
                else:
                    _run_sequential(pipeline, frames)
            except SequenceAborted as ex:
                status, reason = "aborted", ex.stage
                log.event(pipeline.last_time, ex.stage, "aborted", message=str(ex))
                logger.warning("%s", ex)
            except StageFailure as ex:
                status, reason = "aborted", ex.stage
                log.event(pipeline.last_time, ex.stage, "aborted", message=str(ex))
                logger.warning("aborted(%s): %s", ex.stage, ex)

        trajectory = pipeline.trajectory()
        report = None
        if ground_truth is not None and len(trajectory):
            report = evaluate(trajectory, ground_truth, success=status == "completed")
        log.event(pipeline.last_time, "pipeline", status, reason=reason, **pipeline.counters)

    result = RunResult(
        status=status,
        reason=reason,
        world=pipeline.world,
        trajectory=trajectory,
        report=report,
        counters=dict(pipeline.counters),
        corrections=pipeline.corrections,
        log=log,
    )
    if cfg.out_dir is not None:
        write_outputs(result, cfg.out_dir)
    logger.info(
        "%s%s: %d multi-frames, %d KMFs, %d loops",
        status,
        f"({reason})" if reason else "",
        pipeline.counters["multi_frames"],
        pipeline.counters["kmfs"],
        pipeline.counters["loops"],
    )
    return result
