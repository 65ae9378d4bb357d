import json
import os
import tempfile
from dataclasses import replace

import numpy as np
import pytest

from ctmv_slam.cli import main
from ctmv_slam.errors import ConfigError, InitFailure
from ctmv_slam.evaluation import read_tum
from ctmv_slam.mapping import MappingConfig
from ctmv_slam.pipeline import (
    EXIT_ABORTED,
    EXIT_COMPLETED,
    EXIT_INVALID_INPUT,
    Pipeline,
    PipelineConfig,
    initialize,
    run,
)
from ctmv_slam.simulator import write_simulation
from ctmv_slam.worldstate import MultiFrame, WorldState

from synthetic import MyUnitTest, multiframes, perturb, straight, world_from_truth


def scrambled(frame, rng):
    """Same size frame whose keypoints and descriptors match nothing"""
    n = len(frame)
    return replace(
        frame,
        keypoints=np.column_stack([rng.uniform(0, 960, n), rng.uniform(0, 600, n)]),
        descriptors=rng.integers(0, 256, (n, 32), dtype=np.uint8),
    )


class TestInitialize(MyUnitTest):
    @classmethod
    def setUpClass(cls):
        cls.sim = straight(0.3)
        cls.cfg = PipelineConfig.from_defaults()

    def test_first_kmf(self):
        mf = multiframes(self.sim)[0]
        world = WorldState(self.sim.rig)
        kmf = initialize(mf, world, self.cfg, np.random.default_rng(1))
        self.assertEqual(kmf.index, 0)
        self.assertEqual(kmf.rep_time, 0.0)
        self.assertPoseAlmostEqual(world.trajectory.control_poses[0], kmf.pose, 1e-12)

        left = set(self.sim.truth[mf.frames[0].seq].tolist())
        right = set(self.sim.truth[mf.frames[1].seq].tolist())
        covisible = sorted((left & right) - {-1})
        positions = np.array([p.position for p in world.points.values()])
        close = sum(
            np.linalg.norm(positions - self.sim.landmarks[i], axis=1).min() < 0.05
            for i in covisible
        )
        self.assertGreaterEqual(close, 0.95 * len(covisible))
        self.assertGreaterEqual(len(world.points), self.cfg.init_min_points)

    def test_missing_init_camera(self):
        mf = multiframes(self.sim)[0]
        partial = MultiFrame(id=0, frames={0: mf.frames[0], 2: mf.frames[2]}, rep_time=0.0)
        with pytest.raises(InitFailure, match="init pair"):
            initialize(partial, WorldState(self.sim.rig), self.cfg)

    def test_textureless(self):
        mf = multiframes(self.sim)[0]
        few = {
            c: replace(
                f,
                keypoints=f.keypoints[:10],
                levels=f.levels[:10],
                descriptors=f.descriptors[:10],
            )
            for c, f in mf.frames.items()
        }
        world = WorldState(self.sim.rig)
        with pytest.raises(InitFailure):
            initialize(MultiFrame(id=0, frames=few, rep_time=0.0), world, self.cfg)
        self.assertEqual(world.kmfs, [])
        self.assertEqual(world.points, {})


class TestAbort(MyUnitTest):
    def test_consecutive_tracking_failures(self):
        sim = straight(0.8)
        rng = np.random.default_rng(2)
        frames = [
            f if f.time < 0.1 or f.time >= 0.7 else scrambled(f, rng) for f in sim.frames
        ]
        cfg = PipelineConfig.from_defaults(mode="vo")
        result = run(cfg, sim.rig, frames)
        self.assertEqual((result.status, result.reason), ("aborted", "tracking"))
        self.assertEqual(result.exit_code, EXIT_ABORTED)
        failures = result.log.select(stage="tracking", event="failure")
        self.assertEqual(len(failures), cfg.tracking.max_tracking_failures)
        self.assertEqual(result.counters["kmfs"], 1)
        self.assertEqual(result.log.events[-1]["event"], "aborted")

    def test_no_frames(self):
        result = run(PipelineConfig.from_defaults(), straight(0.1).rig, [])
        self.assertTrue(result.completed)
        self.assertEqual(len(result.trajectory), 0)


@pytest.mark.slow
class TestRun(MyUnitTest):
    @classmethod
    def setUpClass(cls):
        cls.sim = straight(1.2)
        cls.gt = cls.sim.sample_ground_truth()
        cls.result = cls.run_once()

    @classmethod
    def run_once(cls, **overrides):
        mapping = MappingConfig.from_defaults(window_size=6, ba_iterations=10)
        cfg = PipelineConfig.from_defaults(mode="vo", mapping=mapping, **overrides)
        return run(cfg, cls.sim.rig, cls.sim.frames, cls.gt)

    def test_noiseless_drive(self):
        result = self.result
        self.assertTrue(result.completed)
        self.assertGreater(result.counters["kmfs"], 2)
        self.assertLess(np.median(result.report.ate.errors), 0.01)
        self.assertEqual(result.world.check_integrity(), [])

    def test_deterministic(self):
        first, second = self.result, self.run_once()
        self.assertEqual(first.trajectory.times, second.trajectory.times)
        for a, b in zip(first.trajectory.poses, second.trajectory.poses):
            np.testing.assert_array_equal(a.matrix(), b.matrix())

    def test_threaded_matches_sequential(self):
        sequential = self.result
        threaded = self.run_once(schedule="threaded")
        self.assertEqual(sequential.counters, threaded.counters)
        for a, b in zip(sequential.trajectory.poses, threaded.trajectory.poses):
            np.testing.assert_array_equal(a.matrix(), b.matrix())


class TestLocalMapping(MyUnitTest):
    def test_points_created_after_bundle_adjustment(self):
        sim = straight(0.8)
        world = world_from_truth(sim, multiframes(sim), [0, 2, 4, 6], min_obs=2)
        last = world.kmfs[-1]
        # the stereo pair of the newest KMF is left for map point creation
        for point_id in list(world.points):
            point = world.points[point_id]
            for obs in [o for o in point.observations if o[0] == last.index and o[1] < 2]:
                world.remove_observation(point_id, obs)
            if len(point.observations) < 2:
                world.remove_map_point(point_id)
        pose = world.trajectory.control_poses[last.index]
        world.trajectory.set_pose(last.index, perturb(pose, np.random.default_rng(4)))
        existing = len(world.points)

        pipeline = Pipeline(PipelineConfig.from_defaults(mode="vo"), sim.rig)
        pipeline.world = world
        pipeline.map_kmf(last)

        payload = pipeline.log.select(stage="mapping", event="kmf_mapped")[-1]["payload"]
        self.assertGreater(payload["created"], 0)
        self.assertEqual(payload["ba_points"], existing)
        truth = sim.ground_truth(last.rep_time)
        self.assertPoseAlmostEqual(truth, world.trajectory.control_poses[last.index], 5e-3)
        new = [p for p in world.points.values() if {o[0] for o in p.observations} == {last.index}]
        self.assertGreater(len(new), 0)
        for point in new:
            d = np.linalg.norm(sim.landmarks - point.position, axis=1).min()
            self.assertLess(d, 0.05)


class TestOutputTimes(MyUnitTest):
    def test_grid(self):
        sim = straight(0.3)
        pipeline = Pipeline(PipelineConfig.from_defaults(), sim.rig)
        self.assertEqual(pipeline.output_times(), [])
        initialize(multiframes(sim)[0], pipeline.world, pipeline.cfg)
        pipeline.world.add_kmf(multiframes(sim)[1], sim.ground_truth(0.1), rep_time=0.1)
        pipeline.last_time = 0.12
        times = pipeline.output_times()
        self.assertEqual(times, [0.0, 0.1])
        self.assertEqual(len(pipeline.trajectory()), 2)


class TestConfig(MyUnitTest):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, document, name="run.json"):
        filename = os.path.join(self.tmp.name, name)
        with open(filename, "w") as fd:
            fd.write(document if isinstance(document, str) else json.dumps(document))
        return filename

    def test_defaults(self):
        cfg = PipelineConfig.from_defaults()
        self.assertEqual((cfg.mode, cfg.schedule, cfg.seed), ("slam", "sequential", 0))
        self.assertEqual(cfg.mapping.window_size, 11)
        self.assertIs(cfg.tracking.solver, cfg.solver)

    def test_invalid(self):
        with pytest.raises(ConfigError, match="mode"):
            PipelineConfig.from_defaults(mode="odometry")
        with pytest.raises(ConfigError, match="schedule"):
            PipelineConfig.from_defaults(schedule="parallel")
        with pytest.raises(ConfigError):
            PipelineConfig.from_defaults(grouping_window=0.0)

    def test_load(self):
        filename = self.write(
            {
                "seed": 4,
                "paths": {"calibration": "calibration.json", "out_dir": "out"},
                "tracking": {"min_inliers": 20},
                "loop": {"loop_cooldown": 10},
            }
        )
        cfg = PipelineConfig.load(filename)
        self.assertEqual(cfg.seed, 4)
        self.assertEqual(cfg.loop.seed, 4)
        self.assertEqual(cfg.tracking.min_inliers, 20)
        self.assertEqual(cfg.loop.loop_cooldown, 10)
        self.assertEqual(cfg.calibration, os.path.join(self.tmp.name, "calibration.json"))
        self.assertIsNone(cfg.observations)

    def test_json_roundtrip(self):
        cfg = PipelineConfig.from_defaults(mode="vo", seed=9)
        back = PipelineConfig.from_json(cfg.to_json())
        self.assertEqual(back.to_json(), cfg.to_json())

    def test_load_errors(self):
        with pytest.raises(ConfigError, match=r"run.json:1:"):
            PipelineConfig.load(self.write("{mode: slam}"))
        with pytest.raises(ConfigError, match="unknown path"):
            PipelineConfig.load(self.write({"paths": {"images": "x"}}))
        with pytest.raises(ConfigError, match="min_inlier"):
            PipelineConfig.load(self.write({"tracking": {"min_inlier": 3}}))
        with pytest.raises(ConfigError, match="JSON object"):
            PipelineConfig.from_json([1, 2])

    def test_overrides(self):
        cfg = PipelineConfig.from_defaults()
        cfg = cfg.with_overrides(seed=5, mode=None, synchronous=True)
        self.assertEqual((cfg.seed, cfg.loop.seed, cfg.mode), (5, 5, "slam"))
        self.assertTrue(cfg.tracking.synchronous)


class TestCli(MyUnitTest):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_simulate_and_evaluate(self):
        data = os.path.join(self.tmp.name, "data")
        code = main(["simulate", "--duration", "0.3", "--seed", "2", "--out-dir", data])
        self.assertEqual(code, EXIT_COMPLETED)
        gt = os.path.join(data, "groundtruth.tum")
        self.assertEqual(len(read_tum(gt)), 31)

        out = os.path.join(self.tmp.name, "eval")
        code = main(["evaluate", "--estimate", gt, "--groundtruth", gt, "--out-dir", out])
        self.assertEqual(code, EXIT_COMPLETED)
        self.assertTrue(os.path.exists(os.path.join(out, "metrics.csv")))

    def test_invalid_input(self):
        missing = os.path.join(self.tmp.name, "missing.json")
        self.assertEqual(main(["run", "--config", missing]), EXIT_INVALID_INPUT)

        config = os.path.join(self.tmp.name, "run.json")
        with open(config, "w") as fd:
            json.dump({"mode": "odometry"}, fd)
        self.assertEqual(main(["run", "--config", config]), EXIT_INVALID_INPUT)

        with open(config, "w") as fd:
            json.dump({"paths": {"calibration": "nowhere.json"}}, fd)
        self.assertEqual(main(["run", "--config", config]), EXIT_INVALID_INPUT)

    def test_bad_tum(self):
        bad = os.path.join(self.tmp.name, "bad.tum")
        with open(bad, "w") as fd:
            fd.write("0.0 1 2\n")
        code = main(["evaluate", "--estimate", bad, "--groundtruth", bad])
        self.assertEqual(code, EXIT_INVALID_INPUT)

    def test_usage(self):
        with pytest.raises(SystemExit) as ex:
            main(["fly"])
        self.assertEqual(ex.value.code, 2)


@pytest.mark.slow
class TestCliRun(MyUnitTest):
    def test_run(self):
        with tempfile.TemporaryDirectory() as tmp:
            paths = write_simulation(straight(0.6, noise_px=0.5), tmp)
            config = os.path.join(tmp, "run.json")
            with open(config, "w") as fd:
                json.dump(
                    {
                        "mode": "vo",
                        "paths": {
                            "calibration": "calibration.json",
                            "observations": "observations.ndjson",
                            "groundtruth": "groundtruth.tum",
                        },
                    },
                    fd,
                )
            out = os.path.join(tmp, "out")
            code = main(["run", "--config", config, "--out-dir", out])
            self.assertEqual(code, EXIT_COMPLETED)
            for name in ("trajectory.tum", "metrics.csv", "runlog.ndjson"):
                self.assertTrue(os.path.exists(os.path.join(out, name)), name)
            self.assertTrue(os.path.exists(paths["groundtruth"]))
