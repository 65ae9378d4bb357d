import json
import os
import tempfile
import unittest

import numpy as np
import pytest

from ctmv_slam.errors import EmptyWindow, StreamFormatError
from ctmv_slam.liegroups import Pose
from ctmv_slam.simulator import make_rig
from ctmv_slam.utils import descriptor_to_hex, hamming
from ctmv_slam.worldstate import (
    CameraFrame,
    MultiFrameGrouper,
    WorldState,
    group_multiframe,
    read_stream,
    reobservation_ratio,
    write_stream,
)


class MyUnitTest(unittest.TestCase):
    def _assertTupleAlmostEquals(self, expected, actual, places, msg=None):
        for i, j in zip(actual, expected):
            self.assertAlmostEqual(i, j, places, msg=msg)


def frame(camera_id, t, n=0, seq=0, rng=None):
    rng = rng or np.random.default_rng(seq)
    return CameraFrame(
        camera_id=camera_id,
        time=t,
        keypoints=rng.uniform(10, 500, (n, 2)),
        levels=np.zeros(n, dtype=int),
        descriptors=rng.integers(0, 256, (n, 32), dtype=np.uint8),
        seq=seq,
    )


def frames_at(times):
    return [frame(i, t, seq=i) for i, t in enumerate(times)]


class TestGrouping(MyUnitTest):
    def test_odd_count(self):
        times = [0.0, 0.01, 0.02, 0.04, 0.06, 0.08, 0.09]
        mfs = group_multiframe(frames_at(times), 0.1)
        self.assertEqual(len(mfs), 1)
        self.assertAlmostEqual(mfs[0].rep_time, 0.04, 15)
        self.assertEqual(mfs[0].camera_ids, list(range(7)))

    def test_even_count(self):
        mfs = group_multiframe(frames_at([0.0, 0.05]), 0.1)
        self.assertAlmostEqual(mfs[0].rep_time, 0.025, 15)

    def test_split_at_largest_gap(self):
        times = [0.0, 0.02, 0.04, 0.1, 0.13, 0.15]
        mfs = group_multiframe(frames_at(times), 0.1)
        self.assertEqual([m.camera_ids for m in mfs], [[0, 1, 2], [3, 4, 5]])
        self.assertEqual([m.id for m in mfs], [0, 1])
        # the cut with the largest gap is the only one leaving both sides in the window
        spans = [
            max(times[:c][-1] - times[0], times[-1] - times[c])
            for c in range(1, len(times))
        ]
        self.assertEqual(int(np.argmin(spans)) + 1, 3)

    def test_repeated_camera(self):
        times = [0.0, 0.02, 0.04, 0.06, 0.08]
        frames = [frame(i % 3, t, seq=i) for i, t in enumerate(times)]
        with self.assertLogs("ctmv_slam.worldstate", level="WARNING") as logs:
            mfs = group_multiframe(frames, 0.1)
        self.assertIn("camera 0 fired twice", logs.output[0])
        self.assertEqual([m.camera_ids for m in mfs], [[0, 1, 2], [0, 1]])
        self.assertEqual([f.seq for m in mfs for f in m.frames.values()], [0, 1, 2, 3, 4])
        self.assertAlmostEqual(mfs[1].rep_time, 0.07, 12)

    def test_empty(self):
        with pytest.raises(EmptyWindow):
            group_multiframe([], 0.1)

    def test_streaming(self):
        times = [0.0, 0.01, 0.02, 0.1, 0.11, 0.12]
        frames = [frame(i % 3, t, seq=i) for i, t in enumerate(times)]
        mfs = list(MultiFrameGrouper(0.1).group(frames))
        self.assertEqual(len(mfs), 2)
        self.assertAlmostEqual(mfs[1].rep_time, 0.11, 15)
        self.assertEqual([f.seq for f in mfs[1].frames.values()], [3, 4, 5])

    def test_streaming_out_of_order(self):
        grouper = MultiFrameGrouper(0.1)
        grouper.push(frame(0, 0.5))
        with pytest.raises(StreamFormatError, match="out of order"):
            grouper.push(frame(1, 0.4))


class TestStream(MyUnitTest):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.filename = os.path.join(self.tmp.name, "observations.ndjson")

    def tearDown(self):
        self.tmp.cleanup()

    def test_write_read(self):
        frames = [frame(0, 0.0, 5, seq=0), frame(1, 0.02, 3, seq=1)]
        write_stream(frames, self.filename)
        back = list(read_stream(self.filename, make_rig()))
        self.assertEqual([f.seq for f in back], [0, 1])
        np.testing.assert_array_equal(back[0].descriptors, frames[0].descriptors)
        np.testing.assert_allclose(back[1].keypoints, frames[1].keypoints)

    def _write(self, records):
        with open(self.filename, "w") as fd:
            for r in records:
                fd.write((r if isinstance(r, str) else json.dumps(r)) + "\n")

    def test_missing_field(self):
        good = frame(0, 0.0, 1).to_record()
        bad = dict(good)
        del bad["t"]
        self._write([good, bad])
        with pytest.raises(StreamFormatError, match=r"observations.ndjson:2:"):
            list(read_stream(self.filename))

    def test_bad_json(self):
        self._write(["{not json"])
        with pytest.raises(StreamFormatError, match=r":1:"):
            list(read_stream(self.filename))

    def test_short_descriptor(self):
        record = frame(0, 0.0, 1).to_record()
        record["descriptors"] = ["abcd"]
        self._write([record])
        with pytest.raises(StreamFormatError):
            list(read_stream(self.filename))

    def test_count_mismatch(self):
        record = frame(0, 0.0, 2).to_record()
        record["descriptors"] = record["descriptors"][:1]
        self._write([record])
        with pytest.raises(StreamFormatError, match="descriptors"):
            list(read_stream(self.filename))

    def test_outside_image(self):
        record = frame(0, 0.0, 1).to_record()
        record["keypoints"] = [[5000.0, 10.0, 0]]
        self._write([record])
        with pytest.raises(StreamFormatError, match="outside"):
            list(read_stream(self.filename, make_rig()))


class TestReobservation(MyUnitTest):
    def test_all(self):
        links = [(c, p) for p in range(10) for c in (0, 1)]
        self.assertEqual(reobservation_ratio(range(10), links), 1.0)

    def test_none(self):
        self.assertEqual(reobservation_ratio(range(10), []), 0.0)

    def test_counting(self):
        links = [(c, p) for p in range(7) for c in (0, 3)] + [(0, p) for p in range(7, 20)]
        self.assertAlmostEqual(reobservation_ratio(range(20), links), 0.35, 15)


class TestWorldState(MyUnitTest):
    def setUp(self):
        rng = np.random.default_rng(3)
        self.world = WorldState(make_rig())
        for i in range(3):
            frames = [frame(c, 0.1 * i + 0.01 * c, 4, rng=rng) for c in range(3)]
            mf = group_multiframe(frames, 0.1, i)[0]
            self.world.add_kmf(mf, Pose(translation=[i, 0, 0]))

    def test_kmfs(self):
        self.assertEqual([k.index for k in self.world.kmfs], [0, 1, 2])
        self.assertEqual(len(self.world.trajectory), 3)
        self.assertAlmostEqual(self.world.trajectory.rep_times[1], 0.11, 15)

    def test_links(self):
        w = self.world
        p = w.add_map_point([1.0, 2.0, 3.0], [(0, 0, 1), (1, 2, 3)])
        self.assertEqual(w.kmfs[0].links[(0, 1)], p.id)
        self.assertEqual(w.kmfs[1].observations_of(2), [(3, p.id)])
        self.assertEqual(w.check_integrity(), [])
        w.remove_observation(p.id, (0, 0, 1))
        self.assertNotIn((0, 1), w.kmfs[0].links)
        self.assertEqual(w.check_integrity(), [])
        w.remove_map_point(p.id)
        self.assertEqual(w.kmfs[1].links, {})
        self.assertEqual(w.check_integrity(), [])

    def test_relink(self):
        w = self.world
        a = w.add_map_point([0, 0, 1], [(0, 0, 0), (1, 0, 0)])
        b = w.add_map_point([0, 0, 2], [(2, 0, 0)])
        w.add_observation(b.id, (1, 0, 0))
        self.assertEqual(w.points[a.id].observations, {(0, 0, 0)})
        self.assertEqual(w.check_integrity(), [])

    def test_merge(self):
        w = self.world
        a = w.add_map_point([0, 0, 1], [(0, 0, 0), (1, 1, 0)])
        b = w.add_map_point([0, 0, 1], [(1, 1, 2), (2, 2, 1)])
        w.merge_points(a.id, b.id)
        self.assertNotIn(b.id, w.points)
        # (1, 1) already holds an observation of a
        self.assertEqual(w.points[a.id].observations, {(0, 0, 0), (1, 1, 0), (2, 2, 1)})
        self.assertNotIn((1, 2), w.kmfs[1].links)
        self.assertEqual(w.check_integrity(), [])

    def test_medoid(self):
        w = self.world
        obs = [(0, 0, 0), (1, 0, 0), (2, 0, 0)]
        base = w.descriptor_of(obs[0]).copy()
        w.kmfs[1].frames[0].descriptors[0] = base
        w.kmfs[2].frames[0].descriptors[0] = base ^ 1
        p = w.add_map_point([0, 0, 1], obs)
        self.assertEqual(hamming(p.descriptor, base), 0)
        self.assertEqual(descriptor_to_hex(p.descriptor), descriptor_to_hex(base))

    def test_dangling_link(self):
        w = self.world
        w.kmfs[0].links[(0, 0)] = 99
        self.assertEqual(len(w.check_integrity()), 1)

    def test_reset(self):
        self.world.add_map_point([0, 0, 1], [(0, 0, 0)])
        self.world.reset()
        self.assertEqual(self.world.kmfs, [])
        self.assertEqual(self.world.points, {})
        self.assertEqual(len(self.world.trajectory), 0)
