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

"""Loop detection and continuous-time loop correction

Detection runs three checks on every new KMF: odometry (far enough away in
path, time and KMFs), similarity (bag of words score) and geometry (camera
pairs of the surround ring matched under M yaw scenarios).

Correction optimises the control poses on a pose graph whose edges are
evaluated on the spline, moves map points by the median of their pose
corrections, fuses duplicated points and welds both windows with a bundle
adjustment that keeps the candidate side fixed.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import List, NamedTuple, Tuple

import numpy as np
from cachetools import LRUCache, cachedmethod
from cachetools.keys import hashkey

from .defaults import from_defaults
from .errors import (
    AngleNearPi,
    ConfigError,
    CorrectionFailure,
    MappingFailure,
    NoScenario,
    NumericalFailure,
    TooFewMatches,
)
from .liegroups import Pose, log_map, pose_distance
from .mapping import MappingConfig, bundle_adjust
from .matching import filter_essential, match_ratio, search_by_projection
from .nlls import LMConfig, Problem, ResidualTerm, huber, solve_lm
from .utils import warn

logger = logging.getLogger(__name__)


@dataclass
class LoopConfig:
    loop_cooldown: int = 30
    loop_min_travel: float = 30.0
    loop_min_time: float = 5.0
    loop_min_kmf_gap: int = 30
    similarity_floor: float = 0.01
    similarity_top_fraction: float = 0.9
    loop_min_pairs: int = 2
    loop_min_essential_inliers: int = 20
    loop_min_associations: int = 20
    loop_min_pose_inliers: int = 20
    loop_reproj_threshold_px: float = 3.0
    horn_ransac_iterations: int = 200
    pgo_edge_weight: float = 1.0
    pgo_reg_weight: float = 1.0
    bow_bits: int = 12
    fuse_radius_px: float = 3.0
    fuse_max_hamming: int = 64
    window_size: int = 11
    ratio_test: float = 0.7
    essential_iterations: int = 200
    essential_threshold_px: float = 1.0
    huber_delta: float = 1.0
    seed: int = 0
    solver: LMConfig = field(default_factory=LMConfig)

    @classmethod
    def from_defaults(cls, **overrides):
        cfg = from_defaults(cls, **overrides)
        if "solver" not in overrides:
            cfg.solver = LMConfig.from_defaults()
        return cfg.validate()

    def validate(self):
        for name in (
            "loop_cooldown",
            "loop_min_travel",
            "loop_min_time",
            "loop_min_kmf_gap",
            "similarity_floor",
            "similarity_top_fraction",
            "loop_min_pairs",
            "loop_min_essential_inliers",
            "loop_min_associations",
            "loop_min_pose_inliers",
            "loop_reproj_threshold_px",
            "horn_ransac_iterations",
            "pgo_edge_weight",
            "pgo_reg_weight",
            "bow_bits",
            "fuse_radius_px",
            "fuse_max_hamming",
            "window_size",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"loop.{name} must be positive")
        if self.bow_bits > 24:
            raise ConfigError("loop.bow_bits must be <= 24")
        return self


class CameraPairConstraint(NamedTuple):
    camera_candidate: int
    camera_query: int
    relative: Pose  # candidate body at time_candidate -> query body at time_query
    time_candidate: float
    time_query: float
    inliers: int
    associations: Tuple[Tuple[int, int], ...]  # (query point, candidate point)


@dataclass
class LoopConstraint:
    query: int
    candidate: int
    scenario: int
    pairs: List[CameraPairConstraint]

    @property
    def inliers(self):
        return sum(p.inliers for p in self.pairs)


class Edge(NamedTuple):
    time_a: float
    time_b: float
    relative: Pose  # T_βα
    kind: str


#
# Place recognition
#


class PlaceScorer:
    """Similarity of two KMFs, higher is more similar"""

    def add(self, kmf):
        raise NotImplementedError

    def score(self, kmf_a, kmf_b):
        raise NotImplementedError


class BowScorer(PlaceScorer):
    """TF-IDF bag of words over random bit subsets of binary descriptors, cosine score"""

    def __init__(self, bits=12, seed=0, cache_size=4096):
        rng = np.random.default_rng(seed)
        self.positions = np.sort(rng.choice(256, bits, replace=False))
        self.weights = 1 << np.arange(bits)
        self.document_frequency = Counter()
        self.documents = 0
        self._bags = LRUCache(maxsize=cache_size)

    def words(self, descriptors):
        descs = np.asarray(descriptors, dtype=np.uint8).reshape(-1, 32)
        bits = np.unpackbits(descs, axis=1)[:, self.positions]
        return bits @ self.weights

    @cachedmethod(lambda self: self._bags, key=lambda self, kmf: hashkey(kmf.index))
    def bag(self, kmf):
        descs = [kmf.frames[c].descriptors for c in kmf.camera_ids if len(kmf.frames[c])]
        if not descs:
            return Counter()
        return Counter(self.words(np.vstack(descs)).tolist())

    def add(self, kmf):
        self.documents += 1
        self.document_frequency.update(self.bag(kmf).keys())

    def _idf(self, word):
        df = self.document_frequency.get(word, 0)
        return math.log((self.documents + 1) / (df + 1))

    def _vector(self, bag):
        total = sum(bag.values())
        if total == 0:
            return {}
        return {w: (n / total) * self._idf(w) for w, n in bag.items()}

    def score(self, kmf_a, kmf_b):
        va = self._vector(self.bag(kmf_a))
        vb = self._vector(self.bag(kmf_b))
        dot = sum(v * vb.get(w, 0.0) for w, v in va.items())
        na = math.sqrt(sum(v * v for v in va.values()))
        nb = math.sqrt(sum(v * v for v in vb.values()))
        if na == 0 or nb == 0:
            return 0.0
        return dot / (na * nb)


#
# Detection checks
#


def path_length(traj, first, last):
    poses = traj.control_poses[first : last + 1]
    return sum(
        float(np.linalg.norm(b.translation - a.translation)) for a, b in zip(poses, poses[1:])
    )


def odometry_check(query, candidate, world, cfg):
    gap = query.index - candidate.index
    dt = query.rep_time - candidate.rep_time
    if gap < cfg.loop_min_kmf_gap or dt <= cfg.loop_min_time:
        return False
    return path_length(world.trajectory, candidate.index, query.index) > cfg.loop_min_travel


def similarity_rule(scores, neighbor_min, cfg):
    """Indices of scores above max(floor, neighbour minimum, fraction of top score)"""
    if not scores:
        return []
    top = cfg.similarity_top_fraction * max(scores)
    threshold = max(cfg.similarity_floor, neighbor_min, top)
    return [i for i, s in enumerate(scores) if s > threshold]


def similarity_check(query, candidates, scorer, neighbors, cfg):
    """Candidates surviving the similarity rule, best score first"""
    if not candidates:
        return []
    neighbor_scores = [scorer.score(query, n) for n in neighbors]
    neighbor_min = min(neighbor_scores) if neighbor_scores else 0.0
    scores = [scorer.score(query, c) for c in candidates]
    keep = similarity_rule(scores, neighbor_min, cfg)
    keep = sorted(keep, key=lambda i: (-scores[i], candidates[i].index))
    return [candidates[i] for i in keep]


#
# Geometric check
#


def horn(src, dst):
    """Closed-form rigid alignment dst ≈ R src + t via the unit quaternion method"""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    s = (src - cs).T @ (dst - cd)
    sxx, sxy, sxz = s[0]
    syx, syy, syz = s[1]
    szx, szy, szz = s[2]
    n = np.array(
        [
            [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
            [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
            [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
            [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
        ]
    )
    _, vecs = np.linalg.eigh(n)
    w, x, y, z = vecs[:, -1]
    r = np.array(
        [
            [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
        ]
    )
    return Pose(r, cd - r @ cs)


class _PairData:
    """Associated map points of one camera pair, in the two body frames"""

    def __init__(self, world, query, candidate, cam_q, cam_c, pairs):
        traj = world.trajectory
        fq, fc = query.frames[cam_q], candidate.frames[cam_c]
        self.time_q, self.time_c = fq.time, fc.time
        body_q = traj.evaluate(fq.time).inverse()
        body_c = traj.evaluate(fc.time).inverse()
        self.cam_q = world.rig.camera(cam_q)
        self.cam_c = world.rig.camera(cam_c)
        self.ids = [(pq, pc) for _, _, pq, pc in pairs]
        self.xq = body_q.act(np.array([world.points[pq].position for _, _, pq, _ in pairs]))
        self.xc = body_c.act(np.array([world.points[pc].position for _, _, _, pc in pairs]))
        self.uv_q = fq.keypoints[[kq for kq, _, _, _ in pairs]]
        self.uv_c = fc.keypoints[[kc for _, kc, _, _ in pairs]]

    def errors(self, rel):
        """Max of the two reprojection errors per association"""
        ident = Pose.identity()
        uq, vq = self.cam_q.project_many(rel.act(self.xc), ident)
        uc, vc = self.cam_c.project_many(rel.inverse().act(self.xq), ident)
        e = np.maximum(
            np.linalg.norm(uq - self.uv_q, axis=1), np.linalg.norm(uc - self.uv_c, axis=1)
        )
        e[~(vq & vc)] = np.inf
        return e

    def refine(self, rel, mask, cfg):
        problem = Problem()
        block = problem.add_block(rel.copy(), "pose")
        ident = Pose.identity()
        xc, xq = self.xc[mask], self.xq[mask]
        uv_q, uv_c = self.uv_q[mask], self.uv_c[mask]

        def evaluate(values):
            pose = values[0]
            uq, vq = self.cam_q.project_many(pose.act(xc), ident)
            uc, vc = self.cam_c.project_many(pose.inverse().act(xq), ident)
            r = np.hstack([uv_q - uq, uv_c - uc])
            r[~(vq & vc)] = 1e3
            return r.ravel()

        problem.add_residual(
            ResidualTerm(
                [block], evaluate, loss=huber(cfg.huber_delta), chunk=4, tag="loop pair"
            )
        )
        solve_lm(problem, config=cfg.solver)
        return block.value


def _associate(world, query, candidate, cam_q, cam_c, cfg, rng):
    """Essential inlier matches whose keypoints are linked on both sides"""
    fq, fc = query.frames.get(cam_q), candidate.frames.get(cam_c)
    if fq is None or fc is None:
        return None, 0
    matches = match_ratio(fq.descriptors, fc.descriptors, cfg.ratio_test)
    try:
        matches = filter_essential(
            matches,
            fq.keypoints,
            fc.keypoints,
            world.rig.camera(cam_q),
            world.rig.camera(cam_c),
            cfg.essential_iterations,
            cfg.essential_threshold_px,
            rng,
        )
    except TooFewMatches:
        return None, len(matches)
    if len(matches) < cfg.loop_min_essential_inliers:
        return None, len(matches)
    pairs = []
    for m in matches:
        pq = query.links.get((cam_q, m.index_a))
        pc = candidate.links.get((cam_c, m.index_b))
        if pq is not None and pc is not None:
            pairs.append((m.index_a, m.index_b, pq, pc))
    return pairs, len(matches)


def match_camera_pair(world, query, candidate, cam_q, cam_c, cfg, rng):
    """Relative body pose for one camera pair or None"""
    pairs, _ = _associate(world, query, candidate, cam_q, cam_c, cfg, rng)
    if pairs is None or len(pairs) < cfg.loop_min_associations:
        return None

    data = _PairData(world, query, candidate, cam_q, cam_c, pairs)
    n = len(pairs)
    best, best_count = None, 0
    for _ in range(cfg.horn_ransac_iterations):
        sample = rng.choice(n, 3, replace=False)
        rel = horn(data.xc[sample], data.xq[sample])
        count = int(np.sum(data.errors(rel) < cfg.loop_reproj_threshold_px))
        if count > best_count:
            best, best_count = rel, count
    if best is None or best_count < cfg.loop_min_pose_inliers:
        return None

    mask = data.errors(best) < cfg.loop_reproj_threshold_px
    try:
        refined = data.refine(best, mask, cfg)
    except (NumericalFailure, AngleNearPi):
        refined = best
    mask = data.errors(refined) < cfg.loop_reproj_threshold_px
    if mask.sum() < cfg.loop_min_pose_inliers:
        return None

    return CameraPairConstraint(
        cam_c,
        cam_q,
        refined,
        data.time_c,
        data.time_q,
        int(mask.sum()),
        tuple(pair for pair, keep in zip(data.ids, mask) if keep),
    )


def geometric_check(query, candidate, world, cfg, rng=None):
    """Best of the M yaw scenarios pairing query ring camera j with candidate camera j+s"""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    ring = [c.camera_id for c in world.rig.surround_cameras()]
    m = len(ring)
    best = None
    for s in range(m):
        pairs = []
        for j in range(m):
            cameras = ring[j], ring[(j + s) % m]
            pair = match_camera_pair(world, query, candidate, *cameras, cfg, rng)
            if pair is not None:
                pairs.append(pair)
        if len(pairs) < cfg.loop_min_pairs:
            continue
        constraint = LoopConstraint(query.index, candidate.index, s, pairs)
        if (
            best is None
            or len(pairs) > len(best.pairs)
            or (len(pairs) == len(best.pairs) and constraint.inliers > best.inliers)
        ):
            best = constraint
    if best is None:
        raise NoScenario(f"kmf {query.index} vs {candidate.index}: no scenario matched")
    logger.info(
        "loop kmf %d -> %d: scenario %d, %d pairs, %d inliers",
        query.index,
        candidate.index,
        best.scenario,
        len(best.pairs),
        best.inliers,
    )
    return best


#
# Pose graph
#


class PoseGraph:
    """Loop edges accumulated over all corrections, neighbour edges built on demand

    Neighbour and past-loop edges measure T_βα on the current trajectory, only
    the loop being corrected carries the relative poses of its camera pairs.
    """

    def __init__(self):
        self.loop_times = []  # (t_α, t_β) of committed loops

    @staticmethod
    def _measured(traj, pairs, kind):
        edges = []
        for ta, tb in pairs:
            pa, pb = traj.evaluate(ta), traj.evaluate(tb)
            edges.append(Edge(ta, tb, pb.inverse().compose(pa), kind))
        return edges

    @classmethod
    def neighbor_edges(cls, traj):
        times = traj.rep_times
        return cls._measured(traj, zip(times, times[1:]), "neighbor")

    def past_loop_edges(self, traj):
        return self._measured(traj, self.loop_times, "past-loop")

    @staticmethod
    def constraint_edges(constraint):
        return [
            Edge(p.time_candidate, p.time_query, p.relative, "loop") for p in constraint.pairs
        ]

    def edges(self, traj, constraint=None):
        edges = self.neighbor_edges(traj) + self.past_loop_edges(traj)
        if constraint is not None:
            edges += self.constraint_edges(constraint)
        return edges

    def commit(self, constraint):
        self.loop_times += [(p.time_candidate, p.time_query) for p in constraint.pairs]


def edge_residual(traj, edge, overrides=None):
    """Log(T_βα · T(t_α)⁻¹ · T(t_β))"""
    a = traj.evaluate(edge.time_a, overrides)
    b = traj.evaluate(edge.time_b, overrides)
    return log_map(edge.relative.compose(a.inverse()).compose(b))


def anchor_residual(traj, index, anchor, overrides=None):
    """Log(T_i⁻¹ · T(τ_i))"""
    return log_map(anchor.inverse().compose(traj.evaluate(traj.rep_times[index], overrides)))


def welding_windows(query, candidate, size):
    half = size // 2
    candidate_window = list(range(max(0, candidate.index - half), candidate.index + half + 1))
    query_window = list(range(max(0, query.index - size + 1), query.index + 1))
    candidate_window = [i for i in candidate_window if i < query_window[0]]
    return query_window, candidate_window


def optimize_pose_graph(world, graph, constraint, frozen, cfg):
    """Solve E_rel + E_reg, the trajectory is updated only on success"""
    traj = world.trajectory
    n = len(traj)
    anchors = traj.sample(traj.rep_times)
    problem = Problem()
    blocks = [
        problem.add_block(p.copy(), "pose", frozen=i in frozen)
        for i, p in enumerate(traj.control_poses)
    ]
    loss = huber(cfg.huber_delta)

    def term(indices, fn, weight, tag):
        def evaluate(values):
            return fn(dict(zip(indices, values)))

        return ResidualTerm(
            [blocks[i] for i in indices], evaluate, information=weight, loss=loss, tag=tag
        )

    edges = graph.edges(traj, constraint)
    for edge in edges:
        indices = sorted(
            set(traj.influencing_indices(edge.time_a))
            | set(traj.influencing_indices(edge.time_b))
        )
        problem.add_residual(
            term(
                indices,
                lambda ov, e=edge: edge_residual(traj, e, ov),
                cfg.pgo_edge_weight,
                edge.kind,
            )
        )
    for i in range(n):
        indices = traj.influencing_indices(traj.rep_times[i])
        problem.add_residual(
            term(
                indices,
                lambda ov, i=i: anchor_residual(traj, i, anchors[i], ov),
                cfg.pgo_reg_weight,
                "anchor",
            )
        )

    try:
        result = solve_lm(problem, config=cfg.solver)
    except (NumericalFailure, AngleNearPi) as ex:
        raise CorrectionFailure(f"pose graph optimisation failed: {ex}") from ex
    return {i: b.value for i, b in enumerate(blocks) if not b.frozen}, result, edges


def correct_points(world, old_traj):
    """Move each point by the componentwise median of its per-observation corrections"""
    traj = world.trajectory
    corrections = {}
    moved = 0
    for point_id in world.point_ids():
        point = world.points[point_id]
        if not point.observations:
            continue
        positions = []
        for kmf_id, camera_id, _ in sorted(point.observations):
            t = world.kmfs[kmf_id].frames[camera_id].time
            c = corrections.get(t)
            if c is None:
                c = traj.evaluate(t).compose(old_traj.evaluate(t).inverse())
                corrections[t] = c
            positions.append(c.act(point.position))
        point.position = np.median(np.array(positions), axis=0)
        moved += 1
    return moved


def fuse_points(world, constraint, query_window, candidate_window, cfg):
    """Merge query side duplicates into candidate side points, returns merge count"""
    merged = 0
    for pair in constraint.pairs:
        for pq, pc in pair.associations:
            if pq != pc and pq in world.points and pc in world.points:
                world.merge_points(pc, pq)
                merged += 1

    candidate_ids = set()
    for k in candidate_window:
        candidate_ids |= world.kmfs[k].point_ids()
    candidate_ids = sorted(i for i in candidate_ids if i in world.points)
    if not candidate_ids:
        return merged
    positions = np.array([world.points[i].position for i in candidate_ids])
    descriptors = np.array([world.points[i].descriptor for i in candidate_ids])

    traj = world.trajectory
    for k in query_window:
        kmf = world.kmfs[k]
        for camera_id in kmf.camera_ids:
            frame = kmf.frames[camera_id]
            cam = world.rig.camera(camera_id)
            uv, valid = cam.project_many(positions, traj.evaluate(frame.time))
            valid &= cam.in_image(uv)
            idx = np.flatnonzero(valid)
            matches = search_by_projection(
                uv[idx],
                descriptors[idx],
                frame.keypoints,
                frame.descriptors,
                cfg.fuse_radius_px,
                cfg.fuse_max_hamming,
            )
            for m in matches:
                target = candidate_ids[idx[m.index_a]]
                if target not in world.points:
                    continue
                seen = world.points[target].observations
                if any(o[0] == k and o[1] == camera_id for o in seen):
                    continue
                current = kmf.links.get((camera_id, m.index_b))
                if current == target:
                    continue
                if current is None:
                    world.add_observation(target, (k, camera_id, m.index_b))
                else:
                    world.merge_points(target, current)
                merged += 1
    return merged


@dataclass
class CorrectionResult:
    constraint: LoopConstraint
    initial_cost: float
    cost: float
    moved_points: int
    fused_points: int
    query_shift: float


def correct_loop(constraint, world, graph, cfg, mapping_cfg=None):
    """Pose graph optimisation, map point correction, fusion and welding bundle adjustment"""
    query = world.kmfs[constraint.query]
    candidate = world.kmfs[constraint.candidate]
    query_window, candidate_window = welding_windows(query, candidate, cfg.window_size)
    frozen = set(candidate_window)

    old_traj = world.trajectory.copy()
    poses, result, edges = optimize_pose_graph(world, graph, constraint, frozen, cfg)
    world.trajectory.set_poses(poses)
    graph.commit(constraint)

    shift, _ = pose_distance(
        old_traj.control_poses[query.index],
        world.trajectory.control_poses[query.index],
    )
    moved = correct_points(world, old_traj)
    fused = fuse_points(world, constraint, query_window, candidate_window, cfg)

    mapping_cfg = MappingConfig.from_defaults() if mapping_cfg is None else mapping_cfg
    try:
        window = query_window + candidate_window
        bundle_adjust(world, mapping_cfg, window=window, frozen=frozen)
    except MappingFailure as ex:
        warn(f"welding bundle adjustment rejected: {ex}")

    logger.info(
        "loop corrected kmf %d -> %d: pgo cost %.4g -> %.4g, query moved %.3f m, %d fused",
        constraint.query,
        constraint.candidate,
        result.initial_cost,
        result.cost,
        shift,
        fused,
    )
    return CorrectionResult(constraint, result.initial_cost, result.cost, moved, fused, shift)


#
# Loop closer
#


class LoopCloser:
    def __init__(self, cfg, mapping_cfg=None, scorer=None):
        self.cfg = cfg
        self.mapping_cfg = mapping_cfg
        self.scorer = BowScorer(cfg.bow_bits, cfg.seed) if scorer is None else scorer
        self.graph = PoseGraph()
        self.last_correction = None
        self.rng = np.random.default_rng(cfg.seed)

    def cooling_down(self, query):
        return (
            self.last_correction is not None
            and query.index - self.last_correction < self.cfg.loop_cooldown
        )

    def detect(self, query, world):
        """LoopConstraint for query or None"""
        if self.cooling_down(query):
            return None
        candidates = [
            k for k in world.kmfs[: query.index] if odometry_check(query, k, world, self.cfg)
        ]
        if not candidates:
            return None
        first = max(0, query.index - self.cfg.window_size + 1)
        neighbors = world.kmfs[first : query.index]
        for candidate in similarity_check(query, candidates, self.scorer, neighbors, self.cfg):
            try:
                return geometric_check(query, candidate, world, self.cfg, self.rng)
            except NoScenario as ex:
                logger.debug(str(ex))
        return None

    def process(self, query, world):
        """Add query to the database, detect and correct; CorrectionResult or None"""
        self.scorer.add(query)
        constraint = self.detect(query, world)
        if constraint is None:
            return None
        result = correct_loop(constraint, world, self.graph, self.cfg, self.mapping_cfg)
        self.last_correction = query.index
        return result
