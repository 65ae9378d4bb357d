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

"""Binary descriptor matching and epipolar filtering"""

import logging
from typing import NamedTuple

import numpy as np

from .defaults import get_default
from .errors import TooFewMatches
from .utils import hamming_matrix

logger = logging.getLogger(__name__)


class Match(NamedTuple):
    index_a: int
    index_b: int
    hamming_distance: int


def _best_two(d):
    """Index of the row minimum plus the two smallest values, second = inf if absent"""
    best = np.argmin(d, axis=1)
    d1 = d[np.arange(len(d)), best].astype(float)
    if d.shape[1] > 1:
        d2 = np.partition(d, 1, axis=1)[:, 1].astype(float)
    else:
        d2 = np.full(len(d), np.inf)
    return best, d1, d2


def match_ratio(descs_a, descs_b, ratio=None):
    """Mutual nearest neighbours that pass the ratio test in both directions"""
    ratio = get_default("ratio_test") if ratio is None else ratio
    if len(descs_a) == 0 or len(descs_b) == 0:
        return []

    d = hamming_matrix(descs_a, descs_b)
    best_ab, d1_ab, d2_ab = _best_two(d)
    best_ba, d1_ba, d2_ba = _best_two(d.T)
    pass_ab = d1_ab < ratio * d2_ab
    pass_ba = d1_ba < ratio * d2_ba

    matches = []
    for a, b in enumerate(best_ab):
        if pass_ab[a] and best_ba[b] == a and pass_ba[b]:
            matches.append(Match(a, int(b), int(d[a, b])))
    return matches


#
# Essential matrix
#


def _normalize(x):
    """Similarity moving points to zero mean and sqrt(2) mean distance"""
    mean = x.mean(axis=0)
    scale = np.sqrt(2) / max(np.mean(np.linalg.norm(x - mean, axis=1)), 1e-12)
    t = np.array([[scale, 0, -scale * mean[0]], [0, scale, -scale * mean[1]], [0, 0, 1]])
    xh = np.hstack([x, np.ones((len(x), 1))]) @ t.T
    return xh, t


def eight_point(xa, xb):
    """Essential matrix with xbᵀ E xa = 0 from >= 8 normalized correspondences"""
    ha, ta = _normalize(xa)
    hb, tb = _normalize(xb)
    a = np.einsum("ni,nj->nij", hb, ha).reshape(len(xa), 9)
    _, _, vt = np.linalg.svd(a)
    e = vt[-1].reshape(3, 3)
    e = tb.T @ e @ ta
    u, _, vt = np.linalg.svd(e)
    e = u @ np.diag([1.0, 1.0, 0.0]) @ vt
    return e / max(np.linalg.norm(e), 1e-300)


def epipolar_distances(e, xa, xb, focal_a, focal_b):
    """Symmetric point-to-epipolar-line distance in pixels"""
    ha = np.hstack([xa, np.ones((len(xa), 1))])
    hb = np.hstack([xb, np.ones((len(xb), 1))])
    lb = ha @ e.T  # lines in image b
    la = hb @ e  # lines in image a
    num = np.abs(np.sum(hb * lb, axis=1))
    db = focal_b * num / np.maximum(np.linalg.norm(lb[:, :2], axis=1), 1e-300)
    da = focal_a * num / np.maximum(np.linalg.norm(la[:, :2], axis=1), 1e-300)
    return np.sqrt(0.5 * (da * da + db * db))


def _rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(get_default("seed") if rng is None else rng)


def filter_essential(
    matches,
    kps_a,
    kps_b,
    cam_a,
    cam_b,
    iterations=None,
    threshold_px=None,
    rng=None,
):
    """Matches consistent with a RANSAC fitted essential matrix"""
    iterations = get_default("essential_iterations") if iterations is None else iterations
    threshold_px = (
        get_default("essential_threshold_px") if threshold_px is None else threshold_px
    )
    if len(matches) < 8:
        raise TooFewMatches(f"{len(matches)} matches, essential fit needs 8")

    rng = _rng(rng)
    ia = np.array([m.index_a for m in matches])
    ib = np.array([m.index_b for m in matches])
    xa = cam_a.normalize(np.asarray(kps_a)[ia])
    xb = cam_b.normalize(np.asarray(kps_b)[ib])
    fa = 0.5 * (cam_a.fx + cam_a.fy)
    fb = 0.5 * (cam_b.fx + cam_b.fy)

    best_inliers, best_residual = None, np.inf
    for _ in range(iterations):
        sample = rng.choice(len(matches), 8, replace=False)
        try:
            e = eight_point(xa[sample], xb[sample])
        except np.linalg.LinAlgError:
            continue
        dist = epipolar_distances(e, xa, xb, fa, fb)
        inliers = dist < threshold_px
        count = int(inliers.sum())
        if count == 0:
            continue
        residual = float(dist[inliers].mean())
        if (
            best_inliers is None
            or count > best_inliers.sum()
            or (count == best_inliers.sum() and residual < best_residual)
        ):
            best_inliers, best_residual = inliers, residual

    if best_inliers is None:
        return []

    if best_inliers.sum() >= 8:
        try:
            e = eight_point(xa[best_inliers], xb[best_inliers])
            refit = epipolar_distances(e, xa, xb, fa, fb) < threshold_px
            if refit.sum() >= best_inliers.sum():
                best_inliers = refit
        except np.linalg.LinAlgError:
            pass

    logger.debug("essential filter kept %d of %d matches", best_inliers.sum(), len(matches))
    return [m for m, keep in zip(matches, best_inliers) if keep]


#
# Projection search
#


def search_by_projection(
    predicted, pred_descriptors, keypoints, descriptors, radius_px, max_hamming
):
    """For each predicted pixel, the closest-descriptor keypoint inside the radius

    Returns Matches (prediction index, keypoint index, distance).
    """
    if len(predicted) == 0 or len(keypoints) == 0:
        return []
    predicted = np.asarray(predicted, dtype=float)
    keypoints = np.asarray(keypoints, dtype=float)
    d_px = np.linalg.norm(predicted[:, None, :] - keypoints[None, :, :], axis=2)
    d_hd = hamming_matrix(pred_descriptors, descriptors)
    cost = np.where((d_px <= radius_px) & (d_hd <= max_hamming), d_hd, np.iinfo(np.int32).max)
    matches = []
    used = set()
    order = np.argsort(cost.min(axis=1), kind="stable")
    for i in order:
        j = int(np.argmin(cost[i]))
        if cost[i, j] == np.iinfo(np.int32).max or j in used:
            continue
        used.add(j)
        matches.append(Match(int(i), j, int(cost[i, j])))
    return sorted(matches)
