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

"""SO(3) / SE(3) group and algebra operations

Twists are 6-vectors ordered [translational (m), rotational (rad, axis-angle)].
Poses are kept as rotation matrix + translation vector.
"""

import numpy as np

from .errors import AngleNearPi

SMALL_ANGLE = 1e-8
NEAR_PI = 1e-6

# below this angle the closed-form coefficients are replaced by their series
_SERIES_ANGLE = 1e-2


class Pose:
    """Rigid transform x -> R x + t"""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation=None, translation=None):
        self.rotation = (
            np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
        )
        self.translation = (
            np.zeros(3)
            if translation is None
            else np.asarray(translation, dtype=float).reshape(3)
        )

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, matrix):
        m = np.asarray(matrix, dtype=float).reshape(4, 4)
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self):
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other):
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other):
        return self.compose(other)

    def act(self, points):
        """Transform a 3-point or an (n, 3) array of points"""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def copy(self):
        return Pose(self.rotation.copy(), self.translation.copy())

    def __repr__(self):
        t = np.array2string(self.translation, precision=4)
        phi = np.array2string(so3_log(self.rotation, check=False), precision=4)
        return f"Pose(t={t}, φ={phi})"


#
# SO(3)
#


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _coefficients(theta):
    """A = sin θ/θ, B = (1-cos θ)/θ², C = (θ-sin θ)/θ³"""
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        s = np.sin(theta)
        h = np.sin(0.5 * theta)
        a = s / theta
        b = 2.0 * h * h / (theta * theta)
        c = (theta - s) / (theta * theta * theta)
    return a, b, c


def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    k = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    a, b, _ = _coefficients(theta)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(rotation, check=True):
    """Axis-angle vector of a rotation matrix, principal branch

    Raises AngleNearPi within NEAR_PI of π unless check is False.
    """
    r = np.asarray(rotation, dtype=float)
    w = 0.5 * vee(r - r.T)  # sin θ · axis
    s = np.linalg.norm(w)
    c = 0.5 * (np.trace(r) - 1.0)
    theta = np.arctan2(s, c)

    if check and np.pi - theta < NEAR_PI:
        raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi")

    if theta < SMALL_ANGLE:
        return w
    if theta <= 0.5 * np.pi:
        return theta / s * w

    # sin θ loses precision near π, take the axis from the symmetric part
    b = 0.5 * (r + r.T) - c * np.eye(3)  # (1 - cos θ) a aᵀ
    i = int(np.argmax(np.diag(b)))
    axis = b[:, i] / np.sqrt(max(b[i, i], 1e-300) * (1.0 - c))
    axis /= np.linalg.norm(axis)
    if axis @ w < 0:
        axis = -axis
    return theta * axis


def rotation_angle(rotation):
    r = np.asarray(rotation, dtype=float)
    s = np.linalg.norm(0.5 * vee(r - r.T))
    return float(np.arctan2(s, 0.5 * (np.trace(r) - 1.0)))


#
# SE(3)
#


def v_matrix(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    k = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    _, b, c = _coefficients(theta)
    return np.eye(3) + b * k + c * (k @ k)


def v_inverse(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    k = skew(phi)
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        h = np.sin(0.5 * theta)
        d = (1.0 - theta * np.sin(theta) / (4.0 * h * h)) / (theta * theta)
    return np.eye(3) - 0.5 * k + d * (k @ k)


def exp_map(xi):
    """Exponential of a twist [ρ, φ]"""
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), v_matrix(phi) @ rho)


def log_map(pose):
    """Logarithm of a pose, raises AngleNearPi close to the branch cut"""
    phi = so3_log(pose.rotation)
    return np.concatenate([v_inverse(phi) @ pose.translation, phi])


def compose(a, b):
    return a.compose(b)


def inverse(p):
    return p.inverse()


def act(p, x):
    return p.act(x)


def adjoint(pose):
    """Adjoint of a pose for twists ordered [ρ, φ]"""
    adj = np.zeros((6, 6))
    adj[:3, :3] = pose.rotation
    adj[:3, 3:] = skew(pose.translation) @ pose.rotation
    adj[3:, 3:] = pose.rotation
    return adj


def relative(a, b):
    """a⁻¹ b"""
    return a.inverse().compose(b)


def boxplus(xi, pose):
    """Left-multiplicative update Exp(ξ)·T"""
    return exp_map(xi).compose(pose)


def boxminus(a, b):
    """Twist δ with Exp(δ)·b = a"""
    return log_map(a.compose(b.inverse()))


def geodesic(a, b, alpha):
    """a·Exp(α Log(a⁻¹ b)), alpha=0 gives a and alpha=1 gives b"""
    if alpha == 0.0:
        return a.copy()
    return a.compose(exp_map(alpha * log_map(relative(a, b))))


def pose_distance(a, b):
    """Translation (m) and rotation angle (rad) between two poses"""
    rel = relative(a, b)
    return float(np.linalg.norm(rel.translation)), rotation_angle(rel.rotation)


def random_pose(rng, max_translation=1.0, max_angle=np.pi - 1e-3):
    """Uniformly sized random pose, used by the simulator and in tests"""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    phi = axis * rng.uniform(0.0, max_angle)
    return Pose(so3_exp(phi), rng.uniform(-max_translation, max_translation, 3))
