"""SE(2) kinematics and the range-bearing sensor model.

State conventions used across the package:

* pose   ``[x, y, theta]`` (m, m, rad), theta in ``(-pi, pi]``
* control ``[v, omega]`` (m/s, rad/s)
* landmark / point ``[x, y]`` (m)
* measurement ``[range, bearing]`` (m, rad)

The scalar functions take the small value types below; the ``*_batch``
variants take stacked arrays and are what the SLAM backend uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap an angle (scalar or array) into ``(-pi, pi]``."""
    if np.ndim(a) == 0:
        a = float(a)
        if not math.isfinite(a):
            raise ValueError(f"cannot wrap non-finite angle {a!r}")
        r = a - TWO_PI * math.floor((a + math.pi) / TWO_PI)
        return r + TWO_PI if r <= -math.pi else r
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("cannot wrap non-finite angles")
    r = a - TWO_PI * np.floor((a + math.pi) / TWO_PI)
    return np.where(r <= -math.pi, r + TWO_PI, r)


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @classmethod
    def from_array(cls, a) -> "Pose2":
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Control:
    v: float
    omega: float

    def to_array(self) -> np.ndarray:
        return np.array([self.v, self.omega])


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class RangeBearing:
    range: float
    bearing: float

    def __post_init__(self):
        if self.range < 0:
            raise ValueError(f"negative range {self.range}")
        object.__setattr__(self, "bearing", wrap_angle(self.bearing))

    def to_array(self) -> np.ndarray:
        return np.array([self.range, self.bearing])


def motion_model(pose: Pose2, u: Control, dt: float) -> Pose2:
    """Forward-Euler unicycle step; position moves along the pre-update heading."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return Pose2(
        pose.x + u.v * math.cos(pose.theta) * dt,
        pose.y + u.v * math.sin(pose.theta) * dt,
        pose.theta + u.omega * dt,
    )


def motion_jacobian(pose: Pose2, u: Control, dt: float) -> np.ndarray:
    """d motion_model / d pose, 3x3."""
    J = np.eye(3)
    J[0, 2] = -u.v * math.sin(pose.theta) * dt
    J[1, 2] = u.v * math.cos(pose.theta) * dt
    return J


def observation_model(pose: Pose2, lm: Point2) -> RangeBearing:
    dx, dy = lm.x - pose.x, lm.y - pose.y
    r = math.hypot(dx, dy)
    if r == 0.0:
        raise ValueError("landmark coincides with the sensor; bearing undefined")
    return RangeBearing(r, wrap_angle(math.atan2(dy, dx) - pose.theta))


def observation_jacobians(pose: Pose2, lm: Point2) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(d h / d pose (2x3), d h / d landmark (2x2))``."""
    dx, dy = lm.x - pose.x, lm.y - pose.y
    q = dx * dx + dy * dy
    if q == 0.0:
        raise ValueError("landmark coincides with the sensor; bearing undefined")
    r = math.sqrt(q)
    Hx = np.array([[-dx / r, -dy / r, 0.0], [dy / q, -dx / q, -1.0]])
    Hm = np.array([[dx / r, dy / r], [-dy / q, dx / q]])
    return Hx, Hm


def inverse_observation(pose: Pose2, z: RangeBearing) -> Point2:
    """Landmark position that would produce ``z`` from ``pose``."""
    a = pose.theta + z.bearing
    return Point2(pose.x + z.range * math.cos(a), pose.y + z.range * math.sin(a))


# ---------------------------------------------------------------------------
# batched forms: leading axis indexes independent evaluations
# ---------------------------------------------------------------------------


def motion_model_batch(poses: np.ndarray, controls: np.ndarray, dt: float) -> np.ndarray:
    th = poses[:, 2]
    out = np.empty_like(poses, dtype=float)
    out[:, 0] = poses[:, 0] + controls[:, 0] * np.cos(th) * dt
    out[:, 1] = poses[:, 1] + controls[:, 0] * np.sin(th) * dt
    out[:, 2] = wrap_angle(th + controls[:, 1] * dt)
    return out


def motion_jacobian_batch(poses: np.ndarray, controls: np.ndarray, dt: float) -> np.ndarray:
    n = poses.shape[0]
    J = np.zeros((n, 3, 3))
    J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = 1.0
    J[:, 0, 2] = -controls[:, 0] * np.sin(poses[:, 2]) * dt
    J[:, 1, 2] = controls[:, 0] * np.cos(poses[:, 2]) * dt
    return J


def observation_model_batch(poses: np.ndarray, lms: np.ndarray) -> np.ndarray:
    dx = lms[:, 0] - poses[:, 0]
    dy = lms[:, 1] - poses[:, 1]
    return np.stack([np.hypot(dx, dy), wrap_angle(np.arctan2(dy, dx) - poses[:, 2])], axis=1)


def observation_jacobians_batch(poses: np.ndarray, lms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dx = lms[:, 0] - poses[:, 0]
    dy = lms[:, 1] - poses[:, 1]
    q = dx * dx + dy * dy
    if np.any(q == 0.0):
        raise ValueError("landmark coincides with the sensor; bearing undefined")
    r = np.sqrt(q)
    n = poses.shape[0]
    Hx = np.zeros((n, 2, 3))
    Hm = np.zeros((n, 2, 2))
    Hx[:, 0, 0] = -dx / r
    Hx[:, 0, 1] = -dy / r
    Hx[:, 1, 0] = dy / q
    Hx[:, 1, 1] = -dx / q
    Hx[:, 1, 2] = -1.0
    Hm[:, 0, 0] = dx / r
    Hm[:, 0, 1] = dy / r
    Hm[:, 1, 0] = -dy / q
    Hm[:, 1, 1] = dx / q
    return Hx, Hm


def inverse_observation_batch(poses: np.ndarray, z: np.ndarray) -> np.ndarray:
    a = poses[:, 2] + z[:, 1]
    return np.stack([poses[:, 0] + z[:, 0] * np.cos(a), poses[:, 1] + z[:, 0] * np.sin(a)], axis=1)


def se2_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Relative transform ``a^-1 * b`` for stacked poses ``(n, 3)``."""
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    dx = b[..., 0] - a[..., 0]
    dy = b[..., 1] - a[..., 1]
    return np.stack([c * dx + s * dy, -s * dx + c * dy, wrap_angle(b[..., 2] - a[..., 2])], axis=-1)
