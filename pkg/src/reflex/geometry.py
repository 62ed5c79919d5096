"""Small 3-D vector and planar-pose helpers.

Everything is plain floats and tuples so results stay bit-identical across runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

Vec3 = tuple[float, float, float]


def wrap_angle(a: float) -> float:
    """Normalize an angle into (-pi, pi]."""
    w = math.remainder(a, math.tau)
    if w <= -math.pi:
        w += math.tau
    return w


def add(a: Vec3, b: Vec3) -> Vec3:
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


def sub(a: Vec3, b: Vec3) -> Vec3:
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def scale(a: Vec3, s: float) -> Vec3:
    return (a[0] * s, a[1] * s, a[2] * s)


def dot(a: Vec3, b: Vec3) -> float:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def norm(a: Vec3) -> float:
    return math.sqrt(dot(a, a))


def dist(a: Vec3, b: Vec3) -> float:
    return norm(sub(a, b))


def lerp(a: Vec3, b: Vec3, t: float) -> Vec3:
    return (a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t)


def rotate_z(v: Vec3, yaw: float) -> Vec3:
    c, s = math.cos(yaw), math.sin(yaw)
    return (c * v[0] - s * v[1], s * v[0] + c * v[1], v[2])


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    z: float
    yaw: float = 0.0

    def __post_init__(self) -> None:
        for name in ("x", "y", "z", "yaw"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"pose {name} must be finite, got {v}")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def position(self) -> Vec3:
        return (self.x, self.y, self.z)

    def transform(self, local: Vec3) -> Vec3:
        """Map a point from this pose's local frame into the world frame."""
        return add(self.position, rotate_z(local, self.yaw))

    def inverse_transform(self, world: Vec3) -> Vec3:
        return rotate_z(sub(world, self.position), -self.yaw)

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.z, self.yaw]

    @classmethod
    def from_position(cls, p: Vec3, yaw: float = 0.0) -> Pose:
        return cls(p[0], p[1], p[2], yaw)
