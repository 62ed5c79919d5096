"""Forward/inverse kinematics and joint-space interpolation for the 3-DOF arm.

The arm is a base yaw joint that swings a vertical working plane, followed by a
planar two-link chain (shoulder, elbow). Shoulder angle is the elevation of the
upper link above horizontal; the elbow angle is relative to the upper link.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from reflex.errors import ReflexError
from reflex.geometry import Pose, Vec3, dist

JointConfig = tuple[float, float, float]
Waypoint = tuple[JointConfig, Pose]

RESOLUTION = 0.05
_LIMIT_EPS = 1e-12
_REACH_EPS = 1e-12


@dataclass(frozen=True)
class ArmModel:
    agent_id: str
    base: Pose
    link_lengths: tuple[float, float]
    joint_limits: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]
    capsule_radius: float
    reachable_radius: float

    @property
    def max_reach(self) -> float:
        return self.link_lengths[0] + self.link_lengths[1]

    def within_limits(self, q: JointConfig) -> bool:
        return all(lo - _LIMIT_EPS <= v <= hi + _LIMIT_EPS for v, (lo, hi) in zip(q, self.joint_limits))

    def clamp(self, q: JointConfig) -> JointConfig:
        return tuple(min(max(v, lo), hi) for v, (lo, hi) in zip(q, self.joint_limits))  # type: ignore[return-value]


class IKInfeasibleError(ReflexError):
    def __init__(self, agent_id: str, target: Pose, reason: str) -> None:
        super().__init__(f"{agent_id}: IK infeasible ({reason}) for target {target.to_list()}")
        self.agent_id = agent_id
        self.target = target
        self.reason = reason


def link_points(arm: ArmModel, q: JointConfig) -> tuple[Vec3, Vec3, Vec3]:
    """Shoulder, elbow and end-effector positions in the world frame."""
    l1, l2 = arm.link_lengths
    heading = arm.base.yaw + q[0]
    ch, sh = math.cos(heading), math.sin(heading)
    r1 = l1 * math.cos(q[1])
    h1 = l1 * math.sin(q[1])
    r2 = r1 + l2 * math.cos(q[1] + q[2])
    h2 = h1 + l2 * math.sin(q[1] + q[2])
    b = arm.base
    shoulder = (b.x, b.y, b.z)
    elbow = (b.x + r1 * ch, b.y + r1 * sh, b.z + h1)
    ee = (b.x + r2 * ch, b.y + r2 * sh, b.z + h2)
    return shoulder, elbow, ee


def forward_kinematics(arm: ArmModel, q: JointConfig) -> Pose:
    """End-effector pose; yaw is the heading of the working plane."""
    if not all(math.isfinite(v) for v in q):
        raise ValueError(f"joint config must be finite, got {q}")
    _, _, ee = link_points(arm, q)
    return Pose(ee[0], ee[1], ee[2], arm.base.yaw + q[0])


def inverse_kinematics(arm: ArmModel, target: Pose) -> JointConfig:
    """Analytic IK, elbow-down first then elbow-up.

    Raises IKInfeasibleError with reason ``out_of_reach`` or ``joint_limit``.
    """
    l1, l2 = arm.link_lengths
    b = arm.base
    dx, dy, dz = target.x - b.x, target.y - b.y, target.z - b.z
    r = math.hypot(dx, dy)
    heading = math.atan2(dy, dx) if r > 0.0 else b.yaw
    q0 = math.remainder(heading - b.yaw, math.tau)
    d = math.hypot(r, dz)
    if d > l1 + l2 + _REACH_EPS or d < abs(l1 - l2) - _REACH_EPS:
        raise IKInfeasibleError(arm.agent_id, target, "out_of_reach")
    c2 = (d * d - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    c2 = min(1.0, max(-1.0, c2))
    elev = math.atan2(dz, r)
    for sign in (1.0, -1.0):
        q2 = sign * math.acos(c2)
        q1 = elev - math.atan2(l2 * math.sin(q2), l1 + l2 * math.cos(q2))
        q = (q0, q1, q2)
        if arm.within_limits(q):
            return q
    raise IKInfeasibleError(arm.agent_id, target, "joint_limit")


def _sample(arm: ArmModel, a: JointConfig, b: JointConfig, n: int) -> list[Waypoint]:
    out: list[Waypoint] = []
    for i in range(n + 1):
        if i == n:
            q = b
        else:
            t = i / n
            q = (a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t)
        out.append((q, forward_kinematics(arm, q)))
    return out


def max_gap(waypoints: list[Waypoint]) -> float:
    return max(
        (dist(p.position, n.position) for (_, p), (_, n) in zip(waypoints, waypoints[1:])),
        default=0.0,
    )


def interpolate(
    start: JointConfig, end: JointConfig, arm: ArmModel, resolution: float = RESOLUTION
) -> list[Waypoint]:
    """Linear joint-space path whose end-effector steps never exceed ``resolution``."""
    if start == end:
        return [(start, forward_kinematics(arm, start))]
    chord = dist(forward_kinematics(arm, start).position, forward_kinematics(arm, end).position)
    n = max(1, math.ceil(chord / resolution))
    while True:
        wps = _sample(arm, start, end, n)
        gap = max_gap(wps)
        if gap <= resolution:
            return wps
        n = max(n + 1, math.ceil(n * gap / resolution))
