"""Narrow-phase capsule/sphere collision checks.

Every primitive is a capsule (a sphere is a capsule whose segment has zero
length). Boxes are covered by a small set of circumscribing capsules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

from reflex.geometry import Pose, Vec3, add, dist, dot, lerp, scale, sub


@dataclass(frozen=True)
class Capsule:
    a: Vec3
    b: Vec3
    radius: float


@dataclass(frozen=True)
class Entity:
    """A named collision body made of one or more capsules."""

    name: str
    parts: tuple[Capsule, ...]
    # names of entities this one never collides with (e.g. arm and the object it holds)
    ignore: frozenset[str] = field(default_factory=frozenset)


def sphere(center: Vec3, radius: float) -> Capsule:
    return Capsule(center, center, radius)


def box_capsules(pose: Pose, half_extents: Vec3, max_parts: int = 8) -> tuple[Capsule, ...]:
    """Cover a yawed box with capsules laid along its longest axis."""
    order = sorted(range(3), key=lambda i: (-half_extents[i], i))
    ia, ib, ic = order
    ha, hb, hc = half_extents[ia], half_extents[ib], half_extents[ic]
    n = 1 if hc <= 0 else min(max_parts, max(1, math.ceil(hb / hc - 1e-9)))
    w = hb / n
    radius = math.hypot(w, hc)
    parts = []
    for k in range(n):
        offset = -hb + w * (2 * k + 1)
        p0 = [0.0, 0.0, 0.0]
        p1 = [0.0, 0.0, 0.0]
        p0[ia], p1[ia] = -ha, ha
        p0[ib] = p1[ib] = offset
        parts.append(Capsule(pose.transform(tuple(p0)), pose.transform(tuple(p1)), radius))
    return tuple(parts)


def closest_points(p1: Vec3, q1: Vec3, p2: Vec3, q2: Vec3) -> tuple[Vec3, Vec3]:
    """Closest points between segments p1-q1 and p2-q2 (Ericson, RTCD 5.1.9)."""
    eps = 1e-15
    d1 = sub(q1, p1)
    d2 = sub(q2, p2)
    r = sub(p1, p2)
    a = dot(d1, d1)
    e = dot(d2, d2)
    f = dot(d2, r)
    if a <= eps and e <= eps:
        return p1, p2
    if a <= eps:
        s = 0.0
        t = min(1.0, max(0.0, f / e))
    else:
        c = dot(d1, r)
        if e <= eps:
            t = 0.0
            s = min(1.0, max(0.0, -c / a))
        else:
            b = dot(d1, d2)
            denom = a * e - b * b
            s = min(1.0, max(0.0, (b * f - c * e) / denom)) if denom > eps else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t = 0.0
                s = min(1.0, max(0.0, -c / a))
            elif t > 1.0:
                t = 1.0
                s = min(1.0, max(0.0, (b - c) / a))
    return lerp(p1, q1, s), lerp(p2, q2, t)


def capsule_contact(c1: Capsule, c2: Capsule) -> Vec3 | None:
    """Midpoint of closest approach if the two capsules overlap, else None."""
    x1, x2 = closest_points(c1.a, c1.b, c2.a, c2.b)
    if dist(x1, x2) < c1.radius + c2.radius:
        return scale(add(x1, x2), 0.5)
    return None


def _bounds(e: Entity) -> tuple[Vec3, float]:
    pts = [p for c in e.parts for p in (c.a, c.b)]
    center = scale(
        (sum(p[0] for p in pts), sum(p[1] for p in pts), sum(p[2] for p in pts)), 1.0 / len(pts)
    )
    rad = max(max(dist(c.a, center), dist(c.b, center)) + c.radius for c in e.parts)
    return center, rad


def entity_contact(e1: Entity, e2: Entity) -> Vec3 | None:
    for c1 in e1.parts:
        for c2 in e2.parts:
            hit = capsule_contact(c1, c2)
            if hit is not None:
                return hit
    return None


def check_collision(
    entities: Iterable[Entity], movers: set[str] | None = None
) -> tuple[str, str, Vec3] | None:
    """Lexicographically first colliding pair ``(a, b, position)`` with ``a < b``.

    When ``movers`` is given, only pairs with at least one member in it are tested.
    """
    ents = sorted(entities, key=lambda e: e.name)
    bounds = [_bounds(e) for e in ents]
    for i, ea in enumerate(ents):
        for j in range(i + 1, len(ents)):
            eb = ents[j]
            if movers is not None and ea.name not in movers and eb.name not in movers:
                continue
            if eb.name in ea.ignore or ea.name in eb.ignore:
                continue
            (ca, ra), (cb, rb) = bounds[i], bounds[j]
            if dist(ca, cb) >= ra + rb:
                continue
            hit = entity_contact(ea, eb)
            if hit is not None:
                return ea.name, eb.name, hit
    return None
