"""Scalar 2D geometry kernel: vectors, poses, intersection tests, ray casting.

Everything here is plain 64-bit floating point. Segments and triangles are
treated as closed sets: a point exactly on an edge counts as touching it.
Heading convention throughout the package: counterclockwise positive,
0 = +x axis; "turn left" decreases the heading.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

TWO_PI = 2.0 * math.pi


class InvalidGeometryError(ValueError):
    """Non-finite coordinates or a degenerate shape where one is not allowed."""


@dataclass(frozen=True)
class Vec2:
    """Point or displacement in the plane. Components must be finite."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise InvalidGeometryError(f"non-finite vector ({self.x}, {self.y})")

    def __add__(self, other: "Vec2") -> "Vec2":
        return Vec2(self.x + other.x, self.y + other.y)

    def __sub__(self, other: "Vec2") -> "Vec2":
        return Vec2(self.x - other.x, self.y - other.y)

    def __mul__(self, s: float) -> "Vec2":
        return Vec2(self.x * s, self.y * s)

    __rmul__ = __mul__

    def dot(self, other: "Vec2") -> float:
        return self.x * other.x + self.y * other.y

    def cross(self, other: "Vec2") -> float:
        return self.x * other.y - self.y * other.x

    def norm(self) -> float:
        return math.hypot(self.x, self.y)

    def distance_to(self, other: "Vec2") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_tuple(self) -> Tuple[float, float]:
        return (self.x, self.y)


def normalize_heading(theta: float) -> float:
    """Wrap an angle into [0, 2*pi)."""
    if not math.isfinite(theta):
        raise InvalidGeometryError(f"non-finite heading {theta}")
    wrapped = theta % TWO_PI
    # float modulo of a tiny negative rounds up to the period itself
    return 0.0 if wrapped >= TWO_PI else wrapped


@dataclass(frozen=True)
class Pose:
    """Position plus heading; the heading is normalized on construction."""

    position: Vec2
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", normalize_heading(self.heading))

    def direction(self) -> Vec2:
        return Vec2(math.cos(self.heading), math.sin(self.heading))


class HitKind(Enum):
    STATIC_OBSTACLE = "static_obstacle"
    AGENT = "agent"
    NONE = "none"


@dataclass(frozen=True)
class RayHit:
    """Nearest object along a ray: kind is NONE iff distance == the cast range."""

    distance: float
    kind: HitKind


Segment = Tuple[Vec2, Vec2]
Disc = Tuple[Vec2, float]


def segment_intersection(a1: Vec2, a2: Vec2, b1: Vec2, b2: Vec2) -> Optional[Vec2]:
    """Intersection point of two closed segments, or None.

    Transversal crossings return the crossing point. Collinear overlaps
    return the overlap endpoint nearest to a1.
    """
    r = a2 - a1
    s = b2 - b1
    denom = r.cross(s)
    qp = b1 - a1
    if denom != 0.0:
        t = qp.cross(s) / denom
        u = qp.cross(r) / denom
        if 0.0 <= t <= 1.0 and 0.0 <= u <= 1.0:
            return a1 + r * t
        return None
    # parallel; intersect only if collinear
    if qp.cross(r) != 0.0:
        return None
    rr = r.dot(r)
    if rr == 0.0:
        # a is a single point: lies on b?
        if s.dot(s) == 0.0:
            return a1 if a1 == b1 else None
        return a1 if point_segment_distance(a1, b1, b2) == 0.0 else None
    t0 = (b1 - a1).dot(r) / rr
    t1 = (b2 - a1).dot(r) / rr
    lo, hi = min(t0, t1), max(t0, t1)
    lo = max(lo, 0.0)
    hi = min(hi, 1.0)
    if lo > hi:
        return None
    return a1 + r * lo


def point_in_triangle(p: Vec2, tri: Sequence[Vec2]) -> bool:
    """True iff p is inside or on the boundary of the triangle.

    Raises InvalidGeometryError for zero-area triangles.
    """
    a, b, c = tri
    area2 = (b - a).cross(c - a)
    if area2 == 0.0:
        raise InvalidGeometryError(f"degenerate triangle {a}, {b}, {c}")
    sign = 1.0 if area2 > 0.0 else -1.0
    d1 = (b - a).cross(p - a) * sign
    d2 = (c - b).cross(p - b) * sign
    d3 = (a - c).cross(p - c) * sign
    return d1 >= 0.0 and d2 >= 0.0 and d3 >= 0.0


def point_in_polygon(p: Vec2, vertices: Sequence[Vec2]) -> bool:
    """Even-odd test, boundary-inclusive."""
    n = len(vertices)
    inside = False
    for i in range(n):
        v1 = vertices[i]
        v2 = vertices[(i + 1) % n]
        if point_segment_distance(p, v1, v2) == 0.0:
            return True
        if (v1.y > p.y) != (v2.y > p.y):
            x_cross = v1.x + (p.y - v1.y) / (v2.y - v1.y) * (v2.x - v1.x)
            if p.x < x_cross:
                inside = not inside
    return inside


def point_segment_distance(p: Vec2, s1: Vec2, s2: Vec2) -> float:
    """Distance from a point to a closed segment."""
    d = s2 - s1
    dd = d.dot(d)
    if dd == 0.0:
        return p.distance_to(s1)
    t = (p - s1).dot(d) / dd
    t = min(1.0, max(0.0, t))
    return p.distance_to(s1 + d * t)


def ray_segment_distance(origin: Vec2, direction: Vec2,
                         s1: Vec2, s2: Vec2) -> Optional[float]:
    """Parameter t >= 0 where origin + t*direction meets the segment, or None."""
    e = s2 - s1
    denom = direction.cross(e)
    w = s1 - origin
    if denom != 0.0:
        t = w.cross(e) / denom
        u = w.cross(direction) / denom
        if t >= 0.0 and 0.0 <= u <= 1.0:
            return t
        return None
    if w.cross(direction) != 0.0:
        return None
    # collinear segment: nearest endpoint ahead of the origin
    t1 = w.dot(direction)
    t2 = (s2 - origin).dot(direction)
    candidates = [t for t in (t1, t2) if t >= 0.0]
    if not candidates:
        return None
    if min(t1, t2) <= 0.0 <= max(t1, t2):
        return 0.0
    return min(candidates)


def ray_disc_distance(origin: Vec2, direction: Vec2,
                      center: Vec2, radius: float) -> Optional[float]:
    """Smallest t >= 0 where origin + t*direction meets the disc boundary."""
    m = origin - center
    b = m.dot(direction)
    c = m.dot(m) - radius * radius
    disc = b * b - c
    if disc < 0.0:
        return None
    sq = math.sqrt(disc)
    t = -b - sq
    if t < 0.0:
        t = -b + sq
    return t if t >= 0.0 else None


def ray_cast(origin: Vec2, direction: Vec2, max_range: float,
             obstacles: Sequence[Segment], agents: Sequence[Disc]) -> RayHit:
    """Nearest hit along a unit-direction ray, censored at max_range.

    The casting agent's own disc must be excluded from `agents`. Hits at
    exactly max_range are censored to (max_range, NONE) so the RayHit
    invariant (kind NONE iff distance == max_range) holds.
    """
    if not math.isfinite(max_range) or max_range <= 0.0:
        raise InvalidGeometryError(f"invalid max_range {max_range}")
    if abs(direction.norm() - 1.0) > 1e-9:
        raise InvalidGeometryError(f"direction {direction} is not unit length")
    best = max_range
    kind = HitKind.NONE
    for s1, s2 in obstacles:
        t = ray_segment_distance(origin, direction, s1, s2)
        if t is not None and t < best:
            best, kind = t, HitKind.STATIC_OBSTACLE
    for center, radius in agents:
        if not math.isfinite(radius) or radius <= 0.0:
            raise InvalidGeometryError(f"invalid disc radius {radius}")
        t = ray_disc_distance(origin, direction, center, radius)
        if t is not None and t < best:
            best, kind = t, HitKind.AGENT
    return RayHit(best, kind)
