"""Triangulated navigation meshes and channel search.

The free space (square domain minus obstacle polygons) is triangulated with
a constrained Delaunay triangulation; paths are found by A* over triangles
where crossing a triangle costs the distance between the midpoints of its
entry and exit edges, guided by the straight-line distance from the
triangle barycenter to the goal. That guidance can overestimate, so every
search is cross-checked against an exact uniform-cost search and falls back
to it on the (rare) mismatch.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import shapely
from shapely.geometry import LineString, Point, Polygon, box

from .errors import ConfigError, SwarmNavError
from .geom import Vec2

log = logging.getLogger(__name__)

MAP_HEADER = "swarmnav-map v1"

# minimum separation between any two input vertices
MIN_VERTEX_SEPARATION = 1e-9


class MeshBuildError(SwarmNavError):
    """Input map cannot be triangulated; message names the offending feature."""


class LocationError(SwarmNavError):
    """Query point lies outside the free space."""


class UnreachableError(SwarmNavError):
    """No channel of adjacent triangles connects start and goal."""


@dataclass
class MapSpec:
    """Square domain [0, side] x [0, side] with simple polygonal obstacles."""

    domain_side: float
    obstacles: List[List[Vec2]] = field(default_factory=list)

    def domain_polygon(self) -> Polygon:
        return box(0.0, 0.0, self.domain_side, self.domain_side)

    def obstacle_polygons(self) -> List[Polygon]:
        return [Polygon([v.as_tuple() for v in poly]) for poly in self.obstacles]

    def free_polygon(self):
        polys = self.obstacle_polygons()
        if not polys:
            return self.domain_polygon()
        return self.domain_polygon().difference(shapely.union_all(polys))

    def inflated(self, margin: float) -> "MapSpec":
        """Map of the space reachable by a disc center of radius `margin`.

        Obstacles are offset outward with mitered corners and a wall strip of
        the same width is added along the domain boundary; overlapping
        offsets are merged. margin 0 returns an identical copy.
        """
        if margin < 0:
            raise ConfigError(f"inflation margin must be >= 0, got {margin}")
        if margin == 0:
            return MapSpec(self.domain_side, [list(p) for p in self.obstacles])
        side = self.domain_side
        domain = self.domain_polygon()
        grown = [p.buffer(margin, join_style="mitre") for p in self.obstacle_polygons()]
        frame = domain.difference(box(margin, margin, side - margin, side - margin))
        merged = shapely.union_all(grown + [frame]).intersection(domain)
        obstacles: List[List[Vec2]] = []
        parts = merged.geoms if merged.geom_type == "MultiPolygon" else [merged]
        for part in parts:
            if part.is_empty or part.area == 0.0:
                continue
            # exterior ring only: enclosed free pockets are unreachable anyway
            ring = list(part.exterior.coords[:-1])
            obstacles.append([Vec2(float(x), float(y)) for x, y in ring])
        return MapSpec(side, obstacles)


@dataclass
class NavMesh:
    """Immutable triangulation of a map's free space.

    Edge e of triangle t runs between vertex columns e and (e+1) % 3;
    adjacency[t, e] is the neighboring triangle across that edge, -1 at the
    free-space boundary.
    """

    map_spec: MapSpec
    vertices: np.ndarray      # (V, 2) float64
    triangles: np.ndarray     # (T, 3) int64, counterclockwise
    adjacency: np.ndarray     # (T, 3) int64
    barycenters: np.ndarray   # (T, 2) float64

    def __post_init__(self):
        self._free = self.map_spec.free_polygon()
        shapely.prepare(self._free)
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        self._tri_a = a
        self._ab = b - a
        self._bc = c - b
        self._ca = a - c
        self._tri_b = b
        self._tri_c = c
        self._area2 = self._ab[:, 0] * (c - a)[:, 1] - self._ab[:, 1] * (c - a)[:, 0]

    @property
    def triangle_count(self) -> int:
        return len(self.triangles)

    def triangle_area(self, t: int) -> float:
        return 0.5 * float(self._area2[t])

    def edge_key(self, t: int, e: int) -> Tuple[int, int]:
        i = int(self.triangles[t, e])
        j = int(self.triangles[t, (e + 1) % 3])
        return (i, j) if i < j else (j, i)

    def edge_midpoint(self, key: Tuple[int, int]) -> Vec2:
        p = self.vertices[key[0]]
        q = self.vertices[key[1]]
        return Vec2(0.5 * (float(p[0]) + float(q[0])), 0.5 * (float(p[1]) + float(q[1])))

    def edge_endpoints(self, key: Tuple[int, int]) -> Tuple[Vec2, Vec2]:
        p = self.vertices[key[0]]
        q = self.vertices[key[1]]
        return Vec2(float(p[0]), float(p[1])), Vec2(float(q[0]), float(q[1]))

    def _signed_slacks(self, p: Vec2) -> np.ndarray:
        # barycentric-style slacks, positive inside; rows (T, 3)
        px, py = p.x, p.y
        d1 = self._ab[:, 0] * (py - self._tri_a[:, 1]) - self._ab[:, 1] * (px - self._tri_a[:, 0])
        d2 = self._bc[:, 0] * (py - self._tri_b[:, 1]) - self._bc[:, 1] * (px - self._tri_b[:, 0])
        d3 = self._ca[:, 0] * (py - self._tri_c[:, 1]) - self._ca[:, 1] * (px - self._tri_c[:, 0])
        return np.stack([d1, d2, d3], axis=1)

    def locate(self, p: Vec2) -> int:
        """Index of the lowest-indexed triangle containing p (boundaries count).

        Raises LocationError when p is outside the free space.
        """
        slacks = self._signed_slacks(p)
        inside = np.all(slacks >= 0.0, axis=1)
        idx = np.nonzero(inside)[0]
        if idx.size:
            return int(idx[0])
        # tolerate rounding on shared edges: slack relative to triangle scale
        rel = slacks / self._area2[:, None]
        near = np.all(rel >= -1e-9, axis=1)
        idx = np.nonzero(near)[0]
        if idx.size:
            return int(idx[0])
        raise LocationError(f"point ({p.x}, {p.y}) is not in the free space")

    def contains_point(self, p: Vec2) -> bool:
        try:
            self.locate(p)
            return True
        except LocationError:
            return False

    def segment_is_free(self, p: Vec2, q: Vec2) -> bool:
        """True iff the straight segment p-q stays inside the free space."""
        if p == q:
            return self._free.covers(Point(p.x, p.y))
        return self._free.covers(LineString([p.as_tuple(), q.as_tuple()]))

    def free_area(self) -> float:
        return float(self._free.area)


@dataclass
class Channel:
    """Ordered adjacent triangles from start to goal.

    portals[k] is the shared edge (vertex-index pair) between triangle k and
    k+1. total_cost sums the entry-midpoint to exit-midpoint distance of
    every triangle that has both, i.e. all but the first and last.
    """

    triangle_indices: List[int]
    portals: List[Tuple[int, int]]
    total_cost: float
    mesh: NavMesh

    def __len__(self) -> int:
        return len(self.triangle_indices)


@dataclass
class Waypoints:
    """Portal midpoints followed by the goal point."""

    points: List[Vec2]
    source_channel: Channel


def _validate_map(spec: MapSpec) -> None:
    if not math.isfinite(spec.domain_side) or spec.domain_side <= 0:
        raise MeshBuildError(f"domain_side must be positive, got {spec.domain_side}")
    all_vertices: List[Tuple[float, float, str]] = [
        (0.0, 0.0, "domain corner"),
        (spec.domain_side, 0.0, "domain corner"),
        (spec.domain_side, spec.domain_side, "domain corner"),
        (0.0, spec.domain_side, "domain corner"),
    ]
    domain = spec.domain_polygon()
    polys = []
    for k, poly in enumerate(spec.obstacles):
        name = f"obstacle {k}"
        if len(poly) < 3:
            raise MeshBuildError(f"{name} has fewer than 3 vertices")
        shp = Polygon([v.as_tuple() for v in poly])
        if shp.area == 0.0:
            raise MeshBuildError(f"{name} has zero area")
        if not shp.is_valid:
            raise MeshBuildError(f"{name} is not a simple polygon")
        if not domain.covers(shp):
            raise MeshBuildError(f"{name} is not contained in the domain")
        for v in poly:
            all_vertices.append((v.x, v.y, name))
        polys.append((name, shp))
    for i in range(len(polys)):
        for j in range(i + 1, len(polys)):
            if polys[i][1].intersection(polys[j][1]).area > 0.0:
                raise MeshBuildError(f"{polys[i][0]} overlaps {polys[j][0]}")
    pts = np.array([(x, y) for x, y, _ in all_vertices])
    for i in range(len(pts)):
        d = np.hypot(pts[i + 1:, 0] - pts[i, 0], pts[i + 1:, 1] - pts[i, 1])
        hits = np.nonzero(d < MIN_VERTEX_SEPARATION)[0]
        if hits.size:
            j = int(hits[0]) + i + 1
            raise MeshBuildError(
                f"duplicate vertices closer than {MIN_VERTEX_SEPARATION}: "
                f"{all_vertices[i][2]} ({pts[i, 0]}, {pts[i, 1]}) and "
                f"{all_vertices[j][2]} ({pts[j, 0]}, {pts[j, 1]})")


def build_navmesh(map_spec: MapSpec) -> NavMesh:
    """Constrained Delaunay triangulation of the map's free space.

    Obstacle boundary edges and the domain boundary are constraint edges;
    triangles inside obstacles are discarded. No interior points are added.
    """
    _validate_map(map_spec)
    free = map_spec.free_polygon()
    if free.is_empty or free.area == 0.0:
        raise MeshBuildError("free space is empty: obstacles cover the whole domain")
    collection = shapely.constrained_delaunay_triangles(free)
    vertex_index: Dict[Tuple[float, float], int] = {}
    vertices: List[Tuple[float, float]] = []
    triangles: List[Tuple[int, int, int]] = []
    for tri in collection.geoms:
        coords = list(tri.exterior.coords[:-1])
        if len(coords) != 3:
            raise MeshBuildError(f"triangulator produced a non-triangle: {tri.wkt}")
        ax, ay = coords[0]
        bx, by = coords[1]
        cx, cy = coords[2]
        area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area2 == 0.0:
            raise MeshBuildError(f"triangulator produced a degenerate triangle: {tri.wkt}")
        if area2 < 0.0:
            coords = [coords[0], coords[2], coords[1]]
        idx = []
        for x, y in coords:
            key = (float(x), float(y))
            if key not in vertex_index:
                vertex_index[key] = len(vertices)
                vertices.append(key)
            idx.append(vertex_index[key])
        triangles.append((idx[0], idx[1], idx[2]))
    tri_arr = np.array(triangles, dtype=np.int64)
    vert_arr = np.array(vertices, dtype=np.float64)

    edge_owners: Dict[Tuple[int, int], List[Tuple[int, int]]] = {}
    for t, (i, j, k) in enumerate(triangles):
        for e, (a, b) in enumerate(((i, j), (j, k), (k, i))):
            key = (a, b) if a < b else (b, a)
            edge_owners.setdefault(key, []).append((t, e))
    adjacency = np.full((len(triangles), 3), -1, dtype=np.int64)
    for key, owners in edge_owners.items():
        if len(owners) > 2:
            raise MeshBuildError(f"edge {key} is shared by {len(owners)} triangles")
        if len(owners) == 2:
            (t1, e1), (t2, e2) = owners
            adjacency[t1, e1] = t2
            adjacency[t2, e2] = t1

    a = vert_arr[tri_arr[:, 0]]
    b = vert_arr[tri_arr[:, 1]]
    c = vert_arr[tri_arr[:, 2]]
    barycenters = (a + b + c) / 3.0
    mesh = NavMesh(map_spec, vert_arr, tri_arr, adjacency, barycenters)

    total = sum(mesh.triangle_area(t) for t in range(mesh.triangle_count))
    if abs(total - free.area) > 1e-6 * max(free.area, 1.0):
        raise MeshBuildError(
            f"triangulation area {total} does not match free-space area {free.area}")
    return mesh


# search state: (triangle index, entry edge key or None for the start triangle)
_State = Tuple[int, Optional[Tuple[int, int]]]


def _reconstruct(mesh: NavMesh, parent: Dict[_State, _State], state: _State,
                 cost: float) -> Channel:
    chain: List[_State] = [state]
    while chain[-1] in parent:
        chain.append(parent[chain[-1]])
    chain.reverse()
    tris = [s[0] for s in chain]
    portals = [s[1] for s in chain[1:]]
    return Channel(tris, portals, cost, mesh)


def _channel_search(mesh: NavMesh, start_tri: int, goal_tri: int, goal: Vec2,
                    use_heuristic: bool) -> Optional[Channel]:
    counter = itertools.count()
    start_state: _State = (start_tri, None)
    dist: Dict[_State, float] = {start_state: 0.0}
    parent: Dict[_State, _State] = {}
    gx, gy = goal.x, goal.y

    def heuristic(t: int) -> float:
        if not use_heuristic:
            return 0.0
        bx, by = mesh.barycenters[t]
        return math.hypot(bx - gx, by - gy)

    heap: List[Tuple[float, int, int, int, float, _State]] = []
    heapq.heappush(heap, (heuristic(start_tri), 1, start_tri, next(counter), 0.0, start_state))
    while heap:
        _, length, tri, _, g, state = heapq.heappop(heap)
        if g > dist.get(state, math.inf):
            continue
        if tri == goal_tri:
            return _reconstruct(mesh, parent, state, g)
        entry = state[1]
        entry_mid = mesh.edge_midpoint(entry) if entry is not None else None
        for e in range(3):
            nb = int(mesh.adjacency[tri, e])
            if nb < 0:
                continue
            key = mesh.edge_key(tri, e)
            if entry_mid is None:
                w = 0.0
            else:
                w = entry_mid.distance_to(mesh.edge_midpoint(key))
            ng = g + w
            nstate: _State = (nb, key)
            if ng < dist.get(nstate, math.inf):
                dist[nstate] = ng
                parent[nstate] = state
                heapq.heappush(
                    heap, (ng + heuristic(nb), length + 1, nb, next(counter), ng, nstate))
    return None


def astar_channel(mesh: NavMesh, start: Vec2, goal: Vec2, verify: bool = True) -> Channel:
    """Minimum-cost channel of adjacent triangles from start to goal.

    Ties are broken by channel length, then by triangle index, so the result
    is deterministic. With verify=True (default) the barycenter-guided search
    is checked against an exact uniform-cost search; a costlier result is
    logged and replaced, so returned channels are always optimal.
    """
    start_tri = mesh.locate(start)
    goal_tri = mesh.locate(goal)
    if start_tri == goal_tri:
        return Channel([start_tri], [], 0.0, mesh)
    found = _channel_search(mesh, start_tri, goal_tri, goal, use_heuristic=True)
    if found is None:
        raise UnreachableError(
            f"no channel from ({start.x}, {start.y}) to ({goal.x}, {goal.y})")
    if verify:
        exact = _channel_search(mesh, start_tri, goal_tri, goal, use_heuristic=False)
        assert exact is not None
        if found.total_cost > exact.total_cost + 1e-12:
            log.warning(
                "guided channel search returned cost %.12g, exact optimum %.12g; "
                "using the exact channel", found.total_cost, exact.total_cost)
            found = exact
    return found


def channel_waypoints(channel: Channel, start: Vec2, goal: Vec2) -> Waypoints:
    """Portal midpoints of the channel followed by the goal.

    A single-triangle channel yields [goal].
    """
    mesh = channel.mesh
    first = channel.triangle_indices[0]
    last = channel.triangle_indices[-1]
    for name, tri, p in (("start", first, start), ("goal", last, goal)):
        slack = mesh._signed_slacks(p)[tri] / mesh._area2[tri]
        if np.min(slack) < -1e-9:
            raise ValueError(f"{name} point is not inside channel triangle {tri}")
    points = [mesh.edge_midpoint(p) for p in channel.portals]
    points.append(goal)
    return Waypoints(points, channel)


def shortest_length_estimate(mesh: NavMesh, start: Vec2, goal: Vec2) -> float:
    """Planner path length from start to goal, ignoring other agents.

    Returns the straight-line distance whenever the direct segment stays in
    free space (always true in an obstacle-free map); otherwise the length of
    the portal-midpoint polyline found by the channel search.
    """
    if start == goal:
        mesh.locate(start)
        return 0.0
    if mesh.segment_is_free(start, goal):
        mesh.locate(start)  # still reject points outside the free space
        return start.distance_to(goal)
    channel = astar_channel(mesh, start, goal)
    points = channel_waypoints(channel, start, goal).points
    length = 0.0
    prev = start
    for p in points:
        length += prev.distance_to(p)
        prev = p
    return length


def save_map(spec: MapSpec, path: str) -> None:
    lines = [MAP_HEADER, f"domain_side {spec.domain_side!r}"]
    for poly in spec.obstacles:
        coords = " ".join(f"{v.x!r} {v.y!r}" for v in poly)
        lines.append(f"obstacle {coords}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_map(path: str) -> MapSpec:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != MAP_HEADER:
        raise ConfigError(f"{path}:1: expected header '{MAP_HEADER}'")
    domain_side: Optional[float] = None
    obstacles: List[List[Vec2]] = []
    for n, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        key, values = fields[0], fields[1:]
        if key == "domain_side":
            if len(values) != 1:
                raise ConfigError(f"{path}:{n}: domain_side takes one value")
            domain_side = _parse_float(path, n, values[0])
        elif key == "obstacle":
            if len(values) < 6 or len(values) % 2 != 0:
                raise ConfigError(
                    f"{path}:{n}: obstacle needs an even number (>= 6) of coordinates")
            coords = [_parse_float(path, n, v) for v in values]
            obstacles.append([Vec2(coords[i], coords[i + 1])
                              for i in range(0, len(coords), 2)])
        else:
            raise ConfigError(f"{path}:{n}: unknown key '{key}'")
    if domain_side is None:
        raise ConfigError(f"{path}: missing domain_side")
    return MapSpec(domain_side, obstacles)


def _parse_float(path: str, line: int, token: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ConfigError(f"{path}:{line}: '{token}' is not a number") from None
    if not math.isfinite(value):
        raise ConfigError(f"{path}:{line}: '{token}' is not finite")
    return value
