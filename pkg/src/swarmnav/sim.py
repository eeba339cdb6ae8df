"""Deterministic discrete-time multi-agent world.

Agents are unit discs with a speed/heading state. Each step every agent
picks one of six actions: follow the navmesh planner toward its goal, stay,
step forward/backward, or turn in place. All kinematic updates are applied
from the pre-step snapshot, then collisions, arrivals and timeouts are
resolved, rewards assembled, and terminated agents respawn with a fresh
task so the world always exposes a full set of running agents.

Sensing is a ring of range sensors (45 by default, one every 8 degrees)
returning distance and object type per ray. The planner runs on a copy of
the map whose obstacles are inflated by the agent radius, so planned paths
keep physical clearance; sensing and collision use the real map.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ProtocolError, SwarmNavError
from .geom import TWO_PI, HitKind, Pose, RayHit, Vec2, normalize_heading
from .navmesh import (LocationError, MapSpec, NavMesh, Waypoints, astar_channel,
                      build_navmesh, channel_waypoints, shortest_length_estimate)

SCENARIO_HEADER = "swarmnav-scenario v1"
TRAJECTORY_HEADER = "swarmnav-traj v1"

# per-step reward constants
REWARD_NAVIGATE = 0.00005     # granted when the planner action is chosen
REWARD_COLLISION = -0.5
REWARD_ARRIVAL = 1.0
REWARD_STEP_PENALTY = -0.0001

SCENARIO_KINDS = ("basic", "cross_road", "four_wall", "random_obstacle",
                  "circle_transport")

# spawn/respawn rejection-sampling budget per agent
MAX_PLACEMENT_ATTEMPTS = 1000


class OvercrowdedError(SwarmNavError):
    """Could not place an agent without violating the safe distance."""


class Action(IntEnum):
    NAVIGATE = 0
    STAY = 1
    FORWARD = 2
    TURN_LEFT = 3
    TURN_RIGHT = 4
    BACKWARD = 5


class AgentStatus(Enum):
    RUNNING = "running"
    ARRIVED = "arrived"
    COLLIDED = "collided"
    TIMED_OUT = "timed_out"


class CollisionCause(Enum):
    NONE = "none"
    AGENT = "agent"
    OBSTACLE = "obstacle"


# ray kind codes in Observation arrays
KIND_NONE = 0
KIND_OBSTACLE = 1
KIND_AGENT = 2

_KIND_TO_ENUM = {KIND_NONE: HitKind.NONE, KIND_OBSTACLE: HitKind.STATIC_OBSTACLE,
                 KIND_AGENT: HitKind.AGENT}


@dataclass
class WorldConfig:
    map_spec: MapSpec
    agent_count: int
    agent_radius: float = 1.0
    speed: float = 1.0
    turn_rate: float = 1.0
    safe_distance: float = 2.0
    max_steps: int = 10000
    sensor_count: int = 45
    sensor_range: float = 20.0
    seed: int = 0
    baseline_mode: bool = False
    planner_margin: Optional[float] = None   # None: agent_radius; 0: no inflation

    def validate(self) -> None:
        if self.agent_count < 1:
            raise ConfigError(f"agent_count must be >= 1, got {self.agent_count}")
        for name in ("agent_radius", "speed", "turn_rate", "safe_distance",
                     "sensor_range"):
            v = getattr(self, name)
            if not math.isfinite(v) or v <= 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.sensor_count < 1:
            raise ConfigError(f"sensor_count must be >= 1, got {self.sensor_count}")
        if self.map_spec.domain_side < 10.0 * self.safe_distance:
            raise ConfigError(
                f"domain_side {self.map_spec.domain_side} too small: the world "
                f"assumes domain_side >= 10 * safe_distance = {10 * self.safe_distance}")
        if self.planner_margin is not None and self.planner_margin < 0:
            raise ConfigError(f"planner_margin must be >= 0, got {self.planner_margin}")
        # an arriving agent must always net a positive reward over its trial;
        # checked in exact decimal arithmetic because the constants are not
        # binary-representable
        from fractions import Fraction
        arrival = Fraction(str(REWARD_ARRIVAL))
        penalty = Fraction(str(REWARD_STEP_PENALTY))
        if arrival + self.max_steps * penalty < 0:
            raise ConfigError(
                f"max_steps {self.max_steps} breaks the arrival-positivity bound: "
                f"{REWARD_ARRIVAL} + max_steps * {REWARD_STEP_PENALTY} < 0")

    @property
    def observation_width(self) -> int:
        return 2 * self.sensor_count + (2 if self.baseline_mode else 0)

    @property
    def action_count(self) -> int:
        return 5 if self.baseline_mode else 6


@dataclass
class ScenarioSpec:
    """Named task generator plus its geometry parameters.

    Only the parameters relevant to `kind` are used: circle_radius for
    circle_transport; obstacle_* for random_obstacle; corner_box and wall_*
    for four_wall.
    """

    kind: str
    circle_radius: float = 80.0
    obstacle_count: int = 8
    obstacle_min_size: float = 10.0
    obstacle_max_size: float = 40.0
    corner_box: float = 20.0
    wall_length: float = 80.0
    wall_thickness: float = 8.0
    wall_offset: float = 50.0

    def validate(self) -> None:
        if self.kind not in SCENARIO_KINDS:
            raise ConfigError(
                f"unknown scenario kind '{self.kind}', expected one of {SCENARIO_KINDS}")


def scenario_map(scenario: ScenarioSpec, domain_side: float, seed: int = 0) -> MapSpec:
    """Obstacle layout for a scenario; deterministic in (scenario, side, seed)."""
    scenario.validate()
    if scenario.kind == "four_wall":
        cx = cy = domain_side / 2.0
        h = scenario.wall_length / 2.0
        t = scenario.wall_thickness / 2.0
        off = scenario.wall_offset
        rects = [
            (cx - off - t, cy - h, cx - off + t, cy + h),   # west
            (cx + off - t, cy - h, cx + off + t, cy + h),   # east
            (cx - h, cy - off - t, cx + h, cy - off + t),   # south
            (cx - h, cy + off - t, cx + h, cy + off + t),   # north
        ]
        return MapSpec(domain_side, [_rect_poly(*r) for r in rects])
    if scenario.kind == "random_obstacle":
        rng = np.random.default_rng(seed)
        rects: List[Tuple[float, float, float, float]] = []
        margin = 6.0          # keep walls and spawn edges usable
        clearance = 4.0       # minimum gap between obstacles
        attempts = 0
        while len(rects) < scenario.obstacle_count and attempts < 10000:
            attempts += 1
            w = rng.uniform(scenario.obstacle_min_size, scenario.obstacle_max_size)
            h = rng.uniform(scenario.obstacle_min_size, scenario.obstacle_max_size)
            x = rng.uniform(margin, domain_side - margin - w)
            y = rng.uniform(margin, domain_side - margin - h)
            cand = (x, y, x + w, y + h)
            if all(not _rects_close(cand, r, clearance) for r in rects):
                rects.append(cand)
        return MapSpec(domain_side, [_rect_poly(*r) for r in rects])
    return MapSpec(domain_side)


def _rect_poly(x0: float, y0: float, x1: float, y1: float) -> List[Vec2]:
    return [Vec2(x0, y0), Vec2(x1, y0), Vec2(x1, y1), Vec2(x0, y1)]


def _rects_close(a, b, gap: float) -> bool:
    return not (a[2] + gap < b[0] or b[2] + gap < a[0]
                or a[3] + gap < b[1] or b[3] + gap < a[1])


@dataclass
class Observation:
    """One sensor sweep: per-ray distance/kind plus the flat policy input.

    encoded layout: sensor_count normalized distances, then sensor_count
    agent flags, then (baseline mode only) normalized goal distance and
    goal bearing. All entries lie in [0, 1].
    """

    distances: np.ndarray      # (S,) float64, clipped to sensor_range
    kinds: np.ndarray          # (S,) int8 codes: 0 none, 1 obstacle, 2 agent
    hit_agent_ids: np.ndarray  # (S,) int64, -1 where the ray hit no agent
    encoded: np.ndarray        # (observation_width,) float64

    def ray(self, j: int) -> RayHit:
        return RayHit(float(self.distances[j]), _KIND_TO_ENUM[int(self.kinds[j])])


@dataclass
class StepReward:
    navigation: float
    scenario: float
    penalty: float
    total: float = field(init=False)

    def __post_init__(self):
        # fixed association order; tests reproduce this exact expression
        self.total = self.navigation + self.scenario + self.penalty


@dataclass
class AgentState:
    id: int
    pose: Pose
    alpha: Vec2
    beta: Vec2
    spawn_step: int
    distance_traveled: float = 0.0
    baseline_length: float = 0.0
    waypoints_cache: Optional[Waypoints] = None
    waypoint_cursor: int = 0
    status: AgentStatus = AgentStatus.RUNNING


@dataclass
class AgentTransition:
    """Outcome of one step for one agent, captured before any respawn."""

    agent_id: int
    action: Action
    reward: StepReward
    status: AgentStatus
    done: bool
    collision_cause: CollisionCause
    x: float
    y: float
    heading: float
    goal_distance: float
    distance_traveled: float
    baseline_length: float
    steps_taken: int
    alpha: Vec2
    beta: Vec2
    observation: Optional[Observation] = None


@dataclass
class StepOutcome:
    step: int
    transitions: List[AgentTransition]   # ordered by agent id


class World:
    """Mutable simulation state; step_world is the only mutator."""

    def __init__(self, config: WorldConfig, scenario: ScenarioSpec):
        config.validate()
        scenario.validate()
        self.config = config
        self.scenario = scenario
        self.map_spec = config.map_spec
        margin = config.planner_margin
        if margin is None:
            margin = config.agent_radius
        self.planner_map = config.map_spec.inflated(margin)
        self.mesh: NavMesh = build_navmesh(self.planner_map)
        self._planner_clear = not self.planner_map.obstacles
        self.rng = np.random.default_rng(config.seed)
        self.step_count = 0
        self._build_static_geometry()
        self._ray_offsets = TWO_PI * np.arange(config.sensor_count) / config.sensor_count
        self.agents: List[AgentState] = []
        for i in range(config.agent_count):
            self.agents.append(self._spawn_agent(i))

    # ------------------------------------------------------------------
    # static geometry

    def _build_static_geometry(self) -> None:
        side = self.map_spec.domain_side
        corners = [(0.0, 0.0), (side, 0.0), (side, side), (0.0, side)]
        seg_a: List[Tuple[float, float]] = []
        seg_b: List[Tuple[float, float]] = []
        for i in range(4):
            seg_a.append(corners[i])
            seg_b.append(corners[(i + 1) % 4])
        self._polygon_ranges: List[Tuple[int, int]] = []
        for poly in self.map_spec.obstacles:
            start = len(seg_a)
            n = len(poly)
            for i in range(n):
                seg_a.append(poly[i].as_tuple())
                seg_b.append(poly[(i + 1) % n].as_tuple())
            self._polygon_ranges.append((start, len(seg_a)))
        self._seg_a = np.asarray(seg_a, dtype=np.float64)
        self._seg_e = np.asarray(seg_b, dtype=np.float64) - self._seg_a
        # obstacle edges only (boundary walls handled by coordinate checks)
        self._obs_lo = 4
        self._free_diag = side * math.sqrt(2.0)

    # ------------------------------------------------------------------
    # spawning

    def _positions(self) -> np.ndarray:
        return np.array([(a.pose.position.x, a.pose.position.y) for a in self.agents],
                        dtype=np.float64)

    def _point_is_spawnable(self, p: Vec2, skip_id: Optional[int]) -> bool:
        if not self.mesh.contains_point(p):
            return False
        d2min = self.config.safe_distance ** 2
        for other in self.agents:
            if skip_id is not None and other.id == skip_id:
                continue
            q = other.pose.position
            dx = p.x - q.x
            dy = p.y - q.y
            if dx * dx + dy * dy < d2min:
                return False
        return True

    def _random_free_point(self) -> Vec2:
        side = self.map_spec.domain_side
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            p = Vec2(float(self.rng.uniform(0.0, side)), float(self.rng.uniform(0.0, side)))
            if self.mesh.contains_point(p):
                return p
        raise OvercrowdedError("could not sample a point in the free space")

    def _edge_point(self, edge: int) -> Vec2:
        # edges: 0 bottom, 1 right, 2 top, 3 left, inset by the agent radius
        side = self.map_spec.domain_side
        m = self.config.agent_radius
        u = float(self.rng.uniform(m, side - m))
        if edge == 0:
            return Vec2(u, m)
        if edge == 1:
            return Vec2(side - m, u)
        if edge == 2:
            return Vec2(u, side - m)
        return Vec2(m, u)

    def _box_point(self, x0: float, y0: float, x1: float, y1: float) -> Vec2:
        m = self.config.agent_radius
        side = self.map_spec.domain_side
        x0, x1 = max(x0, m), min(x1, side - m)
        y0, y1 = max(y0, m), min(y1, side - m)
        return Vec2(float(self.rng.uniform(x0, x1)), float(self.rng.uniform(y0, y1)))

    def _sample_task(self, agent_id: int) -> Tuple[Vec2, Vec2]:
        """One (start, goal) draw for the scenario; both in planner free space."""
        kind = self.scenario.kind
        side = self.map_spec.domain_side
        if kind == "circle_transport":
            n = self.config.agent_count
            c = side / 2.0
            r = self.scenario.circle_radius
            angle = TWO_PI * agent_id / n
            alpha = Vec2(c + r * math.cos(angle), c + r * math.sin(angle))
            beta = Vec2(c - r * math.cos(angle), c - r * math.sin(angle))
            return alpha, beta
        if kind in ("cross_road", "random_obstacle"):
            edge = int(self.rng.integers(4))
            alpha = self._edge_point(edge)
            beta = self._edge_point((edge + 2) % 4)
            return alpha, beta
        if kind == "four_wall":
            cb = self.scenario.corner_box
            hi_box = (side - cb, side - cb, side, side)
            lo_box = (0.0, 0.0, cb, cb)
            if agent_id % 2 == 0:
                return self._box_point(*hi_box), self._box_point(*lo_box)
            return self._box_point(*lo_box), self._box_point(*hi_box)
        # basic: both ends uniform over the free space
        return self._random_free_point(), self._random_free_point()

    def _draw_task(self, agent_id: int) -> Tuple[Vec2, Vec2]:
        min_sep = 2.0 * self.config.agent_radius
        jitter = self.scenario.kind == "circle_transport"
        for attempt in range(MAX_PLACEMENT_ATTEMPTS):
            alpha, beta = self._sample_task(agent_id)
            if jitter and attempt > 0:
                # fixed circle slot occupied: retry at a nearby angle
                n = self.config.agent_count
                c = self.map_spec.domain_side / 2.0
                r = self.scenario.circle_radius
                base = TWO_PI * agent_id / n
                angle = base + float(self.rng.uniform(-math.pi / n, math.pi / n))
                alpha = Vec2(c + r * math.cos(angle), c + r * math.sin(angle))
                beta = Vec2(c - r * math.cos(angle), c - r * math.sin(angle))
            if alpha.distance_to(beta) <= min_sep:
                continue
            if not self.mesh.contains_point(beta):
                continue
            if self._point_is_spawnable(alpha, skip_id=agent_id):
                return alpha, beta
        raise OvercrowdedError(
            f"no admissible spawn for agent {agent_id} after "
            f"{MAX_PLACEMENT_ATTEMPTS} attempts")

    def _spawn_agent(self, agent_id: int) -> AgentState:
        alpha, beta = self._draw_task(agent_id)
        heading = float(self.rng.uniform(0.0, TWO_PI))
        baseline = shortest_length_estimate(self.mesh, alpha, beta)
        return AgentState(
            id=agent_id,
            pose=Pose(alpha, heading),
            alpha=alpha,
            beta=beta,
            spawn_step=self.step_count,
            baseline_length=baseline,
        )

    def _respawn(self, agent: AgentState) -> None:
        fresh = self._spawn_agent(agent.id)
        agent.pose = fresh.pose
        agent.alpha = fresh.alpha
        agent.beta = fresh.beta
        agent.spawn_step = self.step_count
        agent.distance_traveled = 0.0
        agent.baseline_length = fresh.baseline_length
        agent.waypoints_cache = None
        agent.waypoint_cursor = 0
        agent.status = AgentStatus.RUNNING

    # ------------------------------------------------------------------
    # sensing

    def observe(self, agent_id: int) -> Observation:
        self._require_running(agent_id)
        return self._observe_batch([agent_id])[0]

    def observe_all(self) -> List[Observation]:
        return self._observe_batch([a.id for a in self.agents])

    def encoded_observations(self) -> np.ndarray:
        obs = self.observe_all()
        return np.stack([o.encoded for o in obs])

    def _observe_batch(self, ids: Sequence[int]) -> List[Observation]:
        cfg = self.config
        n_rays = cfg.sensor_count
        d_max = cfg.sensor_range
        ids_arr = np.asarray(ids, dtype=np.int64)
        a_count = len(ids_arr)
        positions = self._positions()
        origins = positions[ids_arr]                             # (A, 2)
        headings = np.array([self.agents[i].pose.heading for i in ids_arr])
        angles = headings[:, None] + self._ray_offsets[None, :]  # (A, S)
        dir_x = np.cos(angles)
        dir_y = np.sin(angles)

        best_t = np.full((a_count, n_rays), d_max, dtype=np.float64)
        best_kind = np.zeros((a_count, n_rays), dtype=np.int8)
        best_id = np.full((a_count, n_rays), -1, dtype=np.int64)

        # segments: walls and obstacle edges
        wx = self._seg_a[None, None, :, 0] - origins[:, None, None, 0]   # (A,1,M)
        wy = self._seg_a[None, None, :, 1] - origins[:, None, None, 1]
        ex = self._seg_e[None, None, :, 0]
        ey = self._seg_e[None, None, :, 1]
        denom = dir_x[:, :, None] * ey - dir_y[:, :, None] * ex          # (A,S,M)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (wx * ey - wy * ex) / denom
            u = (wx * dir_y[:, :, None] - wy * dir_x[:, :, None]) / denom
        valid = (denom != 0.0) & (t >= 0.0) & (u >= 0.0) & (u <= 1.0)
        t = np.where(valid, t, np.inf)
        t_seg = t.min(axis=2)
        seg_hit = t_seg < best_t
        best_t = np.where(seg_hit, t_seg, best_t)
        best_kind = np.where(seg_hit, KIND_OBSTACLE, best_kind).astype(np.int8)

        # other agents as discs
        n_agents = len(self.agents)
        if n_agents > 1:
            mx = positions[None, :, 0] - origins[:, 0, None]             # (A, N)
            my = positions[None, :, 1] - origins[:, 1, None]
            c2 = mx * mx + my * my - cfg.agent_radius ** 2               # (A, N)
            b = (dir_x[:, :, None] * mx[:, None, :]
                 + dir_y[:, :, None] * my[:, None, :])                   # (A, S, N)
            disc = b * b - c2[:, None, :]
            with np.errstate(invalid="ignore"):
                sq = np.sqrt(disc)
            t1 = -b - sq
            t2 = -b + sq
            t = np.where(t1 >= 0.0, t1, np.where(t2 >= 0.0, t2, np.inf))
            t = np.where(disc >= 0.0, t, np.inf)
            self_mask = ids_arr[:, None] == np.arange(n_agents)[None, :]
            t = np.where(self_mask[:, None, :], np.inf, t)
            t_agent = t.min(axis=2)
            agent_idx = t.argmin(axis=2)
            agent_hit = t_agent < best_t
            best_t = np.where(agent_hit, t_agent, best_t)
            best_kind = np.where(agent_hit, KIND_AGENT, best_kind).astype(np.int8)
            best_id = np.where(agent_hit, agent_idx, best_id)

        observations = []
        inv_range = 1.0 / d_max
        for row, agent_id in enumerate(ids_arr):
            distances = best_t[row]
            kinds = best_kind[row]
            flags = (kinds == KIND_AGENT).astype(np.float64)
            encoded = np.concatenate([distances * inv_range, flags])
            if cfg.baseline_mode:
                agent = self.agents[agent_id]
                p = agent.pose.position
                goal_d = p.distance_to(agent.beta)
                rel = math.atan2(agent.beta.y - p.y, agent.beta.x - p.x) - agent.pose.heading
                rel = (rel + math.pi) % TWO_PI - math.pi      # [-pi, pi)
                encoded = np.concatenate([
                    encoded,
                    [min(goal_d / self._free_diag, 1.0), (rel / math.pi + 1.0) / 2.0],
                ])
            observations.append(Observation(distances, kinds, best_id[row], encoded))
        return observations

    def crowdedness(self, agent_id: int) -> int:
        """Distinct partner agents visible to at least one sensor ray."""
        self._require_running(agent_id)
        obs = self._observe_batch([agent_id])[0]
        hits = obs.hit_agent_ids[obs.hit_agent_ids >= 0]
        return int(np.unique(hits).size)

    # ------------------------------------------------------------------
    # stepping

    def _require_running(self, agent_id: int) -> None:
        if agent_id < 0 or agent_id >= len(self.agents):
            raise ProtocolError(f"unknown agent id {agent_id}")
        if self.agents[agent_id].status is not AgentStatus.RUNNING:
            raise ProtocolError(f"agent {agent_id} is not running")

    def _navigation_target(self, agent: AgentState) -> Vec2:
        pos = agent.pose.position
        if self._planner_clear or self.mesh.segment_is_free(pos, agent.beta):
            return agent.beta
        try:
            tri = self.mesh.locate(pos)
        except LocationError:
            # wandered into the planner's safety margin: keep the last target
            if agent.waypoints_cache is not None:
                return agent.waypoints_cache.points[agent.waypoint_cursor]
            return agent.beta
        cache = agent.waypoints_cache
        if cache is None or tri not in cache.source_channel.triangle_indices:
            channel = astar_channel(self.mesh, pos, agent.beta)
            agent.waypoints_cache = channel_waypoints(channel, pos, agent.beta)
            agent.waypoint_cursor = 0
        points = agent.waypoints_cache.points
        cursor = agent.waypoint_cursor
        last = len(points) - 1
        half_step = 0.5 * self.config.speed
        while cursor < last and pos.distance_to(points[cursor]) <= half_step:
            cursor += 1
        # skip any waypoint whose successor is already directly reachable
        while cursor < last and self.mesh.segment_is_free(pos, points[cursor + 1]):
            cursor += 1
        agent.waypoint_cursor = cursor
        return points[cursor]

    def apply_action(self, agent_id: int, action: Action) -> None:
        """Kinematic update only; collision/arrival handling happens in step_world."""
        self._require_running(agent_id)
        agent = self.agents[agent_id]
        cfg = self.config
        v0 = cfg.speed
        if action == Action.STAY:
            return
        if action == Action.TURN_LEFT:
            agent.pose = Pose(agent.pose.position, agent.pose.heading - cfg.turn_rate)
            return
        if action == Action.TURN_RIGHT:
            agent.pose = Pose(agent.pose.position, agent.pose.heading + cfg.turn_rate)
            return
        if action in (Action.FORWARD, Action.BACKWARD):
            sign = 1.0 if action == Action.FORWARD else -1.0
            d = agent.pose.direction()
            pos = agent.pose.position + d * (sign * v0)
            agent.pose = Pose(pos, agent.pose.heading)
            agent.distance_traveled += v0
            return
        # NAVIGATE: face the next planner waypoint and advance without overshoot
        target = self._navigation_target(agent)
        pos = agent.pose.position
        gap = pos.distance_to(target)
        if gap == 0.0:
            return
        heading = math.atan2(target.y - pos.y, target.x - pos.x)
        step = min(v0, gap)
        unit = (target - pos) * (1.0 / gap)
        agent.pose = Pose(pos + unit * step, heading)
        agent.distance_traveled += step

    def _boundary_collision(self, positions: np.ndarray) -> np.ndarray:
        r = self.config.agent_radius
        side = self.map_spec.domain_side
        x = positions[:, 0]
        y = positions[:, 1]
        return (x < r) | (x > side - r) | (y < r) | (y > side - r)

    def _obstacle_collision(self, positions: np.ndarray) -> np.ndarray:
        n = len(positions)
        hit = self._boundary_collision(positions)
        if not self.map_spec.obstacles:
            return hit
        a = self._seg_a[self._obs_lo:]
        e = self._seg_e[self._obs_lo:]
        ee = np.sum(e * e, axis=1)
        w = positions[:, None, :] - a[None, :, :]                 # (N, M, 2)
        t = np.sum(w * e[None, :, :], axis=2) / ee[None, :]
        t = np.clip(t, 0.0, 1.0)
        closest = a[None, :, :] + t[:, :, None] * e[None, :, :]
        d2 = np.sum((positions[:, None, :] - closest) ** 2, axis=2)
        r2 = self.config.agent_radius ** 2
        hit |= np.any(d2 < r2, axis=1)
        # centers strictly inside a polygon have no nearby edge; crossing test
        for (lo, hi), poly in zip(self._polygon_ranges, self.map_spec.obstacles):
            ax = self._seg_a[lo:hi, 0]
            ay = self._seg_a[lo:hi, 1]
            bx = ax + self._seg_e[lo:hi, 0]
            by = ay + self._seg_e[lo:hi, 1]
            px = positions[:, 0][:, None]
            py = positions[:, 1][:, None]
            crosses = (ay > py) != (by > py)
            with np.errstate(divide="ignore", invalid="ignore"):
                x_at = ax + (py - ay) / (by - ay) * (bx - ax)
            inside = np.sum(crosses & (px < x_at), axis=1) % 2 == 1
            hit |= inside
        return hit

    def _pairwise_collision(self, positions: np.ndarray) -> np.ndarray:
        n = len(positions)
        if n < 2:
            return np.zeros(n, dtype=bool)
        dx = positions[:, None, 0] - positions[None, :, 0]
        dy = positions[:, None, 1] - positions[None, :, 1]
        d2 = dx * dx + dy * dy
        np.fill_diagonal(d2, np.inf)
        return np.any(d2 < self.config.safe_distance ** 2, axis=1)

    def step_world(self, actions: Mapping[int, Action],
                   observations: Optional[Mapping[int, Observation]] = None) -> StepOutcome:
        """Advance one step: move, resolve events, reward, respawn terminated agents."""
        running = {a.id for a in self.agents if a.status is AgentStatus.RUNNING}
        supplied = set(actions.keys())
        if supplied != running:
            extra = supplied - running
            missing = running - supplied
            raise ProtocolError(
                f"actions must cover exactly the running agents "
                f"(unexpected: {sorted(extra)}, missing: {sorted(missing)})")
        if self.config.baseline_mode:
            for aid, act in actions.items():
                if act == Action.NAVIGATE:
                    raise ProtocolError(
                        f"agent {aid}: planner action is excluded in baseline mode")
        self.step_count += 1

        for aid in sorted(actions):
            self.apply_action(aid, Action(actions[aid]))

        positions = self._positions()
        pair_hit = self._pairwise_collision(positions)
        obstacle_hit = self._obstacle_collision(positions)

        transitions: List[AgentTransition] = []
        terminated: List[AgentState] = []
        for agent in self.agents:
            aid = agent.id
            action = Action(actions[aid])
            pos = agent.pose.position
            goal_distance = pos.distance_to(agent.beta)
            cause = CollisionCause.NONE
            status = AgentStatus.RUNNING
            if pair_hit[aid] or obstacle_hit[aid]:
                status = AgentStatus.COLLIDED
                cause = CollisionCause.AGENT if pair_hit[aid] else CollisionCause.OBSTACLE
            elif goal_distance <= self.config.agent_radius:
                status = AgentStatus.ARRIVED
            elif self.step_count - agent.spawn_step > self.config.max_steps:
                status = AgentStatus.TIMED_OUT

            navigation = REWARD_NAVIGATE if action == Action.NAVIGATE else 0.0
            if status is AgentStatus.COLLIDED:
                scenario_reward = REWARD_COLLISION
            elif status is AgentStatus.ARRIVED:
                scenario_reward = REWARD_ARRIVAL
            else:
                scenario_reward = 0.0
            reward = StepReward(navigation, scenario_reward, REWARD_STEP_PENALTY)

            agent.status = status
            transitions.append(AgentTransition(
                agent_id=aid,
                action=action,
                reward=reward,
                status=status,
                done=status is not AgentStatus.RUNNING,
                collision_cause=cause,
                x=pos.x,
                y=pos.y,
                heading=agent.pose.heading,
                goal_distance=goal_distance,
                distance_traveled=agent.distance_traveled,
                baseline_length=agent.baseline_length,
                steps_taken=self.step_count - agent.spawn_step,
                alpha=agent.alpha,
                beta=agent.beta,
                observation=observations.get(aid) if observations else None,
            ))
            if status is not AgentStatus.RUNNING:
                terminated.append(agent)

        for agent in terminated:
            self._respawn(agent)
        return StepOutcome(self.step_count, transitions)


# ----------------------------------------------------------------------
# config serialization (shared by the trainer, evaluator and CLI)


def map_to_dict(spec: MapSpec) -> dict:
    return {
        "domain_side": spec.domain_side,
        "obstacles": [[(v.x, v.y) for v in poly] for poly in spec.obstacles],
    }


def map_from_dict(d: dict) -> MapSpec:
    return MapSpec(float(d["domain_side"]),
                   [[Vec2(float(x), float(y)) for x, y in poly]
                    for poly in d.get("obstacles", [])])


def world_config_to_dict(cfg: WorldConfig) -> dict:
    return {
        "map": map_to_dict(cfg.map_spec),
        "agent_count": cfg.agent_count,
        "agent_radius": cfg.agent_radius,
        "speed": cfg.speed,
        "turn_rate": cfg.turn_rate,
        "safe_distance": cfg.safe_distance,
        "max_steps": cfg.max_steps,
        "sensor_count": cfg.sensor_count,
        "sensor_range": cfg.sensor_range,
        "seed": cfg.seed,
        "baseline_mode": cfg.baseline_mode,
        "planner_margin": cfg.planner_margin,
    }


def world_config_from_dict(d: dict) -> WorldConfig:
    try:
        return WorldConfig(
            map_spec=map_from_dict(d["map"]),
            agent_count=int(d["agent_count"]),
            agent_radius=float(d.get("agent_radius", 1.0)),
            speed=float(d.get("speed", 1.0)),
            turn_rate=float(d.get("turn_rate", 1.0)),
            safe_distance=float(d.get("safe_distance", 2.0)),
            max_steps=int(d.get("max_steps", 10000)),
            sensor_count=int(d.get("sensor_count", 45)),
            sensor_range=float(d.get("sensor_range", 20.0)),
            seed=int(d.get("seed", 0)),
            baseline_mode=bool(d.get("baseline_mode", False)),
            planner_margin=(None if d.get("planner_margin") is None
                            else float(d["planner_margin"])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid world config: {exc}") from exc


def scenario_to_dict(s: ScenarioSpec) -> dict:
    return {
        "kind": s.kind,
        "circle_radius": s.circle_radius,
        "obstacle_count": s.obstacle_count,
        "obstacle_min_size": s.obstacle_min_size,
        "obstacle_max_size": s.obstacle_max_size,
        "corner_box": s.corner_box,
        "wall_length": s.wall_length,
        "wall_thickness": s.wall_thickness,
        "wall_offset": s.wall_offset,
    }


def scenario_from_dict(d: dict) -> ScenarioSpec:
    try:
        spec = ScenarioSpec(
            kind=str(d["kind"]),
            circle_radius=float(d.get("circle_radius", 80.0)),
            obstacle_count=int(d.get("obstacle_count", 8)),
            obstacle_min_size=float(d.get("obstacle_min_size", 10.0)),
            obstacle_max_size=float(d.get("obstacle_max_size", 40.0)),
            corner_box=float(d.get("corner_box", 20.0)),
            wall_length=float(d.get("wall_length", 80.0)),
            wall_thickness=float(d.get("wall_thickness", 8.0)),
            wall_offset=float(d.get("wall_offset", 50.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario: {exc}") from exc
    spec.validate()
    return spec


def canonical_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(payload: dict) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:16]


def save_scenario(spec: ScenarioSpec, path: str) -> None:
    lines = [SCENARIO_HEADER, f"kind {spec.kind}"]
    for key, value in scenario_to_dict(spec).items():
        if key != "kind":
            lines.append(f"{key} {value!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_scenario(path: str) -> ScenarioSpec:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != SCENARIO_HEADER:
        raise ConfigError(f"{path}:1: expected header '{SCENARIO_HEADER}'")
    values: Dict[str, str] = {}
    for n, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 2:
            raise ConfigError(f"{path}:{n}: expected 'key value'")
        values[fields[0]] = fields[1]
    if "kind" not in values:
        raise ConfigError(f"{path}: missing 'kind'")
    d: dict = {"kind": values.pop("kind")}
    for key, token in values.items():
        try:
            d[key] = float(token)
        except ValueError:
            raise ConfigError(f"{path}: field '{key}': '{token}' is not a number") from None
    if "obstacle_count" in d:
        d["obstacle_count"] = int(d["obstacle_count"])
    return scenario_from_dict(d)


# ----------------------------------------------------------------------
# trajectory logging and replay verification


class TrajectoryWriter:
    """Line-oriented step log; floats use repr so replay round-trips bit-exactly."""

    def __init__(self, path: str, world: World):
        payload = {
            "world": world_config_to_dict(world.config),
            "scenario": scenario_to_dict(world.scenario),
        }
        self._f = open(path, "w", encoding="utf-8")
        self._f.write(TRAJECTORY_HEADER + "\n")
        self._f.write("config " + canonical_json(payload) + "\n")
        self._f.write("config_hash " + config_hash(payload) + "\n")

    def append(self, outcome: StepOutcome) -> None:
        for tr in outcome.transitions:
            self._f.write(
                f"{outcome.step} {tr.agent_id} {tr.x!r} {tr.y!r} {tr.heading!r} "
                f"{int(tr.action)} {tr.reward.total!r} {tr.status.value}\n")

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class ReplayResult:
    steps_verified: int
    divergence_step: Optional[int]
    detail: str = ""


def verify_trajectory(path: str) -> ReplayResult:
    """Re-simulate a trajectory log from its embedded config and compare bit-exactly."""
    from .errors import IncompatibilityError
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != TRAJECTORY_HEADER:
        raise IncompatibilityError(
            f"{path}: expected header '{TRAJECTORY_HEADER}', "
            f"got '{lines[0].strip() if lines else ''}'")
    if len(lines) < 3 or not lines[1].startswith("config ") \
            or not lines[2].startswith("config_hash "):
        raise ConfigError(f"{path}: malformed trajectory header")
    payload = json.loads(lines[1][len("config "):])
    stated_hash = lines[2].split()[1]
    if config_hash(payload) != stated_hash:
        raise IncompatibilityError(f"{path}: config hash mismatch")
    world = World(world_config_from_dict(payload["world"]),
                  scenario_from_dict(payload["scenario"]))

    records: Dict[int, List[Tuple[int, float, float, float, int, float, str]]] = {}
    for n, raw in enumerate(lines[3:], start=4):
        if not raw.strip():
            continue
        parts = raw.split()
        if len(parts) != 8:
            raise ConfigError(f"{path}:{n}: expected 8 fields")
        step, aid = int(parts[0]), int(parts[1])
        records.setdefault(step, []).append(
            (aid, float(parts[2]), float(parts[3]), float(parts[4]),
             int(parts[5]), float(parts[6]), parts[7]))

    verified = 0
    for step in sorted(records):
        actions = {aid: Action(act) for aid, _, _, _, act, _, _ in records[step]}
        outcome = world.step_world(actions)
        by_id = {tr.agent_id: tr for tr in outcome.transitions}
        for aid, x, y, heading, act, reward, status in records[step]:
            tr = by_id[aid]
            same = (tr.x == x and tr.y == y and tr.heading == heading
                    and tr.reward.total == reward and tr.status.value == status)
            if not same:
                return ReplayResult(verified, step,
                                    f"agent {aid}: logged ({x}, {y}, {heading}, "
                                    f"{reward}, {status}) simulated ({tr.x}, {tr.y}, "
                                    f"{tr.heading}, {tr.reward.total}, {tr.status.value})")
        verified += 1
    return ReplayResult(verified, None)
