"""Partially observable grid world for multi-agent path finding in formation.

Coordinates are ``(x, y)`` cells with ``x`` the column and ``y`` the row;
arrays are indexed ``[y, x]``. The start region sits in the top-left corner
and the goal region in the bottom-right one.
"""

import os
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, FrozenSet, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import yaml

from config.settings import EPISODE_LENGTH_FACTOR, FOV, KEEP_FORMATION_EPS
from core.errors import ConfigError, ContractViolation, GenerationFailure, InvalidGoal
from core.formation import formation_loss
from core.logger import setup_logger

logger = setup_logger(__name__)

Cell = Tuple[int, int]

# Table of per-step rewards
REWARD_COLLISION = -50.0
REWARD_TOWARD_GOAL = 1.0
REWARD_NO_MOVEMENT = -0.25
REWARD_FINISH = 100.0
REWARD_KEEP_FORMATION = 100.0


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    STAY = 4


DELTAS: Dict[Action, Cell] = {
    Action.UP: (0, -1),
    Action.DOWN: (0, 1),
    Action.LEFT: (-1, 0),
    Action.RIGHT: (1, 0),
    Action.STAY: (0, 0),
}


def move(cell: Cell, action: Action) -> Cell:
    dx, dy = DELTAS[Action(action)]
    return cell[0] + dx, cell[1] + dy


@dataclass(frozen=True)
class Region:
    """Inclusive rectangle of cells."""
    x0: int
    y0: int
    x1: int
    y1: int

    def contains(self, cell: Cell) -> bool:
        return self.x0 <= cell[0] <= self.x1 and self.y0 <= cell[1] <= self.y1

    def cells(self) -> List[Cell]:
        return [(x, y) for y in range(self.y0, self.y1 + 1) for x in range(self.x0, self.x1 + 1)]

    @property
    def center(self) -> Cell:
        return (self.x0 + self.x1) // 2, (self.y0 + self.y1) // 2


@dataclass(frozen=True, eq=False)
class GridMap:
    cells: np.ndarray  # bool [height, width], True = obstacle
    start_region: Region
    goal_region: Region

    @property
    def width(self) -> int:
        return int(self.cells.shape[1])

    @property
    def height(self) -> int:
        return int(self.cells.shape[0])

    @property
    def size(self) -> int:
        return max(self.width, self.height)

    @property
    def obstacle_count(self) -> int:
        return int(self.cells.sum())

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and not self.cells[cell[1], cell[0]]

    def __eq__(self, other):
        if not isinstance(other, GridMap):
            return NotImplemented
        return (np.array_equal(self.cells, other.cells)
                and self.start_region == other.start_region
                and self.goal_region == other.goal_region)


@dataclass(frozen=True, eq=False)
class CostMap:
    goal: Cell
    distances: np.ndarray  # float [height, width], np.inf where unreachable

    def value(self, cell: Cell) -> float:
        return float(self.distances[cell[1], cell[0]])


@dataclass(frozen=True)
class WorldState:
    positions: Tuple[Cell, ...]
    goals: Tuple[Cell, ...]
    t: int = 0
    done_flags: Tuple[bool, ...] = ()
    formation_kept: bool = False

    @property
    def agent_count(self) -> int:
        return len(self.positions)

    @classmethod
    def initial(cls, starts: Sequence[Cell], goals: Sequence[Cell]) -> "WorldState":
        positions = tuple(tuple(map(int, p)) for p in starts)
        goals = tuple(tuple(map(int, g)) for g in goals)
        if len(positions) != len(goals):
            raise ContractViolation("starts and goals differ in length")
        if len(set(positions)) != len(positions):
            raise ContractViolation("two agents share a start cell")
        return cls(positions, goals, 0, tuple(p == g for p, g in zip(positions, goals)))


PriorActions = Tuple[Tuple[int, Action], ...]


@dataclass(frozen=True, eq=False)
class Observation:
    obstacle_channel: np.ndarray
    position_channel: np.ndarray
    cost_channel: np.ndarray
    formation_channel: np.ndarray
    prior_actions: PriorActions = ()

    def channels(self) -> np.ndarray:
        return np.stack([self.obstacle_channel, self.position_channel,
                         self.cost_channel, self.formation_channel])


class RewardVector(NamedTuple):
    r_path: float
    r_formation: float
    r_meta: float


# ---------------------------------------------------------------------------
# Maps
# ---------------------------------------------------------------------------

def region_side(size: int) -> int:
    return 5 if size <= 32 else 10


def default_regions(width: int, height: int) -> Tuple[Region, Region]:
    side = region_side(max(width, height))
    start = Region(0, 0, min(side, width) - 1, min(side, height) - 1)
    goal = Region(max(width - side, 0), max(height - side, 0), width - 1, height - 1)
    return start, goal


def max_wall_length(cells: np.ndarray) -> int:
    """Longest horizontal or vertical run of obstacle cells."""
    longest = 0
    for grid in (cells, cells.T):
        for row in grid:
            run = 0
            for blocked in row:
                run = run + 1 if blocked else 0
                longest = max(longest, run)
    return longest


def _run_through(cells: np.ndarray, x: int, y: int, dx: int, dy: int) -> int:
    """Length of the obstacle run through (x, y) along (dx, dy) if (x, y) were blocked."""
    h, w = cells.shape
    length = 1
    for sign in (1, -1):
        cx, cy = x + sign * dx, y + sign * dy
        while 0 <= cx < w and 0 <= cy < h and cells[cy, cx]:
            length += 1
            cx, cy = cx + sign * dx, cy + sign * dy
    return length


def generate_map(size: int, density: float, seed: int, agent_count: int = 1,
                 fov: int = FOV, retries: int = 20) -> GridMap:
    """Random square map with bounded wall length and obstacle-free regions.

    Exactly ``round(density * size**2)`` obstacles are placed; candidates that
    would lengthen a wall past ``fov // 2`` are rejected.
    """
    if not 0.0 <= density < 0.5:
        raise ContractViolation(f"density must lie in [0, 0.5), got {density}")
    if size < 10:
        raise ContractViolation(f"map size must be at least 10, got {size}")

    start_region, goal_region = default_regions(size, size)
    if len(start_region.cells()) < agent_count or len(goal_region.cells()) < agent_count:
        raise GenerationFailure(f"regions of a {size}x{size} map cannot host {agent_count} agents")

    max_wall = fov // 2
    target = int(round(density * size * size))
    reserved = np.zeros((size, size), dtype=bool)
    for region in (start_region, goal_region):
        reserved[region.y0:region.y1 + 1, region.x0:region.x1 + 1] = True
    candidates = np.flatnonzero(~reserved.ravel())

    for attempt in range(1, retries + 1):
        rng = np.random.default_rng([seed, attempt])
        cells = np.zeros((size, size), dtype=bool)
        placed = 0
        for idx in rng.permutation(candidates):
            if placed == target:
                break
            y, x = divmod(int(idx), size)
            if (_run_through(cells, x, y, 1, 0) <= max_wall
                    and _run_through(cells, x, y, 0, 1) <= max_wall):
                cells[y, x] = True
                placed += 1
        grid_map = GridMap(cells, start_region, goal_region)
        if placed == target and np.isfinite(
                compute_cost_map(grid_map, goal_region.center).value(start_region.center)):
            logger.debug(f"Generated {size}x{size} map (density={density}, seed={seed}) on attempt {attempt}")
            return grid_map
        logger.debug(f"Map attempt {attempt} rejected (placed {placed}/{target})")
    else:
        raise GenerationFailure(f"could not generate a {size}x{size} map at density {density} "
                                f"after {retries} attempts")


def generate_map_pool(count: int = 100, size: int = 32, density: float = 0.15, seed: int = 0,
                      agent_count: int = 1) -> List[GridMap]:
    """``count`` maps with seeds ``seed, seed + 1, ...``."""
    if count < 1:
        raise ContractViolation(f"map pool needs at least one map, got {count}")
    pool = [generate_map(size, density, seed + i, agent_count=agent_count) for i in range(count)]
    logger.info(f"Generated pool of {count} {size}x{size} maps at density {density}")
    return pool


def empty_map(width: int, height: Optional[int] = None,
              start_region: Optional[Region] = None, goal_region: Optional[Region] = None) -> GridMap:
    height = width if height is None else height
    default_start, default_goal = default_regions(width, height)
    return GridMap(np.zeros((height, width), dtype=bool),
                   start_region or default_start, goal_region or default_goal)


def compute_cost_map(grid_map: GridMap, goal: Cell) -> CostMap:
    """Exact 4-connected BFS distances to ``goal``; ``inf`` where unreachable."""
    goal = (int(goal[0]), int(goal[1]))
    if not grid_map.is_free(goal):
        raise InvalidGoal(f"goal {goal} is not a free cell")
    dist = np.full((grid_map.height, grid_map.width), np.inf)
    dist[goal[1], goal[0]] = 0.0
    blocked = grid_map.cells
    h, w = blocked.shape
    queue = deque([goal])
    while queue:
        x, y = queue.popleft()
        nd = dist[y, x] + 1.0
        for dx, dy in ((0, -1), (0, 1), (-1, 0), (1, 0)):
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and not blocked[ny, nx] and dist[ny, nx] == np.inf:
                dist[ny, nx] = nd
                queue.append((nx, ny))
    return CostMap(goal, dist)


# ---------------------------------------------------------------------------
# Formations and spawning
# ---------------------------------------------------------------------------

def formation_preset(name: str, k: int) -> np.ndarray:
    """Integer formation offsets for a named shape."""
    if k < 1:
        raise ContractViolation("a formation needs at least one agent")
    if name == "line":
        pts = [(i, 0) for i in range(k)]
    elif name == "column":
        pts = [(0, i) for i in range(k)]
    elif name == "wedge":
        pts = [(0, 0)]
        for i in range(1, k):
            depth = (i + 1) // 2
            pts.append((-depth if i % 2 else depth, depth))
    elif name in ("square", "block"):
        side = int(np.ceil(np.sqrt(k)))
        pts = [(i % side, i // side) for i in range(k)]
    else:
        raise ConfigError(f"unknown formation preset '{name}'")
    return np.asarray(pts, dtype=int)


def place_formation(region: Region, offsets: np.ndarray, grid_map: GridMap) -> Tuple[Cell, ...]:
    """Anchor ``offsets`` so their bounding box is centered on ``region``."""
    offsets = np.asarray(offsets, dtype=int)
    lo, hi = offsets.min(axis=0), offsets.max(axis=0)
    cx, cy = region.center
    shift = np.array([cx, cy]) - (lo + hi) // 2
    cells = tuple((int(x), int(y)) for x, y in offsets + shift)
    if len(set(cells)) != len(cells):
        raise ContractViolation("formation offsets must be distinct")
    for cell in cells:
        if not grid_map.is_free(cell):
            raise GenerationFailure(f"formation slot {cell} is blocked or off the map")
    return cells


def is_fov_connected(cells: Sequence[Cell], fov: int = FOV) -> bool:
    """True when the graph linking agents within each other's FOV is connected."""
    if not cells:
        return True
    radius = fov // 2
    seen = {0}
    frontier = [0]
    while frontier:
        i = frontier.pop()
        for j, other in enumerate(cells):
            if j not in seen and max(abs(cells[i][0] - other[0]), abs(cells[i][1] - other[1])) <= radius:
                seen.add(j)
                frontier.append(j)
    return len(seen) == len(cells)


def sample_connected_spawn(grid_map: GridMap, k: int, rng: np.random.Generator,
                           fov: int = FOV, retries: int = 1000) -> Tuple[Cell, ...]:
    """Distinct free cells whose FOV visibility graph is connected."""
    free = np.argwhere(~grid_map.cells)
    if len(free) < k:
        raise GenerationFailure(f"map has only {len(free)} free cells for {k} agents")
    for attempt in range(1, retries + 1):
        picks = free[rng.choice(len(free), size=k, replace=False)]
        cells = tuple((int(x), int(y)) for y, x in picks)
        if is_fov_connected(cells, fov):
            return cells
        logger.debug(f"Spawn attempt {attempt} not FOV-connected, resampling")
    else:
        raise GenerationFailure(f"no FOV-connected spawn for {k} agents after {retries} attempts")


# ---------------------------------------------------------------------------
# Observation and dynamics
# ---------------------------------------------------------------------------

def _crop(array: np.ndarray, cx: int, cy: int, fill: float, fov: int = FOV) -> np.ndarray:
    r = fov // 2
    h, w = array.shape
    out = np.full((fov, fov), fill, dtype=np.float32)
    x0, y0 = cx - r, cy - r
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(cx + r + 1, w), min(cy + r + 1, h)
    if sx0 < sx1 and sy0 < sy1:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = array[sy0:sy1, sx0:sx1]
    return out


def observe(world: WorldState, grid_map: GridMap, cost_maps: Sequence[CostMap],
            formation: np.ndarray, agent_id: int, prior_actions: PriorActions = (),
            fov: int = FOV) -> Observation:
    """Four-channel FOV crop centered on ``agent_id``; off-map reads as obstacle."""
    if not 0 <= agent_id < world.agent_count:
        raise ContractViolation(f"agent {agent_id} is not live")
    r = fov // 2
    cx, cy = world.positions[agent_id]
    k = world.agent_count

    obstacle = _crop(grid_map.cells, cx, cy, 1.0, fov)

    position = np.zeros((fov, fov), dtype=np.float32)
    for j, (px, py) in enumerate(world.positions):
        ox, oy = px - cx + r, py - cy + r
        if 0 <= ox < fov and 0 <= oy < fov:
            position[oy, ox] = (j + 1) / (k + 1)

    scale = 2.0 * grid_map.size
    raw = _crop(cost_maps[agent_id].distances, cx, cy, np.inf, fov)
    cost = (np.where(np.isfinite(raw), raw, scale) / scale).astype(np.float32)

    shape = np.zeros((fov, fov), dtype=np.float32)
    offsets = np.asarray(formation, dtype=int)
    if len(offsets) == k:
        anchor = np.array([cx, cy]) - offsets[agent_id]
        for sx, sy in offsets + anchor:
            ox, oy = sx - cx + r, sy - cy + r
            if 0 <= ox < fov and 0 <= oy < fov:
                shape[oy, ox] = 1.0

    return Observation(obstacle, position, cost, shape, tuple(prior_actions))


def valid_actions(world: WorldState, grid_map: GridMap, agent_id: int) -> Tuple[Action, ...]:
    """Actions that stay on the map and off obstacles; Stay is always valid."""
    pos = world.positions[agent_id]
    return tuple(a for a in Action if a == Action.STAY or grid_map.is_free(move(pos, a)))


def find_conflicts(before: Sequence[Cell], after: Sequence[Cell]) -> Tuple[FrozenSet[int], FrozenSet[int]]:
    """Agents in vertex conflicts (shared cell) and swap conflicts (exchanged cells)."""
    by_cell: Dict[Cell, List[int]] = {}
    for i, cell in enumerate(after):
        by_cell.setdefault(tuple(cell), []).append(i)
    vertex = {i for group in by_cell.values() if len(group) > 1 for i in group}

    origin = {tuple(cell): i for i, cell in enumerate(before)}
    swap = set()
    for i, (src, dst) in enumerate(zip(before, after)):
        src, dst = tuple(src), tuple(dst)
        j = origin.get(dst)
        if j is not None and j != i and src != dst and tuple(after[j]) == src:
            swap.update((i, j))
    return frozenset(vertex), frozenset(swap)


def _resolve_moves(positions: Sequence[Cell], intended: List[Cell]) -> Tuple[List[Cell], FrozenSet[int]]:
    """Bounce conflicting agents until the joint move is conflict-free."""
    final = list(intended)
    collided = set()
    while True:
        vertex, swap = find_conflicts(positions, final)
        clash = vertex | swap
        if not clash:
            return final, frozenset(collided)
        collided |= clash
        movers = [i for i in clash if final[i] != positions[i]]
        if not movers:
            # Only stationary agents left in conflict: impossible from a valid state.
            return final, frozenset(collided)
        for i in movers:
            final[i] = positions[i]


@dataclass(frozen=True)
class StepInfo:
    collisions: FrozenSet[int] = frozenset()
    formation_loss: float = 0.0
    reached: Tuple[bool, ...] = ()


def team_formation_loss(positions: Sequence[Cell], formation: np.ndarray) -> float:
    """Formation loss of the team, 0 for a single agent."""
    if len(positions) < 2:
        return 0.0
    return formation_loss(np.asarray(positions, dtype=float), np.asarray(formation, dtype=float))


def episode_limit_for(grid_map: GridMap) -> int:
    return EPISODE_LENGTH_FACTOR * grid_map.size


def step(world: WorldState, grid_map: GridMap, joint_action: Sequence[Action],
         formation: np.ndarray, w_f: float, cost_maps: Sequence[CostMap],
         episode_limit: Optional[int] = None):
    """Apply a joint action simultaneously.

    Returns ``(world', rewards, done, info)`` with one RewardVector per agent.
    Invalid moves leave the agent in place.
    """
    k = world.agent_count
    if len(joint_action) != k:
        raise ContractViolation(f"joint action has {len(joint_action)} entries for {k} agents")
    limit = episode_limit_for(grid_map) if episode_limit is None else episode_limit

    intended = []
    for pos, action in zip(world.positions, joint_action):
        target = move(pos, Action(action))
        intended.append(target if grid_map.is_free(target) else pos)
    final, collided = _resolve_moves(world.positions, intended)

    loss = team_formation_loss(final, formation)
    reached = tuple(p == g for p, g in zip(final, world.goals))
    all_reached = all(reached)
    keep_bonus = k >= 2 and loss < KEEP_FORMATION_EPS and not world.formation_kept

    rewards = []
    for i in range(k):
        collision = REWARD_COLLISION if i in collided else 0.0
        toward = 0.0
        idle = 0.0
        if i not in collided:
            if cost_maps[i].value(final[i]) < cost_maps[i].value(world.positions[i]):
                toward = REWARD_TOWARD_GOAL
            elif final[i] == world.positions[i] and not reached[i]:
                idle = REWARD_NO_MOVEMENT
        r_path = collision + toward + idle + (REWARD_FINISH if all_reached else 0.0)
        r_formation = collision + idle - loss + (REWARD_KEEP_FORMATION if keep_bonus else 0.0)
        r_meta = collision + toward - w_f * loss
        rewards.append(RewardVector(r_path, r_formation, r_meta))

    new_world = WorldState(tuple(final), world.goals, world.t + 1, reached,
                           world.formation_kept or keep_bonus)
    done = all_reached or new_world.t >= limit
    return new_world, rewards, done, StepInfo(collided, loss, reached)


# ---------------------------------------------------------------------------
# Stateful environment
# ---------------------------------------------------------------------------

class StepResult(NamedTuple):
    world: WorldState
    rewards: List[RewardVector]
    done: bool
    info: StepInfo


class FormationGridEnv:
    """One episode-at-a-time simulator instance.

    ``start_mode`` picks how ``reset`` places agents: ``formation`` anchors
    the formation in the start region, ``random`` samples distinct start
    region cells, ``connected`` samples a FOV-connected spawn anywhere.
    """

    START_MODES = ("formation", "random", "connected")

    def __init__(self, grid_map: GridMap, formation: np.ndarray, w_f: float = 0.0,
                 episode_limit: Optional[int] = None, start_mode: str = "formation",
                 starts: Optional[Sequence[Cell]] = None, goals: Optional[Sequence[Cell]] = None):
        if start_mode not in self.START_MODES:
            raise ContractViolation(f"unknown start mode '{start_mode}'")
        self.grid_map = grid_map
        self.formation = np.asarray(formation, dtype=int)
        self.w_f = float(w_f)
        self.episode_limit = episode_limit_for(grid_map) if episode_limit is None else episode_limit
        self.start_mode = start_mode
        self.fixed_starts = tuple(map(tuple, starts)) if starts is not None else None
        self.goals = (tuple(map(tuple, goals)) if goals is not None
                      else place_formation(grid_map.goal_region, self.formation, grid_map))
        self.cost_maps = [compute_cost_map(grid_map, g) for g in self.goals]
        self.world: Optional[WorldState] = None

    @property
    def agent_count(self) -> int:
        return len(self.goals)

    @property
    def formation_loss(self) -> float:
        return team_formation_loss(self.world.positions, self.formation)

    def _starts(self, rng: np.random.Generator) -> Tuple[Cell, ...]:
        if self.fixed_starts is not None:
            return self.fixed_starts
        if self.start_mode == "formation":
            return place_formation(self.grid_map.start_region, self.formation, self.grid_map)
        if self.start_mode == "random":
            free = [c for c in self.grid_map.start_region.cells() if self.grid_map.is_free(c)]
            if len(free) < self.agent_count:
                raise GenerationFailure("start region cannot host every agent")
            idx = rng.choice(len(free), size=self.agent_count, replace=False)
            return tuple(free[i] for i in idx)
        return sample_connected_spawn(self.grid_map, self.agent_count, rng)

    def reset(self, seed: Optional[int] = None) -> WorldState:
        rng = np.random.default_rng(seed)
        self.world = WorldState.initial(self._starts(rng), self.goals)
        return self.world

    def observe(self, agent_id: int, prior_actions: PriorActions = ()) -> Observation:
        return observe(self.world, self.grid_map, self.cost_maps, self.formation, agent_id, prior_actions)

    def valid_actions(self, agent_id: int) -> Tuple[Action, ...]:
        return valid_actions(self.world, self.grid_map, agent_id)

    def step(self, joint_action: Sequence[Action]) -> StepResult:
        world, rewards, done, info = step(self.world, self.grid_map, joint_action, self.formation,
                                          self.w_f, self.cost_maps, self.episode_limit)
        self.world = world
        return StepResult(world, rewards, done, info)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def format_map(grid_map: GridMap) -> str:
    lines = [f"{grid_map.width} {grid_map.height}"]
    for row in grid_map.cells:
        lines.append("".join("#" if blocked else "." for blocked in row))
    for label, region in (("start", grid_map.start_region), ("goal", grid_map.goal_region)):
        lines.append(f"{label} {region.x0} {region.y0} {region.x1} {region.y1}")
    return "\n".join(lines) + "\n"


def parse_map(text: str) -> GridMap:
    lines = [line.rstrip("\n") for line in text.splitlines() if line.strip()]
    if not lines:
        raise ConfigError("empty map file")
    try:
        width, height = (int(v) for v in lines[0].split())
    except ValueError as e:
        raise ConfigError(f"bad map header '{lines[0]}'") from e
    rows = lines[1:1 + height]
    if len(rows) != height or any(len(r) != width or set(r) - {".", "#"} for r in rows):
        raise ConfigError(f"map body does not match {width}x{height}")
    cells = np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)
    start, goal = default_regions(width, height)
    for line in lines[1 + height:]:
        parts = line.split()
        if len(parts) != 5 or parts[0] not in ("start", "goal"):
            raise ConfigError(f"bad region line '{line}'")
        region = Region(*(int(v) for v in parts[1:]))
        if parts[0] == "start":
            start = region
        else:
            goal = region
    return GridMap(cells, start, goal)


def save_map(grid_map: GridMap, path: str) -> None:
    with open(path, "w") as f:
        f.write(format_map(grid_map))


def load_map(path: str) -> GridMap:
    with open(path) as f:
        return parse_map(f.read())


@dataclass
class Scenario:
    grid_map: GridMap
    formation: np.ndarray
    starts: Tuple[Cell, ...]
    goals: Tuple[Cell, ...]
    seed: int = 0
    map_path: Optional[str] = None
    extra: Dict = field(default_factory=dict)

    @property
    def agent_count(self) -> int:
        return len(self.goals)

    @classmethod
    def from_map(cls, grid_map: GridMap, formation: np.ndarray, seed: int = 0,
                 map_path: Optional[str] = None) -> "Scenario":
        formation = np.asarray(formation, dtype=int)
        return cls(grid_map, formation,
                   place_formation(grid_map.start_region, formation, grid_map),
                   place_formation(grid_map.goal_region, formation, grid_map),
                   seed, map_path)

    def env(self, w_f: float = 0.0) -> FormationGridEnv:
        return FormationGridEnv(self.grid_map, self.formation, w_f,
                                starts=self.starts, goals=self.goals)


def load_scenario(path: str) -> Scenario:
    """Read a YAML scenario: a map file (or generation parameters), agents, formation, seed."""
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    unknown = set(raw) - {"map", "generate", "agents", "formation", "seed", "starts", "goals"}
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    seed = int(raw.get("seed", 0))
    k = int(raw.get("agents", 3))
    formation = raw.get("formation", "line")
    offsets = formation_preset(formation, k) if isinstance(formation, str) else np.asarray(formation, dtype=int)
    if len(offsets) != k:
        raise ConfigError(f"formation has {len(offsets)} slots for {k} agents")

    map_path = None
    if "map" in raw:
        map_path = os.path.join(os.path.dirname(os.path.abspath(path)), raw["map"])
        grid_map = load_map(map_path)
    elif "generate" in raw:
        gen = raw["generate"]
        grid_map = generate_map(int(gen["size"]), float(gen.get("density", 0.0)),
                                int(gen.get("seed", seed)), agent_count=k)
    else:
        raise ConfigError("scenario needs either 'map' or 'generate'")

    scenario = Scenario.from_map(grid_map, offsets, seed, map_path)
    if "starts" in raw:
        scenario.starts = tuple(tuple(map(int, c)) for c in raw["starts"])
    if "goals" in raw:
        scenario.goals = tuple(tuple(map(int, c)) for c in raw["goals"])
    return scenario


def save_scenario(scenario: Scenario, path: str, map_filename: str = "map.txt") -> None:
    map_path = os.path.join(os.path.dirname(os.path.abspath(path)), map_filename)
    save_map(scenario.grid_map, map_path)
    data = {
        "map": map_filename,
        "agents": scenario.agent_count,
        "formation": scenario.formation.tolist(),
        "seed": scenario.seed,
        "starts": [list(c) for c in scenario.starts],
        "goals": [list(c) for c in scenario.goals],
    }
    with open(path, "w") as f:
        yaml.safe_dump(data, f, sort_keys=False)
