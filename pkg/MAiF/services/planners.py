"""Exact centralized baselines: CBS and scalarized joint-state A*."""

import heapq
import itertools
import time
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from config.settings import EPISODE_LENGTH_FACTOR, TIME_LIMIT
from core.errors import ContractViolation, Infeasible, PlannerTimeout, PlanValidationError
from core.gridworld import (Action, Cell, CostMap, GridMap, Scenario, compute_cost_map, find_conflicts,
                            move, team_formation_loss)
from core.logger import setup_logger

logger = setup_logger(__name__)

MAX_JOINT_AGENTS = 4


@dataclass
class Plan:
    paths: Tuple[Tuple[Cell, ...], ...]
    goals: Tuple[Cell, ...]
    makespan: int
    total_formation_loss: float = 0.0
    runtime: float = 0.0
    method: str = ""

    @property
    def length(self) -> int:
        return len(self.paths[0]) if self.paths else 0

    def positions_at(self, t: int) -> Tuple[Cell, ...]:
        return tuple(path[min(t, len(path) - 1)] for path in self.paths)


@dataclass(frozen=True)
class Constraint:
    """Forbid ``agent`` from being at ``cell`` at ``t`` or, with ``prev``, from moving prev -> cell arriving at ``t``."""
    agent: int
    cell: Cell
    t: int
    prev: Optional[Cell] = None


@dataclass
class PlanMetrics:
    makespan: int
    formation_loss: float
    success: bool
    runtime: float


def pad_paths(paths: Sequence[Sequence[Cell]]) -> Tuple[Tuple[Cell, ...], ...]:
    length = max(len(p) for p in paths)
    return tuple(tuple(p) + (p[-1],) * (length - len(p)) for p in paths)


def makespan_of(paths: Sequence[Sequence[Cell]], goals: Sequence[Cell]) -> int:
    """Timestep after which every agent rests on its goal."""
    span = 0
    for path, goal in zip(paths, goals):
        t = len(path) - 1
        while t > 0 and path[t - 1] == goal and path[t] == goal:
            t -= 1
        span = max(span, t if path[t] == goal else len(path) - 1)
    return span


def plan_formation_losses(plan: Plan, formation: np.ndarray) -> List[float]:
    return [team_formation_loss(plan.positions_at(t), formation) for t in range(plan.length)]


def validate_plan(plan: Plan, grid_map: Optional[GridMap] = None) -> None:
    """Raise PlanValidationError naming the first rule the plan breaks."""
    if not plan.paths:
        raise PlanValidationError("plan has no paths")
    if len({len(p) for p in plan.paths}) != 1:
        raise PlanValidationError("paths differ in length")
    for t in range(plan.length):
        now = plan.positions_at(t)
        if grid_map is not None:
            for i, cell in enumerate(now):
                if not grid_map.is_free(cell):
                    raise PlanValidationError(f"agent {i} on blocked cell {cell} at t={t}")
        if t == 0:
            vertex, _ = find_conflicts(now, now)
            if vertex:
                raise PlanValidationError(f"vertex conflict between agents {sorted(vertex)} at t=0")
            continue
        before = plan.positions_at(t - 1)
        for i, (a, b) in enumerate(zip(before, now)):
            if abs(a[0] - b[0]) + abs(a[1] - b[1]) > 1:
                raise PlanValidationError(f"agent {i} jumps {a} -> {b} at t={t}")
        vertex, swap = find_conflicts(before, now)
        if vertex:
            raise PlanValidationError(f"vertex conflict between agents {sorted(vertex)} at t={t}")
        if swap:
            raise PlanValidationError(f"swap conflict between agents {sorted(swap)} at t={t}")


def evaluate_plan(plan: Plan, formation: np.ndarray, map_size: int,
                  grid_map: Optional[GridMap] = None) -> PlanMetrics:
    """Makespan, mean per-step formation loss normalized by map size, success, runtime."""
    validate_plan(plan, grid_map)
    losses = plan_formation_losses(plan, formation)
    success = plan.positions_at(plan.length - 1) == tuple(plan.goals)
    return PlanMetrics(plan.makespan, float(np.mean(losses)) / map_size, success, plan.runtime)


def _check_endpoints(grid_map: GridMap, starts: Sequence[Cell], goals: Sequence[Cell]) -> List[CostMap]:
    if len(starts) != len(goals):
        raise ContractViolation("starts and goals differ in length")
    for label, cells in (("start", starts), ("goal", goals)):
        if len(set(cells)) != len(cells):
            raise ContractViolation(f"{label} cells must be distinct")
        for cell in cells:
            if not grid_map.is_free(cell):
                raise ContractViolation(f"{label} {cell} is not a free cell")
    cost_maps = [compute_cost_map(grid_map, g) for g in goals]
    for i, (s, cm) in enumerate(zip(starts, cost_maps)):
        if not np.isfinite(cm.value(s)):
            raise Infeasible(f"agent {i} cannot reach its goal {cm.goal} from {s}")
    return cost_maps


# ---------------------------------------------------------------------------
# CBS
# ---------------------------------------------------------------------------

def space_time_astar(grid_map: GridMap, start: Cell, goal: Cell, constraints: Sequence[Constraint],
                     horizon: int, cost_map: Optional[CostMap] = None,
                     deadline: Optional[float] = None) -> Optional[List[Cell]]:
    """Shortest path honoring vertex and edge constraints, or None within ``horizon``."""
    cost_map = cost_map or compute_cost_map(grid_map, goal)
    vertex = {(c.cell, c.t) for c in constraints if c.prev is None}
    edge = {(c.prev, c.cell, c.t) for c in constraints if c.prev is not None}
    last_goal_block = max((t for cell, t in vertex if cell == goal), default=-1)

    h0 = cost_map.value(start)
    if not np.isfinite(h0):
        return None
    counter = itertools.count()
    open_list = [(h0, h0, next(counter), start, 0)]
    parents: Dict[Tuple[Cell, int], Optional[Tuple[Cell, int]]] = {(start, 0): None}
    closed = set()

    while open_list:
        if deadline is not None and time.perf_counter() > deadline:
            return None
        f, h, _, cell, t = heapq.heappop(open_list)
        if (cell, t) in closed:
            continue
        closed.add((cell, t))
        if cell == goal and t > last_goal_block:
            path = []
            node = (cell, t)
            while node is not None:
                path.append(node[0])
                node = parents[node]
            return path[::-1]
        if t >= horizon:
            continue
        for action in Action:
            nxt = move(cell, action)
            if not grid_map.is_free(nxt) or (nxt, t + 1) in vertex or (cell, nxt, t + 1) in edge:
                continue
            key = (nxt, t + 1)
            if key in closed or key in parents:
                continue
            parents[key] = (cell, t)
            nh = cost_map.value(nxt)
            heapq.heappush(open_list, (t + 1 + nh, nh, next(counter), nxt, t + 1))
    return None


def _first_conflict(paths: Sequence[Sequence[Cell]]):
    """Earliest conflict as (kind, i, j, t, cell_i, cell_j), agents in ascending order."""
    length = len(paths[0])
    k = len(paths)
    for t in range(length):
        for i in range(k):
            for j in range(i + 1, k):
                if paths[i][t] == paths[j][t]:
                    return "vertex", i, j, t, paths[i][t], paths[j][t]
                if t > 0 and paths[i][t] == paths[j][t - 1] and paths[j][t] == paths[i][t - 1] \
                        and paths[i][t] != paths[i][t - 1]:
                    return "edge", i, j, t, paths[i][t], paths[j][t]
    return None


@dataclass(order=True)
class _CTNode:
    makespan: int
    soc: int
    order: int
    constraints: FrozenSet[Constraint] = field(compare=False)
    paths: List[List[Cell]] = field(compare=False)


def cbs(grid_map: GridMap, starts: Sequence[Cell], goals: Sequence[Cell],
        time_limit: float = TIME_LIMIT, horizon: Optional[int] = None) -> Plan:
    """Conflict-Based Search minimising makespan, sum-of-costs breaking ties."""
    t0 = time.perf_counter()
    deadline = t0 + time_limit
    starts, goals = [tuple(s) for s in starts], [tuple(g) for g in goals]
    cost_maps = _check_endpoints(grid_map, starts, goals)
    horizon = EPISODE_LENGTH_FACTOR * grid_map.size if horizon is None else horizon
    counter = itertools.count()

    def low_level(agent: int, constraints) -> Optional[List[Cell]]:
        mine = [c for c in constraints if c.agent == agent]
        return space_time_astar(grid_map, starts[agent], goals[agent], mine, horizon,
                                cost_maps[agent], deadline)

    def make_node(constraints, paths) -> _CTNode:
        return _CTNode(max(len(p) for p in paths) - 1, sum(len(p) - 1 for p in paths),
                       next(counter), constraints, paths)

    root_paths = []
    for i in range(len(starts)):
        path = low_level(i, ())
        if path is None:
            if time.perf_counter() > deadline:
                raise PlannerTimeout("CBS", time_limit)
            raise Infeasible(f"agent {i} has no path within the horizon")
        root_paths.append(path)
    open_list = [make_node(frozenset(), root_paths)]
    expanded = 0

    while open_list:
        if time.perf_counter() > deadline:
            raise PlannerTimeout("CBS", time_limit)
        node = heapq.heappop(open_list)
        expanded += 1
        padded = pad_paths(node.paths)
        conflict = _first_conflict(padded)
        if conflict is None:
            runtime = time.perf_counter() - t0
            logger.debug(f"CBS solved in {runtime:.3f}s after {expanded} expansions")
            return Plan(padded, tuple(goals), makespan_of(padded, goals), 0.0, runtime, "cbs")

        kind, i, j, t, cell_i, cell_j = conflict
        if kind == "vertex":
            branches = [Constraint(i, cell_i, t), Constraint(j, cell_j, t)]
        else:
            branches = [Constraint(i, cell_i, t, prev=cell_j), Constraint(j, cell_j, t, prev=cell_i)]
        for constraint in branches:
            constraints = node.constraints | {constraint}
            path = low_level(constraint.agent, constraints)
            if path is None:
                continue
            paths = list(node.paths)
            paths[constraint.agent] = path
            heapq.heappush(open_list, make_node(constraints, paths))

    if time.perf_counter() > deadline:
        raise PlannerTimeout("CBS", time_limit)
    raise Infeasible("constraint tree exhausted without a conflict-free plan")


# ---------------------------------------------------------------------------
# Joint-state A*
# ---------------------------------------------------------------------------

def joint_astar(grid_map: GridMap, starts: Sequence[Cell], goals: Sequence[Cell],
                formation: np.ndarray, weight: float = 0.0,
                time_limit: float = TIME_LIMIT) -> Plan:
    """Optimal plan for ``sum_t [1 + weight * L_f(positions_t)]`` over joint states.

    The heuristic is the largest individual shortest-path distance, which
    never overestimates since every timestep costs at least 1.
    """
    if len(starts) > MAX_JOINT_AGENTS:
        raise ContractViolation(f"joint-state A* is limited to {MAX_JOINT_AGENTS} agents")
    t0 = time.perf_counter()
    deadline = t0 + time_limit
    starts = tuple(tuple(s) for s in starts)
    goals = tuple(tuple(g) for g in goals)
    cost_maps = _check_endpoints(grid_map, starts, goals)
    formation = np.asarray(formation, dtype=float)
    loss_cache: Dict[Tuple[Cell, ...], float] = {}

    def loss(positions: Tuple[Cell, ...]) -> float:
        ox, oy = positions[0]
        key = tuple((x - ox, y - oy) for x, y in positions)
        if key not in loss_cache:
            loss_cache[key] = team_formation_loss(positions, formation)
        return loss_cache[key]

    def heuristic(positions) -> float:
        return max(cm.value(p) for cm, p in zip(cost_maps, positions))

    counter = itertools.count()
    h0 = heuristic(starts)
    open_list = [(h0, h0, (), next(counter), 0.0, starts)]
    best_g = {starts: 0.0}
    parents: Dict[Tuple[Cell, ...], Optional[Tuple[Cell, ...]]] = {starts: None}
    closed = set()
    expanded = 0

    while open_list:
        if expanded % 256 == 0 and time.perf_counter() > deadline:
            raise PlannerTimeout("joint-state A*", time_limit)
        f, h, _, _, g, state = heapq.heappop(open_list)
        if state in closed or g > best_g.get(state, np.inf):
            continue
        closed.add(state)
        expanded += 1
        if state == goals:
            chain = []
            node = state
            while node is not None:
                chain.append(node)
                node = parents[node]
            chain.reverse()
            paths = tuple(tuple(c[i] for c in chain) for i in range(len(starts)))
            runtime = time.perf_counter() - t0
            total = sum(loss(c) for c in chain) if len(starts) > 1 else 0.0
            logger.debug(f"Joint A* (w={weight}) solved in {runtime:.3f}s after {expanded} expansions")
            return Plan(paths, goals, len(chain) - 1, total, runtime, "joint_astar")

        options = []
        for pos in state:
            options.append([(a, move(pos, a)) for a in Action if grid_map.is_free(move(pos, a))])
        for combo in itertools.product(*options):
            successor = tuple(cell for _, cell in combo)
            if successor in closed:
                continue
            vertex, swap = find_conflicts(state, successor)
            if vertex or swap:
                continue
            step_cost = 1.0 + (weight * loss(successor) if weight and len(starts) > 1 else 0.0)
            ng = g + step_cost
            if ng >= best_g.get(successor, np.inf):
                continue
            best_g[successor] = ng
            parents[successor] = state
            nh = heuristic(successor)
            actions = tuple(int(a) for a, _ in combo)
            heapq.heappush(open_list, (ng + nh, nh, actions, next(counter), ng, successor))

    raise Infeasible("joint state space exhausted without reaching the goals")


# ---------------------------------------------------------------------------
# Plan text format and dispatch
# ---------------------------------------------------------------------------

def format_plan(plan: Plan) -> str:
    """One line per timestep with space-separated ``x,y`` pairs per agent."""
    lines = []
    for t in range(plan.length):
        lines.append(" ".join(f"{x},{y}" for x, y in plan.positions_at(t)))
    return "\n".join(lines) + "\n"


def parse_plan(text: str, goals: Optional[Sequence[Cell]] = None, method: str = "") -> Plan:
    rows = [line.split() for line in text.splitlines() if line.strip()]
    if not rows:
        raise PlanValidationError("empty plan text")
    steps = [[tuple(int(v) for v in pair.split(",")) for pair in row] for row in rows]
    if len({len(s) for s in steps}) != 1:
        raise PlanValidationError("timesteps list different agent counts")
    paths = tuple(tuple(s[i] for s in steps) for i in range(len(steps[0])))
    goals = tuple(tuple(g) for g in goals) if goals is not None else tuple(p[-1] for p in paths)
    return Plan(paths, goals, makespan_of(paths, goals), method=method)


PLANNERS = ("cbs", "joint_astar")


def plan_scenario(method: str, scenario: Scenario, weight: float = 0.0,
                  time_limit: float = TIME_LIMIT) -> Plan:
    if method == "cbs":
        plan = cbs(scenario.grid_map, scenario.starts, scenario.goals, time_limit)
    elif method == "joint_astar":
        plan = joint_astar(scenario.grid_map, scenario.starts, scenario.goals,
                           scenario.formation, weight, time_limit)
    else:
        raise ContractViolation(f"unknown planner '{method}', expected one of {PLANNERS}")
    plan.total_formation_loss = float(sum(plan_formation_losses(plan, scenario.formation)))
    return plan
