"""Benchmark harness: run every method on shared map cells and write reports."""

import csv
import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from config.settings import SEED, TIME_LIMIT
from core.error_handler import handle_errors
from core.errors import ConfigError, ContractViolation, Infeasible, PlannerTimeout
from core.gridworld import Scenario, formation_preset, generate_map_pool
from core.logger import setup_logger
from services.execution import DEFAULT_WARMUP_STEPS, EpisodeResult, run_hierarchical_episode
from services.learning import EpisodeLog, PolicyBundle, write_training_log
from services.planners import PLANNERS, evaluate_plan, plan_scenario
from services.scalarization import WEIGHT_REPORT, ParetoPoint, load_weight_report

logger = setup_logger(__name__)

__all__ = ["BenchmarkConfig", "ResultRow", "generate_map_pool", "joint_astar_weight", "load_benchmark_config",
           "run_benchmark", "emit_reports", "parse_results_csv", "summary_table", "timeout_dominated"]

METHODS = ("ours",) + PLANNERS
RESULT_COLUMNS = ["size", "agents", "density", "method", "makespan", "formation_loss", "success", "runtime"]
PARETO_COLUMNS = ["weight", "makespan", "formation_loss", "source", "multiplier", "success"]
MISSING = "-"


@dataclass
class BenchmarkConfig:
    map_sizes: List[int] = field(default_factory=lambda: [10, 20])
    densities: List[float] = field(default_factory=lambda: [0.05])
    agent_counts: List[int] = field(default_factory=lambda: [3])
    formation: str = "line"
    methods: List[str] = field(default_factory=lambda: list(METHODS))
    seed: int = SEED
    maps_per_cell: int = 10
    episodes_per_map: int = 3
    time_limit: float = TIME_LIMIT
    warmup_steps: int = DEFAULT_WARMUP_STEPS
    policy_dir: Optional[str] = None
    workers: int = 1
    # None: the bundle's w_f, else the weight report in policy_dir, else 0.
    joint_astar_weight: Optional[float] = None

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; expected a subset of {METHODS}")
        if any(s < 10 for s in self.map_sizes):
            raise ConfigError(f"map sizes must be at least 10, got {self.map_sizes}")
        if any(not 0.0 <= d < 0.5 for d in self.densities):
            raise ConfigError(f"densities must lie in [0, 0.5), got {self.densities}")
        if any(k < 1 for k in self.agent_counts):
            raise ConfigError(f"agent counts must be positive, got {self.agent_counts}")
        if self.maps_per_cell < 1 or self.episodes_per_map < 1 or self.workers < 1:
            raise ConfigError("maps_per_cell, episodes_per_map and workers must be positive")
        if self.time_limit <= 0 or self.warmup_steps < 0:
            raise ConfigError("time_limit must be positive and warmup_steps non-negative")
        if self.joint_astar_weight is not None and self.joint_astar_weight < 0:
            raise ConfigError(f"joint_astar_weight must be non-negative, got {self.joint_astar_weight}")

    @property
    def cells(self) -> List[Tuple[int, float, int]]:
        return list(itertools.product(self.map_sizes, self.densities, self.agent_counts))


def load_benchmark_config(path: str) -> BenchmarkConfig:
    try:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read benchmark config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"benchmark config {path} must be a mapping")
    raw = raw.get("bench", raw)
    unknown = set(raw) - {f.name for f in fields(BenchmarkConfig)}
    if unknown:
        raise ConfigError(f"unknown benchmark config keys: {sorted(unknown)}")
    return BenchmarkConfig(**raw)


@dataclass
class ResultRow:
    size: int
    agents: int
    density: float
    method: str
    makespan: Optional[float]
    formation_loss: Optional[float]
    success: float
    runtime: float

    @property
    def timed_out(self) -> bool:
        return self.makespan is None

    @property
    def cell(self) -> Tuple[int, int, float]:
        return self.size, self.agents, self.density


def _missing_row(size: int, agents: int, density: float, method: str, runtime: float) -> ResultRow:
    return ResultRow(size, agents, density, method, None, None, 0.0, runtime)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

def _best_episode(episodes: Sequence[EpisodeResult]) -> EpisodeResult:
    return min(episodes, key=lambda e: (not e.success, e.makespan, e.formation_loss))


def _run_ours(bundle: PolicyBundle, scenarios: Sequence[Scenario], config: BenchmarkConfig,
              cell: Tuple[int, float, int]) -> ResultRow:
    size, density, agents = cell
    if bundle.agent_count != agents:
        raise ContractViolation(f"policy was trained for {bundle.agent_count} agents, cell has {agents}")
    best = []
    for m, scenario in enumerate(scenarios):
        env = scenario.env(bundle.w_f)
        episodes = [run_hierarchical_episode(bundle, env, seed=config.seed + 1000 * m + e,
                                             warmup_steps=config.warmup_steps)
                    for e in range(config.episodes_per_map)]
        best.append(_best_episode(episodes))
    return ResultRow(size, agents, density, "ours",
                     float(np.mean([e.makespan for e in best])),
                     float(np.mean([e.formation_loss for e in best])),
                     float(np.mean([e.success for e in best])),
                     float(np.mean([e.decision_seconds for e in best])))


def _run_planner(method: str, scenarios: Sequence[Scenario], config: BenchmarkConfig,
                 cell: Tuple[int, float, int], weight: float = 0.0) -> ResultRow:
    size, density, agents = cell
    metrics = []
    runtimes = []
    for scenario in scenarios:
        try:
            plan = plan_scenario(method, scenario, weight, config.time_limit)
        except PlannerTimeout:
            logger.warning(f"{method} timed out on cell {cell}")
            return _missing_row(size, agents, density, method, config.time_limit)
        except Infeasible as e:
            logger.warning(f"{method} found no plan on cell {cell}: {e}")
            continue
        metrics.append(evaluate_plan(plan, scenario.formation, size, scenario.grid_map))
        runtimes.append(plan.runtime)
    if not metrics:
        return _missing_row(size, agents, density, method, config.time_limit)
    return ResultRow(size, agents, density, method,
                     float(np.mean([m.makespan for m in metrics])),
                     float(np.mean([m.formation_loss for m in metrics])),
                     sum(m.success for m in metrics) / len(scenarios),
                     float(np.mean(runtimes)))


@handle_errors(fallback=None)
def _run_method(method: str, bundle: Optional[PolicyBundle], scenarios: Sequence[Scenario],
                config: BenchmarkConfig, cell: Tuple[int, float, int], weight: float = 0.0) -> ResultRow:
    if method == "ours":
        if bundle is None:
            raise ContractViolation("method 'ours' needs a trained policy bundle")
        return _run_ours(bundle, scenarios, config, cell)
    return _run_planner(method, scenarios, config, cell, weight)


def _run_cell(config: BenchmarkConfig, cell_index: int, cell: Tuple[int, float, int],
              bundle: Optional[PolicyBundle], weight: float = 0.0) -> List[ResultRow]:
    size, density, agents = cell
    offsets = formation_preset(config.formation, agents)
    maps = generate_map_pool(config.maps_per_cell, size, density, config.seed + 1000 * cell_index,
                             agent_count=agents)
    scenarios = [Scenario.from_map(m, offsets, config.seed) for m in maps]
    logger.info(f"Cell size={size} density={density} agents={agents}: {len(scenarios)} maps")

    rows = []
    for method in config.methods:
        row = _run_method(method, bundle, scenarios, config, cell, weight)
        rows.append(row if row is not None else _missing_row(size, agents, density, method, 0.0))
    return rows


def joint_astar_weight(config: BenchmarkConfig, bundle: Optional[PolicyBundle] = None) -> float:
    if config.joint_astar_weight is not None:
        return float(config.joint_astar_weight)
    if bundle is not None:
        return float(bundle.w_f)
    if config.policy_dir:
        report = os.path.join(config.policy_dir, WEIGHT_REPORT)
        if os.path.exists(report):
            return float(load_weight_report(report).w_f)
    return 0.0


def run_benchmark(config: BenchmarkConfig, bundle: Optional[PolicyBundle] = None) -> List[ResultRow]:
    """One row per (cell, method); every method in a cell sees the same maps and assignments."""
    if bundle is None and "ours" in config.methods and config.policy_dir:
        bundle = PolicyBundle.load(config.policy_dir)
    weight = joint_astar_weight(config, bundle)
    if "joint_astar" in config.methods:
        logger.info(f"Joint A* plans with formation weight {weight:.4f}")
    cells = config.cells
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        jobs = [pool.submit(_run_cell, config, i, cell, bundle, weight) for i, cell in enumerate(cells)]
        rows = [row for job in jobs for row in job.result()]
    logger.info(f"Benchmark finished: {len(rows)} rows, {sum(r.timed_out for r in rows)} missing")
    return rows


def timeout_dominated(rows: Sequence[ResultRow]) -> bool:
    return bool(rows) and 2 * sum(r.timed_out for r in rows) > len(rows)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _cell_value(value) -> str:
    return MISSING if value is None else str(value)


def write_results_csv(rows: Sequence[ResultRow], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_cell_value(getattr(row, c)) for c in RESULT_COLUMNS])


def parse_results_csv(path: str) -> List[ResultRow]:
    def optional(value: str) -> Optional[float]:
        return None if value == MISSING else float(value)

    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != RESULT_COLUMNS:
            raise ConfigError(f"{path} has columns {reader.fieldnames}, expected {RESULT_COLUMNS}")
        return [ResultRow(int(r["size"]), int(r["agents"]), float(r["density"]), r["method"],
                          optional(r["makespan"]), optional(r["formation_loss"]),
                          float(r["success"]), float(r["runtime"]))
                for r in reader]


def write_pareto_csv(points: Sequence[ParetoPoint], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=PARETO_COLUMNS)
        writer.writeheader()
        for point in points:
            writer.writerow(asdict(point))


def summary_table(rows: Sequence[ResultRow]) -> str:
    """Text table with one line per cell and makespan / loss / success per method."""
    methods = list(dict.fromkeys(r.method for r in rows))
    by_cell: Dict[Tuple[int, int, float], Dict[str, ResultRow]] = {}
    for row in rows:
        by_cell.setdefault(row.cell, {})[row.method] = row

    header = f"{'size':>6} {'agents':>6} {'d':>5}"
    for method in methods:
        header += f" | {method + ' makespan':>22} {'loss':>8} {'success':>7}"
    lines = [header, "-" * len(header)]
    for (size, agents, density), entries in sorted(by_cell.items()):
        line = f"{size:>6} {agents:>6} {density:>5.2f}"
        for method in methods:
            row = entries.get(method)
            if row is None or row.timed_out:
                success = "0.00" if row else MISSING
                line += f" | {MISSING:>22} {MISSING:>8} {success:>7}"
            else:
                line += f" | {row.makespan:>22.1f} {row.formation_loss:>8.3f} {row.success:>7.2f}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def emit_reports(rows: Sequence[ResultRow], pareto_points: Sequence[ParetoPoint],
                 training_logs: Dict[str, Sequence[EpisodeLog]], out_dir: str) -> List[str]:
    """Write ``results.csv``, ``pareto.csv``, ``training_<name>.csv`` and ``summary.txt``."""
    if not rows and not pareto_points and not any(training_logs.values()):
        raise ContractViolation("nothing to report")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if rows:
        path = os.path.join(out_dir, "results.csv")
        write_results_csv(rows, path)
        written.append(path)
        path = os.path.join(out_dir, "summary.txt")
        with open(path, "w") as f:
            f.write(summary_table(rows))
        written.append(path)
    if pareto_points:
        path = os.path.join(out_dir, "pareto.csv")
        write_pareto_csv(pareto_points, path)
        written.append(path)
    for name, log in training_logs.items():
        if log:
            path = os.path.join(out_dir, f"training_{name}.csv")
            write_training_log(log, path)
            written.append(path)
    logger.info(f"Wrote {len(written)} report files to {out_dir}")
    return written
