"""Base weight for the formation penalty and Pareto sweeps around it.

The base weight balances the two objectives over an episode of ``T`` steps:
the path reward can move the return by about ``T`` while the formation term
moves it by the range of the expected summed loss change, so

    w_f = T / (e_max - e_min)

where ``e_min`` comes from rollouts of a trained formation policy and
``e_max`` from a uniform-random one.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import yaml

from config.settings import SEED, TIME_LIMIT
from core.error_handler import handle_errors
from core.errors import ConfigError, ContractViolation, DegenerateRange
from core.gridworld import Scenario
from core.logger import setup_logger
from services.execution import JointActor, run_hierarchical_episode
from services.learning import PolicyBundle
from services.planners import evaluate_plan, plan_scenario

logger = setup_logger(__name__)

MIN_EPISODES = 30
Z_95 = 1.96
SWEEP_MULTIPLIERS = (0.0, 1.0, 2.0, 3.0)
WEIGHT_REPORT = "weight_report.yaml"


@dataclass
class RolloutStats:
    mean: float
    variance: float
    count: int
    sums: List[float] = field(default_factory=list)

    @property
    def halfwidth(self) -> float:
        return Z_95 * math.sqrt(self.variance / self.count)


@dataclass
class WeightEstimate:
    T: int
    e_min: float
    e_max: float
    r_star: float
    w_f: float
    episodes_used: int = 0
    confidence_halfwidth: float = 0.0


def rollout_delta_sum(policy: JointActor, env, episodes: int = MIN_EPISODES,
                      horizon: Optional[int] = None, seed: int = SEED) -> RolloutStats:
    """Sample mean and variance of the per-episode summed formation-loss change.

    Each episode accumulates exactly ``horizon`` steps; steps after the
    episode ends contribute 0. ``env`` needs ``reset(seed)``, ``step(joint)``,
    ``formation_loss`` and ``episode_limit``.
    """
    horizon = env.episode_limit if horizon is None else horizon
    if horizon < 1:
        raise ContractViolation("rollouts need a positive horizon")
    if episodes < MIN_EPISODES:
        raise ContractViolation(f"at least {MIN_EPISODES} episodes are needed, got {episodes}")

    sums = []
    for episode in range(episodes):
        rng = np.random.default_rng([seed, episode])
        env.reset(seed=seed + episode)
        previous = env.formation_loss
        total = 0.0
        for _ in range(horizon):
            result = env.step(policy(env, rng))
            current = env.formation_loss
            total += current - previous
            previous = current
            if result.done:
                break
        sums.append(total)

    values = np.asarray(sums)
    variance = float(values.var(ddof=1)) if len(values) > 1 else 0.0
    return RolloutStats(float(values.mean()), variance, len(values), sums)


def compute_base_weight(e_min: float, e_max: float, T: int, episodes_used: int = 0,
                        confidence_halfwidth: float = 0.0) -> WeightEstimate:
    if T < 1:
        raise ContractViolation(f"horizon must be positive, got {T}")
    r_star = e_max - e_min
    if not r_star > 0:
        raise DegenerateRange(f"e_max ({e_max}) must exceed e_min ({e_min})")
    return WeightEstimate(int(T), float(e_min), float(e_max), float(r_star), T / r_star,
                          episodes_used, confidence_halfwidth)


def estimate_base_weight(formation_actor: JointActor, random_actor: JointActor, env,
                         episodes: int = MIN_EPISODES, seed: int = SEED) -> WeightEstimate:
    """Roll out both policies over the episode limit and turn the two means into ``w_f``.

    The halfwidth is the delta-method 95% interval of ``T / (e_max - e_min)``.
    """
    T = env.episode_limit
    low = rollout_delta_sum(formation_actor, env, episodes, T, seed)
    high = rollout_delta_sum(random_actor, env, episodes, T, seed)
    if low.mean > high.mean:
        logger.warning(f"Formation policy mean ({low.mean:.3f}) is above the random policy's "
                       f"({high.mean:.3f}); using the smaller as e_min")
        low, high = high, low

    r_star = high.mean - low.mean
    halfwidth = 0.0
    if r_star > 0:
        gradient = T / (r_star * r_star)
        halfwidth = Z_95 * gradient * math.sqrt(low.variance / low.count + high.variance / high.count)
    estimate = compute_base_weight(low.mean, high.mean, T, low.count + high.count, halfwidth)
    logger.info(f"Base weight w_f={estimate.w_f:.4f} (T={T}, e_min={estimate.e_min:.3f}, "
                f"e_max={estimate.e_max:.3f}, ±{halfwidth:.4f})")
    return estimate


def format_weight_report(estimate: WeightEstimate) -> str:
    return yaml.safe_dump({k: (float(v) if isinstance(v, (float, np.floating)) else v)
                           for k, v in asdict(estimate).items()}, sort_keys=False)


def save_weight_report(estimate: WeightEstimate, path: str) -> None:
    with open(path, "w") as f:
        f.write(format_weight_report(estimate))


def load_weight_report(path: str) -> WeightEstimate:
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    try:
        return WeightEstimate(**raw)
    except TypeError as e:
        raise ConfigError(f"malformed weight report {path}: {e}") from e


# ---------------------------------------------------------------------------
# Pareto sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParetoPoint:
    weight: float
    makespan: float
    formation_loss: float
    source: str = "learned"
    multiplier: float = 0.0
    success: float = 1.0


def non_dominated(points: Sequence[ParetoPoint]) -> List[ParetoPoint]:
    """Points not beaten on both makespan and formation loss by any other point."""
    def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
        return (a.makespan <= b.makespan and a.formation_loss <= b.formation_loss
                and (a.makespan < b.makespan or a.formation_loss < b.formation_loss))

    return [p for p in points if not any(dominates(q, p) for q in points if q is not p)]


@handle_errors(fallback=None)
def _learned_point(bundle_factory: Callable[[float], PolicyBundle], weight: float, multiplier: float,
                   instances: Sequence[Scenario], warmup_steps: int, seed: int) -> ParetoPoint:
    bundle = bundle_factory(weight)
    results = [run_hierarchical_episode(bundle, scenario.env(weight), seed + i, warmup_steps)
               for i, scenario in enumerate(instances)]
    return ParetoPoint(weight, float(np.mean([r.makespan for r in results])),
                       float(np.mean([r.formation_loss for r in results])), "learned", multiplier,
                       float(np.mean([r.success for r in results])))


@handle_errors(fallback=None)
def _exact_point(weight: float, multiplier: float, instances: Sequence[Scenario],
                 time_limit: float) -> ParetoPoint:
    metrics = []
    for scenario in instances:
        plan = plan_scenario("joint_astar", scenario, weight, time_limit)
        metrics.append(evaluate_plan(plan, scenario.formation, scenario.grid_map.size, scenario.grid_map))
    return ParetoPoint(weight, float(np.mean([m.makespan for m in metrics])),
                       float(np.mean([m.formation_loss for m in metrics])), "joint_astar", multiplier,
                       float(np.mean([m.success for m in metrics])))


def pareto_sweep(bundle_factory: Optional[Callable[[float], PolicyBundle]], multipliers: Sequence[float],
                 instances: Sequence[Scenario], base_weight: float = 1.0, exact: bool = True,
                 time_limit: float = TIME_LIMIT, warmup_steps: int = 0, seed: int = SEED) -> List[ParetoPoint]:
    """Evaluate the learned policy (and joint A*) at each multiple of the base weight.

    A failing point is logged and skipped; the sweep continues.
    """
    missing = set(SWEEP_MULTIPLIERS) - {float(m) for m in multipliers}
    if missing:
        raise ContractViolation(f"sweep multipliers must include {sorted(missing)}")
    if not instances:
        raise ContractViolation("pareto sweep needs at least one instance")

    points = []
    for multiplier in sorted(float(m) for m in multipliers):
        weight = multiplier * base_weight
        logger.info(f"Pareto point weight={weight:.4f} (x{multiplier:g})")
        if bundle_factory is not None:
            learned = _learned_point(bundle_factory, weight, multiplier, instances, warmup_steps, seed)
            if learned is not None:
                points.append(learned)
        if exact:
            point = _exact_point(weight, multiplier, instances, time_limit)
            if point is not None:
                points.append(point)
    return points
