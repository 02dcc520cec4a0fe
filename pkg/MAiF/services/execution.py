"""Greedy decentralized rollouts of trained policies."""

import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from core.coordination import (ActionChannel, Mode, decision_order, majority_mode, run_protocol,
                               sequential_decide)
from core.errors import ContractViolation
from core.gridworld import Action, Cell, FormationGridEnv, PriorActions
from core.logger import setup_logger
from services.learning import PolicyBundle, encode_observation, greedy_action, low_level_allowed
from services.value_functions import ValueFunction

logger = setup_logger(__name__)

JointActor = Callable[[FormationGridEnv, np.random.Generator], Tuple[Action, ...]]

DEFAULT_WARMUP_STEPS = 5


@dataclass
class EpisodeResult:
    makespan: int
    formation_loss: float
    success: bool
    collisions: int
    decision_seconds: float
    trajectory: List[Tuple[Cell, ...]] = field(default_factory=list)
    meta_counts: Counter = field(default_factory=Counter)
    messages: int = 0


def random_policy(env: FormationGridEnv, rng: np.random.Generator) -> Tuple[Action, ...]:
    """Uniform choice over each agent's valid actions."""
    joint = []
    for i in range(env.agent_count):
        valid = env.valid_actions(i)
        joint.append(valid[int(rng.integers(len(valid)))])
    return tuple(joint)


def _low_level_actor(value_fn: ValueFunction, mode: Mode, use_prior_actions: bool) -> JointActor:
    def actor(env: FormationGridEnv, rng: np.random.Generator) -> Tuple[Action, ...]:
        k = env.agent_count

        def decide(agent: int, prior: PriorActions) -> Action:
            observation = env.observe(agent, prior)
            allowed = low_level_allowed(env, agent, observation, mode, use_prior_actions, prior)
            return Action(greedy_action(value_fn, encode_observation(observation, k), allowed))

        order = decision_order(env.world, env.cost_maps, env.formation, mode)
        return run_protocol(order, decide, k, use_prior_actions, t=env.world.t, mode=mode)

    return actor


def formation_policy_actor(value_fn: ValueFunction, use_prior_actions: bool = True) -> JointActor:
    return _low_level_actor(value_fn, Mode.FORMATION, use_prior_actions)


def path_policy_actor(value_fn: ValueFunction, use_prior_actions: bool = True) -> JointActor:
    return _low_level_actor(value_fn, Mode.PATH_FINDING, use_prior_actions)


def hierarchical_step(bundle: PolicyBundle, env: FormationGridEnv, use_prior_actions: bool = True,
                      channel: Optional[ActionChannel] = None) -> Tuple[Tuple[Action, ...], dict]:
    """One decentralized timestep: poll meta actions, elect the leader, decide sequentially."""
    mode = majority_mode(bundle.poll_modes(env))
    order = decision_order(env.world, env.cost_maps, env.formation, mode)
    meta = {}
    joint = sequential_decide(bundle, env, order, use_prior_actions, channel, mode, meta)
    return joint, meta


def run_hierarchical_episode(bundle: PolicyBundle, env: FormationGridEnv, seed: Optional[int] = None,
                             warmup_steps: int = DEFAULT_WARMUP_STEPS,
                             use_prior_actions: bool = True) -> EpisodeResult:
    """Random warmup steps, then the greedy hierarchical policy until done.

    Decision time covers the greedy steps only and is reported per agent-step.
    """
    if warmup_steps < 0:
        raise ContractViolation(f"warmup_steps must be non-negative, got {warmup_steps}")
    rng = np.random.default_rng(seed)
    env.reset(seed=seed)
    channel = ActionChannel()
    trajectory = [env.world.positions]
    losses = []
    collisions = 0
    decision_time = 0.0
    decisions = 0
    meta_counts: Counter = Counter()
    done = False

    while not done:
        if env.world.t < warmup_steps:
            joint = random_policy(env, rng)
        else:
            started = time.perf_counter()
            joint, meta = hierarchical_step(bundle, env, use_prior_actions, channel)
            decision_time += time.perf_counter() - started
            decisions += env.agent_count
            meta_counts.update(Mode(m).name for m in meta.values())
        result = env.step(joint)
        trajectory.append(result.world.positions)
        losses.append(result.info.formation_loss)
        collisions += len(result.info.collisions)
        done = result.done

    success = all(env.world.done_flags)
    episode = EpisodeResult(
        makespan=env.world.t,
        formation_loss=float(np.mean(losses)) / env.grid_map.size,
        success=success,
        collisions=collisions,
        decision_seconds=decision_time / decisions if decisions else 0.0,
        trajectory=trajectory,
        meta_counts=meta_counts,
        messages=channel.total,
    )
    logger.debug(f"Episode seed={seed}: makespan={episode.makespan} loss={episode.formation_loss:.4f} "
                 f"success={success} collisions={collisions}")
    return episode


def run_actor_episode(actor: JointActor, env: FormationGridEnv, seed: Optional[int] = None) -> EpisodeResult:
    """Roll out an arbitrary joint actor with the same bookkeeping as the hierarchical episode."""
    rng = np.random.default_rng(seed)
    env.reset(seed=seed)
    trajectory = [env.world.positions]
    losses = []
    collisions = 0
    done = False
    while not done:
        result = env.step(actor(env, rng))
        trajectory.append(result.world.positions)
        losses.append(result.info.formation_loss)
        collisions += len(result.info.collisions)
        done = result.done
    return EpisodeResult(env.world.t, float(np.mean(losses)) / env.grid_map.size,
                         all(env.world.done_flags), collisions, 0.0, trajectory)
