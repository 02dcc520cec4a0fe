"""Off-policy Q-learning for the path, formation and meta policies.

Every phase runs the same loop: agents decide sequentially (leader first,
followers seeing the announced prior actions), transitions go to a replay
buffer, and the online value function takes a double-Q step toward
``r + discount * Q_target(o', argmax_a Q_online(o', a))``. The formation,
meta and (optionally) end-to-end phases store one transition per team and
sum the agents' values (VDN); the path phase learns per agent.
"""

import csv
import os
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from config.settings import BACKEND, EPISODE_LENGTH_FACTOR, FOV, SEED
from core.coordination import (SLOT_WIDTH, Mode, decision_order, encode_prior_actions, majority_mode,
                               mask_claimed, run_protocol)
from core.errors import ConfigError, ContractViolation
from core.gridworld import (DELTAS, Action, FormationGridEnv, Observation, PriorActions, RewardVector,
                            formation_preset, generate_map_pool)
from core.logger import setup_logger
from services.replay_buffer import ReplayBuffer, Transition
from services.value_functions import ValueFunction, load_checkpoint, make_value_function, save_checkpoint

logger = setup_logger(__name__)

N_ACTIONS = len(Action)
META_ACTIONS = len(Mode)
PHASES = ("path", "formation", "meta", "end2end")
DEADLINE_SLACK = 5


@dataclass
class TrainConfig:
    discount: float = 0.95
    batch_size: int = 32
    target_update_interval: int = 10
    learning_rate: float = 1e-3
    tabular_alpha: float = 0.2
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: Optional[int] = None
    episode_limit: Optional[int] = None
    total_episodes: int = 500
    replay_capacity: int = 100_000
    backend: str = BACKEND
    # "local": each phase keys its table on local features; "observation": on the whole vector
    tabular_key: str = "local"
    hidden_width: int = 64
    vdn: bool = True
    use_prior_actions: bool = True
    claim_mask: bool = True
    seed: int = SEED
    log_interval: int = 50
    # Environment of the default factories
    map_size: int = 10
    density: float = 0.05
    agent_count: int = 3
    formation: str = "line"
    pool_size: int = 100

    def __post_init__(self):
        if not 0.0 < self.discount <= 1.0:
            raise ConfigError(f"discount must lie in (0, 1], got {self.discount}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.target_update_interval < 1:
            raise ConfigError("target_update_interval must be at least 1")
        if self.backend not in ("tabular", "mlp"):
            raise ConfigError(f"unknown backend '{self.backend}'")
        if self.tabular_key not in ("local", "observation"):
            raise ConfigError(f"tabular_key must be 'local' or 'observation', got '{self.tabular_key}'")

    @classmethod
    def from_dict(cls, raw: Dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path: str) -> "TrainConfig":
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
        if "train" in raw:
            return cls.from_dict(raw["train"] or {})
        return cls.from_dict({k: v for k, v in raw.items() if k != "bench"})

    def decay_steps(self, episode_limit: Optional[int] = None) -> int:
        """Linear decay over the first half of all training steps unless set explicitly."""
        if self.epsilon_decay_steps is not None:
            return max(1, self.epsilon_decay_steps)
        limit = episode_limit or self.episode_limit or EPISODE_LENGTH_FACTOR * self.map_size
        return max(1, int(0.5 * self.total_episodes * limit))

    def formation_offsets(self) -> np.ndarray:
        return formation_preset(self.formation, self.agent_count)


@dataclass
class EpisodeLog:
    episode: int
    reward: float
    steps: int
    formation_loss: float
    success: bool


LOG_COLUMNS = [f.name for f in fields(EpisodeLog)]


def write_training_log(rows: Sequence[EpisodeLog], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))


def read_training_log(path: str) -> List[EpisodeLog]:
    with open(path, newline="") as f:
        return [EpisodeLog(int(r["episode"]), float(r["reward"]), int(r["steps"]),
                           float(r["formation_loss"]), r["success"] == "True")
                for r in csv.DictReader(f)]


# ---------------------------------------------------------------------------
# Observation encoding and action selection
# ---------------------------------------------------------------------------

def observation_size(agent_count: int, fov: int = FOV) -> int:
    return 4 * fov * fov + SLOT_WIDTH * agent_count


def encode_observation(observation: Observation, agent_count: int) -> np.ndarray:
    return np.concatenate([observation.channels().ravel(),
                           encode_prior_actions(observation.prior_actions, agent_count)]).astype(np.float32)


def clip_actions_path(observation: Observation, valid_actions: Sequence[Action],
                      cost_values: Optional[Dict[Action, float]] = None) -> Tuple[Action, ...]:
    """Drop valid moves whose destination has a higher cost-map value than the current cell.

    Costs come from the observation's cost channel unless ``cost_values``
    (destination cost per action, Stay giving the current cell) is passed.
    """
    if not valid_actions:
        raise ContractViolation("clipping needs at least one valid action")
    if cost_values is None:
        r = observation.cost_channel.shape[0] // 2
        cost_values = {}
        for a in valid_actions:
            dx, dy = DELTAS[Action(a)]
            cost_values[Action(a)] = float(observation.cost_channel[r + dy, r + dx])
        current = float(observation.cost_channel[r, r])
    else:
        current = cost_values[Action.STAY]
    kept = tuple(Action(a) for a in valid_actions if a == Action.STAY or cost_values[Action(a)] <= current)
    return kept or (Action.STAY,)


def greedy_action(value_fn: ValueFunction, vector: np.ndarray, allowed: Sequence[int]) -> int:
    """Highest-valued allowed action, lowest index on ties."""
    q = value_fn.q_values(vector)[0]
    return int(min(allowed, key=lambda a: (-q[int(a)], int(a))))


def epsilon_greedy(value_fn: ValueFunction, vector: np.ndarray, allowed: Sequence[int],
                   epsilon: float, rng: np.random.Generator) -> int:
    if epsilon > 0 and rng.random() < epsilon:
        return int(allowed[int(rng.integers(len(allowed)))])
    return greedy_action(value_fn, vector, allowed)


def epsilon_at(config: TrainConfig, step: int, episode_limit: Optional[int] = None) -> float:
    frac = min(1.0, step / config.decay_steps(episode_limit))
    return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)


def vdn_joint_q(per_agent_q_values: Sequence[float]) -> float:
    """Joint value of a team as the sum of the agents' values."""
    if len(per_agent_q_values) == 0:
        raise ContractViolation("VDN needs at least one agent value")
    return float(np.sum(per_agent_q_values))


def double_q_targets(online: ValueFunction, target: ValueFunction, batch: Sequence[Transition],
                     discount: float) -> np.ndarray:
    """``r + discount * sum_i Q_target(o'_i, argmax_{a allowed} Q_online(o'_i, a))``, or ``r`` when done."""
    live = [tr for tr in batch if not tr.done]
    ys = np.array([tr.reward for tr in batch], dtype=np.float64)
    if not live:
        return ys
    stacked = np.stack([vec for tr in live for vec in tr.next_obs])
    q_online = online.q_values(stacked)
    q_target = target.q_values(stacked)
    row = 0
    bootstrap = {}
    for tr in live:
        values = []
        for allowed in tr.next_allowed:
            best = min(allowed, key=lambda a: (-q_online[row, a], a))
            values.append(q_target[row, best])
            row += 1
        bootstrap[id(tr)] = vdn_joint_q(values)
    for i, tr in enumerate(batch):
        if not tr.done:
            ys[i] += discount * bootstrap[id(tr)]
    return ys


# ---------------------------------------------------------------------------
# Policy bundle
# ---------------------------------------------------------------------------

@dataclass
class PolicyBundle:
    path_policy: ValueFunction
    formation_policy: ValueFunction
    meta_policy: Optional[ValueFunction]
    w_f: float
    agent_count: int
    force_mode: Optional[Mode] = None
    # Agents fall back to path finding once the steps left no longer exceed cost-to-go + slack.
    deadline_slack: Optional[int] = DEADLINE_SLACK

    def meta_action(self, vector: np.ndarray) -> int:
        if self.force_mode is not None:
            return int(self.force_mode)
        if self.meta_policy is None:
            return int(Mode.PATH_FINDING)
        return greedy_action(self.meta_policy, vector, (0, 1))

    def out_of_time(self, env: FormationGridEnv, agent: int) -> bool:
        if self.deadline_slack is None or self.force_mode is not None or self.meta_policy is None:
            return False
        remaining = env.episode_limit - env.world.t
        return remaining <= env.cost_maps[agent].value(env.world.positions[agent]) + self.deadline_slack

    def choose_mode(self, env: FormationGridEnv, agent: int, vector: np.ndarray) -> int:
        if self.out_of_time(env, agent):
            return int(Mode.PATH_FINDING)
        return self.meta_action(vector)

    def low_action(self, env: FormationGridEnv, agent: int, observation: Observation,
                   vector: np.ndarray, mode: Mode, claim_mask: bool, prior: PriorActions) -> Action:
        allowed = low_level_allowed(env, agent, observation, mode, claim_mask, prior)
        policy = self.formation_policy if Mode(mode) == Mode.FORMATION else self.path_policy
        return Action(greedy_action(policy, vector, allowed))

    def act(self, env: FormationGridEnv, agent: int, prior: PriorActions,
            claim_mask: bool = True) -> Tuple[Action, int]:
        observation = env.observe(agent, prior)
        vector = encode_observation(observation, self.agent_count)
        meta = self.choose_mode(env, agent, vector)
        return self.low_action(env, agent, observation, vector, Mode(meta), claim_mask, prior), meta

    def poll_modes(self, env: FormationGridEnv) -> List[int]:
        return [self.choose_mode(env, i, encode_observation(env.observe(i), self.agent_count))
                for i in range(env.agent_count)]

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        save_checkpoint(self.path_policy, os.path.join(directory, "path_policy.pt"))
        save_checkpoint(self.formation_policy, os.path.join(directory, "formation_policy.pt"))
        if self.meta_policy is not None:
            save_checkpoint(self.meta_policy, os.path.join(directory, "meta_policy.pt"))
        with open(os.path.join(directory, "bundle.yaml"), "w") as f:
            yaml.safe_dump({"w_f": float(self.w_f), "agent_count": self.agent_count,
                            "deadline_slack": self.deadline_slack}, f)

    @classmethod
    def load(cls, directory: str) -> "PolicyBundle":
        with open(os.path.join(directory, "bundle.yaml")) as f:
            meta = yaml.safe_load(f)
        meta_path = os.path.join(directory, "meta_policy.pt")
        return cls(load_checkpoint(os.path.join(directory, "path_policy.pt")),
                   load_checkpoint(os.path.join(directory, "formation_policy.pt")),
                   load_checkpoint(meta_path) if os.path.exists(meta_path) else None,
                   float(meta["w_f"]), int(meta["agent_count"]),
                   deadline_slack=meta.get("deadline_slack", DEADLINE_SLACK))


def low_level_allowed(env: FormationGridEnv, agent: int, observation: Observation, mode: Mode,
                      claim_mask: bool, prior: PriorActions) -> Tuple[Action, ...]:
    """Path mode clips cost-increasing moves; formation mode only removes invalid ones."""
    valid = env.valid_actions(agent)
    allowed = clip_actions_path(observation, valid) if Mode(mode) == Mode.PATH_FINDING else valid
    if claim_mask and prior:
        allowed = mask_claimed(env.world, env.grid_map, agent, allowed, prior)
    return allowed


# ---------------------------------------------------------------------------
# Environment factories
# ---------------------------------------------------------------------------

EnvFactory = Callable[[np.random.Generator], FormationGridEnv]


def make_env_factory(config: TrainConfig, start_mode: str, maps=None) -> EnvFactory:
    """Pick a map uniformly from a pool every episode; envs are cached per map."""
    if maps is None:
        density = config.density if start_mode != "connected" else min(config.density, 0.05)
        maps = generate_map_pool(config.pool_size, config.map_size, density, config.seed,
                                 agent_count=config.agent_count)
    offsets = config.formation_offsets()
    cache: Dict[int, FormationGridEnv] = {}

    def factory(rng: np.random.Generator) -> FormationGridEnv:
        idx = int(rng.integers(len(maps)))
        if idx not in cache:
            cache[idx] = FormationGridEnv(maps[idx], offsets, episode_limit=config.episode_limit,
                                          start_mode=start_mode)
        return cache[idx]

    return factory


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _phase_reward(phase: str, reward: RewardVector, loss: float, w_f: float) -> float:
    if phase == "path":
        return reward.r_path
    if phase == "formation":
        return reward.r_formation
    if phase == "meta":
        return reward.r_meta
    return reward.r_path - w_f * loss


def _store(buffer: ReplayBuffer, pending, next_vectors, next_allowed, done: bool, joint: bool) -> None:
    vectors, actions, rewards = pending
    agents = sorted(vectors)
    if joint:
        buffer.append(Transition(tuple(vectors[i] for i in agents), tuple(actions[i] for i in agents),
                                 float(sum(rewards)), tuple(next_vectors[i] for i in agents),
                                 tuple(next_allowed[i] for i in agents), done))
        return
    for i in agents:
        buffer.append(Transition((vectors[i],), (actions[i],), float(rewards[i]),
                                 (next_vectors[i],), (next_allowed[i],), done))


def _truncated_view(phase: str, env: FormationGridEnv):
    """Next vectors and allowed actions of every agent after the last step, seen without prior actions."""
    k = env.agent_count
    vectors, allowed = {}, {}
    for i in range(k):
        observation = env.observe(i)
        vectors[i] = encode_observation(observation, k)
        if phase == "meta":
            allowed[i] = tuple(range(META_ACTIONS))
        else:
            mode = Mode.FORMATION if phase == "formation" else Mode.PATH_FINDING
            allowed[i] = tuple(int(a) for a in low_level_allowed(env, i, observation, mode, False, ()))
    return vectors, allowed


def _learn(online: ValueFunction, target: ValueFunction, buffer: ReplayBuffer,
           config: TrainConfig, rng: np.random.Generator) -> float:
    batch = buffer.sample(config.batch_size, rng)
    ys = double_q_targets(online, target, batch, config.discount)
    return online.td_update([tr.obs for tr in batch], [tr.actions for tr in batch], ys)


def _run_training(phase: str, value_fn: ValueFunction, env_factory: EnvFactory, config: TrainConfig,
                  w_f: float = 0.0, bundle: Optional[PolicyBundle] = None) -> ValueFunction:
    rng = np.random.default_rng(config.seed)
    target = value_fn.clone()
    buffer = ReplayBuffer(config.replay_capacity)
    joint = phase in ("formation", "meta") or (phase == "end2end" and config.vdn)
    steps_taken = 0
    logger.info(f"Training {phase} policy ({value_fn.kind}) for {config.total_episodes} episodes")

    for episode in range(1, config.total_episodes + 1):
        env = env_factory(rng)
        if env.agent_count != config.agent_count:
            raise ContractViolation(f"environment has {env.agent_count} agents, config says {config.agent_count}")
        env.w_f = w_f
        env.reset(seed=int(rng.integers(2 ** 31 - 1)))
        k = env.agent_count
        pending = None
        episode_reward = 0.0
        losses = []
        done = False

        while not done:
            epsilon = epsilon_at(config, steps_taken, env.episode_limit)
            vectors: Dict[int, np.ndarray] = {}
            allowed: Dict[int, Tuple[int, ...]] = {}
            chosen: Dict[int, int] = {}

            if phase == "formation":
                mode = Mode.FORMATION
            elif phase == "meta":
                mode = majority_mode(greedy_action(value_fn, encode_observation(env.observe(i), k), (0, 1))
                                     for i in range(k))
            else:
                mode = Mode.PATH_FINDING
            order = decision_order(env.world, env.cost_maps, env.formation, mode)

            def decide(agent: int, prior: PriorActions) -> Action:
                observation = env.observe(agent, prior)
                vector = encode_observation(observation, k)
                if phase == "meta":
                    meta_allowed = tuple(range(META_ACTIONS))
                    meta = epsilon_greedy(value_fn, vector, meta_allowed, epsilon, rng)
                    action = bundle.low_action(env, agent, observation, vector, Mode(meta),
                                               config.claim_mask and config.use_prior_actions, prior)
                    learned, options = meta, meta_allowed
                else:
                    low_mode = Mode.FORMATION if phase == "formation" else Mode.PATH_FINDING
                    options = tuple(int(a) for a in low_level_allowed(
                        env, agent, observation, low_mode, config.claim_mask and config.use_prior_actions, prior))
                    action = learned = epsilon_greedy(value_fn, vector, options, epsilon, rng)
                vectors[agent] = vector
                allowed[agent] = tuple(int(a) for a in options)
                chosen[agent] = int(learned)
                return Action(action)

            joint_action = run_protocol(order, decide, k, config.use_prior_actions, t=env.world.t, mode=mode)
            if pending is not None:
                _store(buffer, pending, vectors, allowed, False, joint)

            result = env.step(joint_action)
            rewards = [_phase_reward(phase, r, result.info.formation_loss, w_f) for r in result.rewards]
            pending = (vectors, chosen, rewards)
            done = result.done
            steps_taken += 1
            episode_reward += float(np.mean(rewards))
            losses.append(result.info.formation_loss)

            if len(buffer) >= config.batch_size:
                _learn(value_fn, target, buffer, config, rng)

        if all(env.world.done_flags):
            _store(buffer, pending, pending[0], {i: tuple(range(value_fn.n_actions)) for i in pending[0]}, True, joint)
        else:
            # hitting the episode limit truncates the return, the last transition still bootstraps
            _store(buffer, pending, *_truncated_view(phase, env), False, joint)
        if episode % config.target_update_interval == 0:
            target.restore(value_fn.snapshot())

        log = EpisodeLog(episode, episode_reward, env.world.t, float(np.mean(losses)), all(env.world.done_flags))
        value_fn.history.append(log)
        if episode % config.log_interval == 0 or episode == config.total_episodes:
            logger.info(f"[{phase}] episode {episode}: reward={log.reward:.2f} steps={log.steps} "
                        f"formation_loss={log.formation_loss:.3f} success={log.success} epsilon={epsilon:.3f}")

    value_fn.trained = True
    return value_fn


def _new_value_function(config: TrainConfig, n_actions: int, phase: str) -> ValueFunction:
    key = phase if config.tabular_key == "local" else "observation"
    return make_value_function(config.backend, observation_size(config.agent_count), n_actions,
                               alpha=config.tabular_alpha, key=key, hidden_width=config.hidden_width,
                               learning_rate=config.learning_rate, seed=config.seed)


def train_path_policy(env_factory: Optional[EnvFactory], config: TrainConfig) -> ValueFunction:
    """Independent per-agent Q-learning on the path-finding rewards with cost-map clipping."""
    env_factory = env_factory or make_env_factory(config, "random")
    return _run_training("path", _new_value_function(config, N_ACTIONS, "path"), env_factory, config)


def train_formation_policy(config: TrainConfig, env_factory: Optional[EnvFactory] = None) -> ValueFunction:
    """VDN Q-learning on the formation rewards from FOV-connected random spawns."""
    env_factory = env_factory or make_env_factory(config, "connected")
    return _run_training("formation", _new_value_function(config, N_ACTIONS, "formation"), env_factory, config)


def train_meta_policy(path_policy: ValueFunction, formation_policy: ValueFunction, w_f: float,
                      config: TrainConfig, env_factory: Optional[EnvFactory] = None) -> ValueFunction:
    """VDN Q-learning of the per-step choice between the two frozen low-level policies."""
    if not (path_policy.trained and formation_policy.trained):
        raise ContractViolation("meta training needs trained path and formation policies")
    path_policy.frozen = True
    formation_policy.frozen = True
    bundle = PolicyBundle(path_policy, formation_policy, None, w_f, config.agent_count)
    env_factory = env_factory or make_env_factory(config, "formation")
    return _run_training("meta", _new_value_function(config, META_ACTIONS, "meta"), env_factory, config,
                         w_f=w_f, bundle=bundle)


def train_end_to_end_baseline(config: TrainConfig, w_f: float,
                              env_factory: Optional[EnvFactory] = None) -> ValueFunction:
    """Flat policy on ``r_path - w_f * L_f`` with path clipping and no hierarchy."""
    env_factory = env_factory or make_env_factory(config, "formation")
    return _run_training("end2end", _new_value_function(config, N_ACTIONS, "end2end"), env_factory, config,
                         w_f=w_f)
