from dataclasses import replace

import numpy as np
import pytest
import yaml

from config.settings import KEEP_FORMATION_EPS
from core.coordination import Mode
from core.errors import ConfigError, ContractViolation
from core.gridworld import (REWARD_FINISH, REWARD_TOWARD_GOAL, Action, FormationGridEnv, empty_map,
                            formation_preset, generate_map, generate_map_pool, move)
from services.execution import (formation_policy_actor, hierarchical_step, path_policy_actor, random_policy,
                                run_actor_episode, run_hierarchical_episode)
from services.learning import (EpisodeLog, PolicyBundle, TrainConfig, clip_actions_path, double_q_targets,
                               encode_observation, epsilon_at, epsilon_greedy, greedy_action, low_level_allowed,
                               make_env_factory, observation_size, read_training_log, train_end_to_end_baseline,
                               train_formation_policy, train_meta_policy, train_path_policy, vdn_joint_q,
                               write_training_log)
from services.replay_buffer import ReplayBuffer, Transition
from services.scalarization import estimate_base_weight
from services.value_functions import MLPQ, TabularQ, observation_key


def vec(*values):
    return np.asarray(values, dtype=np.float32)


@pytest.fixture
def config(tiny_config):
    return replace(tiny_config, backend="tabular")


def tables_equal(a, b):
    return a.table.keys() == b.table.keys() and all(np.array_equal(a.table[k], b.table[k]) for k in a.table)


# ---------------------------------------------------------------------------
# Value decomposition and targets
# ---------------------------------------------------------------------------

def test_vdn_sums_agent_values():
    assert vdn_joint_q([2.0, -1.0, 0.5]) == pytest.approx(1.5)
    assert vdn_joint_q([0.7]) == pytest.approx(0.7)
    assert vdn_joint_q([0.5, 2.0, -1.0]) == vdn_joint_q([2.0, -1.0, 0.5])
    with pytest.raises(ContractViolation):
        vdn_joint_q([])


def test_double_q_targets():
    online, target = TabularQ(2, 2), TabularQ(2, 2)
    s0, s1, s2 = vec(0, 0), vec(1, 0), vec(0, 1)
    online.table[observation_key(s1)] = np.array([1.0, 3.0])
    target.table[observation_key(s1)] = np.array([10.0, 20.0])
    online.table[observation_key(s2)] = np.array([5.0, 0.0])
    target.table[observation_key(s2)] = np.array([7.0, 1.0])
    batch = [
        # online picks action 1 in s1, the target values it
        Transition((s0,), (0,), 1.0, (s1,), ((0, 1),), False),
        # only action 0 is allowed
        Transition((s0,), (0,), 1.0, (s1,), ((0,),), False),
        Transition((s0,), (1,), 2.0, (s1,), ((0, 1),), True),
        # team transition bootstraps on the summed values
        Transition((s0, s0), (0, 0), 0.0, (s1, s2), ((0, 1), (0, 1)), False),
    ]
    np.testing.assert_allclose(double_q_targets(online, target, batch, 0.9), [19.0, 10.0, 2.0, 24.3])


def test_double_q_targets_all_terminal():
    q = TabularQ(2, 2)
    batch = [Transition((vec(0, 0),), (0,), -3.0, (vec(1, 1),), ((0, 1),), True)]
    np.testing.assert_array_equal(double_q_targets(q, q, batch, 0.9), [-3.0])


def test_greedy_ties_go_to_lowest_index():
    q = TabularQ(2, 5)
    assert greedy_action(q, vec(0, 0), (3, 1, 2)) == 1
    q.table[observation_key(vec(0, 0))] = np.array([0.0, 0.0, 0.0, 2.0, 0.0])
    assert greedy_action(q, vec(0, 0), (3, 1, 2)) == 3
    assert greedy_action(q, vec(0, 0), (1, 2)) == 1


def test_epsilon_greedy(rng):
    q = TabularQ(2, 5)
    q.table[observation_key(vec(0, 0))] = np.array([0.0, 0.0, 9.0, 0.0, 0.0])
    assert all(epsilon_greedy(q, vec(0, 0), tuple(range(5)), 0.0, rng) == 2 for _ in range(20))
    picks = {epsilon_greedy(q, vec(0, 0), (0, 1, 4), 1.0, rng) for _ in range(200)}
    assert picks == {0, 1, 4}


def test_epsilon_schedule():
    config = TrainConfig(total_episodes=10, episode_limit=20)
    assert config.decay_steps() == 100
    assert epsilon_at(config, 0) == pytest.approx(1.0)
    assert epsilon_at(config, 50) == pytest.approx(0.525)
    assert epsilon_at(config, 100) == pytest.approx(0.05)
    assert epsilon_at(config, 10_000) == pytest.approx(0.05)
    assert TrainConfig(epsilon_decay_steps=7).decay_steps() == 7


# ---------------------------------------------------------------------------
# Observations and clipping
# ---------------------------------------------------------------------------

def single_agent_env(grid_map, start, goal):
    env = FormationGridEnv(grid_map, np.array([[0, 0]]), starts=[start], goals=[goal])
    env.reset()
    return env


def test_encoded_observation_size(line3_env):
    line3_env.reset()
    vector = encode_observation(line3_env.observe(1, ((0, Action.UP),)), 3)
    assert vector.shape == (observation_size(3),) == (4 * 81 + 18,)
    assert vector.dtype == np.float32


def test_clipping_next_to_goal(empty10):
    env = single_agent_env(empty10, (8, 9), (9, 9))
    assert set(clip_actions_path(env.observe(0), env.valid_actions(0))) == {Action.RIGHT, Action.STAY}


def test_clipping_keeps_every_descent(empty10):
    env = single_agent_env(empty10, (2, 2), (9, 9))
    assert set(clip_actions_path(env.observe(0), env.valid_actions(0))) == {Action.DOWN, Action.RIGHT, Action.STAY}


def test_clipping_at_goal_leaves_stay(empty10):
    env = single_agent_env(empty10, (9, 9), (9, 9))
    assert clip_actions_path(env.observe(0), env.valid_actions(0)) == (Action.STAY,)


def test_clipping_with_explicit_costs():
    costs = {Action.UP: 4.0, Action.DOWN: 6.0, Action.LEFT: 5.0, Action.RIGHT: 6.0, Action.STAY: 5.0}
    kept = clip_actions_path(None, tuple(Action), costs)
    assert set(kept) == {Action.UP, Action.LEFT, Action.STAY}
    with pytest.raises(ContractViolation):
        clip_actions_path(None, (), costs)


# ---------------------------------------------------------------------------
# Configuration and logs
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("overrides", [{"discount": 0.0}, {"discount": 1.5}, {"batch_size": 0},
                                       {"target_update_interval": 0}, {"backend": "svm"}])
def test_config_validation(overrides):
    with pytest.raises(ConfigError):
        TrainConfig(**overrides)


def test_config_from_yaml(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump({"train": {"total_episodes": 7, "agent_count": 2}, "bench": {"seed": 1}}))
    config = TrainConfig.load(str(path))
    assert config.total_episodes == 7 and config.agent_count == 2

    path.write_text(yaml.safe_dump({"total_episodes": 9, "bench": {}}))
    assert TrainConfig.load(str(path)).total_episodes == 9

    path.write_text(yaml.safe_dump({"train": {"episodes": 9}}))
    with pytest.raises(ConfigError):
        TrainConfig.load(str(path))


def test_training_log_round_trip(tmp_path):
    rows = [EpisodeLog(1, -12.5, 30, 0.25, False), EpisodeLog(2, 101.0, 14, 0.0, True)]
    path = str(tmp_path / "training.csv")
    write_training_log(rows, path)
    assert read_training_log(path) == rows
    assert (tmp_path / "training.csv").read_text().splitlines()[0] == "episode,reward,steps,formation_loss,success"


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def test_path_training_is_deterministic(config):
    first = train_path_policy(None, config)
    second = train_path_policy(None, config)
    assert first.trained
    assert len(first.history) == config.total_episodes
    assert first.history == second.history
    assert tables_equal(first, second)


def test_greedy_training_is_deterministic(config):
    greedy = replace(config, epsilon_start=0.0, epsilon_end=0.0)
    assert train_path_policy(None, greedy).history == train_path_policy(None, greedy).history


def test_formation_training_logs_every_episode(config):
    policy = train_formation_policy(config)
    assert policy.trained
    assert [log.episode for log in policy.history] == list(range(1, config.total_episodes + 1))
    assert all(log.formation_loss >= 0 for log in policy.history)


def test_meta_training_needs_trained_policies(config):
    untrained = TabularQ(observation_size(2), 5)
    with pytest.raises(ContractViolation):
        train_meta_policy(untrained, untrained, 1.0, config)


def test_meta_training_leaves_low_policies_untouched(config):
    path_policy = train_path_policy(None, config)
    formation_policy = train_formation_policy(config)
    path_before = path_policy.snapshot()
    formation_before = formation_policy.snapshot()

    meta = train_meta_policy(path_policy, formation_policy, 1.0, config)
    assert meta.trained and meta.n_actions == 2
    assert path_policy.frozen and formation_policy.frozen
    assert path_policy.step == path_before["step"]
    assert formation_policy.step == formation_before["step"]
    assert path_policy.table.keys() == path_before["table"].keys()
    assert all(np.array_equal(path_policy.table[k], v) for k, v in path_before["table"].items())
    assert all(np.array_equal(formation_policy.table[k], v) for k, v in formation_before["table"].items())


def test_end_to_end_baseline_is_reproducible(config):
    first = train_end_to_end_baseline(config, 0.5)
    second = train_end_to_end_baseline(config, 0.5)
    assert first.history == second.history
    independent = train_end_to_end_baseline(replace(config, vdn=False), 0.5)
    assert independent.trained


def test_env_factory_must_match_agent_count(config, line3_env):
    with pytest.raises(ContractViolation):
        train_path_policy(lambda rng: line3_env, config)


def test_env_factory_reuses_envs(config):
    factory = make_env_factory(config, "random", maps=[empty_map(10)])
    rng = np.random.default_rng(0)
    assert factory(rng) is factory(rng)
    assert factory(rng).agent_count == config.agent_count


def test_policy_bundle_round_trip(tmp_path, config):
    size = observation_size(2)
    path_policy, formation_policy = TabularQ(size, 5), TabularQ(size, 5)
    path_policy.table[observation_key(np.zeros(size))] = np.arange(5.0)
    bundle = PolicyBundle(path_policy, formation_policy, None, 2.5, 2, deadline_slack=3)
    bundle.save(str(tmp_path))
    loaded = PolicyBundle.load(str(tmp_path))
    assert loaded.meta_policy is None
    assert loaded.w_f == 2.5 and loaded.agent_count == 2
    assert loaded.deadline_slack == 3
    assert tables_equal(loaded.path_policy, path_policy)
    assert loaded.meta_action(np.zeros(size)) == 0




def test_target_network_syncs_on_schedule(config, monkeypatch):
    episodes = []
    syncs = []

    class RecordingQ(TabularQ):
        def restore(self, state):
            syncs.append(len(episodes))
            super().restore(state)

    monkeypatch.setattr("services.learning._new_value_function",
                        lambda cfg, n_actions, phase: RecordingQ(observation_size(cfg.agent_count), n_actions))
    base = make_env_factory(config, "random")

    def counting_factory(rng):
        episodes.append(len(episodes) + 1)
        return base(rng)

    train_path_policy(counting_factory, replace(config, total_episodes=7, target_update_interval=3))
    # the clone taken before the first episode, then every third episode
    assert syncs == [0, 3, 6]


@pytest.mark.parametrize("goal, terminal", [((9, 9), False), ((0, 0), True)])
def test_only_reaching_the_goal_ends_the_return(config, monkeypatch, goal, terminal):
    stored = []

    class RecordingBuffer(ReplayBuffer):
        def append(self, transition):
            stored.append(transition)
            super().append(transition)

    monkeypatch.setattr("services.learning.ReplayBuffer", RecordingBuffer)
    grid_map = empty_map(10)
    single = replace(config, agent_count=1, total_episodes=1, episode_limit=3)
    train_path_policy(lambda rng: FormationGridEnv(grid_map, np.array([[0, 0]]), episode_limit=3,
                                                   starts=[(0, 0)], goals=[goal]), single)
    assert stored[-1].done is terminal
    assert not any(tr.done for tr in stored[:-1])
    if not terminal:
        assert len(stored) == 3 and stored[-1].next_allowed[0]


def test_local_table_keys_by_default(config):
    policy = train_formation_policy(config)
    assert policy.key.name == "formation"
    assert all(isinstance(key, tuple) and key[0] == "formation" for key in policy.table)
    hashed = train_formation_policy(replace(config, tabular_key="observation"))
    assert all(isinstance(key, bytes) for key in hashed.table)
    with pytest.raises(ConfigError):
        replace(config, tabular_key="global")


# ---------------------------------------------------------------------------
# Learned behaviour
# ---------------------------------------------------------------------------

SIX_GOAL = (3, 3)


@pytest.fixture(scope="module")
def six_by_six_path_policy():
    config = TrainConfig(total_episodes=2000, agent_count=1, batch_size=16, log_interval=500,
                         backend="tabular", tabular_key="observation", seed=0, episode_limit=18)
    factory = make_env_factory(config, "random", maps=[empty_map(6)])
    return config, train_path_policy(factory, config)


@pytest.mark.slow
def test_path_policy_walks_shortest_paths(six_by_six_path_policy):
    _, policy = six_by_six_path_policy
    actor = path_policy_actor(policy)
    for start in empty_map(6).start_region.cells():
        if start == SIX_GOAL:
            continue
        result = run_actor_episode(actor, single_agent_env(empty_map(6), start, SIX_GOAL), seed=0)
        assert result.success
        assert result.makespan == abs(start[0] - SIX_GOAL[0]) + abs(start[1] - SIX_GOAL[1])


@pytest.mark.slow
def test_path_values_match_value_iteration(six_by_six_path_policy):
    config, policy = six_by_six_path_policy
    # one step from the goal: +1 for the move and +100 for finishing
    optimal = {1: REWARD_TOWARD_GOAL + REWARD_FINISH}
    for cost in range(2, 11):
        optimal[cost] = REWARD_TOWARD_GOAL + config.discount * optimal[cost - 1]
    for start in empty_map(6).start_region.cells():
        if start == SIX_GOAL:
            continue
        env = single_agent_env(empty_map(6), start, SIX_GOAL)
        observation = env.observe(0)
        allowed = [int(a) for a in clip_actions_path(observation, env.valid_actions(0))]
        value = max(policy.q_values(encode_observation(observation, 1))[0, a] for a in allowed)
        distance = abs(start[0] - SIX_GOAL[0]) + abs(start[1] - SIX_GOAL[1])
        assert abs(value - optimal[distance]) < 0.05, start


@pytest.mark.slow
def test_clipped_path_actions_never_climb():
    env = FormationGridEnv(generate_map(10, 0.05, 7, agent_count=3), formation_preset("line", 3),
                           start_mode="random")
    policy = MLPQ(observation_size(3), 5, seed=4)
    rng = np.random.default_rng(0)
    env.reset(seed=0)
    for _ in range(10_000):
        joint = []
        for i in range(3):
            observation = env.observe(i)
            allowed = [int(a) for a in low_level_allowed(env, i, observation, Mode.PATH_FINDING, False, ())]
            assert allowed
            action = Action(epsilon_greedy(policy, encode_observation(observation, 3), allowed, 0.3, rng))
            here = env.world.positions[i]
            assert env.cost_maps[i].value(move(here, action)) <= env.cost_maps[i].value(here)
            joint.append(action)
        if env.step(joint).done:
            env.reset(seed=int(rng.integers(1000)))


def formation_rollout(policy, starts, steps):
    grid_map = empty_map(50)
    offsets = formation_preset("line", len(starts))
    env = FormationGridEnv(grid_map, offsets, starts=starts)
    env.reset(seed=0)
    actor = formation_policy_actor(policy)
    rng = np.random.default_rng(0)
    losses = []
    for _ in range(steps):
        result = env.step(actor(env, rng))
        losses.append(result.info.formation_loss)
    return losses


@pytest.mark.slow
def test_formation_policy_holds_a_line_of_three():
    config = TrainConfig(total_episodes=800, agent_count=3, density=0.0, log_interval=200, seed=0,
                         backend="tabular")
    policy = train_formation_policy(config)
    losses = formation_rollout(policy, [(22, 24), (23, 24), (24, 24)], 20)
    assert max(losses) < KEEP_FORMATION_EPS


@pytest.mark.slow
def test_formation_policy_closes_a_one_cell_gap():
    config = TrainConfig(total_episodes=400, agent_count=2, density=0.0, log_interval=200, seed=0,
                         backend="tabular")
    policy = train_formation_policy(config)
    losses = formation_rollout(policy, [(8, 10), (10, 10)], 3)
    assert min(losses) < 1e-6


def travelling_modes(bundle, env, seed):
    """Meta choices of agents that have not reached their goal yet."""
    env.reset(seed=seed)
    modes = []
    done = False
    while not done:
        joint, meta = hierarchical_step(bundle, env)
        modes += [m for i, m in meta.items() if env.world.positions[i] != env.goals[i]]
        done = env.step(joint).done
    return modes


@pytest.mark.slow
def test_meta_policy_without_formation_weight_prefers_paths():
    config = TrainConfig(total_episodes=300, agent_count=2, density=0.0, log_interval=100, seed=0,
                         backend="tabular")
    path_policy = train_path_policy(None, config)
    formation_policy = train_formation_policy(config)
    meta = train_meta_policy(path_policy, formation_policy, 0.0, config)
    bundle = PolicyBundle(path_policy, formation_policy, meta, 0.0, 2, deadline_slack=None)
    modes = []
    for m, grid_map in enumerate(generate_map_pool(10, 10, 0.0, seed=200, agent_count=2)):
        modes += travelling_modes(bundle, FormationGridEnv(grid_map, config.formation_offsets()), m)
    assert modes.count(int(Mode.PATH_FINDING)) >= 0.95 * len(modes)


def evaluate(bundle, offsets):
    results = [run_hierarchical_episode(bundle, FormationGridEnv(grid_map, offsets, bundle.w_f), seed=m)
               for m, grid_map in enumerate(generate_map_pool(10, 10, 0.05, seed=500, agent_count=3))]
    return np.mean([r.success for r in results]), np.mean([r.formation_loss for r in results])


@pytest.mark.slow
def test_hierarchy_beats_path_only_and_end_to_end():
    base = TrainConfig(agent_count=3, map_size=10, density=0.05, formation="line", replay_capacity=20_000,
                       log_interval=500, seed=0, backend="tabular")
    offsets = base.formation_offsets()
    path_policy = train_path_policy(None, replace(base, total_episodes=1500))
    formation_policy = train_formation_policy(replace(base, total_episodes=1000))
    weigh_env = FormationGridEnv(generate_map(10, 0.05, 0, agent_count=3), offsets, start_mode="random")
    w_f = estimate_base_weight(formation_policy_actor(formation_policy), random_policy, weigh_env,
                               episodes=100).w_f
    meta = train_meta_policy(path_policy, formation_policy, w_f, replace(base, total_episodes=1000))
    end_to_end = train_end_to_end_baseline(replace(base, total_episodes=3500), w_f)

    path_success, path_loss = evaluate(
        PolicyBundle(path_policy, formation_policy, None, w_f, 3, force_mode=Mode.PATH_FINDING), offsets)
    ours_success, ours_loss = evaluate(PolicyBundle(path_policy, formation_policy, meta, w_f, 3), offsets)
    flat_success, _ = evaluate(
        PolicyBundle(end_to_end, end_to_end, None, w_f, 3, force_mode=Mode.PATH_FINDING), offsets)

    assert path_success >= 0.9
    assert ours_success >= 0.8
    assert ours_loss < path_loss
    assert flat_success < ours_success
