import numpy as np
import pytest

from core.coordination import (SLOT_WIDTH, UNDECIDED, ActionChannel, DecisionOrder, Mode, choose_leader,
                               decision_order, decode_prior_actions, encode_prior_actions, majority_mode,
                               mask_claimed, run_protocol, sequential_decide)
from core.errors import ContractViolation
from core.gridworld import Action, WorldState, compute_cost_map, empty_map


def cost_maps(grid_map, goals):
    return [compute_cost_map(grid_map, g) for g in goals]


def test_formation_leader_is_the_middle_agent(empty10):
    world = WorldState.initial([(0, 0), (1, 0), (2, 0)], [(7, 7), (8, 7), (9, 7)])
    offsets = np.array([[0, 0], [1, 0], [2, 0]])
    assert choose_leader(world, cost_maps(empty10, world.goals), offsets, Mode.FORMATION) == 1
    order = decision_order(world, cost_maps(empty10, world.goals), offsets, Mode.FORMATION)
    assert order.sequence == (1, 0, 2)


def test_path_leader_is_the_closest_to_its_goal(empty10):
    world = WorldState.initial([(0, 0), (5, 5), (2, 2)], [(9, 9), (8, 9), (7, 9)])
    maps = cost_maps(empty10, world.goals)
    assert choose_leader(world, maps, np.zeros((3, 2)), Mode.PATH_FINDING) == 1
    order = decision_order(world, maps, np.zeros((3, 2)), Mode.PATH_FINDING)
    assert order == DecisionOrder(1, (2, 0))


def test_leader_ties_go_to_the_lowest_id(empty10):
    world = WorldState.initial([(0, 0), (4, 0)], [(0, 4), (4, 4)])
    maps = cost_maps(empty10, world.goals)
    assert choose_leader(world, maps, np.zeros((2, 2)), Mode.FORMATION) == 0
    assert choose_leader(world, maps, np.zeros((2, 2)), Mode.PATH_FINDING) == 0

    square = WorldState.initial([(0, 0), (1, 0), (0, 1), (1, 1)], [(9, 9), (8, 9), (9, 8), (8, 8)])
    assert choose_leader(square, cost_maps(empty10, square.goals), np.zeros((4, 2)), Mode.FORMATION) == 0


@pytest.mark.parametrize("votes, expected", [
    ([0, 1], Mode.PATH_FINDING),
    ([1, 1, 0], Mode.FORMATION),
    ([0, 0, 1], Mode.PATH_FINDING),
    ([], Mode.PATH_FINDING),
])
def test_majority_mode(votes, expected):
    assert majority_mode(votes) == expected


def test_prior_action_encoding():
    prior = ((2, Action.UP), (0, Action.RIGHT))
    vector = encode_prior_actions(prior, 3)
    assert vector.shape == (3 * SLOT_WIDTH,)
    assert vector.sum() == 3
    assert vector[0 * SLOT_WIDTH + Action.RIGHT] == 1
    assert vector[1 * SLOT_WIDTH + UNDECIDED] == 1
    assert vector[2 * SLOT_WIDTH + Action.UP] == 1
    assert decode_prior_actions(vector, 3) == ((0, Action.RIGHT), (2, Action.UP))


def test_empty_prior_is_all_undecided():
    vector = encode_prior_actions((), 2)
    assert decode_prior_actions(vector, 2) == ()
    assert vector[UNDECIDED] == 1 and vector[SLOT_WIDTH + UNDECIDED] == 1


@pytest.mark.parametrize("prior", [
    ((0, Action.UP), (0, Action.DOWN)),
    ((3, Action.UP),),
    ((0, Action.UP), (1, Action.UP), (2, Action.UP)),
])
def test_bad_prior_actions(prior):
    with pytest.raises(ContractViolation):
        encode_prior_actions(prior, 3)


def test_claimed_cells_are_masked():
    grid_map = empty_map(10)
    world = WorldState.initial([(2, 2), (3, 2), (2, 0), (9, 9)], [(0, 0), (1, 0), (3, 0), (8, 9)])
    allowed = tuple(Action)
    # agent 1 vacates (3, 2); agent 2 claims (2, 1)
    kept = mask_claimed(world, grid_map, 0, allowed, ((1, Action.UP), (2, Action.DOWN)))
    assert Action.RIGHT in kept
    assert Action.UP not in kept
    # agent 1 moving into agent 0's cell rules out the swap
    kept = mask_claimed(world, grid_map, 0, allowed, ((1, Action.LEFT),))
    assert Action.RIGHT not in kept
    assert Action.STAY in kept


def test_claims_outside_the_fov_are_ignored():
    grid_map = empty_map(10)
    world = WorldState.initial([(0, 0), (9, 9)], [(1, 1), (8, 8)])
    kept = mask_claimed(world, grid_map, 0, tuple(Action), ((1, Action.LEFT),), fov=5)
    assert set(kept) == set(Action)


def test_mask_never_empties():
    grid_map = empty_map(10)
    world = WorldState.initial([(2, 2), (3, 2)], [(0, 0), (1, 0)])
    assert mask_claimed(world, grid_map, 0, (Action.RIGHT,), ((1, Action.STAY),)) == (Action.STAY,)


def test_protocol_feeds_prior_actions_in_order():
    seen = {}

    def decide(agent, prior):
        seen[agent] = prior
        return Action(agent)

    joint = run_protocol(DecisionOrder(2, (0, 1)), decide, 3)
    assert joint == (Action.UP, Action.DOWN, Action.LEFT)
    assert seen[2] == ()
    assert seen[0] == ((2, Action.LEFT),)
    assert seen[1] == ((2, Action.LEFT), (0, Action.UP))


def test_protocol_without_prior_actions():
    seen = []
    run_protocol(DecisionOrder(1, (0,)), lambda a, p: seen.append(p) or Action.STAY, 2, use_prior_actions=False)
    assert seen == [(), ()]


def test_single_agent_decides_alone():
    channel = ActionChannel()
    joint = run_protocol(DecisionOrder(0, ()), lambda a, p: Action.RIGHT, 1, channel=channel)
    assert joint == (Action.RIGHT,)
    assert channel.total == 0 and channel.per_step == [0]


@pytest.mark.parametrize("k", [2, 3, 4, 5])
def test_channel_counts_messages(k):
    channel = ActionChannel()
    order = DecisionOrder(0, tuple(range(1, k)))
    for _ in range(3):
        run_protocol(order, lambda a, p: Action.STAY, k, channel=channel)
    assert channel.per_step == [k * (k - 1) // 2] * 3
    assert channel.total == 3 * k * (k - 1) // 2

    silent = ActionChannel()
    run_protocol(order, lambda a, p: Action.STAY, k, use_prior_actions=False, channel=silent)
    assert silent.total == 0


def test_protocol_rejects_incomplete_order():
    with pytest.raises(ContractViolation):
        run_protocol(DecisionOrder(0, (1,)), lambda a, p: Action.STAY, 3)


class ScriptedBundle:
    """Moves every agent right and reports the prior actions it was shown."""

    def __init__(self):
        self.calls = []

    def act(self, env, agent, prior, claim_mask=True):
        self.calls.append((agent, prior, claim_mask))
        return Action.RIGHT, int(Mode.FORMATION)


def test_sequential_decide_collects_meta_actions(line3_env):
    line3_env.reset()
    bundle = ScriptedBundle()
    meta = {}
    order = decision_order(line3_env.world, line3_env.cost_maps, line3_env.formation, Mode.FORMATION)
    joint = sequential_decide(bundle, line3_env, order, mode=Mode.FORMATION, meta_out=meta)
    assert joint == (Action.RIGHT,) * 3
    assert meta == {0: 1, 1: 1, 2: 1}
    assert [agent for agent, _, _ in bundle.calls] == list(order.sequence)
    assert bundle.calls[-1][1] == tuple((a, Action.RIGHT) for a in order.sequence[:2])

    blind = ScriptedBundle()
    sequential_decide(blind, line3_env, order, use_prior_actions=False)
    assert all(prior == () and not mask for _, prior, mask in blind.calls)
