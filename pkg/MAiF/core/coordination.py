"""Leader-ordered sequential action selection.

Each timestep one agent (the leader) decides first from its own observation;
every follower then decides knowing the actions already announced by the
agents before it (the prior actions). The leader is the formation's middle
agent when the team is keeping formation, and the agent closest to its goal
when it is path finding.
"""

from collections import Counter
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config.settings import FOV
from core.errors import ContractViolation
from core.gridworld import Action, CostMap, GridMap, PriorActions, WorldState, move
from core.logger import setup_logger, setup_transcript_logger

logger = setup_logger(__name__)
transcript = setup_transcript_logger()

UNDECIDED = len(Action)
SLOT_WIDTH = len(Action) + 1


class Mode(IntEnum):
    """Meta action: which low-level policy an agent uses this step."""
    PATH_FINDING = 0
    FORMATION = 1


@dataclass(frozen=True)
class DecisionOrder:
    leader: int
    followers: Tuple[int, ...]

    @property
    def sequence(self) -> Tuple[int, ...]:
        return (self.leader,) + self.followers


def majority_mode(meta_actions: Iterable[int]) -> Mode:
    votes = Counter(Mode(m) for m in meta_actions)
    return Mode.FORMATION if votes[Mode.FORMATION] > votes[Mode.PATH_FINDING] else Mode.PATH_FINDING


def _spread(world: WorldState) -> List[float]:
    pts = np.asarray(world.positions, dtype=float)
    diff = pts[:, None, :] - pts[None, :, :]
    return list((diff ** 2).sum(axis=(1, 2)))


def choose_leader(world: WorldState, cost_maps: Sequence[CostMap], formation: np.ndarray, mode: Mode) -> int:
    """Middle agent in Formation mode, front agent in PathFinding mode; lowest id on ties."""
    if Mode(mode) == Mode.FORMATION:
        scores = _spread(world)
    else:
        scores = [cm.value(p) for cm, p in zip(cost_maps, world.positions)]
    return min(range(world.agent_count), key=lambda i: (scores[i], i))


def decision_order(world: WorldState, cost_maps: Sequence[CostMap], formation: np.ndarray,
                   mode: Mode) -> DecisionOrder:
    leader = choose_leader(world, cost_maps, formation, mode)
    rest = [i for i in range(world.agent_count) if i != leader]
    if Mode(mode) == Mode.FORMATION:
        lx, ly = world.positions[leader]
        key = {i: (world.positions[i][0] - lx) ** 2 + (world.positions[i][1] - ly) ** 2 for i in rest}
    else:
        key = {i: cost_maps[i].value(world.positions[i]) for i in rest}
    return DecisionOrder(leader, tuple(sorted(rest, key=lambda i: (key[i], i))))


def encode_prior_actions(prior: PriorActions, agent_count: int) -> np.ndarray:
    """Per-agent one-hot over the five actions plus "not yet decided", in agent-id order."""
    if prior and len(prior) >= agent_count:
        raise ContractViolation(f"{len(prior)} prior actions for {agent_count} agents")
    slots = [UNDECIDED] * agent_count
    seen = set()
    for agent, action in prior:
        if agent in seen:
            raise ContractViolation(f"agent {agent} appears twice in the prior actions")
        if not 0 <= agent < agent_count:
            raise ContractViolation(f"agent {agent} out of range for {agent_count} agents")
        seen.add(agent)
        slots[agent] = int(Action(action))
    vector = np.zeros(SLOT_WIDTH * agent_count, dtype=np.float32)
    for agent, slot in enumerate(slots):
        vector[agent * SLOT_WIDTH + slot] = 1.0
    return vector


def decode_prior_actions(vector: np.ndarray, agent_count: int) -> PriorActions:
    """Inverse of the encoding; decided agents come back in id order."""
    slots = np.asarray(vector).reshape(agent_count, SLOT_WIDTH).argmax(axis=1)
    return tuple((agent, Action(int(slot))) for agent, slot in enumerate(slots) if slot != UNDECIDED)


def mask_claimed(world: WorldState, grid_map: GridMap, agent_id: int, allowed: Sequence[Action],
                 prior: PriorActions, fov: int = FOV) -> Tuple[Action, ...]:
    """Drop moves into cells announced by visible preceding agents, and swaps with them."""
    me = world.positions[agent_id]
    radius = fov // 2
    claimed = set()
    swaps = set()
    for other, action in prior:
        pos = world.positions[other]
        if max(abs(pos[0] - me[0]), abs(pos[1] - me[1])) > radius:
            continue
        dest = move(pos, action)
        dest = dest if grid_map.is_free(dest) else pos
        claimed.add(dest)
        if dest == me:
            swaps.add(pos)
    kept = tuple(a for a in allowed
                 if a == Action.STAY or (move(me, a) not in claimed and move(me, a) not in swaps))
    return kept or (Action.STAY,)


class ActionChannel:
    """Simulated broadcast: each announcement reaches every later decider."""

    def __init__(self):
        self.total = 0
        self.per_step: List[int] = []
        self._current = 0

    def broadcast(self, sender: int, action: Action, recipients: Sequence[int]) -> None:
        self._current += len(recipients)
        self.total += len(recipients)

    def end_step(self) -> int:
        count, self._current = self._current, 0
        self.per_step.append(count)
        return count


def run_protocol(order: DecisionOrder, decide: Callable[[int, PriorActions], Action], agent_count: int,
                 use_prior_actions: bool = True, channel: Optional[ActionChannel] = None,
                 t: int = 0, mode: Mode = Mode.PATH_FINDING) -> Tuple[Action, ...]:
    """Collect one action per agent in ``order``; ``decide`` sees the announced prior actions."""
    if sorted(order.sequence) != list(range(agent_count)):
        raise ContractViolation(f"decision order {order.sequence} does not cover {agent_count} agents")
    joint: Dict[int, Action] = {}
    prior: List[Tuple[int, Action]] = []
    sequence = order.sequence
    for idx, agent in enumerate(sequence):
        action = Action(decide(agent, tuple(prior) if use_prior_actions else ()))
        prior.append((agent, action))
        joint[agent] = action
        if channel is not None and use_prior_actions:
            channel.broadcast(agent, action, sequence[idx + 1:])
        transcript.debug("(%d, %d, %s, %s, %s)", t, agent, agent == order.leader, Mode(mode).name, action.name)
    if channel is not None:
        channel.end_step()
    return tuple(joint[i] for i in range(agent_count))


def sequential_decide(bundle, env, order: DecisionOrder, use_prior_actions: bool = True,
                      channel: Optional[ActionChannel] = None, mode: Mode = Mode.PATH_FINDING,
                      meta_out: Optional[Dict[int, int]] = None) -> Tuple[Action, ...]:
    """Greedy joint action of a policy bundle under the sequential protocol.

    ``bundle.act(env, agent, prior, claim_mask)`` returns ``(action, meta_action)``.
    With ``use_prior_actions`` off every agent decides blind and the claimed-cell
    mask is disabled too.
    """
    def decide(agent: int, prior: PriorActions) -> Action:
        action, meta = bundle.act(env, agent, prior, use_prior_actions)
        if meta_out is not None:
            meta_out[agent] = meta
        return action

    return run_protocol(order, decide, env.agent_count, use_prior_actions, channel, env.world.t, mode)
