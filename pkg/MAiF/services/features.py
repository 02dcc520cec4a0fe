"""Table keys for the tabular backend.

The ``observation`` key hashes the whole encoded vector, so a row only ever
matches the exact same view of the exact same map. The local keys reduce the
vector to what a policy acts on in its neighbourhood and repeat across maps:

- ``path``: the agent's slot in the formation, the goal offset when the goal
  is in view, and per move whether the cell is blocked, descends the cost map
  and is (or is about to be) occupied by a teammate.
- ``formation``: whether the agent decides first, a bucket of the formation
  loss among visible teammates, and per move the sign of the loss change.
- ``meta``: the loss bucket, whether the agent is on its goal and the best
  loss change any free descent offers.
- ``end2end``: the path and formation features together.
"""

import hashlib
import itertools
from dataclasses import dataclass
from typing import Callable, Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from config.settings import FOV, KEEP_FORMATION_EPS
from core.coordination import SLOT_WIDTH, UNDECIDED
from core.errors import ContractViolation
from core.formation import formation_loss
from core.gridworld import DELTAS, Action

Offset = Tuple[int, int]

MOVES = (Action.UP, Action.DOWN, Action.LEFT, Action.RIGHT)
LOSS_BUCKETS = (KEEP_FORMATION_EPS, 1.0, 4.0)
MEMO_LIMIT = 200_000

BLOCKED = 0
FREE_DESCENT = 1


def observation_key(vector: np.ndarray) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(vector, dtype=np.float32).tobytes(), digest_size=16).digest()


@dataclass(frozen=True)
class LocalView:
    obstacle: np.ndarray
    position: np.ndarray
    cost: np.ndarray
    shape: np.ndarray
    prior: np.ndarray  # [agents, SLOT_WIDTH]

    @property
    def radius(self) -> int:
        return self.obstacle.shape[0] // 2

    @property
    def agent_count(self) -> int:
        return len(self.prior)

    def blocked(self, offset: Offset) -> bool:
        r = self.radius
        x, y = offset[0] + r, offset[1] + r
        if not (0 <= x <= 2 * r and 0 <= y <= 2 * r):
            return False
        return bool(self.obstacle[y, x] > 0.5)

    @property
    def first_to_decide(self) -> bool:
        return all(int(row.argmax()) == UNDECIDED for row in self.prior)


def unpack(vector: np.ndarray, fov: int = FOV) -> LocalView:
    """Split an encoded observation back into its channels and prior-action slots."""
    vector = np.asarray(vector, dtype=np.float32).ravel()
    planes = 4 * fov * fov
    extra = len(vector) - planes
    if extra <= 0 or extra % SLOT_WIDTH:
        raise ContractViolation(f"a vector of length {len(vector)} is not an encoded observation")
    obstacle, position, cost, shape = vector[:planes].reshape(4, fov, fov)
    return LocalView(obstacle, position, cost, shape, vector[planes:].reshape(-1, SLOT_WIDTH))


def teammates(view: LocalView) -> List[Offset]:
    """Where each visible teammate will be: announced moves applied, everyone else in place."""
    r = view.radius
    k = view.agent_count
    expected = []
    for y, x in zip(*np.nonzero(view.position)):
        if x == r and y == r:
            continue
        here = (int(x) - r, int(y) - r)
        j = int(round(float(view.position[y, x]) * (k + 1))) - 1
        slot = int(view.prior[j].argmax()) if 0 <= j < k else UNDECIDED
        if slot not in (UNDECIDED, int(Action.STAY)):
            dx, dy = DELTAS[Action(slot)]
            dest = (here[0] + dx, here[1] + dy)
            if not view.blocked(dest):
                here = dest
        expected.append(here)
    return sorted(expected, key=lambda p: (abs(p[0]) + abs(p[1]), p))


def formation_role(view: LocalView) -> Tuple[Offset, ...]:
    r = view.radius
    return tuple(sorted((int(x) - r, int(y) - r) for y, x in zip(*np.nonzero(view.shape > 0.5))))


def goal_offset(view: LocalView) -> Optional[Offset]:
    hits = np.argwhere(view.cost == 0.0)
    if len(hits) == 0:
        return None
    y, x = hits[0]
    return int(x) - view.radius, int(y) - view.radius


def neighbour_codes(view: LocalView, occupied: Sequence[Offset]) -> Tuple[int, ...]:
    """Per move: 0 blocked, else 1 + ascends + 2 * occupied."""
    r = view.radius
    here = view.cost[r, r]
    codes = []
    for action in MOVES:
        dx, dy = DELTAS[action]
        if view.blocked((dx, dy)):
            codes.append(BLOCKED)
            continue
        ascends = bool(view.cost[r + dy, r + dx] >= here)
        codes.append(FREE_DESCENT + int(ascends) + 2 * int((dx, dy) in occupied))
    return tuple(codes)


def _team_loss(me: Offset, mates: Sequence[Offset], slots: Sequence[Offset]) -> float:
    n = min(len(mates), len(slots))
    if n == 0:
        return 0.0
    points = np.array([me] + list(mates[:n]), dtype=float)
    return min(formation_loss(points, np.array([(0, 0)] + list(chosen), dtype=float))
               for chosen in itertools.permutations(slots, n))


def loss_bucket(loss: float) -> int:
    return sum(loss >= edge for edge in LOSS_BUCKETS)


def formation_signs(view: LocalView, mates: Sequence[Offset]) -> Tuple[int, Tuple[Optional[int], ...]]:
    """Loss bucket if the agent stays, and per move the sign of the loss change (None when blocked).

    Teammates are matched to the other formation slots by whichever
    assignment fits best.
    """
    slots = [s for s in formation_role(view) if s != (0, 0)]
    stay = _team_loss((0, 0), mates, slots)
    signs = []
    for action in MOVES:
        dx, dy = DELTAS[action]
        if view.blocked((dx, dy)):
            signs.append(None)
            continue
        delta = _team_loss((dx, dy), mates, slots) - stay
        signs.append(0 if abs(delta) < KEEP_FORMATION_EPS else (1 if delta > 0 else -1))
    return loss_bucket(stay), tuple(signs)


def path_features(view: LocalView) -> Hashable:
    return "path", formation_role(view), goal_offset(view), neighbour_codes(view, teammates(view))


def formation_features(view: LocalView) -> Hashable:
    mates = teammates(view)
    bucket, signs = formation_signs(view, mates)
    codes = tuple(BLOCKED if s is None else 2 + s + 3 * int(DELTAS[a] in mates) for a, s in zip(MOVES, signs))
    return "formation", view.first_to_decide, bucket, codes


def meta_features(view: LocalView) -> Hashable:
    mates = teammates(view)
    bucket, signs = formation_signs(view, mates)
    codes = neighbour_codes(view, mates)
    descents = [s for c, s in zip(codes, signs) if c == FREE_DESCENT]
    return "meta", bucket, goal_offset(view) == (0, 0), min(descents) if descents else None


def end_to_end_features(view: LocalView) -> Hashable:
    mates = teammates(view)
    bucket, signs = formation_signs(view, mates)
    return ("end2end", formation_role(view), goal_offset(view), neighbour_codes(view, mates),
            view.first_to_decide, bucket, signs)


LOCAL_FEATURES: Dict[str, Callable[[LocalView], Hashable]] = {
    "path": path_features,
    "formation": formation_features,
    "meta": meta_features,
    "end2end": end_to_end_features,
}
TABLE_KEYS = ("observation",) + tuple(LOCAL_FEATURES)


class TableKey:
    """Row key of an encoded observation; local features are memoised per distinct vector."""

    def __init__(self, name: str = "observation"):
        if name not in TABLE_KEYS:
            raise ContractViolation(f"unknown table key '{name}', expected one of {TABLE_KEYS}")
        self.name = name
        self._memo: Dict[bytes, Hashable] = {}

    def __call__(self, vector: np.ndarray) -> Hashable:
        digest = observation_key(vector)
        if self.name == "observation":
            return digest
        key = self._memo.get(digest)
        if key is None:
            if len(self._memo) >= MEMO_LIMIT:
                self._memo.clear()
            key = self._memo[digest] = LOCAL_FEATURES[self.name](unpack(vector))
        return key
