"""Q-value backends sharing one interface.

``TabularQ`` stores a row of action values per table key (a hash of the
whole vector, or one of the local feature keys); ``MLPQ`` is a
one-hidden-layer torch network over the flattened observation. Both take TD
updates over *groups* of (vector, action) pairs whose values are summed
before comparing with the target, so a group of one is plain Q-learning and a
group of k agents is the VDN joint update.
"""

import copy
from abc import ABC, abstractmethod
from typing import Any, Dict, Hashable, List, Sequence

import numpy as np
import torch
import torch.nn as nn

from config.settings import DEVICE
from core.errors import ContractViolation, DivergenceError
from core.logger import setup_logger
from services.features import TableKey, observation_key

logger = setup_logger(__name__)

__all__ = ["ValueFunction", "TabularQ", "MLPQ", "QNetwork", "make_value_function", "observation_key",
           "save_checkpoint", "load_checkpoint"]


class ValueFunction(ABC):
    kind = "abstract"

    def __init__(self, input_size: int, n_actions: int):
        self.input_size = int(input_size)
        self.n_actions = int(n_actions)
        self.step = 0
        self.trained = False
        self.frozen = False
        self.history: List[Any] = []

    @abstractmethod
    def q_values(self, vectors: np.ndarray) -> np.ndarray:
        """Action values, shape ``[batch, n_actions]``."""

    @abstractmethod
    def _update(self, groups, actions, targets: np.ndarray) -> float:
        ...

    @abstractmethod
    def snapshot(self) -> Dict[str, Any]:
        ...

    @abstractmethod
    def restore(self, state: Dict[str, Any]) -> None:
        ...

    def td_update(self, groups: Sequence[Sequence[np.ndarray]], actions: Sequence[Sequence[int]],
                  targets: np.ndarray) -> float:
        """Move ``sum_i Q(o_i, a_i)`` of each group toward its target; returns the mean squared TD error."""
        if self.frozen:
            raise ContractViolation(f"{self.kind} value function is frozen")
        if len(groups) != len(actions) or len(groups) != len(targets):
            raise ContractViolation("groups, actions and targets differ in length")
        loss = self._update(groups, actions, np.asarray(targets, dtype=np.float64))
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite TD loss at update {self.step}")
        self.step += 1
        return loss

    def clone(self) -> "ValueFunction":
        other = copy.copy(self)
        other.history = []
        other.restore(self.snapshot())
        return other

    def _meta(self) -> Dict[str, Any]:
        return {"kind": self.kind, "input_size": self.input_size, "n_actions": self.n_actions,
                "step": self.step, "trained": self.trained}

    def _restore_meta(self, state: Dict[str, Any]) -> None:
        if state["kind"] != self.kind or state["n_actions"] != self.n_actions:
            raise ContractViolation(f"cannot restore a {state['kind']} snapshot into {self.kind}")
        self.step = state["step"]
        self.trained = state["trained"]


class TabularQ(ValueFunction):
    kind = "tabular"

    def __init__(self, input_size: int, n_actions: int, alpha: float = 0.2, key: str = "observation"):
        super().__init__(input_size, n_actions)
        self.alpha = float(alpha)
        self.key = TableKey(key)
        self.table: Dict[Hashable, np.ndarray] = {}

    def _row(self, vector: np.ndarray) -> np.ndarray:
        key = self.key(vector)
        row = self.table.get(key)
        if row is None:
            row = self.table[key] = np.zeros(self.n_actions)
        return row

    def q_values(self, vectors: np.ndarray) -> np.ndarray:
        vectors = np.atleast_2d(vectors)
        out = np.zeros((len(vectors), self.n_actions))
        for i, vec in enumerate(vectors):
            row = self.table.get(self.key(vec))
            if row is not None:
                out[i] = row
        return out

    def _update(self, groups, actions, targets):
        errors = []
        for group, acts, y in zip(groups, actions, targets):
            rows = [self._row(vec) for vec in group]
            residual = y - sum(row[a] for row, a in zip(rows, acts))
            errors.append(residual * residual)
            # Spread the correction so the group sum moves by alpha * residual.
            share = self.alpha * residual / len(rows)
            for row, a in zip(rows, acts):
                row[a] += share
        return float(np.mean(errors))

    def snapshot(self):
        state = self._meta()
        state.update(alpha=self.alpha, key=self.key.name, table={k: v.copy() for k, v in self.table.items()})
        return state

    def restore(self, state):
        self._restore_meta(state)
        self.alpha = state["alpha"]
        if state.get("key", "observation") != self.key.name:
            self.key = TableKey(state.get("key", "observation"))
        self.table = {k: np.array(v, dtype=np.float64) for k, v in state["table"].items()}


class QNetwork(nn.Module):
    def __init__(self, input_size: int, output_size: int, hidden_width: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(input_size, hidden_width),
            nn.ReLU(),
            nn.Linear(hidden_width, output_size),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class MLPQ(ValueFunction):
    kind = "mlp"

    def __init__(self, input_size: int, n_actions: int, hidden_width: int = 64,
                 learning_rate: float = 1e-3, seed: int = 0, dtype: torch.dtype = torch.float32,
                 device: str = DEVICE):
        super().__init__(input_size, n_actions)
        self.hidden_width = int(hidden_width)
        self.learning_rate = float(learning_rate)
        self.dtype = dtype
        self.device = torch.device(device)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.network = QNetwork(self.input_size, self.n_actions, self.hidden_width).to(self.device, dtype)
        self.optimizer = torch.optim.Adam(self.network.parameters(), lr=self.learning_rate)

    def _tensor(self, vectors) -> torch.Tensor:
        return torch.as_tensor(np.atleast_2d(np.asarray(vectors)), dtype=self.dtype, device=self.device)

    def q_values(self, vectors: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.network(self._tensor(vectors)).cpu().numpy().astype(np.float64)

    def _update(self, groups, actions, targets):
        flat = [vec for group in groups for vec in group]
        flat_actions = torch.as_tensor([a for acts in actions for a in acts], device=self.device)
        owner = torch.as_tensor([g for g, group in enumerate(groups) for _ in group], device=self.device)

        chosen = self.network(self._tensor(flat)).gather(1, flat_actions.unsqueeze(1)).squeeze(1)
        joint = torch.zeros(len(groups), dtype=self.dtype, device=self.device).index_add(0, owner, chosen)
        loss = nn.functional.mse_loss(joint, torch.as_tensor(targets, dtype=self.dtype, device=self.device))

        self.optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(self.network.parameters(), max_norm=1.0)
        self.optimizer.step()
        return float(loss.item())

    def snapshot(self):
        state = self._meta()
        state.update(hidden_width=self.hidden_width, learning_rate=self.learning_rate,
                     shapes={k: tuple(v.shape) for k, v in self.network.state_dict().items()},
                     parameters={k: v.detach().clone().cpu() for k, v in self.network.state_dict().items()},
                     optimizer=copy.deepcopy(self.optimizer.state_dict()))
        return state

    def restore(self, state):
        self._restore_meta(state)
        self.network.load_state_dict(state["parameters"])
        self.optimizer = torch.optim.Adam(self.network.parameters(), lr=self.learning_rate)
        self.optimizer.load_state_dict(copy.deepcopy(state["optimizer"]))

    def clone(self) -> "MLPQ":
        other = MLPQ(self.input_size, self.n_actions, self.hidden_width, self.learning_rate,
                     dtype=self.dtype, device=str(self.device))
        other.restore(self.snapshot())
        return other


def make_value_function(backend: str, input_size: int, n_actions: int, **kwargs) -> ValueFunction:
    if backend == "tabular":
        return TabularQ(input_size, n_actions, alpha=kwargs.get("alpha", 0.2), key=kwargs.get("key", "observation"))
    if backend == "mlp":
        return MLPQ(input_size, n_actions, hidden_width=kwargs.get("hidden_width", 64),
                    learning_rate=kwargs.get("learning_rate", 1e-3), seed=kwargs.get("seed", 0))
    raise ContractViolation(f"unknown value-function backend '{backend}'")


def save_checkpoint(value_fn: ValueFunction, path: str) -> None:
    torch.save(value_fn.snapshot(), path)
    logger.info(f"Saved {value_fn.kind} checkpoint to {path} (step {value_fn.step})")


def load_checkpoint(path: str) -> ValueFunction:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state["kind"] == "tabular":
        value_fn = TabularQ(state["input_size"], state["n_actions"], state["alpha"], state.get("key", "observation"))
    elif state["kind"] == "mlp":
        value_fn = MLPQ(state["input_size"], state["n_actions"], state["hidden_width"], state["learning_rate"])
    else:
        raise ContractViolation(f"unknown checkpoint kind '{state['kind']}'")
    value_fn.restore(state)
    logger.info(f"Loaded {value_fn.kind} checkpoint from {path} (step {value_fn.step})")
    return value_fn
