"""Procrustes formation loss between two ordered 2D point sets.

The loss is the squared Frobenius residual left after the best rigid motion
(rotation plus translation, no scaling, no reflection) maps ``X1`` onto
``X2``::

    L_f(X1, X2) = || X2 - X1 @ M(theta) - 1_k gamma^T ||^2

Points are rows. ``M(theta) = [[cos, -sin], [sin, cos]]`` multiplies row
vectors from the right, which turns them clockwise by ``theta``.
"""

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from core.errors import ContractViolation

PointsLike = Union[np.ndarray, Sequence[Sequence[float]]]


@dataclass(frozen=True)
class AlignmentResult:
    theta: float
    rotation: np.ndarray
    translation: np.ndarray
    loss: float


def as_positions(points: PointsLike) -> np.ndarray:
    """Coerce ``points`` to a float ``(k, 2)`` array with ``k >= 2``."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ContractViolation(f"positions must have shape (k, 2), got {arr.shape}")
    if arr.shape[0] < 2:
        raise ContractViolation(f"a formation needs at least 2 agents, got {arr.shape[0]}")
    return arr


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _pair(X1: PointsLike, X2: PointsLike):
    a, b = as_positions(X1), as_positions(X2)
    if a.shape != b.shape:
        raise ContractViolation(f"formations differ in size: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def align(X1: PointsLike, X2: PointsLike) -> AlignmentResult:
    """Closed-form rigid alignment of ``X1`` onto ``X2``.

    Both sets are centered before the angle sums; the quadrant-aware
    ``arctan2`` picks the minimising branch. When both sums vanish every
    angle attains the same loss and ``theta`` is 0.
    """
    a, b = _pair(X1, X2)
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    x, y = (a - mu_a).T
    w, z = (b - mu_b).T

    num = float(np.sum(w * y - z * x))
    den = float(np.sum(w * x + z * y))
    theta = 0.0 if num == 0.0 and den == 0.0 else float(np.arctan2(num, den))

    rotation = rotation_matrix(theta)
    translation = mu_b - mu_a @ rotation
    residual = (b - mu_b) - (a - mu_a) @ rotation
    loss = max(0.0, float(np.sum(residual * residual)))
    return AlignmentResult(theta=theta, rotation=rotation, translation=translation, loss=loss)


def apply_alignment(X1: PointsLike, result: AlignmentResult) -> np.ndarray:
    """Return ``X1 @ M(theta) + 1 gamma^T``."""
    return as_positions(X1) @ result.rotation + result.translation


def formation_loss(X1: PointsLike, X2: PointsLike) -> float:
    return align(X1, X2).loss


def delta_loss(prev_positions: PointsLike, next_positions: PointsLike, desired: PointsLike) -> float:
    """Change in formation loss over one step: ``L_f(next) - L_f(prev)``."""
    prev, nxt = _pair(prev_positions, next_positions)
    return formation_loss(nxt, desired) - formation_loss(prev, desired)
