import time

import numpy as np
import pytest

from core.errors import ContractViolation
from core.formation import align, apply_alignment, delta_loss, formation_loss, rotation_matrix


def rigid_motion(points, phi, shift):
    return points @ rotation_matrix(phi) + np.asarray(shift)


def brute_force_loss(X1, X2, step=1e-4):
    """Minimum residual over a theta grid with the centroid-matching translation."""
    a = X1 - X1.mean(axis=0)
    b = X2 - X2.mean(axis=0)
    thetas = np.arange(-np.pi, np.pi, step)
    c, s = np.cos(thetas), np.sin(thetas)
    # Rows rotated by M(theta): (x c + y s, -x s + y c)
    rx = a[:, 0:1] * c + a[:, 1:2] * s
    ry = -a[:, 0:1] * s + a[:, 1:2] * c
    residual = (b[:, 0:1] - rx) ** 2 + (b[:, 1:2] - ry) ** 2
    return residual.sum(axis=0).min()


def test_identity_alignment():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    result = align(X, X)
    assert result.loss == pytest.approx(0.0, abs=1e-12)
    assert result.theta == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(result.translation, [0.0, 0.0], atol=1e-12)


def test_translation_is_removed():
    X = np.array([[0.0, 0.0], [2.0, 1.0], [3.0, -1.0]])
    result = align(X, X + np.array([5.0, -3.0]))
    assert result.loss < 1e-9
    np.testing.assert_allclose(result.translation, [5.0, -3.0], atol=1e-9)


def test_rotation_about_centroid_is_removed():
    X = np.array([[0.0, 0.0], [4.0, 0.0], [4.0, 1.0], [1.0, 3.0]])
    mu = X.mean(axis=0)
    phi = np.deg2rad(37.0)
    X2 = (X - mu) @ rotation_matrix(phi) + mu
    assert formation_loss(X, X2) < 1e-9


def test_rotation_matrix_is_proper():
    R = rotation_matrix(0.7)
    np.testing.assert_allclose(R @ R.T, np.eye(2), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_rotation_matrix_turns_row_vectors_clockwise():
    turned = np.array([[1.0, 0.0]]) @ rotation_matrix(np.pi / 2)
    np.testing.assert_allclose(turned, [[0.0, -1.0]], atol=1e-12)


def test_scaled_square_matches_brute_force():
    square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    loss = formation_loss(square, 2 * square)
    assert loss == pytest.approx(brute_force_loss(square, 2 * square), abs=1e-6)
    assert loss > 0


def test_apply_alignment_maps_onto_target():
    X = np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 1.0]])
    X2 = rigid_motion(X, 1.1, (7.0, -2.0))
    result = align(X, X2)
    np.testing.assert_allclose(apply_alignment(X, result), X2, atol=1e-9)


def test_invariance_suite():
    rng = np.random.default_rng(0)
    started = time.perf_counter()
    for _ in range(1000):
        k = int(rng.integers(2, 9))
        X1 = rng.uniform(-100, 100, size=(k, 2))
        X2 = rigid_motion(X1, rng.uniform(-np.pi, np.pi), rng.uniform(-100, 100, size=2))
        assert formation_loss(X1, X2) < 1e-9
    assert time.perf_counter() - started < 1.0


def test_translation_and_rotation_invariance_of_target():
    rng = np.random.default_rng(1)
    for _ in range(200):
        k = int(rng.integers(2, 9))
        X1 = rng.uniform(-100, 100, size=(k, 2))
        X2 = rng.uniform(-100, 100, size=(k, 2))
        base = formation_loss(X1, X2)
        shifted = formation_loss(X1, X2 + rng.uniform(-100, 100, size=2))
        mu = X2.mean(axis=0)
        rotated = formation_loss(X1, (X2 - mu) @ rotation_matrix(rng.uniform(-np.pi, np.pi)) + mu)
        assert shifted == pytest.approx(base, rel=1e-9, abs=1e-7)
        assert rotated == pytest.approx(base, rel=1e-9, abs=1e-7)


def test_closed_form_is_optimal():
    rng = np.random.default_rng(2)
    for _ in range(200):
        k = int(rng.integers(2, 6))
        X1 = rng.uniform(-5, 5, size=(k, 2))
        X2 = rng.uniform(-5, 5, size=(k, 2))
        assert formation_loss(X1, X2) <= brute_force_loss(X1, X2) + 1e-6


def test_loss_is_non_negative():
    rng = np.random.default_rng(3)
    for _ in range(100):
        X1, X2 = rng.normal(size=(2, 4, 2))
        assert formation_loss(X1, X2) >= 0.0


def test_coincident_points_give_zero_theta():
    X = np.zeros((3, 2))
    result = align(X, np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]))
    assert result.theta == 0.0


@pytest.mark.parametrize("X1, X2", [
    ([[0, 0]], [[1, 1]]),
    ([[0, 0], [1, 0]], [[0, 0], [1, 0], [2, 0]]),
    ([0, 1, 2], [0, 1, 2]),
])
def test_contract_violations(X1, X2):
    with pytest.raises(ContractViolation):
        align(X1, X2)


def test_delta_loss():
    desired = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    prev = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]])
    assert delta_loss(prev, prev, desired) == 0.0
    assert delta_loss(prev, desired, desired) == pytest.approx(-formation_loss(prev, desired))

    rng = np.random.default_rng(4)
    a, b, c = rng.normal(size=(3, 3, 2))
    assert delta_loss(a, b, c) == pytest.approx(formation_loss(b, c) - formation_loss(a, c))

    with pytest.raises(ContractViolation):
        delta_loss(prev, prev[:2], desired)
