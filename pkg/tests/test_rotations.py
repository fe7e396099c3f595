import numpy as np
import pytest

from edgeff.rotations import (
    cell600_vertices,
    geodesic_distance,
    quaternion_to_matrix,
    random_o3_matrix,
    random_rotation_matrix,
    rotation_from_quaternion,
    sample_rotations_600cell,
)


def test_vertex_count():
    assert cell600_vertices().shape == (120, 4)


@pytest.mark.parametrize("level,count", [(60, 60), (360, 360)])
def test_grid_counts(level, count):
    assert len(sample_rotations_600cell(level)) == count


def test_bad_level_rejected():
    with pytest.raises(ValueError):
        sample_rotations_600cell(100)


@pytest.mark.parametrize("level", [60, 360])
def test_grid_matrices_orthonormal_det_plus_one(level):
    for rot in sample_rotations_600cell(level):
        m = rot.matrix
        assert np.abs(m.T @ m - np.eye(3)).max() <= 1e-12
        assert abs(np.linalg.det(m) - 1.0) <= 1e-12


def test_grid_rotations_distinct():
    rots = sample_rotations_600cell(360)
    for i in range(0, 360, 37):
        for j in range(i + 1, 360, 41):
            assert geodesic_distance(rots[i], rots[j]) > 1e-6


def test_60_set_nearest_neighbors_equal():
    rots = sample_rotations_600cell(60)
    nearest = []
    for i, a in enumerate(rots):
        nearest.append(
            min(geodesic_distance(a, b) for j, b in enumerate(rots) if j != i)
        )
    nearest = np.array(nearest)
    assert nearest.max() - nearest.min() <= 1e-9
    # the 600-cell edge angle: neighbors at 36° in quaternion space = 72° rotations
    assert abs(nearest[0] - 2.0 * np.pi / 5.0) <= 1e-9


def test_60_set_closed_under_own_elements():
    """Left-multiplying the set by one of its members permutes the set."""
    rots = sample_rotations_600cell(60)
    quats = np.array([r.quaternion for r in rots])

    def qmul(a, b):
        w1, x1, y1, z1 = a
        w2, x2, y2, z2 = b
        return np.array(
            [
                w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            ]
        )

    g = quats[17]
    for q in quats[::7]:
        prod = qmul(g, q)
        dots = np.abs(quats @ prod)
        angle = 2.0 * np.arccos(np.clip(dots.max(), -1.0, 1.0))
        assert angle <= 1e-9  # lands exactly on another set element


def test_quaternion_and_antipode_share_matrix():
    q = np.array([0.3, -0.5, 0.2, 0.6])
    assert np.allclose(quaternion_to_matrix(q), quaternion_to_matrix(-q))


def test_rotation_from_quaternion_normalizes():
    rot = rotation_from_quaternion([2.0, 0.0, 0.0, 0.0])
    assert np.allclose(rot.quaternion, [1, 0, 0, 0])
    assert np.allclose(rot.matrix, np.eye(3))


def test_random_rotation_uniform_properties():
    rng = np.random.default_rng(3)
    for _ in range(50):
        m = random_rotation_matrix(rng)
        assert np.abs(m.T @ m - np.eye(3)).max() <= 1e-12
        assert abs(np.linalg.det(m) - 1.0) <= 1e-12


def test_random_o3_determinant_flip_frequency():
    rng = np.random.default_rng(4)
    dets = [np.linalg.det(random_o3_matrix(rng)) for _ in range(1000)]
    dets = np.round(dets).astype(int)
    assert set(dets) == {-1, 1}
    frac = (np.array(dets) == -1).mean()
    assert abs(frac - 0.5) <= 0.05
