"""Rotation sampling utilities: uniform draws and the 600-cell grids.

Unit quaternions double-cover SO(3); q and -q give the same matrix, so grid
constructions deduplicate antipodes by keeping the representative whose first
nonzero component is positive.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0


@dataclass(frozen=True)
class Rotation:
    """A rotation as unit quaternion (w, x, y, z) plus its 3x3 matrix."""

    quaternion: np.ndarray
    matrix: np.ndarray


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_from_quaternion(q: np.ndarray) -> Rotation:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    return Rotation(quaternion=q, matrix=quaternion_to_matrix(q))


def random_rotation_matrix(rng: np.random.Generator) -> np.ndarray:
    """Uniform SO(3) draw via a normalized 4-d Gaussian quaternion."""
    q = rng.normal(size=4)
    return quaternion_to_matrix(q)


def random_o3_matrix(rng: np.random.Generator) -> np.ndarray:
    """Uniform O(3) draw: uniform rotation, then a determinant flip w.p. 1/2."""
    m = random_rotation_matrix(rng)
    if rng.random() < 0.5:
        m = m @ np.diag([1.0, 1.0, -1.0])
    return m


def geodesic_distance(a: Rotation, b: Rotation) -> float:
    """Rotation angle of a^-1 b, via the quaternion dot product."""
    dot = abs(float(np.dot(a.quaternion, b.quaternion)))
    return 2.0 * np.arccos(min(1.0, dot))


def _canonical_half(q: np.ndarray) -> np.ndarray:
    """Antipodal representative with lexicographically positive leading entry."""
    for v in q:
        if abs(v) > 1e-12:
            return q if v > 0 else -q
    return q


def cell600_vertices() -> np.ndarray:
    """The 120 unit-quaternion vertices of the 600-cell.

    8 axis permutations of (±1,0,0,0), 16 half-sums (±1/2,...,±1/2), and the
    96 even coordinate permutations of (±φ, ±1, ±1/φ, 0)/2.
    """
    verts: list[tuple[float, float, float, float]] = []
    for axis in range(4):
        for s in (1.0, -1.0):
            v = [0.0, 0.0, 0.0, 0.0]
            v[axis] = s
            verts.append(tuple(v))
    for signs in itertools.product((0.5, -0.5), repeat=4):
        verts.append(signs)
    base = (GOLDEN / 2.0, 0.5, 1.0 / (2.0 * GOLDEN), 0.0)
    even_perms = [
        p
        for p in itertools.permutations(range(4))
        if _perm_parity(p) == 0
    ]
    for perm in even_perms:
        for signs in itertools.product((1.0, -1.0), repeat=3):
            v = [0.0] * 4
            k = 0
            for slot, src in enumerate(perm):
                if base[src] == 0.0:
                    v[slot] = 0.0
                else:
                    v[slot] = base[src] * signs[k]
                    k += 1
            verts.append(tuple(v))
    arr = np.array(sorted(set(verts)), dtype=np.float64)
    if arr.shape != (120, 4):
        raise AssertionError(f"600-cell construction produced {arr.shape[0]} vertices")
    return arr


def _perm_parity(perm) -> int:
    inversions = sum(
        1
        for i in range(len(perm))
        for j in range(i + 1, len(perm))
        if perm[i] > perm[j]
    )
    return inversions % 2


def _cell_centroids(verts: np.ndarray) -> np.ndarray:
    """Normalized centroids of the 600 tetrahedral cells (4-cliques of the edge graph)."""
    dots = verts @ verts.T
    edge = dots > 0.75  # nearest-neighbor dot product is cos 36° ≈ 0.809
    np.fill_diagonal(edge, False)
    n = len(verts)
    neighbors = [np.flatnonzero(edge[i]) for i in range(n)]
    cells = []
    for i in range(n):
        for j in neighbors[i]:
            if j <= i:
                continue
            common = [k for k in neighbors[j] if k > j and edge[i, k]]
            for a_idx, k in enumerate(common):
                for l in common[a_idx + 1 :]:
                    if edge[k, l]:
                        cells.append((i, j, k, l))
    if len(cells) != 600:
        raise AssertionError(f"expected 600 tetrahedral cells, found {len(cells)}")
    centroids = np.array([verts[list(c)].mean(axis=0) for c in cells])
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    return centroids


def _dedup_antipodal(quats: np.ndarray) -> np.ndarray:
    reps = np.array([_canonical_half(q) for q in quats])
    rounded = np.round(reps, 9) + 0.0  # fold -0.0 into +0.0 for bitwise unique
    _, keep = np.unique(rounded, axis=0, return_index=True)
    return reps[np.sort(keep)]


def sample_rotations_600cell(level: int) -> list[Rotation]:
    """Uniform rotation grids: 60 (vertex half-set) or 360 (plus cell centroids)."""
    if level not in (60, 360):
        raise ValueError(f"level must be 60 or 360, got {level}")
    verts = cell600_vertices()
    quats = _dedup_antipodal(verts)
    if level == 360:
        cents = _dedup_antipodal(_cell_centroids(verts))
        quats = np.concatenate([quats, cents], axis=0)
    rotations = [rotation_from_quaternion(q) for q in quats]
    if len(rotations) != level:
        raise AssertionError(f"grid has {len(rotations)} rotations, wanted {level}")
    return rotations
