"""Analytic pair potentials: exactly conservative, exactly equivariant oracles.

Forces are the closed-form -dE/dx, so these providers anchor both ends of the
physics audits (zero equivariance error, symmetric force Jacobians) and label
the synthetic training corpora.
"""

from __future__ import annotations

import numpy as np


def _pair_geometry(positions: np.ndarray):
    delta = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((delta**2).sum(-1))
    np.fill_diagonal(dist, 1.0)  # guard; diagonal never contributes
    unit = delta / dist[..., None]
    return dist, unit


class _PairPotential:
    """Sum over unordered atom pairs of a radial term e(r)."""

    def _e(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _de_dr(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def rest_length(self) -> float:
        raise NotImplementedError

    def potential_energy(self, positions: np.ndarray) -> float:
        dist, _ = _pair_geometry(np.asarray(positions, dtype=np.float64))
        e = self._e(dist)
        iu = np.triu_indices(len(dist), k=1)
        return float(e[iu].sum())

    def forces(self, positions: np.ndarray) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.float64)
        dist, unit = _pair_geometry(positions)
        dedr = self._de_dr(dist)
        np.fill_diagonal(dedr, 0.0)
        return -(dedr[..., None] * unit).sum(axis=1)


class MorsePotential(_PairPotential):
    """E(r) = depth * ((1 - exp(-width (r - r0)))^2 - 1) on every pair."""

    def __init__(self, depth: float = 3.0, width: float = 1.7, r0: float = 1.4):
        self.depth = depth
        self.width = width
        self.r0 = r0

    def rest_length(self) -> float:
        return self.r0

    def _e(self, r):
        g = 1.0 - np.exp(-self.width * (r - self.r0))
        return self.depth * (g * g - 1.0)

    def _de_dr(self, r):
        ex = np.exp(-self.width * (r - self.r0))
        return 2.0 * self.depth * self.width * ex * (1.0 - ex)


class LennardJonesPotential(_PairPotential):
    """E(r) = 4 eps ((sigma/r)^12 - (sigma/r)^6) on every pair."""

    def __init__(self, epsilon: float = 0.1, sigma: float = 3.4):
        self.epsilon = epsilon
        self.sigma = sigma

    def rest_length(self) -> float:
        return 2.0 ** (1.0 / 6.0) * self.sigma

    def _e(self, r):
        s6 = (self.sigma / r) ** 6
        return 4.0 * self.epsilon * (s6 * s6 - s6)

    def _de_dr(self, r):
        s6 = (self.sigma / r) ** 6
        return 4.0 * self.epsilon * (-12.0 * s6 * s6 + 6.0 * s6) / r


class HarmonicNetwork:
    """Springs on an explicit pair list: E = sum 1/2 k (r_ij - r0_ij)^2."""

    def __init__(self, pairs):
        """``pairs`` is an iterable of (i, j, k, r0)."""
        self.pairs = [(int(i), int(j), float(k), float(r0)) for i, j, k, r0 in pairs]
        if not self.pairs:
            raise ValueError("a harmonic network needs at least one spring")

    @classmethod
    def from_geometry(cls, positions: np.ndarray, k: float = 10.0, cutoff: float | None = None):
        """Springs between all pairs (or those within cutoff), at their current lengths."""
        positions = np.asarray(positions, dtype=np.float64)
        n = len(positions)
        pairs = []
        for i in range(n):
            for j in range(i + 1, n):
                r0 = float(np.linalg.norm(positions[i] - positions[j]))
                if cutoff is None or r0 <= cutoff:
                    pairs.append((i, j, k, r0))
        return cls(pairs)

    def rest_length(self) -> float:
        return float(np.mean([r0 for _, _, _, r0 in self.pairs]))

    def potential_energy(self, positions: np.ndarray) -> float:
        positions = np.asarray(positions, dtype=np.float64)
        e = 0.0
        for i, j, k, r0 in self.pairs:
            r = np.linalg.norm(positions[i] - positions[j])
            e += 0.5 * k * (r - r0) ** 2
        return float(e)

    def forces(self, positions: np.ndarray) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.float64)
        out = np.zeros_like(positions)
        for i, j, k, r0 in self.pairs:
            d = positions[i] - positions[j]
            r = np.linalg.norm(d)
            f = -k * (r - r0) * d / r
            out[i] += f
            out[j] -= f
        return out


POTENTIALS = {
    "morse": MorsePotential,
    "lennard_jones": LennardJonesPotential,
    "harmonic_network": HarmonicNetwork,
}
