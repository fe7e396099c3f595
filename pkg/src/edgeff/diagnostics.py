"""Physics audits for force predictors.

Rotational consistency (the grid and Monte-Carlo estimators), conservativeness
(force-Jacobian antisymmetry), NVE drift fitting, vibrational spectra from
velocity autocorrelation, and the interatomic-distance histogram. Audits over
whole systems take a ``predict(system) -> forces`` callable; Jacobian audits
take a bound provider with ``.forces(positions)`` (and, for the reverse-mode
path, ``.position_jacobian(positions)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import MolecularSystem
from .rotations import Rotation, random_rotation_matrix

SPEED_OF_LIGHT_CM_PER_FS = 2.99792458e-5
WAVENUMBER_PER_INV_FS = 1.0 / SPEED_OF_LIGHT_CM_PER_FS  # 1/fs -> cm^-1


class DiagnosticsError(ValueError):
    """Input outside an audit's contract (zero matrix, too few frames, ...)."""


# ---------------------------------------------------------------------------
# equivariance


@dataclass
class EquivarianceResult:
    estimate: float  # eV/Å
    std_error: float
    samples: np.ndarray
    n_inner: int
    unit: str = "eV/A"


def _rotated(system: MolecularSystem, matrix: np.ndarray) -> MolecularSystem:
    return system.with_positions(system.positions @ matrix.T)


def equivariance_error(
    predict: Callable[[MolecularSystem], np.ndarray],
    systems: Sequence[MolecularSystem],
    n_inner: int = 64,
    rng: Optional[np.random.Generator] = None,
    n_outer: int = 8,
) -> EquivarianceResult:
    """Monte-Carlo rotational-consistency error.

    Per system, the rotational mean is estimated as the average of back-rotated
    predictions over ``n_inner`` uniform rotations; each of ``n_outer`` fresh
    rotations S contributes one sample, the per-atom norm of
    mean_R[Rᵀ f(Rx)] - Sᵀ f(Sx), averaged over atoms. The estimate averages
    all samples; an exactly equivariant predictor scores zero to float noise.
    """
    if n_inner < 2:
        raise DiagnosticsError("n_inner must be >= 2")
    rng = rng or np.random.default_rng(0)
    samples = []
    for system in systems:
        back = []
        for _ in range(n_inner):
            m = random_rotation_matrix(rng)
            back.append(predict(_rotated(system, m)) @ m)
        inner_mean = np.mean(back, axis=0)
        for _ in range(n_outer):
            s = random_rotation_matrix(rng)
            dev = inner_mean - predict(_rotated(system, s)) @ s
            samples.append(float(np.linalg.norm(dev, axis=1).mean()))
    samples = np.array(samples)
    se = samples.std(ddof=1) / np.sqrt(len(samples)) if len(samples) > 1 else 0.0
    return EquivarianceResult(float(samples.mean()), float(se), samples, n_inner)


@dataclass
class RotationForceRecord:
    quaternion: np.ndarray
    force: np.ndarray  # back-rotated prediction for the chosen atom
    magnitude: float
    magnitude_over_median: float


def rotation_grid_forces(
    predict: Callable[[MolecularSystem], np.ndarray],
    system: MolecularSystem,
    atom_index: int,
    rotations: Sequence[Rotation],
) -> list[RotationForceRecord]:
    """Back-rotated per-rotation force records for one atom over a rotation grid.

    This is the raw data behind hemisphere projections and magnitude
    kernel-density plots: exact equivariance collapses all records onto one
    vector with every magnitude ratio 1.
    """
    if not 0 <= atom_index < system.n_atoms:
        raise DiagnosticsError(f"atom index {atom_index} out of range")
    forces = []
    for rot in rotations:
        f = predict(_rotated(system, rot.matrix)) @ rot.matrix
        forces.append(f[atom_index])
    mags = np.array([np.linalg.norm(f) for f in forces])
    med = float(np.median(mags))
    safe = med if med > 0 else 1.0
    return [
        RotationForceRecord(rot.quaternion, np.asarray(f), float(m), float(m / safe))
        for rot, f, m in zip(rotations, forces, mags)
    ]


@dataclass
class KernelDensity:
    """1-d Gaussian KDE with Silverman bandwidth; degenerate data collapse to a point mass."""

    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    point_mass: bool
    location: float


def magnitude_kde(values: np.ndarray, n_grid: int = 256) -> KernelDensity:
    values = np.asarray(values, dtype=np.float64)
    spread = values.std(ddof=1) if len(values) > 1 else 0.0
    if spread < 1e-14 * max(1.0, abs(values.mean())):
        loc = float(values.mean())
        return KernelDensity(np.array([loc]), np.array([np.inf]), 0.0, True, loc)
    iqr = np.subtract(*np.percentile(values, [75, 25]))
    bw = 0.9 * min(spread, iqr / 1.34 if iqr > 0 else spread) * len(values) ** (-0.2)
    grid = np.linspace(values.min() - 3 * bw, values.max() + 3 * bw, n_grid)
    z = (grid[:, None] - values[None, :]) / bw
    density = np.exp(-0.5 * z * z).sum(axis=1) / (len(values) * bw * np.sqrt(2 * np.pi))
    return KernelDensity(grid, density, float(bw), False, float(values.mean()))


# ---------------------------------------------------------------------------
# conservativeness


def position_jacobian(
    provider,
    system: MolecularSystem,
    mode: str = "finite_difference",
    step: float = 1e-4,
) -> np.ndarray:
    """J[a, b] = d f_a / d x_b over flattened (atom, xyz) coordinates.

    ``finite_difference`` uses central differences with ``step`` Å and works
    for any provider; ``autodiff`` asks the provider for its reverse-mode
    Jacobian (one backward pass per force component).
    """
    x0 = system.positions
    n3 = x0.size
    if mode == "autodiff":
        fn = getattr(provider, "position_jacobian", None)
        if fn is None:
            raise DiagnosticsError(
                "provider has no reverse-mode Jacobian; use finite_difference"
            )
        jac = np.asarray(fn(x0))
    elif mode == "finite_difference":
        if step <= 0:
            raise DiagnosticsError("finite-difference step must be positive")
        jac = np.zeros((n3, n3))
        flat = x0.reshape(-1)
        for b in range(n3):
            xp = flat.copy()
            xm = flat.copy()
            xp[b] += step
            xm[b] -= step
            fp = provider.forces(xp.reshape(x0.shape))
            fm = provider.forces(xm.reshape(x0.shape))
            jac[:, b] = (fp - fm).reshape(-1) / (2.0 * step)
    else:
        raise DiagnosticsError(f"unknown Jacobian mode {mode!r}")
    if not np.all(np.isfinite(jac)):
        raise DiagnosticsError("non-finite entries in the force Jacobian")
    return jac


def antisymmetric_ratio(jac: np.ndarray) -> float:
    """Frobenius-norm fraction of the antisymmetric part, in [0, 1].

    Zero for symmetric Jacobians (conservative forces), one for antisymmetric
    ones; iid N(0,1) matrices approach 1/sqrt(2) for large n.
    """
    jac = np.asarray(jac, dtype=np.float64)
    if jac.ndim != 2 or jac.shape[0] != jac.shape[1]:
        raise DiagnosticsError(f"Jacobian must be square, got {jac.shape}")
    total = np.linalg.norm(jac)
    if total == 0.0:
        raise DiagnosticsError("antisymmetric ratio undefined for the zero matrix")
    anti = 0.5 * (jac - jac.T)
    return float(np.linalg.norm(anti) / total)


# ---------------------------------------------------------------------------
# energy drift


@dataclass
class DriftResult:
    slope: float  # eV/ps/atom
    std_error: float
    n_frames: int


def energy_drift(times_fs: np.ndarray, total_energies: np.ndarray, n_atoms: int) -> DriftResult:
    """Least-squares slope of total energy per atom versus time (ps)."""
    t = np.asarray(times_fs, dtype=np.float64) / 1000.0
    e = np.asarray(total_energies, dtype=np.float64) / n_atoms
    if len(t) < 10:
        raise DiagnosticsError(f"drift fit needs >= 10 frames, got {len(t)}")
    design = np.vstack([t, np.ones_like(t)]).T
    coef, residuals, *_ = np.linalg.lstsq(design, e, rcond=None)
    dof = len(t) - 2
    if dof > 0 and len(residuals):
        sigma2 = residuals[0] / dof
        cov = sigma2 * np.linalg.inv(design.T @ design)
        se = float(np.sqrt(cov[0, 0]))
    else:
        se = 0.0
    return DriftResult(float(coef[0]), se, len(t))


def drift_from_trajectory(trajectory) -> DriftResult:
    rows = [r for r in trajectory.energy_log if r["e_total"] is not None]
    times = np.array([r["time"] for r in rows])
    energies = np.array([r["e_total"] for r in rows])
    return energy_drift(times, energies, len(trajectory.masses))


# ---------------------------------------------------------------------------
# spectra


def vacf_spectrum(
    times_fs: np.ndarray,
    velocities: np.ndarray,
    masses: np.ndarray,
    max_lag: Optional[int] = None,
    window: str = "hann",
):
    """Power spectrum of the mass-weighted velocity autocorrelation.

    Returns (wavenumbers in cm^-1, power). Frames must be uniformly spaced;
    the bin width is 1/(n_lags * dt), so doubling the trajectory length halves
    it. A 1-d harmonic mode of frequency nu peaks within one bin of nu.
    """
    times_fs = np.asarray(times_fs, dtype=np.float64)
    velocities = np.asarray(velocities, dtype=np.float64)
    if len(times_fs) != len(velocities):
        raise DiagnosticsError("times and velocity frames disagree in length")
    if len(times_fs) < 4:
        raise DiagnosticsError("need at least 4 frames")
    dts = np.diff(times_fs)
    dt = dts[0]
    if np.any(np.abs(dts - dt) > 1e-9 * max(abs(dt), 1.0)):
        raise DiagnosticsError("non-uniform frame stride")
    t_len, n_atoms = velocities.shape[0], velocities.shape[1]
    max_lag = max_lag or t_len // 2
    max_lag = min(max_lag, t_len - 1)  # lag window holds lags 0 .. max_lag-1

    # FFT-based autocorrelation per atom/component, then mass-weighted sum
    pad = 1 << int(np.ceil(np.log2(2 * t_len)))
    flat = velocities.reshape(t_len, -1)
    spec = np.fft.rfft(flat, n=pad, axis=0)
    acorr = np.fft.irfft(spec * np.conj(spec), n=pad, axis=0)[:max_lag]
    overlap = (t_len - np.arange(max_lag))[:, None]
    acorr = acorr / overlap
    weights = np.repeat(np.asarray(masses, dtype=np.float64), 3)
    vacf = (acorr * weights[None, :]).sum(axis=1)

    if window == "hann":
        w = np.hanning(2 * max_lag)[max_lag:]
    elif window == "none":
        w = np.ones(max_lag)
    else:
        raise DiagnosticsError(f"unknown window {window!r}")
    power = np.abs(np.fft.rfft(vacf * w))
    freqs = np.fft.rfftfreq(max_lag, d=dt)  # 1/fs
    return freqs * WAVENUMBER_PER_INV_FS, power


def vacf_spectrum_from_trajectory(trajectory, **kw):
    times = trajectory.times()
    velocities = np.array([f.velocities for f in trajectory.frames])
    return vacf_spectrum(times, velocities, trajectory.masses, **kw)


# ---------------------------------------------------------------------------
# interatomic-distance histogram


@dataclass
class DistanceHistogram:
    edges: np.ndarray
    masses: np.ndarray  # normalized to unit total

    def score(self, other: "DistanceHistogram") -> float:
        """Mean absolute per-bin difference; zero iff the histograms agree."""
        if self.edges.shape != other.edges.shape or not np.allclose(
            self.edges, other.edges
        ):
            raise DiagnosticsError("histograms must share bin edges to compare")
        return float(np.abs(self.masses - other.masses).mean())


def h_r_histogram(
    position_frames: Sequence[np.ndarray],
    bin_width: float,
    r_max: Optional[float] = None,
) -> DistanceHistogram:
    """Histogram of all pairwise distances across frames, unit total mass."""
    if bin_width <= 0:
        raise DiagnosticsError("bin width must be positive")
    frames = [np.asarray(p, dtype=np.float64) for p in position_frames]
    if not frames:
        raise DiagnosticsError("no frames given")
    dists = []
    for pos in frames:
        if len(pos) < 2:
            continue
        delta = pos[:, None, :] - pos[None, :, :]
        dmat = np.sqrt((delta**2).sum(-1))
        dists.append(dmat[np.triu_indices(len(pos), k=1)])
    if not dists:
        raise DiagnosticsError("no interatomic pairs in input")
    all_d = np.concatenate(dists)
    top = r_max if r_max is not None else float(all_d.max()) + bin_width
    edges = np.arange(0.0, top + bin_width, bin_width)
    counts, edges = np.histogram(all_d, bins=edges)
    total = counts.sum()
    return DistanceHistogram(edges, counts / total if total else counts.astype(float))


# ---------------------------------------------------------------------------
# report container


@dataclass
class DiagnosticsReport:
    """One audit run's outputs, ready for JSON-lines serialization."""

    equivariance: Optional[EquivarianceResult] = None
    lambda_samples: list[float] = field(default_factory=list)
    drift: Optional[DriftResult] = None
    notes: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.equivariance is not None and self.equivariance.estimate < 0:
            raise DiagnosticsError("equivariance error must be non-negative")
        for lam in self.lambda_samples:
            if not 0.0 <= lam <= 1.0 + 1e-12:
                raise DiagnosticsError(f"lambda {lam} outside [0, 1]")

    def to_json_dict(self) -> dict:
        out = dict(self.notes)
        if self.equivariance is not None:
            out["e_eq_ev_per_angstrom"] = self.equivariance.estimate
            out["e_eq_std_error"] = self.equivariance.std_error
            out["e_eq_n_inner"] = self.equivariance.n_inner
        if self.lambda_samples:
            arr = np.asarray(self.lambda_samples)
            out["lambda_mean"] = float(arr.mean())
            out["lambda_min"] = float(arr.min())
            out["lambda_max"] = float(arr.max())
            out["lambda_count"] = int(arr.size)
        if self.drift is not None:
            out["drift_ev_per_ps_per_atom"] = self.drift.slope
            out["drift_std_error"] = self.drift.std_error
        return out
