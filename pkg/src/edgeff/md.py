"""Classical MD over any force provider: NVE velocity-Verlet, SVR and
Nosé–Hoover thermostats, net force/torque projection, per-step offset rotations.

Internal units are Å, fs, eV, amu throughout; the single conversion constant
below fixes the kinetic-energy bridge between them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .rotations import random_rotation_matrix

# 1 amu (Å/fs)^2 in eV — the one unit-system constant
EV_PER_AMU_A2_FS2 = 1.66053906660e-27 * 1e10 / 1.602176634e-19
KB_EV = 8.617333262e-5  # eV/K


class NonFiniteForceError(FloatingPointError):
    """Force provider returned NaN/inf."""


class MdAbortError(RuntimeError):
    """Simulation aborted (blow-up or non-finite forces); carries the partial run."""

    def __init__(self, message: str, last_stable_step: int, trajectory=None):
        super().__init__(message)
        self.last_stable_step = last_stable_step
        self.trajectory = trajectory


@dataclass
class ThermostatConfig:
    kind: str = "none"  # none | nose_hoover | svr
    temperature: float = 300.0  # K
    tau: float = 100.0  # fs

    def __post_init__(self):
        if self.kind not in ("none", "nose_hoover", "svr"):
            raise ValueError(f"unknown thermostat kind {self.kind!r}")
        if self.kind != "none" and self.tau <= 0:
            raise ValueError("thermostatted runs need tau > 0")


@dataclass
class TrajectoryFrame:
    time: float  # fs
    positions: np.ndarray  # Å
    velocities: np.ndarray  # Å/fs
    forces: np.ndarray  # eV/Å
    kinetic_energy: float  # eV
    potential_energy: Optional[float]  # eV, only when the provider has one
    temperature: float  # K

    @property
    def total_energy(self) -> Optional[float]:
        if self.potential_energy is None:
            return None
        return self.kinetic_energy + self.potential_energy


def kinetic_energy(velocities: np.ndarray, masses: np.ndarray) -> float:
    return float(0.5 * EV_PER_AMU_A2_FS2 * (masses[:, None] * velocities**2).sum())


def kinetic_temperature(ke: float, n_dof: int) -> float:
    if n_dof <= 0:
        return 0.0
    return 2.0 * ke / (n_dof * KB_EV)


def make_frame(time, positions, velocities, forces, masses, n_dof, potential_energy=None):
    ke = kinetic_energy(velocities, masses)
    return TrajectoryFrame(
        time=float(time),
        positions=np.asarray(positions, dtype=np.float64),
        velocities=np.asarray(velocities, dtype=np.float64),
        forces=np.asarray(forces, dtype=np.float64),
        kinetic_energy=ke,
        potential_energy=potential_energy,
        temperature=kinetic_temperature(ke, n_dof),
    )


def maxwell_boltzmann_velocities(
    masses: np.ndarray,
    temperature: float,
    rng: np.random.Generator,
    remove_com: bool = True,
) -> np.ndarray:
    """Equipartition draw; center-of-mass motion removed by default."""
    masses = np.asarray(masses, dtype=np.float64)
    sigma = np.sqrt(KB_EV * temperature / (masses * EV_PER_AMU_A2_FS2))
    v = rng.normal(size=(len(masses), 3)) * sigma[:, None]
    if remove_com and len(masses) > 1:
        v -= (masses[:, None] * v).sum(0) / masses.sum()
    return v


def remove_rigid_rotation(
    velocities: np.ndarray, positions: np.ndarray, masses: np.ndarray
) -> np.ndarray:
    """Subtract the rigid-rotation velocity field so angular momentum is zero.

    Central pair forces and global rescaling both preserve L, so zeroing it at
    init keeps the rotational degrees of freedom frozen for isolated systems.
    """
    masses = np.asarray(masses, dtype=np.float64)
    com = (masses[:, None] * positions).sum(0) / masses.sum()
    rel = positions - com
    ang_mom = (masses[:, None] * np.cross(rel, velocities)).sum(0)
    inertia = (masses[:, None, None]
               * ((rel**2).sum(1)[:, None, None] * np.eye(3) - rel[:, :, None] * rel[:, None, :])
               ).sum(axis=0)
    omega = np.linalg.pinv(inertia, rcond=1e-12) @ ang_mom
    return velocities - np.cross(omega, rel)


# ---------------------------------------------------------------------------
# net force / torque projection


def project_forces(
    forces: np.ndarray, positions: np.ndarray, masses: np.ndarray
) -> np.ndarray:
    """Remove the net force, then the net torque about the center of mass.

    The torque is removed by subtracting the rigid-rotation force pattern
    m_i (ω × r'_i) with ω solved from the inertia tensor; that pattern has
    zero net force, so both conditions hold afterwards. Degenerate inertia
    (single atoms, collinear chains) uses the pseudo-inverse, which is exact
    there because the residual torque is orthogonal to the null axis.
    """
    forces = np.asarray(forces, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    masses = np.asarray(masses, dtype=np.float64)
    out = forces - forces.mean(axis=0)
    com = (masses[:, None] * positions).sum(0) / masses.sum()
    rel = positions - com
    torque = np.cross(rel, out).sum(axis=0)
    inertia = (masses[:, None, None]
               * ((rel**2).sum(1)[:, None, None] * np.eye(3) - rel[:, :, None] * rel[:, None, :])
               ).sum(axis=0)
    omega = np.linalg.pinv(inertia, rcond=1e-12) @ torque
    out -= masses[:, None] * np.cross(omega, rel)
    return out


# ---------------------------------------------------------------------------
# integrators and thermostats


def _accelerations(forces: np.ndarray, masses: np.ndarray) -> np.ndarray:
    return forces / (masses[:, None] * EV_PER_AMU_A2_FS2)


def _eval_forces(provider, positions, project, masses, rotation=None):
    if rotation is not None:
        f = provider.forces(positions @ rotation.T) @ rotation
    else:
        f = provider.forces(positions)
    f = np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise NonFiniteForceError("force provider returned non-finite values")
    if project:
        f = project_forces(f, positions, masses)
    return f


def velocity_verlet_step(
    frame: TrajectoryFrame,
    dt: float,
    provider,
    masses: np.ndarray,
    n_dof: int,
    project: bool = False,
    rotation: np.ndarray | None = None,
) -> TrajectoryFrame:
    """One NVE step: half kick, drift, fresh forces, half kick."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    a0 = _accelerations(frame.forces, masses)
    v_half = frame.velocities + 0.5 * dt * a0
    x_new = frame.positions + dt * v_half
    f_new = _eval_forces(provider, x_new, project, masses, rotation)
    v_new = v_half + 0.5 * dt * _accelerations(f_new, masses)
    return make_frame(
        frame.time + dt,
        x_new,
        v_new,
        f_new,
        masses,
        n_dof,
        potential_energy=provider.potential_energy(x_new),
    )


def svr_rescale(
    frame: TrajectoryFrame,
    cfg: ThermostatConfig,
    rng: np.random.Generator,
    dt: float,
    n_dof: int,
    masses: np.ndarray,
) -> tuple[TrajectoryFrame, float]:
    """Canonical-sampling velocity rescale (Bussi); returns (frame, injected heat).

    The stochastic factor mixes the current kinetic energy toward the target
    with relaxation exp(-dt/tau); accumulated heat makes the effective total
    energy a conserved quantity of the thermostatted dynamics.
    """
    k_now = frame.kinetic_energy
    if k_now <= 0:
        raise ValueError("svr_rescale needs positive kinetic energy")
    k_bar = 0.5 * n_dof * KB_EV * cfg.temperature
    c = math.exp(-dt / cfg.tau)
    r1 = rng.standard_normal()
    rest = rng.chisquare(n_dof - 1) if n_dof > 1 else 0.0
    factor = (
        c
        + (1.0 - c) * (rest + r1 * r1) * k_bar / (n_dof * k_now)
        + 2.0 * r1 * math.sqrt(c * (1.0 - c) * k_bar / (n_dof * k_now))
    )
    alpha = math.sqrt(max(factor, 0.0))
    new = make_frame(
        frame.time,
        frame.positions,
        frame.velocities * alpha,
        frame.forces,
        masses,
        n_dof,
        potential_energy=frame.potential_energy,
    )
    heat = new.kinetic_energy - k_now
    return new, heat


@dataclass
class NoseHooverState:
    xi: float = 0.0  # accumulated thermostat coordinate
    v_xi: float = 0.0  # friction rate, 1/fs


def _nh_half(velocities, masses, state, cfg, dt, n_dof):
    q = n_dof * KB_EV * cfg.temperature * cfg.tau**2
    ke = kinetic_energy(velocities, masses)
    state.v_xi += 0.25 * dt * (2.0 * ke - n_dof * KB_EV * cfg.temperature) / q
    scale = math.exp(-0.5 * dt * state.v_xi)
    velocities = velocities * scale
    ke *= scale * scale
    state.xi += 0.5 * dt * state.v_xi
    state.v_xi += 0.25 * dt * (2.0 * ke - n_dof * KB_EV * cfg.temperature) / q
    return velocities


def nose_hoover_step(
    frame: TrajectoryFrame,
    cfg: ThermostatConfig,
    state: NoseHooverState,
    dt: float,
    provider,
    masses: np.ndarray,
    n_dof: int,
    project: bool = False,
    rotation: np.ndarray | None = None,
) -> TrajectoryFrame:
    """Single-chain Nosé–Hoover: symmetric thermostat half steps around Verlet."""
    v = _nh_half(frame.velocities, masses, state, cfg, dt, n_dof)
    pre = make_frame(
        frame.time, frame.positions, v, frame.forces, masses, n_dof,
        potential_energy=frame.potential_energy,
    )
    stepped = velocity_verlet_step(pre, dt, provider, masses, n_dof, project, rotation)
    v = _nh_half(stepped.velocities, masses, state, cfg, dt, n_dof)
    return make_frame(
        stepped.time, stepped.positions, v, stepped.forces, masses, n_dof,
        potential_energy=stepped.potential_energy,
    )


def nose_hoover_conserved(state: NoseHooverState, cfg: ThermostatConfig, n_dof: int) -> float:
    """Extended-system energy carried by the thermostat degrees of freedom."""
    q = n_dof * KB_EV * cfg.temperature * cfg.tau**2
    return 0.5 * q * state.v_xi**2 + n_dof * KB_EV * cfg.temperature * state.xi


# ---------------------------------------------------------------------------
# the driver


@dataclass
class Trajectory:
    numbers: np.ndarray
    masses: np.ndarray
    n_dof: int
    dt: float
    stride: int
    frames: list[TrajectoryFrame] = field(default_factory=list)
    energy_log: list[dict] = field(default_factory=list)
    completed_steps: int = 0

    def times(self) -> np.ndarray:
        return np.array([f.time for f in self.frames])

    def total_energies(self) -> np.ndarray:
        return np.array(
            [f.total_energy if f.total_energy is not None else np.nan for f in self.frames]
        )


def _extreme_distances(positions: np.ndarray) -> tuple[float, float]:
    if len(positions) < 2:
        return 0.0, 0.0
    delta = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((delta**2).sum(-1))
    iu = np.triu_indices(len(positions), k=1)
    return float(dist[iu].min()), float(dist[iu].max())


def run_md(
    system,
    provider,
    steps: int,
    dt: float,
    thermostat: ThermostatConfig | None = None,
    *,
    initial_temperature: float | None = None,
    velocities: np.ndarray | None = None,
    projection: bool = False,
    offset_rotations: bool = False,
    seed: int = 0,
    stride: int = 1,
    blow_up_distance: float = 100.0,
    min_distance: float = 0.1,
    n_constrained: int | None = None,
    remove_angular_momentum: bool = False,
) -> Trajectory:
    """Drive ``steps`` of dynamics for ``system`` under ``provider``.

    Velocities come from ``velocities`` or a Maxwell–Boltzmann draw at
    ``initial_temperature`` (COM motion removed). Separate RNG streams feed
    velocity init, thermostat noise, and offset rotations, so switching
    rotations on cannot perturb the dynamics noise sequence. With offset
    rotations the provider sees R·x and the step uses Rᵀ·f̂(R·x), a fresh
    uniform R each evaluation. Aborts (blow-up beyond ``blow_up_distance`` Å,
    contact below ``min_distance`` Å, non-finite forces) raise
    :class:`MdAbortError` carrying the partial trajectory.
    """
    thermostat = thermostat or ThermostatConfig()
    masses = system.masses()
    n = len(masses)
    seq = np.random.SeedSequence(seed).spawn(3)
    rng_init = np.random.default_rng(seq[0])
    rng_thermo = np.random.default_rng(seq[1])
    rng_rot = np.random.default_rng(seq[2])

    if velocities is None:
        if initial_temperature is None:
            raise ValueError("need velocities or initial_temperature")
        velocities = maxwell_boltzmann_velocities(masses, initial_temperature, rng_init)
        com_removed = n > 1
    else:
        velocities = np.asarray(velocities, dtype=np.float64)
        com_removed = False
    rot_removed = False
    if remove_angular_momentum and n > 1:
        velocities = remove_rigid_rotation(velocities, system.positions, masses)
        rot_removed = True
    if n_constrained is None:
        n_constrained = 3 if com_removed else 0
        if rot_removed:
            n_constrained += 2 if n == 2 else 3
    n_dof = 3 * n - n_constrained

    rotation = random_rotation_matrix(rng_rot) if offset_rotations else None
    f0 = _eval_forces(provider, system.positions, projection, masses, rotation)
    frame = make_frame(
        0.0, system.positions, velocities, f0, masses, n_dof,
        potential_energy=provider.potential_energy(system.positions),
    )
    traj = Trajectory(
        numbers=system.atomic_numbers.copy(),
        masses=masses,
        n_dof=n_dof,
        dt=dt,
        stride=stride,
    )
    nh_state = NoseHooverState()
    heat_acc = 0.0

    def log(fr: TrajectoryFrame):
        total = fr.total_energy
        if thermostat.kind == "nose_hoover":
            cons = None if total is None else total + nose_hoover_conserved(
                nh_state, thermostat, n_dof
            )
        elif thermostat.kind == "svr":
            cons = None if total is None else total - heat_acc
        else:
            cons = total
        traj.energy_log.append(
            dict(
                time=fr.time,
                e_kin=fr.kinetic_energy,
                e_pot=fr.potential_energy,
                e_total=total,
                temperature=fr.temperature,
                conserved=cons,
            )
        )

    traj.frames.append(frame)
    log(frame)
    for step in range(1, steps + 1):
        rotation = random_rotation_matrix(rng_rot) if offset_rotations else None
        try:
            if thermostat.kind == "nose_hoover":
                frame = nose_hoover_step(
                    frame, thermostat, nh_state, dt, provider, masses, n_dof,
                    projection, rotation,
                )
            else:
                frame = velocity_verlet_step(
                    frame, dt, provider, masses, n_dof, projection, rotation
                )
                if thermostat.kind == "svr":
                    frame, heat = svr_rescale(
                        frame, thermostat, rng_thermo, dt, n_dof, masses
                    )
                    heat_acc += heat
        except NonFiniteForceError as exc:
            raise MdAbortError(
                f"non-finite forces at step {step}", step - 1, traj
            ) from exc
        dmin, dmax = _extreme_distances(frame.positions)
        if len(masses) > 1 and (dmax > blow_up_distance or dmin < min_distance):
            raise MdAbortError(
                f"instability at step {step}: distances in [{dmin:.3g}, {dmax:.3g}] Å",
                step - 1,
                traj,
            )
        traj.completed_steps = step
        if step % stride == 0:
            traj.frames.append(frame)
        log(frame)
    return traj


def write_energy_csv(path, trajectory: Trajectory) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_fs", "e_kin_ev", "e_pot_ev", "e_total_ev", "temperature_k", "conserved_ev"])
        for row in trajectory.energy_log:
            w.writerow(
                [
                    f"{row['time']:.6f}",
                    f"{row['e_kin']:.10f}",
                    "" if row["e_pot"] is None else f"{row['e_pot']:.10f}",
                    "" if row["e_total"] is None else f"{row['e_total']:.10f}",
                    f"{row['temperature']:.4f}",
                    "" if row["conserved"] is None else f"{row['conserved']:.10f}",
                ]
            )


def write_trajectory_xyz(path, trajectory: Trajectory) -> None:
    from .data import format_trajectory_frame

    with open(path, "w") as fh:
        for fr in trajectory.frames:
            fh.write(format_trajectory_frame(trajectory.numbers, fr))
