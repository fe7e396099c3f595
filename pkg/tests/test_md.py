import numpy as np
import pytest

from edgeff import md
from edgeff.data import MolecularSystem
from edgeff.potentials import HarmonicNetwork, MorsePotential


def com(positions, masses):
    return (masses[:, None] * positions).sum(0) / masses.sum()


def torque_norm(forces, positions, masses):
    rel = positions - com(positions, masses)
    return float(np.linalg.norm(np.cross(rel, forces).sum(0)))


class TestProjection:
    def test_balanced_forces_unchanged(self):
        rng = np.random.default_rng(0)
        pos = rng.normal(size=(5, 3)) * 2
        m = rng.uniform(1, 16, 5)
        f = md.project_forces(rng.normal(size=(5, 3)), pos, m)
        again = md.project_forces(f, pos, m)
        assert np.abs(again - f).max() <= 1e-12

    def test_uniform_field_becomes_zero(self):
        pos = np.random.default_rng(1).normal(size=(4, 3))
        m = np.ones(4)
        f = np.tile([0.3, -1.2, 0.5], (4, 1))
        out = md.project_forces(f, pos, m)
        assert np.abs(out).max() <= 1e-12

    def test_random_systems_postconditions(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = int(rng.integers(2, 7))
            pos = rng.normal(size=(n, 3)) * 3
            m = rng.uniform(1, 20, n)
            out = md.project_forces(rng.normal(size=(n, 3)), pos, m)
            assert np.linalg.norm(out.sum(0)) <= 1e-10
            assert torque_norm(out, pos, m) <= 1e-8

    def test_collinear_and_single_atom(self):
        rng = np.random.default_rng(3)
        axis = np.array([1.0, 2.0, -0.5])
        axis /= np.linalg.norm(axis)
        pos = np.outer(np.arange(4, dtype=float), axis)
        m = rng.uniform(1, 12, 4)
        out = md.project_forces(rng.normal(size=(4, 3)), pos, m)
        assert np.linalg.norm(out.sum(0)) <= 1e-10
        assert torque_norm(out, pos, m) <= 1e-8
        single = md.project_forces(np.array([[1.0, 2.0, 3.0]]), np.zeros((1, 3)), np.ones(1))
        assert np.array_equal(single, np.zeros((1, 3)))


class StaticProvider:
    def forces(self, positions):
        return np.zeros_like(positions)

    def potential_energy(self, positions):
        return 0.0


class TestVelocityVerlet:
    def test_zero_velocity_zero_force_is_static(self):
        s = MolecularSystem([6, 6], [[0, 0, 0], [2.0, 0, 0]])
        masses = s.masses()
        frame = md.make_frame(0.0, s.positions, np.zeros((2, 3)),
                              np.zeros((2, 3)), masses, 6, potential_energy=0.0)
        out = md.velocity_verlet_step(frame, 0.5, StaticProvider(), masses, 6)
        assert np.array_equal(out.positions, frame.positions)
        assert np.array_equal(out.velocities, frame.velocities)

    def test_harmonic_oscillator_secular_drift(self):
        # dimer on a spring, dt = T/1000, 100 periods: the fitted secular energy
        # change stays below 1e-6 of the vibrational energy (symplectic, no trend)
        k, r0 = 5.0, 1.5
        net = HarmonicNetwork([(0, 1, k, r0)])
        s = MolecularSystem([6, 6], [[0, 0, 0], [r0 + 0.1, 0, 0]])
        masses = s.masses()
        mu = masses[0] / 2.0
        omega = np.sqrt(k / (mu * md.EV_PER_AMU_A2_FS2))
        period = 2 * np.pi / omega
        dt = period / 1000.0
        steps = 100_000  # 100 periods
        traj = md.run_md(s, net, steps=steps, dt=dt,
                         velocities=np.zeros((2, 3)), n_constrained=0)
        rows = traj.energy_log
        t = np.array([r["time"] for r in rows])
        e = np.array([r["e_total"] for r in rows])
        slope = np.linalg.lstsq(
            np.vstack([t, np.ones_like(t)]).T, e, rcond=None
        )[0][0]
        e0 = e[0]  # pure vibrational energy; the spring zero is the rest length
        assert abs(slope) * t[-1] <= 1e-6 * e0

    def test_time_reversal_retraces(self):
        pot = MorsePotential(depth=2.5, width=1.8, r0=1.5)
        s = MolecularSystem([6, 6, 6], [[0, 0, 0], [1.5, 0, 0], [3.0, 0.1, 0]])
        fwd = md.run_md(s, pot, steps=100, dt=0.5, initial_temperature=150.0, seed=7)
        last = fwd.frames[-1]
        back = md.run_md(
            s.with_positions(last.positions), pot, steps=100, dt=0.5,
            velocities=-last.velocities, n_constrained=fwd.n_dof and 3 * 3 - fwd.n_dof,
        )
        assert np.abs(back.frames[-1].positions - s.positions).max() <= 1e-8

    def test_nonfinite_forces_abort_with_index(self):
        class BadProvider:
            def __init__(self):
                self.calls = 0

            def forces(self, positions):
                self.calls += 1
                if self.calls > 3:
                    return np.full_like(positions, np.nan)
                return np.zeros_like(positions)

            def potential_energy(self, positions):
                return None

        s = MolecularSystem([6, 6], [[0, 0, 0], [2.0, 0, 0]])
        with pytest.raises(md.MdAbortError) as err:
            md.run_md(s, BadProvider(), steps=10, dt=0.5, initial_temperature=50.0, seed=1)
        assert err.value.last_stable_step == 2


class TestSvr:
    def test_infinite_tau_leaves_velocities(self):
        s = MolecularSystem([6, 6], [[0, 0, 0], [1.8, 0, 0]])
        masses = s.masses()
        v = md.maxwell_boltzmann_velocities(masses, 300.0, np.random.default_rng(0))
        frame = md.make_frame(0.0, s.positions, v, np.zeros((2, 3)), masses, 3)
        cfg = md.ThermostatConfig("svr", 300.0, 1e15)
        out, heat = md.svr_rescale(frame, cfg, np.random.default_rng(1), 0.5, 3, masses)
        # the stochastic factor approaches 1 like sqrt(dt/tau)
        assert np.abs(out.velocities / v - 1.0).max() <= 1e-6
        assert abs(heat) <= 1e-6 * frame.kinetic_energy

    def test_needs_positive_kinetic_energy(self):
        s = MolecularSystem([6], [[0, 0, 0]])
        masses = s.masses()
        frame = md.make_frame(0.0, s.positions, np.zeros((1, 3)), np.zeros((1, 3)), masses, 3)
        with pytest.raises(ValueError):
            md.svr_rescale(frame, md.ThermostatConfig("svr", 300.0, 100.0),
                           np.random.default_rng(0), 0.5, 3, masses)

    def test_short_run_tracks_target_loosely(self):
        rng = np.random.default_rng(4)
        base = rng.normal(size=(5, 3)) * 1.5
        net = HarmonicNetwork.from_geometry(base, k=6.0)
        s = MolecularSystem([6, 8, 6, 1, 7], base)
        traj = md.run_md(s, net, steps=8000, dt=0.5,
                         thermostat=md.ThermostatConfig("svr", 350.0, 50.0),
                         initial_temperature=350.0, seed=5,
                         remove_angular_momentum=True)
        temps = np.array([r["temperature"] for r in traj.energy_log[1000:]])
        assert abs(temps.mean() - 350.0) / 350.0 <= 0.10

    def test_conserved_quantity_tracked(self):
        rng = np.random.default_rng(5)
        base = rng.normal(size=(4, 3)) * 1.5
        net = HarmonicNetwork.from_geometry(base, k=6.0)
        s = MolecularSystem([6, 6, 6, 6], base)
        traj = md.run_md(s, net, steps=3000, dt=0.5,
                         thermostat=md.ThermostatConfig("svr", 300.0, 100.0),
                         initial_temperature=300.0, seed=6,
                         remove_angular_momentum=True)
        cons = np.array([r["conserved"] for r in traj.energy_log])
        etot = np.array([r["e_total"] for r in traj.energy_log])
        # the effective energy wanders far less than total energy itself
        assert cons.std() <= 0.2 * etot.std()


class TestNoseHoover:
    def test_reduces_to_verlet_at_zero_friction_and_matched_t(self):
        net = HarmonicNetwork([(0, 1, 4.0, 1.5)])
        s = MolecularSystem([6, 6], [[0, 0, 0], [1.7, 0, 0]])
        masses = s.masses()
        n_dof = 6
        v = np.array([[0.004, 0, 0], [-0.004, 0, 0]])
        ke = md.kinetic_energy(v, masses)
        t_inst = md.kinetic_temperature(ke, n_dof)
        cfg = md.ThermostatConfig("nose_hoover", t_inst, 80.0)
        f0 = net.forces(s.positions)
        frame = md.make_frame(0.0, s.positions, v, f0, masses, n_dof,
                              potential_energy=net.potential_energy(s.positions))
        state = md.NoseHooverState()
        nh = md.nose_hoover_step(frame, cfg, state, 0.5, net, masses, n_dof)
        vv = md.velocity_verlet_step(frame, 0.5, net, masses, n_dof)
        # at G = 0 the first half step leaves velocities untouched, so the
        # positions update identically; the trailing half step only nudges v_xi
        assert np.abs(nh.positions - vv.positions).max() <= 1e-12

    def test_equilibrates_to_target(self):
        rng = np.random.default_rng(7)
        base = rng.normal(size=(5, 3)) * 1.5
        net = HarmonicNetwork.from_geometry(base, k=6.0)
        s = MolecularSystem([6, 8, 6, 1, 7], base)
        traj = md.run_md(s, net, steps=12000, dt=0.5,
                         thermostat=md.ThermostatConfig("nose_hoover", 420.0, 40.0),
                         initial_temperature=380.0, seed=8,
                         remove_angular_momentum=True)
        temps = np.array([r["temperature"] for r in traj.energy_log[2000:]])
        assert abs(temps.mean() - 420.0) / 420.0 <= 0.08

    def test_extended_conserved_quantity_bounded(self):
        rng = np.random.default_rng(8)
        base = rng.normal(size=(4, 3)) * 1.6
        net = HarmonicNetwork.from_geometry(base, k=5.0)
        s = MolecularSystem([6, 6, 8, 8], base)
        traj = md.run_md(s, net, steps=10000, dt=0.5,
                         thermostat=md.ThermostatConfig("nose_hoover", 300.0, 60.0),
                         initial_temperature=300.0, seed=9,
                         remove_angular_momentum=True)
        rows = traj.energy_log
        t = np.array([r["time"] for r in rows]) / 1000.0
        c = np.array([r["conserved"] for r in rows])
        slope = np.linalg.lstsq(np.vstack([t, np.ones_like(t)]).T, c, rcond=None)[0][0]
        assert abs(slope) / len(base) <= 1e-4  # eV/ps/atom


class TestRunMd:
    def test_zero_steps_returns_initial_frame_only(self):
        pot = MorsePotential()
        s = MolecularSystem([6, 6], [[0, 0, 0], [1.4, 0, 0]])
        traj = md.run_md(s, pot, steps=0, dt=0.5, initial_temperature=100.0, seed=0)
        assert len(traj.frames) == 1
        assert traj.completed_steps == 0

    def test_offset_rotations_match_plain_run_on_equivariant_oracle(self):
        pot = MorsePotential(depth=2.0, width=1.6, r0=1.5)
        s = MolecularSystem([6, 6], [[0, 0, 0], [1.62, 0.3, -0.2]])
        plain = md.run_md(s, pot, steps=1000, dt=0.5, initial_temperature=120.0, seed=9)
        spun = md.run_md(s, pot, steps=1000, dt=0.5, initial_temperature=120.0, seed=9,
                         offset_rotations=True)
        worst = max(
            np.abs(a.positions - b.positions).max()
            for a, b in zip(plain.frames, spun.frames)
        )
        assert worst <= 1e-10

    def test_blow_up_aborts_with_last_stable_index(self):
        class LauncherProvider:
            def forces(self, positions):
                return np.tile([1e4, 0, 0], (len(positions), 1)) * np.sign(
                    positions[:, :1] - positions.mean(0)[0]
                )

            def potential_energy(self, positions):
                return None

        s = MolecularSystem([1, 1], [[0, 0, 0], [1.0, 0, 0]])
        with pytest.raises(md.MdAbortError) as err:
            md.run_md(s, LauncherProvider(), steps=400, dt=0.5,
                      velocities=np.zeros((2, 3)), blow_up_distance=50.0)
        assert err.value.last_stable_step >= 0
        assert err.value.trajectory is not None

    def test_min_distance_abort(self):
        class CrusherProvider:
            def forces(self, positions):
                center = positions.mean(0)
                return -(positions - center) * 50.0

            def potential_energy(self, positions):
                return None

        s = MolecularSystem([1, 1], [[0, 0, 0], [1.2, 0, 0]])
        with pytest.raises(md.MdAbortError):
            md.run_md(s, CrusherProvider(), steps=2000, dt=0.5,
                      velocities=np.zeros((2, 3)), min_distance=0.5)

    def test_stride_thins_frames_but_not_energy_log(self):
        pot = MorsePotential()
        s = MolecularSystem([6, 6], [[0, 0, 0], [1.45, 0, 0]])
        traj = md.run_md(s, pot, steps=100, dt=0.5, initial_temperature=80.0,
                         seed=3, stride=10)
        assert len(traj.frames) == 11  # initial + every 10th
        assert len(traj.energy_log) == 101

    def test_trajectory_io_round_trip(self, tmp_path):
        from edgeff.data import parse_trajectory_xyz

        pot = MorsePotential()
        s = MolecularSystem([6, 8], [[0, 0, 0], [1.5, 0, 0]])
        traj = md.run_md(s, pot, steps=20, dt=0.5, initial_temperature=80.0, seed=3)
        xyz = tmp_path / "t.xyz"
        csv_path = tmp_path / "e.csv"
        md.write_trajectory_xyz(xyz, traj)
        md.write_energy_csv(csv_path, traj)
        numbers, times, pos, vel, frc = parse_trajectory_xyz(xyz.read_text())
        assert list(numbers) == [6, 8]
        assert len(times) == 21
        assert np.abs(pos[-1] - traj.frames[-1].positions).max() <= 1e-10
        assert np.abs(vel[-1] - traj.frames[-1].velocities).max() <= 1e-10
        header = csv_path.read_text().splitlines()[0]
        assert header.split(",") == [
            "time_fs", "e_kin_ev", "e_pot_ev", "e_total_ev", "temperature_k",
            "conserved_ev",
        ]


class TestUnitsAndInit:
    def test_kinetic_energy_conversion_constant(self):
        # 1 amu at 1 Å/fs carries ~103.64 eV of kinetic energy (times 1/2)
        assert md.EV_PER_AMU_A2_FS2 == pytest.approx(103.6427, rel=1e-4)

    def test_maxwell_boltzmann_temperature_and_com(self):
        rng = np.random.default_rng(11)
        masses = np.array([12.011] * 64)
        v = md.maxwell_boltzmann_velocities(masses, 500.0, rng)
        assert np.abs((masses[:, None] * v).sum(0)).max() <= 1e-12
        ke = md.kinetic_energy(v, masses)
        t = md.kinetic_temperature(ke, 3 * 64 - 3)
        assert abs(t - 500.0) / 500.0 <= 0.25

    def test_remove_rigid_rotation_zeroes_angular_momentum(self):
        rng = np.random.default_rng(12)
        pos = rng.normal(size=(6, 3)) * 2
        masses = rng.uniform(1, 16, 6)
        v = rng.normal(size=(6, 3))
        v2 = md.remove_rigid_rotation(v, pos, masses)
        rel = pos - com(pos, masses)
        ang = (masses[:, None] * np.cross(rel, v2)).sum(0)
        assert np.linalg.norm(ang) <= 1e-10
