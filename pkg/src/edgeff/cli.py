"""Operator entry point: train, simulate, audit, spectrum, and bench subcommands.

Every run writes ``manifest.json`` into the output directory with the fully
resolved settings, enough to repeat the run exactly. Exit codes: 0 success,
1 usage/config error, 2 numerical abort (blow-up, divergence, non-finite).

Heavy imports happen after the thread budget is applied, because BLAS thread
pools are sized when numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2

_VERSION = "0.1.0"

TOY_TRAIN = dict(total_steps=5000, warmup_steps=500, batch_size=16)
TOY_MODEL = dict(embed_dim=32, n_layers=3, n_heads=4)
TOY_DATA = dict(n_structures=120, conformers=10, spread=0.12)
BENCH_MODEL = dict(embed_dim=8, n_layers=2, n_heads=2, n_rbf=4, n_fourier=4)


def _apply_thread_budget(threads: int | None) -> None:
    if threads is None:
        return
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(threads)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", type=int, choices=(32, 64), default=64)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", type=Path, default=Path("run_out"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="edgeff", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a force field on a synthetic corpus")
    _add_common(t)
    t.add_argument("--preset", choices=("toy", "paper"), default="toy")
    t.add_argument("--dataset", type=Path, help="extended-XYZ corpus with force labels")

    s = sub.add_parser("simulate", help="run molecular dynamics")
    _add_common(s)
    s.add_argument("--system", type=Path, required=True, help="extended-XYZ input (first block)")
    s.add_argument("--provider", default="morse",
                   choices=("morse", "lennard_jones", "harmonic_network", "checkpoint"))
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--model-config", type=Path)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--dt", type=float, default=0.5, help="fs")
    s.add_argument("--thermostat", choices=("none", "nose_hoover", "svr"), default="none")
    s.add_argument("--temperature", type=float, default=300.0)
    s.add_argument("--tau", type=float, default=100.0)
    s.add_argument("--initial-temperature", type=float, default=300.0)
    s.add_argument("--stride", type=int, default=10)
    s.add_argument("--projection", action="store_true")
    s.add_argument("--offset-rotations", action="store_true")

    a = sub.add_parser("audit", help="equivariance / conservativeness audits")
    _add_common(a)
    a.add_argument("--systems", type=Path, required=True, help="extended-XYZ system list")
    a.add_argument("--provider", default="morse",
                   choices=("morse", "lennard_jones", "harmonic_network", "checkpoint"))
    a.add_argument("--checkpoint", type=Path)
    a.add_argument("--model-config", type=Path)
    a.add_argument("--inner-rotations", type=int, default=64)
    a.add_argument("--rotation-grid", type=int, choices=(60, 360), default=60)
    a.add_argument("--atom-index", type=int, default=0)
    a.add_argument("--jacobian-mode", choices=("finite_difference", "autodiff", "none"),
                   default="finite_difference")
    a.add_argument("--fd-step", type=float, default=1e-4)
    a.add_argument("--lambda-calibration", type=int, default=0,
                   help="also report lambda over this many iid N(0,1) 60x60 draws")

    v = sub.add_parser("spectrum", help="velocity-autocorrelation power spectrum")
    _add_common(v)
    v.add_argument("--trajectory", type=Path, required=True)
    v.add_argument("--max-lag", type=int, default=None)
    v.add_argument("--window", choices=("hann", "none"), default="hann")

    b = sub.add_parser("bench", help="forward-pass timing/memory scaling")
    _add_common(b)
    b.add_argument("--sizes", default="8,16,32,64")
    b.add_argument("--batch-sizes", default="1,8,64")
    b.add_argument("--repeats", type=int, default=9)
    return ap


def _load_config(args) -> dict:
    from .config import read_kv_file

    return read_kv_file(args.config) if args.config else {}


def _write_manifest(out: Path, payload: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _reject_unknown(kv: dict, where: str) -> None:
    if kv:
        raise SystemExitUsage(f"unknown {where} config keys: {sorted(kv)}")


class SystemExitUsage(Exception):
    pass


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train(args) -> int:
    import numpy as np

    from . import autodiff as ad
    from .config import split_prefixed, write_kv_file
    from .data import Dataset, generate_synthetic, read_extended_xyz, split_dataset
    from .model import PAPER_PRESET, ModelConfig
    from .params import save_checkpoint
    from .potentials import MorsePotential, POTENTIALS
    from .training import PAPER_TRAIN_PRESET, TrainConfig, train, write_metrics_csv

    kv = _load_config(args)
    model_kv, kv = split_prefixed(kv, "model")
    train_kv, kv = split_prefixed(kv, "train")
    data_kv, kv = split_prefixed(kv, "data")
    pot_kv, kv = split_prefixed(kv, "potential")
    _reject_unknown(kv, "train-command")

    model_base = dict(PAPER_PRESET) if args.preset == "paper" else dict(TOY_MODEL)
    model_base.update(model_kv)
    model_cfg = ModelConfig.from_dict(model_base)

    train_base = dict(PAPER_TRAIN_PRESET) if args.preset == "paper" else dict(TOY_TRAIN)
    train_base.update(train_kv)
    train_base.setdefault("seed", args.seed)
    train_cfg = TrainConfig.from_dict({k: str(v) for k, v in train_base.items()})

    data_base = dict(TOY_DATA)
    unknown_data = set(data_kv) - set(data_base)
    if unknown_data:
        raise SystemExitUsage(f"unknown data config keys: {sorted(unknown_data)}")
    data_base.update(data_kv)

    pot_kind = pot_kv.pop("kind", "morse")
    if pot_kind not in POTENTIALS or pot_kind == "harmonic_network":
        raise SystemExitUsage(f"unsupported training potential {pot_kind!r}")
    pot_args = {k: float(v) for k, v in pot_kv.items()}
    potential = POTENTIALS[pot_kind](**pot_args)

    ad.set_default_precision(args.precision)
    if args.dataset:
        systems = read_extended_xyz(args.dataset)
        dataset = Dataset(systems)
    else:
        dataset = generate_synthetic(
            potential,
            n_structures=int(data_base["n_structures"]),
            conformers_per_structure=int(data_base["conformers"]),
            spread=float(data_base["spread"]),
            rng=np.random.default_rng(args.seed),
        )
    train_set, val_set, test_set = split_dataset(dataset, (0.9, 0.05, 0.05), seed=args.seed)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(
        out,
        dict(
            subcommand="train",
            version=_VERSION,
            seed=args.seed,
            precision=args.precision,
            threads=args.threads,
            preset=args.preset,
            model={k: getattr(model_cfg, k) for k in model_cfg.__dataclass_fields__},
            training={k: getattr(train_cfg, k) for k in train_cfg.__dataclass_fields__},
            dataset=dict(
                source=str(args.dataset) if args.dataset else "synthetic",
                potential=pot_kind,
                sizes=[len(train_set), len(val_set), len(test_set)],
                **({} if args.dataset else data_base),
            ),
        ),
    )
    result = train(train_set, val_set, model_cfg, train_cfg)
    save_checkpoint(out / "checkpoint.bin", result.params)
    write_kv_file(
        out / "model_config.txt",
        {k: getattr(model_cfg, k) for k in model_cfg.__dataclass_fields__},
    )
    write_metrics_csv(out / "metrics.csv", result.metrics)
    print(f"final val force MAE: {result.final_val_mae}")
    return EXIT_OK


def _read_first_system(path):
    from .data import read_extended_xyz

    systems = read_extended_xyz(path)
    if not systems:
        raise SystemExitUsage(f"no systems in {path}")
    return systems


def _build_provider(args, system):
    from . import autodiff as ad
    from .config import read_kv_file
    from .model import ModelConfig, ModelForceProvider
    from .params import load_checkpoint
    from .potentials import HarmonicNetwork, LennardJonesPotential, MorsePotential

    if args.provider == "morse":
        return MorsePotential()
    if args.provider == "lennard_jones":
        return LennardJonesPotential()
    if args.provider == "harmonic_network":
        return HarmonicNetwork.from_geometry(system.positions)
    if args.checkpoint is None:
        raise SystemExitUsage("provider 'checkpoint' needs --checkpoint")
    cfg_path = args.model_config or args.checkpoint.parent / "model_config.txt"
    cfg = ModelConfig.from_dict(read_kv_file(cfg_path))
    params = load_checkpoint(args.checkpoint, dtype=ad.default_dtype())
    return ModelForceProvider(params, cfg, system)


def _cmd_simulate(args) -> int:
    from . import autodiff as ad
    from .md import MdAbortError, ThermostatConfig, run_md, write_energy_csv, write_trajectory_xyz

    kv = _load_config(args)
    _reject_unknown(kv, "simulate-command")
    ad.set_default_precision(args.precision)
    system = _read_first_system(args.system)[0]
    provider = _build_provider(args, system)
    thermostat = ThermostatConfig(args.thermostat, args.temperature, args.tau)

    out = args.out
    _write_manifest(
        out,
        dict(
            subcommand="simulate",
            version=_VERSION,
            seed=args.seed,
            precision=args.precision,
            threads=args.threads,
            system=str(args.system),
            provider=args.provider,
            checkpoint=str(args.checkpoint) if args.checkpoint else None,
            steps=args.steps,
            dt_fs=args.dt,
            thermostat=dict(kind=thermostat.kind, temperature=thermostat.temperature,
                            tau=thermostat.tau),
            initial_temperature=args.initial_temperature,
            stride=args.stride,
            projection=bool(args.projection),
            offset_rotations=bool(args.offset_rotations),
        ),
    )
    try:
        traj = run_md(
            system,
            provider,
            steps=args.steps,
            dt=args.dt,
            thermostat=thermostat,
            initial_temperature=args.initial_temperature,
            projection=args.projection,
            offset_rotations=args.offset_rotations,
            seed=args.seed,
            stride=args.stride,
        )
    except MdAbortError as exc:
        if exc.trajectory is not None:
            write_trajectory_xyz(out / "trajectory.xyz", exc.trajectory)
            write_energy_csv(out / "energy.csv", exc.trajectory)
        print(f"aborted: {exc} (last stable frame index {exc.last_stable_step})",
              file=sys.stderr)
        return EXIT_NUMERIC
    write_trajectory_xyz(out / "trajectory.xyz", traj)
    write_energy_csv(out / "energy.csv", traj)
    print(f"completed {traj.completed_steps} steps; wrote {out}/trajectory.xyz")
    return EXIT_OK


def _cmd_audit(args) -> int:
    import csv

    import numpy as np

    from . import autodiff as ad
    from .diagnostics import (
        DiagnosticsReport,
        antisymmetric_ratio,
        equivariance_error,
        magnitude_kde,
        position_jacobian,
        rotation_grid_forces,
    )
    from .rotations import sample_rotations_600cell

    kv = _load_config(args)
    _reject_unknown(kv, "audit-command")
    ad.set_default_precision(args.precision)
    systems = _read_first_system(args.systems)
    out = args.out
    _write_manifest(
        out,
        dict(
            subcommand="audit",
            version=_VERSION,
            seed=args.seed,
            precision=args.precision,
            threads=args.threads,
            systems=str(args.systems),
            provider=args.provider,
            checkpoint=str(args.checkpoint) if args.checkpoint else None,
            inner_rotations=args.inner_rotations,
            rotation_grid=args.rotation_grid,
            atom_index=args.atom_index,
            jacobian_mode=args.jacobian_mode,
            fd_step=args.fd_step,
            lambda_calibration=args.lambda_calibration,
        ),
    )
    rng = np.random.default_rng(args.seed)
    grid = sample_rotations_600cell(args.rotation_grid)
    records = []
    with open(out / "report.jsonl", "w") as report_fh:
        for idx, system in enumerate(systems):
            provider = _build_provider(args, system)
            predict = lambda s, p=provider: p.forces(s.positions)
            eq = equivariance_error(predict, [system], n_inner=args.inner_rotations, rng=rng)
            lam_samples = []
            if args.jacobian_mode != "none":
                jac = position_jacobian(provider, system, args.jacobian_mode, args.fd_step)
                lam_samples.append(antisymmetric_ratio(jac))
            rep = DiagnosticsReport(
                equivariance=eq,
                lambda_samples=lam_samples,
                notes=dict(system_index=idx, n_atoms=system.n_atoms),
            )
            rep.validate()
            report_fh.write(json.dumps(rep.to_json_dict(), sort_keys=True) + "\n")
            atom = min(args.atom_index, system.n_atoms - 1)
            for rec in rotation_grid_forces(predict, system, atom, grid):
                records.append((idx, atom, rec))
        if args.lambda_calibration > 0:
            lams = [
                antisymmetric_ratio(rng.normal(size=(60, 60)))
                for _ in range(args.lambda_calibration)
            ]
            report_fh.write(
                json.dumps(
                    dict(
                        lambda_calibration_draws=args.lambda_calibration,
                        lambda_calibration_mean=float(np.mean(lams)),
                    ),
                    sort_keys=True,
                )
                + "\n"
            )

    with open(out / "rotation_grid.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["system", "atom", "qw", "qx", "qy", "qz",
                    "fx", "fy", "fz", "magnitude", "magnitude_over_median"])
        for idx, atom, rec in records:
            w.writerow([idx, atom, *[f"{v:.12g}" for v in rec.quaternion],
                        *[f"{v:.12g}" for v in rec.force],
                        f"{rec.magnitude:.12g}", f"{rec.magnitude_over_median:.12g}"])

    mags = np.array([rec.magnitude for _, _, rec in records])
    kde = magnitude_kde(mags)
    with open(out / "magnitude_kde.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["magnitude", "density", "point_mass"])
        for g, dens in zip(kde.grid, kde.density):
            w.writerow([f"{g:.12g}", f"{dens:.12g}", int(kde.point_mass)])
    print(f"audited {len(systems)} systems; wrote {out}/report.jsonl")
    return EXIT_OK


def _cmd_spectrum(args) -> int:
    import csv

    from . import autodiff as ad
    from .data import atomic_mass, parse_trajectory_xyz
    from .diagnostics import vacf_spectrum

    kv = _load_config(args)
    _reject_unknown(kv, "spectrum-command")
    ad.set_default_precision(args.precision)
    with open(args.trajectory) as fh:
        numbers, times, _, velocities, _ = parse_trajectory_xyz(fh.read())
    import numpy as np

    masses = np.array([atomic_mass(z) for z in numbers])
    wavenumbers, power = vacf_spectrum(
        times, velocities, masses, max_lag=args.max_lag, window=args.window
    )
    out = args.out
    _write_manifest(
        out,
        dict(
            subcommand="spectrum",
            version=_VERSION,
            seed=args.seed,
            precision=args.precision,
            threads=args.threads,
            trajectory=str(args.trajectory),
            max_lag=args.max_lag,
            window=args.window,
        ),
    )
    with open(out / "spectrum.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wavenumber_cm1", "power"])
        for x, y in zip(wavenumbers, power):
            w.writerow([f"{x:.8g}", f"{y:.10g}"])
    peak = wavenumbers[int(power[1:].argmax()) + 1] if len(power) > 1 else 0.0
    print(f"spectrum peak at {peak:.1f} cm^-1; wrote {out}/spectrum.csv")
    return EXIT_OK


def _cmd_bench(args) -> int:
    import csv
    import time
    import tracemalloc

    import numpy as np

    from . import autodiff as ad
    from .config import split_prefixed
    from .data import MolecularSystem
    from .model import EncodedBatch, ModelConfig, forward_forces, init_params

    kv = _load_config(args)
    model_kv, kv = split_prefixed(kv, "model")
    _reject_unknown(kv, "bench-command")
    ad.set_default_precision(args.precision)
    model_base = dict(BENCH_MODEL)
    model_base.update(model_kv)
    cfg = ModelConfig.from_dict(model_base)
    params = init_params(cfg, seed=args.seed)
    sizes = [int(x) for x in str(args.sizes).split(",") if x]
    batches = [int(x) for x in str(args.batch_sizes).split(",") if x]
    rng = np.random.default_rng(args.seed)

    out = args.out
    _write_manifest(
        out,
        dict(
            subcommand="bench",
            version=_VERSION,
            seed=args.seed,
            precision=args.precision,
            threads=args.threads,
            sizes=sizes,
            batch_sizes=batches,
            repeats=args.repeats,
            model={k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        ),
    )
    rows = []
    for n in sizes:
        system = MolecularSystem(
            np.full(n, 6), rng.normal(size=(n, 3)) * max(2.0, n ** (1 / 3))
        )
        for bs in batches:
            enc = EncodedBatch([system] * bs, cfg, ad.default_dtype())
            pos = ad.tensor(enc.positions)
            forward_forces(enc, params, pos)  # warm-up
            times = []
            for _ in range(args.repeats):
                t0 = time.perf_counter()
                forward_forces(enc, params, pos)
                times.append(time.perf_counter() - t0)
            tracemalloc.start()
            forward_forces(enc, params, pos)
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            rows.append(
                dict(
                    n_atoms=n,
                    batch_size=bs,
                    median_seconds=float(np.median(times)),
                    mean_seconds=float(np.mean(times)),
                    peak_memory_bytes=int(peak),
                )
            )
            print(
                f"N={n:4d} batch={bs:3d} median {rows[-1]['median_seconds']*1e3:9.2f} ms "
                f"peak {peak/1e6:8.1f} MB"
            )
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.DictWriter(
            fh, ["n_atoms", "batch_size", "median_seconds", "mean_seconds", "peak_memory_bytes"]
        )
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    _apply_thread_budget(args.threads)

    handlers = {
        "train": _cmd_train,
        "simulate": _cmd_simulate,
        "audit": _cmd_audit,
        "spectrum": _cmd_spectrum,
        "bench": _cmd_bench,
    }
    try:
        return handlers[args.command](args)
    except SystemExitUsage as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuntimeError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
