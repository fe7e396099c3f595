"""Molecular systems, extended-XYZ IO, synthetic datasets, and grouped splits."""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

SYMBOLS = [
    "X", "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr",
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn",
]
SYMBOL_TO_Z = {s: z for z, s in enumerate(SYMBOLS) if z > 0}

# standard atomic weights (amu); curated, not exhaustive
ATOMIC_MASSES = {
    1: 1.008, 2: 4.0026, 3: 6.94, 4: 9.0122, 5: 10.81, 6: 12.011,
    7: 14.007, 8: 15.999, 9: 18.998, 10: 20.180, 11: 22.990, 12: 24.305,
    13: 26.982, 14: 28.085, 15: 30.974, 16: 32.06, 17: 35.45, 18: 39.948,
    19: 39.098, 20: 40.078, 21: 44.956, 22: 47.867, 23: 50.942, 24: 51.996,
    25: 54.938, 26: 55.845, 27: 58.933, 28: 58.693, 29: 63.546, 30: 65.38,
    31: 69.723, 32: 72.630, 33: 74.922, 34: 78.971, 35: 79.904, 36: 83.798,
    47: 107.8682, 50: 118.710, 53: 126.904, 55: 132.905, 56: 137.327,
    74: 183.84, 78: 195.084, 79: 196.967, 80: 200.592, 82: 207.2,
}


class XyzFormatError(ValueError):
    """Malformed extended-XYZ input; message carries the 1-based line number."""


class SplitError(ValueError):
    """Dataset cannot be split as requested."""


def atomic_mass(z: int) -> float:
    try:
        return ATOMIC_MASSES[int(z)]
    except KeyError:
        raise KeyError(f"no atomic mass tabulated for Z={z}") from None


@dataclass
class MolecularSystem:
    """Atomic numbers, positions in Å, total spin and net charge, optional labels."""

    atomic_numbers: np.ndarray
    positions: np.ndarray
    spin: int = 0
    charge: int = 0
    forces: Optional[np.ndarray] = None  # eV/Å
    energy: Optional[float] = None  # eV
    structure_id: Optional[str] = None

    def __post_init__(self):
        self.atomic_numbers = np.asarray(self.atomic_numbers, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        n = self.atomic_numbers.shape[0]
        if n < 1:
            raise ValueError("a system needs at least one atom")
        if self.positions.shape != (n, 3):
            raise ValueError(
                f"positions shape {self.positions.shape} does not match {n} atoms"
            )
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite positions")
        if np.any(self.atomic_numbers < 1):
            raise ValueError("atomic numbers must be positive")
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64)
            if self.forces.shape != (n, 3):
                raise ValueError(f"forces shape {self.forces.shape} != ({n}, 3)")
        if self.spin < 0:
            raise ValueError("spin (number of unpaired electrons) must be >= 0")

    @property
    def n_atoms(self) -> int:
        return len(self.atomic_numbers)

    def masses(self) -> np.ndarray:
        return np.array([atomic_mass(z) for z in self.atomic_numbers])

    def with_positions(self, positions: np.ndarray) -> "MolecularSystem":
        """Same species/spin/charge at new positions; labels are dropped."""
        return replace(
            self,
            positions=np.asarray(positions, dtype=np.float64),
            forces=None,
            energy=None,
        )

    def transformed(self, op: np.ndarray) -> "MolecularSystem":
        """Apply a 3x3 orthogonal operator to positions and any force labels."""
        out = replace(self, positions=self.positions @ op.T)
        if self.forces is not None:
            out.forces = self.forces @ op.T
        return out


@dataclass
class Dataset:
    systems: list[MolecularSystem] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.systems)

    def __iter__(self):
        return iter(self.systems)

    def group_keys(self) -> list[str]:
        keys = []
        for i, s in enumerate(self.systems):
            keys.append(s.structure_id if s.structure_id is not None else f"#{i}")
        return keys


# ---------------------------------------------------------------------------
# extended XYZ


def _parse_properties(spec: str, lineno: int):
    parts = spec.split(":")
    if len(parts) % 3 != 0:
        raise XyzFormatError(f"line {lineno}: malformed Properties spec {spec!r}")
    columns = []
    for i in range(0, len(parts), 3):
        name, kind, width = parts[i], parts[i + 1], parts[i + 2]
        try:
            width = int(width)
        except ValueError:
            raise XyzFormatError(
                f"line {lineno}: bad column width in Properties {spec!r}"
            ) from None
        columns.append((name, kind, width))
    return columns


def _split_comment_keys(line: str) -> dict[str, str]:
    out = {}
    for token in line.split():
        if "=" in token:
            key, value = token.split("=", 1)
            out[key] = value.strip('"')
    return out


def parse_extended_xyz(text: str) -> list[MolecularSystem]:
    """Parse one or more extended-XYZ blocks.

    The comment line may carry charge=, spin=, energy=, structure= keys and a
    Properties= column spec; per-atom force columns are named "forces".
    Errors report 1-based line numbers.
    """
    lines = text.splitlines()
    systems = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        lineno = i + 1
        try:
            natoms = int(lines[i].strip())
        except ValueError:
            raise XyzFormatError(
                f"line {lineno}: expected an atom count, got {lines[i].strip()!r}"
            ) from None
        if natoms < 1:
            raise XyzFormatError(f"line {lineno}: atom count must be positive")
        if i + 1 >= len(lines):
            raise XyzFormatError(f"line {lineno + 1}: missing comment line")
        keys = _split_comment_keys(lines[i + 1])
        columns = [("species", "S", 1), ("pos", "R", 3)]
        if "Properties" in keys:
            columns = _parse_properties(keys["Properties"], i + 2)
        ncols = sum(w for _, _, w in columns)

        numbers = np.zeros(natoms, dtype=np.int64)
        fields_arr = {
            name: np.zeros((natoms, width))
            for name, kind, width in columns
            if kind == "R"
        }
        for a in range(natoms):
            j = i + 2 + a
            if j >= len(lines) or not lines[j].strip() or _looks_like_count(lines[j]):
                raise XyzFormatError(
                    f"line {j + 1}: expected {natoms} atom lines, found {a}"
                )
            tokens = lines[j].split()
            if len(tokens) != ncols:
                raise XyzFormatError(
                    f"line {j + 1}: expected {ncols} columns, got {len(tokens)}"
                )
            c = 0
            for name, kind, width in columns:
                vals = tokens[c : c + width]
                c += width
                if kind == "S":
                    sym = vals[0]
                    if sym not in SYMBOL_TO_Z:
                        raise XyzFormatError(
                            f"line {j + 1}: unknown element symbol {sym!r}"
                        )
                    numbers[a] = SYMBOL_TO_Z[sym]
                else:
                    try:
                        fields_arr[name][a] = [float(v) for v in vals]
                    except ValueError:
                        raise XyzFormatError(
                            f"line {j + 1}: malformed float in column {name!r}"
                        ) from None
        if "pos" not in fields_arr:
            raise XyzFormatError(f"line {i + 2}: Properties spec lacks pos columns")

        def _intkey(name, default=0):
            if name not in keys:
                return default
            try:
                return int(keys[name])
            except ValueError:
                raise XyzFormatError(
                    f"line {i + 2}: key {name}= needs an integer, got {keys[name]!r}"
                ) from None

        energy = None
        if "energy" in keys:
            try:
                energy = float(keys["energy"])
            except ValueError:
                raise XyzFormatError(
                    f"line {i + 2}: key energy= needs a float, got {keys['energy']!r}"
                ) from None
        systems.append(
            MolecularSystem(
                atomic_numbers=numbers,
                positions=fields_arr["pos"],
                spin=_intkey("spin"),
                charge=_intkey("charge"),
                forces=fields_arr.get("forces"),
                energy=energy,
                structure_id=keys.get("structure"),
            )
        )
        i += 2 + natoms
    return systems


def _looks_like_count(line: str) -> bool:
    tokens = line.split()
    if len(tokens) != 1:
        return False
    try:
        int(tokens[0])
        return True
    except ValueError:
        return False


def format_extended_xyz(
    systems: Iterable[MolecularSystem],
    write_forces: bool = True,
) -> str:
    out = io.StringIO()
    for s in systems:
        props = "species:S:1:pos:R:3"
        with_forces = write_forces and s.forces is not None
        if with_forces:
            props += ":forces:R:3"
        keys = [f"Properties={props}", f"charge={s.charge}", f"spin={s.spin}"]
        if s.energy is not None:
            keys.append(f"energy={s.energy:.12f}")
        if s.structure_id is not None:
            keys.append(f"structure={s.structure_id}")
        out.write(f"{s.n_atoms}\n{' '.join(keys)}\n")
        for a in range(s.n_atoms):
            cols = [SYMBOLS[s.atomic_numbers[a]]]
            cols += [f"{v:.12f}" for v in s.positions[a]]
            if with_forces:
                cols += [f"{v:.12f}" for v in s.forces[a]]
            out.write(" ".join(cols) + "\n")
    return out.getvalue()


def write_extended_xyz(path, systems: Iterable[MolecularSystem], **kw) -> None:
    with open(path, "w") as fh:
        fh.write(format_extended_xyz(systems, **kw))


def read_extended_xyz(path) -> list[MolecularSystem]:
    with open(path) as fh:
        return parse_extended_xyz(fh.read())


def format_trajectory_frame(numbers, frame) -> str:
    """One extended-XYZ block for a trajectory frame (positions, velocities, forces)."""
    n = len(numbers)
    keys = [
        "Properties=species:S:1:pos:R:3:vel:R:3:forces:R:3",
        f"time={frame.time:.6f}",
    ]
    if frame.potential_energy is not None:
        keys.append(f"energy={frame.potential_energy:.12f}")
    rows = [f"{n}", " ".join(keys)]
    for a in range(n):
        cols = [SYMBOLS[int(numbers[a])]]
        for arr in (frame.positions, frame.velocities, frame.forces):
            cols += [f"{v:.12f}" for v in arr[a]]
        rows.append(" ".join(cols))
    return "\n".join(rows) + "\n"


def parse_trajectory_xyz(text: str):
    """Read a trajectory written by format_trajectory_frame.

    Returns (numbers, times, positions, velocities, forces) arrays.
    """
    lines = text.splitlines()
    numbers = None
    times, pos, vel, frc = [], [], [], []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        n = int(lines[i].strip())
        keys = _split_comment_keys(lines[i + 1])
        times.append(float(keys.get("time", len(times))))
        block = [lines[i + 2 + a].split() for a in range(n)]
        if numbers is None:
            numbers = np.array([SYMBOL_TO_Z[row[0]] for row in block])
        vals = np.array([[float(v) for v in row[1:]] for row in block])
        pos.append(vals[:, 0:3])
        vel.append(vals[:, 3:6])
        frc.append(vals[:, 6:9])
        i += 2 + n
    return numbers, np.array(times), np.array(pos), np.array(vel), np.array(frc)


# ---------------------------------------------------------------------------
# synthetic corpora


def generate_synthetic(
    potential,
    n_structures: int,
    conformers_per_structure: int,
    spread: float,
    rng: np.random.Generator,
    elements: Sequence[int] = (1, 6, 8),
    min_atoms: int = 2,
    max_atoms: int = 3,
) -> Dataset:
    """Random small structures with Gaussian-displaced conformers.

    Labels are the analytic forces (and energy) of ``potential``, so they are
    exactly conservative and rotationally equivariant.
    """
    if n_structures < 1 or conformers_per_structure < 1:
        raise ValueError("counts must be positive")
    systems = []
    for sidx in range(n_structures):
        n = int(rng.integers(min_atoms, max_atoms + 1))
        numbers = rng.choice(np.asarray(elements), size=n)
        base = _chain_geometry(n, potential.rest_length(), rng)
        for _ in range(conformers_per_structure):
            pos = base + rng.normal(0.0, spread, size=(n, 3))
            systems.append(
                MolecularSystem(
                    atomic_numbers=numbers,
                    positions=pos,
                    forces=potential.forces(pos),
                    energy=potential.potential_energy(pos),
                    structure_id=f"s{sidx:05d}",
                )
            )
    return Dataset(systems)


def _chain_geometry(n: int, bond: float, rng: np.random.Generator) -> np.ndarray:
    """Sequentially grown chain with bond-length steps and no close contacts."""
    pos = np.zeros((n, 3))
    for k in range(1, n):
        for _ in range(200):
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            cand = pos[k - 1] + bond * u
            if k < 2 or np.linalg.norm(cand - pos[: k - 1], axis=1).min() > 0.8 * bond:
                pos[k] = cand
                break
        else:
            raise RuntimeError("failed to grow a clash-free chain geometry")
    return pos


def split_dataset(dataset: Dataset, fractions=(0.9, 0.05, 0.05), seed: int = 0):
    """Grouped split: all conformers of a structure land in the same part."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must sum to 1, got {fractions}")
    keys = dataset.group_keys()
    order = {}
    for idx, key in enumerate(keys):
        order.setdefault(key, []).append(idx)
    group_names = sorted(order)
    needed = sum(1 for f in fractions if f > 0)
    if len(group_names) < needed:
        raise SplitError(
            f"{len(group_names)} structure groups cannot fill {needed} splits"
        )
    rng = np.random.default_rng(seed)
    shuffled = [group_names[i] for i in rng.permutation(len(group_names))]
    n = len(shuffled)
    cuts = [int(round(n * sum(fractions[: i + 1]))) for i in range(len(fractions))]
    cuts[-1] = n
    parts = []
    start = 0
    for cut in cuts:
        chosen = shuffled[start:cut]
        idxs = sorted(i for g in chosen for i in order[g])
        parts.append(Dataset([dataset.systems[i] for i in idxs]))
        start = cut
    return tuple(parts)
