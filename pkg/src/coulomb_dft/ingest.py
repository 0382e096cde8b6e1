"""Reading molecular geometries and target properties.

Two text formats are supported:

* concatenated XYZ frames whose comment line carries ``energy=<value>`` and
  optionally ``label=<text>``;
* the canonical packed CSV, one molecule per line::

      label,energy_kcalmol,N,Z1,x1,y1,z1,...,ZN,xN,yN,zN

  with coordinates in Bohr. Lines starting with ``#`` are comments.

Lengths are stored in Bohr and energies in kcal/mol throughout the package.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

ANGSTROM_TO_BOHR = 1.8897259886
KCAL_PER_MOL_PER_EV = 23.0605

ENERGY_UNITS = ("kcal_per_mol", "eV")
LENGTH_UNITS = ("angstrom", "bohr")

# fmt: off
ELEMENT_SYMBOLS = (
    "H", "He",
    "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar",
    "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr",
    "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd",
    "In", "Sn", "Sb", "Te", "I", "Xe",
    "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy",
    "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt",
    "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn",
    "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf",
    "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds",
    "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
)
# fmt: on
ATOMIC_NUMBERS = {sym.lower(): z for z, sym in enumerate(ELEMENT_SYMBOLS, start=1)}

_UNIT_SUFFIXES = {"_kcalmol": "kcal_per_mol", "_ev": "eV"}


class ParseError(ValueError):
    """Malformed molecular input; the message names the offending location."""


def atomic_number(symbol: str) -> int:
    """Map an element symbol (case-insensitive) or a bare integer to Z."""
    token = symbol.strip()
    if token.isdigit():
        z = int(token)
        if 1 <= z <= len(ELEMENT_SYMBOLS):
            return z
        raise KeyError(symbol)
    return ATOMIC_NUMBERS[token.lower()]


@dataclass(frozen=True, eq=False)
class Molecule:
    """Atomic numbers and Cartesian positions in Bohr."""

    atomic_numbers: np.ndarray
    positions: np.ndarray
    label: str | None = None

    def __post_init__(self):
        z = np.asarray(self.atomic_numbers, dtype=np.int64).reshape(-1)
        r = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(z) == 0:
            raise ValueError("a molecule needs at least one atom")
        if len(z) != len(r):
            raise ValueError(
                f"{len(z)} atomic numbers but {len(r)} positions")
        if z.min() < 1 or z.max() > len(ELEMENT_SYMBOLS):
            raise ValueError("atomic numbers must lie in [1, 118]")
        if not np.all(np.isfinite(r)):
            raise ValueError("non-finite coordinate")
        z.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "atomic_numbers", z)
        object.__setattr__(self, "positions", r)

    def __eq__(self, other):
        if not isinstance(other, Molecule):
            return NotImplemented
        return (self.label == other.label
                and np.array_equal(self.atomic_numbers, other.atomic_numbers)
                and np.array_equal(self.positions, other.positions))

    __hash__ = None

    @property
    def n_atoms(self) -> int:
        return len(self.atomic_numbers)

    @property
    def symbols(self) -> list[str]:
        return [ELEMENT_SYMBOLS[z - 1] for z in self.atomic_numbers]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Molecules with an M x |P| property matrix.

    ``property_units`` records the energy unit of each column; values are
    held as given (kcal/mol unless a column says otherwise).
    """

    molecules: tuple[Molecule, ...]
    properties: np.ndarray
    property_names: tuple[str, ...] = ("energy",)
    property_units: tuple[str, ...] = field(default=None)

    def __post_init__(self):
        mols = tuple(self.molecules)
        names = tuple(self.property_names)
        props = np.asarray(self.properties, dtype=np.float64)
        if props.ndim == 1:
            props = props.reshape(-1, 1)
        if props.size == 0:
            props = props.reshape(len(mols), len(names))
        if props.shape != (len(mols), len(names)):
            raise ValueError(
                f"property matrix has shape {props.shape}, expected "
                f"({len(mols)}, {len(names)})")
        if not np.all(np.isfinite(props)):
            raise ValueError("non-finite property value")
        units = self.property_units
        units = ("kcal_per_mol",) * len(names) if units is None else tuple(units)
        if len(units) != len(names):
            raise ValueError("one unit per property column is required")
        for u in units:
            _check_unit(u)
        props.setflags(write=False)
        object.__setattr__(self, "molecules", mols)
        object.__setattr__(self, "properties", props)
        object.__setattr__(self, "property_names", names)
        object.__setattr__(self, "property_units", units)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.molecules == other.molecules
                and self.property_names == other.property_names
                and self.property_units == other.property_units
                and np.array_equal(self.properties, other.properties))

    __hash__ = None

    def __len__(self) -> int:
        return len(self.molecules)

    @property
    def max_atoms(self) -> int:
        return max((m.n_atoms for m in self.molecules), default=0)

    def column_index(self, target: str | int | None = None) -> int:
        if target is None:
            return 0
        if isinstance(target, int) or (isinstance(target, str) and target.isdigit()):
            idx = int(target)
            if not 0 <= idx < len(self.property_names):
                raise KeyError(f"no property column {idx}")
            return idx
        try:
            return self.property_names.index(target)
        except ValueError:
            raise KeyError(
                f"no property column named {target!r} "
                f"(available: {', '.join(self.property_names)})") from None

    def target(self, target: str | int | None = None,
               unit: str = "kcal_per_mol") -> np.ndarray:
        """One property column, converted to ``unit``."""
        idx = self.column_index(target)
        return convert_energy(self.properties[:, idx], self.property_units[idx], unit)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(tuple(self.molecules[i] for i in idx),
                       self.properties[idx], self.property_names,
                       self.property_units)


def _check_unit(unit: str) -> None:
    if unit not in ENERGY_UNITS:
        raise ValueError(f"unknown energy unit {unit!r}; expected one of {ENERGY_UNITS}")


def convert_energy(values, from_unit: str, to_unit: str) -> np.ndarray:
    """Convert energies between kcal/mol and eV (1 eV = 23.0605 kcal/mol)."""
    _check_unit(from_unit)
    _check_unit(to_unit)
    v = np.asarray(values, dtype=np.float64)
    if from_unit == to_unit:
        return v.copy()
    if from_unit == "kcal_per_mol":
        return v / KCAL_PER_MOL_PER_EV
    return v * KCAL_PER_MOL_PER_EV


def _finite(token: str, what: str, where: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"{where}: non-numeric {what} {token!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"{where}: non-finite {what} {token!r}")
    return value


_KEYVAL = re.compile(r"(\w+)\s*=\s*(\"[^\"]*\"|\S+)")


def parse_xyz(source: TextIO | str, length_unit: str = "angstrom",
              energy_unit: str = "kcal_per_mol") -> Dataset:
    """Parse concatenated XYZ frames.

    Parameters
    ----------
    source : text stream or str
        Frames of ``N`` / comment / ``N`` atom lines. The comment must hold
        ``energy=<value>``; ``label=<text>`` is optional.
    length_unit : {'angstrom', 'bohr'}
        Unit of the coordinates in the file. Output is always Bohr.
    energy_unit : {'kcal_per_mol', 'eV'}
        Unit of the ``energy=`` values. Output is always kcal/mol.
    """
    if length_unit not in LENGTH_UNITS:
        raise ValueError(f"unknown length unit {length_unit!r}")
    _check_unit(energy_unit)
    scale = ANGSTROM_TO_BOHR if length_unit == "angstrom" else 1.0
    text = source if isinstance(source, str) else source.read()
    lines = text.splitlines()

    molecules, energies = [], []
    pos = 0
    frame = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        where = f"frame {frame}, line {pos + 1}"
        try:
            n = int(lines[pos].strip())
        except ValueError:
            raise ParseError(f"{where}: malformed atom count {lines[pos].strip()!r}") from None
        if n < 1:
            raise ParseError(f"{where}: atom count must be positive, got {n}")
        if pos + 1 >= len(lines):
            raise ParseError(f"{where}: missing comment line")
        comment = dict((k.lower(), v.strip('"'))
                       for k, v in _KEYVAL.findall(lines[pos + 1]))
        if "energy" not in comment:
            raise ParseError(f"frame {frame}, line {pos + 2}: missing energy= key in comment line")
        energy = _finite(comment["energy"], "energy", f"frame {frame}, line {pos + 2}")
        if pos + 2 + n > len(lines):
            raise ParseError(
                f"{where}: declared {n} atoms but only {len(lines) - pos - 2} lines follow")
        z = np.empty(n, dtype=np.int64)
        r = np.empty((n, 3))
        for i in range(n):
            lineno = pos + 3 + i
            words = lines[lineno - 1].split()
            where_atom = f"frame {frame}, line {lineno}"
            if len(words) < 4:
                raise ParseError(f"{where_atom}: expected '<symbol> <x> <y> <z>'")
            try:
                z[i] = atomic_number(words[0])
            except KeyError:
                raise ParseError(f"{where_atom}: unknown element symbol {words[0]!r}") from None
            r[i] = [_finite(w, "coordinate", where_atom) for w in words[1:4]]
        molecules.append(Molecule(z, r * scale, comment.get("label")))
        energies.append(energy)
        pos += 2 + n
        frame += 1

    props = convert_energy(np.array(energies), energy_unit, "kcal_per_mol")
    return Dataset(tuple(molecules), props.reshape(-1, 1), ("energy",))


def _column_name(header: str) -> tuple[str, str]:
    for suffix, unit in _UNIT_SUFFIXES.items():
        if header.lower().endswith(suffix):
            return header[: -len(suffix)], unit
    return header, "kcal_per_mol"


def _content_lines(lines: Iterable[str]):
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            yield lineno, stripped


def parse_csv(source: TextIO | str) -> Dataset:
    """Parse the canonical packed CSV format (coordinates in Bohr).

    The header names the property columns between ``label`` and ``N``; a
    ``_kcalmol`` or ``_eV`` suffix sets the column's unit.
    """
    text = source if isinstance(source, str) else source.read()
    rows = _content_lines(text.splitlines())
    try:
        header_lineno, header_line = next(rows)
    except StopIteration:
        raise ParseError("line 1: missing header line") from None
    header = next(csv.reader([header_line]))
    if header[0].strip().lower() != "label" or "N" not in header:
        raise ParseError(
            f"line {header_lineno}: header must start with 'label' and contain an 'N' column")
    n_col = header.index("N")
    if n_col < 2:
        raise ParseError(f"line {header_lineno}: no property column before 'N'")
    names, units = zip(*(_column_name(h.strip()) for h in header[1:n_col]))

    molecules, props = [], []
    for lineno, line in rows:
        fields = next(csv.reader([line]))
        where = f"line {lineno}"
        if len(fields) <= n_col:
            raise ParseError(f"{where}: expected at least {n_col + 1} fields, got {len(fields)}")
        try:
            n = int(fields[n_col])
        except ValueError:
            raise ParseError(f"{where}: malformed atom count {fields[n_col]!r}") from None
        if n < 1:
            raise ParseError(f"{where}: atom count must be positive, got {n}")
        expected = n_col + 1 + 4 * n
        if len(fields) != expected:
            raise ParseError(
                f"{where}: N={n} requires {expected} fields, got {len(fields)}")
        values = [_finite(f, "property", where) for f in fields[1:n_col]]
        atoms = fields[n_col + 1:]
        z = np.empty(n, dtype=np.int64)
        for i in range(n):
            token = atoms[4 * i]
            try:
                z[i] = int(token)
            except ValueError:
                raise ParseError(f"{where}: malformed atomic number {token!r}") from None
            if not 1 <= z[i] <= len(ELEMENT_SYMBOLS):
                raise ParseError(f"{where}: atomic number {z[i]} outside [1, 118]")
        r = np.array([[_finite(atoms[4 * i + k], "coordinate", where) for k in (1, 2, 3)]
                      for i in range(n)])
        label = fields[0] if fields[0] else None
        molecules.append(Molecule(z, r, label))
        props.append(values)

    matrix = np.array(props, dtype=np.float64).reshape(len(props), len(names))
    return Dataset(tuple(molecules), matrix, tuple(names), tuple(units))


def write_csv(ds: Dataset, sink: TextIO | None = None,
              comments: Sequence[str] = ()) -> str | None:
    """Write ``ds`` in the canonical CSV format.

    Floats use the shortest repr that round-trips, so ``parse_csv`` of the
    output reproduces the dataset exactly. Returns the text if ``sink`` is
    None.
    """
    out = io.StringIO() if sink is None else sink
    for c in comments:
        out.write(f"# {c}\n")
    suffix = {"kcal_per_mol": "_kcalmol", "eV": "_eV"}
    header = ["label"] + [n + suffix[u] for n, u in zip(ds.property_names, ds.property_units)]
    header.append("N")
    for i in range(1, ds.max_atoms + 1):
        header += [f"Z{i}", f"x{i}", f"y{i}", f"z{i}"]
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for mol, row in zip(ds.molecules, ds.properties):
        fields = [mol.label or ""] + [repr(float(v)) for v in row] + [str(mol.n_atoms)]
        for z, xyz in zip(mol.atomic_numbers, mol.positions):
            fields.append(str(int(z)))
            fields += [repr(float(c)) for c in xyz]
        writer.writerow(fields)
    if sink is None:
        return out.getvalue()
    return None
