#!/usr/bin/env python3
"""Build the canonical QM7 CSV from the copy bundled with the qmllib sdist.

qmllib's source distribution ships ``tests/assets/qm7/*.xyz`` (Angstrom) and
``tests/assets/hof_qm7.txt`` (``<file> <atomization energy> <other>`` in
kcal/mol). Usage::

    pip download --no-deps --no-binary :all: qmllib==1.2.0
    tar xzf qmllib-1.2.0.tar.gz
    python scripts/qm7_from_qmllib.py qmllib-1.2.0/tests/assets data/qm7.csv.gz
"""

import argparse
import gzip
import io
from pathlib import Path

import numpy as np

from coulomb_dft.ingest import Dataset, parse_xyz, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("assets", type=Path, help="qmllib tests/assets directory")
    ap.add_argument("out", type=Path, help="output CSV (.gz compresses)")
    args = ap.parse_args()

    energies = {}
    for line in (args.assets / "hof_qm7.txt").read_text().splitlines():
        name, energy, _ = line.split()
        energies[name] = float(energy)

    molecules = []
    for name in sorted(energies):
        lines = (args.assets / "qm7" / name).read_text().splitlines()
        lines[1] = f"energy={energies[name]!r} label={Path(name).stem}"
        ds = parse_xyz("\n".join(lines), length_unit="angstrom")
        molecules.append(ds.molecules[0])

    ds = Dataset(tuple(molecules), np.array([energies[n] for n in sorted(energies)]))
    text = write_csv(ds, comments=["QM7 (7101 molecules) from qmllib 1.2.0 tests/assets; "
                                    "energy is atomization energy in kcal/mol, coordinates in Bohr"])
    if args.out.suffix == ".gz":
        with gzip.GzipFile(args.out, "wb", mtime=0) as fh:
            fh.write(text.encode("utf-8"))
    else:
        args.out.write_text(text)
    print(f"wrote {len(ds)} molecules (max {ds.max_atoms} atoms) to {args.out}")


if __name__ == "__main__":
    main()
