import gzip
from pathlib import Path

import numpy as np
import pytest

from coulomb_dft.ingest import Molecule, parse_csv

DATA_DIR = Path(__file__).resolve().parents[1] / "data"
QM7_PATH = DATA_DIR / "qm7.csv.gz"


def random_molecule(rng, n_atoms, elements=(1, 6, 7, 8, 16), min_dist=1.5):
    """Random geometry with no two atoms closer than ``min_dist`` Bohr."""
    z = rng.choice(elements, size=n_atoms)
    positions = []
    while len(positions) < n_atoms:
        p = rng.uniform(-6.0, 6.0, size=3)
        if all(np.linalg.norm(p - q) >= min_dist for q in positions):
            positions.append(p)
    return Molecule(z, np.array(positions))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def qm7():
    if not QM7_PATH.exists():
        pytest.skip("data/qm7.csv.gz not present; see README for the conversion recipe")
    with gzip.open(QM7_PATH, "rt", encoding="utf-8") as fh:
        return parse_csv(fh)


# One verdict line per acceptance criterion, echoed after the run.
ACCEPTANCE_LINES = {}


def record_criterion(number, title, ok, detail):
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
