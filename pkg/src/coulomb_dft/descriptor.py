"""Sorted Coulomb matrices flattened into fixed-length 1D signals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import Dataset, Molecule

DOMAINS = ("raw", "dft_complex", "dft_magnitude")
COINCIDENT_ATOM_THRESHOLD = 1e-10  # Bohr


class DegenerateGeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CoulombMatrix:
    values: np.ndarray
    n_atoms: int

    @property
    def n_max(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class CoulombSignal:
    values: np.ndarray
    n_atoms: int
    source_label: str | None = None


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Stacked per-molecule feature rows.

    ``values`` is always a real 2D array. Complex spectra are stored with
    real and imaginary parts interleaved, so a plain Euclidean distance over
    the stored reals equals the complex Euclidean distance.
    """

    values: np.ndarray
    domain: str = "raw"
    n_max: int | None = None
    labels: tuple | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown feature domain {self.domain!r}")
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("feature values must be a 2D array")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def signal_length(self) -> int:
        """Length L of the underlying signal (half the stored width for complex rows)."""
        width = self.values.shape[1]
        return width // 2 if self.domain == "dft_complex" else width

    def as_complex(self) -> np.ndarray:
        if self.domain != "dft_complex":
            raise ValueError("only dft_complex features have a complex view")
        return self.values[:, 0::2] + 1j * self.values[:, 1::2]

    def rows(self, indices) -> "FeatureMatrix":
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else tuple(self.labels[i] for i in idx)
        return FeatureMatrix(self.values[idx], self.domain, self.n_max, labels)


def signal_length(n_max: int) -> int:
    return n_max * (n_max + 1) // 2


def coulomb_matrix(mol: Molecule, n_max: int | None = None) -> CoulombMatrix:
    """Coulomb matrix of ``mol`` zero-padded to ``n_max`` x ``n_max``.

    Diagonal entries are 0.5 * Z**2.4, off-diagonal entries Z_i Z_j / |R_i - R_j|
    with distances in Bohr.
    """
    n = mol.n_atoms
    n_max = n if n_max is None else int(n_max)
    if n_max < n:
        raise ValueError(f"n_max={n_max} is smaller than the atom count {n}")
    z = mol.atomic_numbers.astype(np.float64)
    r = mol.positions
    dist = np.sqrt(((r[:, None, :] - r[None, :, :]) ** 2).sum(axis=-1))
    np.fill_diagonal(dist, np.inf)
    if n > 1:
        i, j = np.unravel_index(np.argmin(dist), dist.shape)
        if dist[i, j] < COINCIDENT_ATOM_THRESHOLD:
            i, j = sorted((int(i), int(j)))
            raise DegenerateGeometryError(
                f"atoms {i} and {j} are closer than {COINCIDENT_ATOM_THRESHOLD} Bohr")
    cm = np.outer(z, z) / dist
    np.fill_diagonal(cm, 0.5 * z ** 2.4)
    out = np.zeros((n_max, n_max))
    out[:n, :n] = cm
    return CoulombMatrix(out, n)


def sort_coulomb(cm: CoulombMatrix) -> CoulombMatrix:
    """Permute rows and columns so column norms are non-increasing.

    Ties keep their original order.
    """
    norms = np.linalg.norm(cm.values, axis=0)
    order = np.argsort(-norms, kind="stable")
    return CoulombMatrix(cm.values[np.ix_(order, order)], cm.n_atoms)


def flatten_lower(cm: CoulombMatrix, label: str | None = None) -> CoulombSignal:
    """Unfold the lower triangle (diagonal included) row by row."""
    rows, cols = np.tril_indices(cm.n_max)
    return CoulombSignal(cm.values[rows, cols], cm.n_atoms, label)


def coulomb_signal(mol: Molecule, n_max: int | None = None) -> np.ndarray:
    return flatten_lower(sort_coulomb(coulomb_matrix(mol, n_max))).values


def featurize(ds: Dataset, n_max: int | None = None) -> FeatureMatrix:
    """Raw Coulomb signals for every molecule, one row each.

    ``n_max`` defaults to the dataset's largest atom count; pass a larger
    value to featurize new molecules consistently with a trained model.
    """
    if len(ds) == 0:
        raise ValueError("cannot featurize an empty dataset")
    n_max = ds.max_atoms if n_max is None else int(n_max)
    if n_max < ds.max_atoms:
        raise ValueError(
            f"n_max={n_max} is smaller than the largest molecule ({ds.max_atoms} atoms)")
    out = np.empty((len(ds), signal_length(n_max)))
    for m, mol in enumerate(ds.molecules):
        try:
            out[m] = coulomb_signal(mol, n_max)
        except DegenerateGeometryError as exc:
            raise DegenerateGeometryError(f"molecule {m}: {exc}") from None
    labels = tuple(mol.label for mol in ds.molecules)
    return FeatureMatrix(out, "raw", n_max, labels)
