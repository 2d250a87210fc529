"""Observation tables, fold splitting and the package exception hierarchy."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

PathLike = Union[str, Path]


class RcpredError(Exception):
    """Base class for all package errors."""


class ConfigError(RcpredError, ValueError):
    """Invalid configuration or arguments."""


class DataError(RcpredError, ValueError):
    """Input data violates a structural requirement."""


class DimensionError(DataError):
    """Row or column counts do not line up."""


class DomainError(DataError):
    """A value lies outside its admissible domain (non-binary treatment, NaN, ...)."""


class InsufficientDataError(DataError):
    """Too few rows (typically treated rows) to fit a model."""


class NumericalError(RcpredError, ArithmeticError):
    """A numerical routine failed to produce a finite answer."""


def _as_matrix(x, name: str, n: Optional[int] = None) -> np.ndarray:
    if x is None:
        x = np.empty((n or 0, 0))
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        if n is not None and arr.size == 0:
            arr = arr.reshape(n, 0)
        else:
            arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a 2-d matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ObservationTable:
    """Rows of (V, Z, A, Y).

    ``v`` holds the runtime-available predictors, ``z`` the confounders that are
    only available at training time (possibly zero columns), ``a`` a binary
    treatment indicator and ``y`` the observed outcome.  Arrays are copied and
    marked read-only on construction; use :func:`validate` to check invariants.
    """

    v: np.ndarray
    z: np.ndarray
    a: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        v = _as_matrix(self.v, "v")
        z = _as_matrix(self.z, "z", n=v.shape[0])
        a = np.asarray(self.a, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        for name, arr in (("v", v), ("z", z), ("a", a), ("y", y)):
            arr = np.array(arr, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.v.shape[0]

    @property
    def d_v(self) -> int:
        return self.v.shape[1]

    @property
    def d_z(self) -> int:
        return self.z.shape[1]

    @property
    def vz(self) -> np.ndarray:
        """Predictors and confounders side by side, shape (n, d_v + d_z)."""
        return np.hstack([self.v, self.z])

    def treated(self, a: int) -> np.ndarray:
        """Boolean mask of rows whose treatment equals ``a``."""
        return self.a == a

    def subset(self, rows) -> "ObservationTable":
        rows = np.asarray(rows)
        return ObservationTable(self.v[rows], self.z[rows], self.a[rows], self.y[rows])

    def with_y(self, y) -> "ObservationTable":
        return ObservationTable(self.v, self.z, self.a, y)

    def header(self) -> list:
        return ([f"v_{j + 1}" for j in range(self.d_v)]
                + [f"z_{j + 1}" for j in range(self.d_z)] + ["a", "y"])

    def to_csv(self, path: Optional[PathLike] = None, comment: Optional[str] = None) -> str:
        """Write the table as CSV; returns the text (and writes ``path`` if given)."""
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        data = np.hstack([self.v, self.z, self.a[:, None], self.y[:, None]])
        a_col = self.d_v + self.d_z
        for row in data:
            writer.writerow([repr(float(x)) if j != a_col else str(int(x))
                             for j, x in enumerate(row)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: PathLike) -> "ObservationTable":
        """Read a table written by :meth:`to_csv`.

        Lines starting with ``#`` are ignored; d_V and d_Z are inferred from
        the ``v_*`` and ``z_*`` header columns.
        """
        lines = [ln for ln in Path(path).read_text().splitlines()
                 if ln.strip() and not ln.startswith("#")]
        if not lines:
            raise DataError(f"{path}: empty CSV")
        reader = csv.reader(lines)
        header = next(reader)
        v_cols = [i for i, h in enumerate(header) if h.startswith("v_")]
        z_cols = [i for i, h in enumerate(header) if h.startswith("z_")]
        try:
            a_col, y_col = header.index("a"), header.index("y")
        except ValueError:
            raise DataError(f"{path}: header must contain 'a' and 'y' columns") from None
        rows = list(reader)
        if any(len(r) != len(header) for r in rows):
            raise DimensionError(f"{path}: ragged rows")
        try:
            data = np.array(rows, dtype=float).reshape(len(rows), len(header))
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric entry ({exc})") from None
        table = cls(data[:, v_cols], data[:, z_cols].reshape(len(rows), len(z_cols)),
                    data[:, a_col], data[:, y_col])
        validate(table)
        return table


def validate(table: ObservationTable) -> None:
    """Raise if ``table`` breaks any invariant, otherwise return None."""
    n = table.v.shape[0]
    if n < 1:
        raise DimensionError("table must have at least one row")
    for name in ("z", "a", "y"):
        m = getattr(table, name).shape[0]
        if m != n:
            raise DimensionError(f"{name} has {m} rows, v has {n}")
    for name in ("v", "z", "a", "y"):
        if not np.all(np.isfinite(getattr(table, name))):
            raise DomainError(f"{name} contains NaN or infinite entries")
    if not np.all((table.a == 0) | (table.a == 1)):
        raise DomainError("treatment a must be 0 or 1")


def check_treatment(a) -> int:
    if a not in (0, 1):
        raise DomainError(f"target treatment must be 0 or 1, got {a!r}")
    return int(a)


@dataclass(frozen=True)
class FoldAssignment:
    labels: np.ndarray
    k: int

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def indices(self, fold: int) -> np.ndarray:
        """Row indices in ``fold``, in increasing order."""
        return np.flatnonzero(self.labels == fold)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)


def split_folds(n: int, k: int, seed: int) -> FoldAssignment:
    """Shuffle ``range(n)`` with a seeded permutation and deal it round-robin into k folds."""
    if k < 1 or n < 1:
        raise ConfigError(f"need n >= 1 and k >= 1, got n={n}, k={k}")
    if k > n:
        raise ConfigError(f"cannot split {n} rows into {k} folds")
    perm = make_rng(seed).permutation(n)
    labels = np.empty(n, dtype=np.int64)
    labels[perm] = np.arange(n) % k
    return FoldAssignment(labels, k)


def make_rng(seed) -> np.random.Generator:
    """The project-wide PRNG: numpy's PCG64 seeded through SeedSequence."""
    return np.random.Generator(np.random.PCG64(seed))


def child_seed(seed: int, *path: int) -> int:
    """Derive a 63-bit integer seed from ``seed`` and an integer path, deterministically."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), *[int(p) for p in path]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def concat_tables(tables: Sequence[ObservationTable]) -> ObservationTable:
    return ObservationTable(np.vstack([t.v for t in tables]), np.vstack([t.z for t in tables]),
                            np.concatenate([t.a for t in tables]),
                            np.concatenate([t.y for t in tables]))
