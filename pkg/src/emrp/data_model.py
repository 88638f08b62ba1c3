"""Core data structures for cell-structured survey estimation.

Indexing convention used across the package: Z-cells are m = 1..M, X-levels
are c = 1..C, and joint cells are j = (m - 1) * C + c, i.e. j runs 1..J
row-major with the X level varying fastest.  All public index fields are
1-based; internal numpy buffers subtract one locally.  Counts are stored as
floats because estimated counts are generally non-integer.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EmrpError",
    "ValidationError",
    "EmptyCellError",
    "UrnUnderflowError",
    "UnsupportedError",
    "EstimationError",
    "CellFrame",
    "WeightedSample",
    "CountDraws",
    "CellMeanDraws",
    "SubgroupDef",
    "EstimateSummary",
    "build_cell_frame",
    "construct_base_weights",
    "collapse_empty_cells",
    "read_sample_csv",
    "read_margins_csv",
    "write_count_draws_csv",
]


class EmrpError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(EmrpError):
    """Malformed inputs: bad shapes, dtypes, index ranges, or schemas."""


class EmptyCellError(EmrpError):
    """A Z-cell has population mass but no sampled units."""

    def __init__(self, cell: int, message: str | None = None):
        self.cell = int(cell)
        super().__init__(message or f"Z-cell m={cell} has a positive margin but no sampled units")


class UrnUnderflowError(EmrpError):
    """A Polya urn entry produced a negative selection probability."""

    def __init__(self, unit: int, weight: float):
        self.unit = int(unit)
        self.weight = float(weight)
        super().__init__(
            f"urn entry {unit} has weight {weight:.6g} < 1, giving a negative "
            "selection probability; set clamp_nonnegative=True to floor at zero"
        )


class UnsupportedError(EmrpError):
    """A requested configuration is outside the implemented scope."""


class EstimationError(EmrpError):
    """An estimator could not produce a usable summary."""


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CellFrame:
    """Poststratification frame: M Z-cells crossed with C X-levels.

    ``margins[m-1]`` holds the known population count of Z-cell m.  Joint
    cells are enumerated j = (m-1)*C + c.
    """

    margins: np.ndarray  # (M,) nonnegative reals
    C: int

    def __post_init__(self):
        margins = _frozen_array(self.margins, float)
        object.__setattr__(self, "margins", margins)
        if margins.ndim != 1 or margins.size == 0:
            raise ValidationError("margins must be a nonempty 1-D array")
        if not np.all(np.isfinite(margins)) or np.any(margins < 0):
            raise ValidationError("margins must be finite and nonnegative")
        if margins.sum() <= 0:
            raise ValidationError("total population size must be positive")
        if int(self.C) < 1:
            raise ValidationError("C must be >= 1")
        object.__setattr__(self, "C", int(self.C))

    @property
    def M(self) -> int:
        return self.margins.size

    @property
    def J(self) -> int:
        return self.M * self.C

    @property
    def N(self) -> float:
        return float(self.margins.sum())

    def j_of(self, m, c):
        """Joint index of Z-cell m and X-level c (all 1-based)."""
        m = np.asarray(m, dtype=int)
        c = np.asarray(c, dtype=int)
        if np.any(m < 1) or np.any(m > self.M):
            raise ValidationError("m out of range")
        if np.any(c < 1) or np.any(c > self.C):
            raise ValidationError("c out of range")
        out = (m - 1) * self.C + c
        return out if out.ndim else int(out)

    def z_of(self, j):
        """Z-cell of joint index j (1-based)."""
        j = np.asarray(j, dtype=int)
        if np.any(j < 1) or np.any(j > self.J):
            raise ValidationError("j out of range")
        out = (j - 1) // self.C + 1
        return out if out.ndim else int(out)

    def x_of(self, j):
        """X-level of joint index j (1-based)."""
        j = np.asarray(j, dtype=int)
        if np.any(j < 1) or np.any(j > self.J):
            raise ValidationError("j out of range")
        out = (j - 1) % self.C + 1
        return out if out.ndim else int(out)

    def joint_z(self) -> np.ndarray:
        """Z-cell index of every joint cell, shape (J,), 1-based."""
        return np.repeat(np.arange(1, self.M + 1), self.C)

    def joint_x(self) -> np.ndarray:
        """X-level of every joint cell, shape (J,), 1-based."""
        return np.tile(np.arange(1, self.C + 1), self.M)


def build_cell_frame(margins, C: int) -> CellFrame:
    """Construct a CellFrame from Z-margin counts and the X level count."""
    return CellFrame(margins=np.asarray(margins, dtype=float), C=C)


@dataclass(frozen=True)
class WeightedSample:
    """Sampled units with 1-based categorical covariates and binary outcome."""

    z_cat: np.ndarray  # (n,) int, 1..M
    x: np.ndarray      # (n,) int, 1..C
    y: np.ndarray      # (n,) int, 0/1
    weight: np.ndarray | None = None  # (n,) positive floats

    def __post_init__(self):
        z = _frozen_array(self.z_cat, int)
        x = _frozen_array(self.x, int)
        y = _frozen_array(self.y, int)
        object.__setattr__(self, "z_cat", z)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        n = z.size
        if n == 0:
            raise ValidationError("sample must contain at least one unit")
        if x.size != n or y.size != n:
            raise ValidationError("z_cat, x, y must have equal length")
        if np.any(z < 1):
            raise ValidationError("z_cat must be 1-based positive integers")
        if np.any(x < 1):
            raise ValidationError("x must be 1-based positive integers")
        if not np.all((y == 0) | (y == 1)):
            raise ValidationError("y must be 0/1")
        if self.weight is not None:
            w = _frozen_array(self.weight, float)
            if w.size != n:
                raise ValidationError("weight must have the same length as z_cat")
            if not np.all(np.isfinite(w)) or np.any(w <= 0):
                raise ValidationError("weights must be positive and finite")
            object.__setattr__(self, "weight", w)

    @property
    def n(self) -> int:
        return self.z_cat.size

    def joint_cells(self, frame: CellFrame) -> np.ndarray:
        """Joint cell index j of each unit under ``frame`` (1-based)."""
        if np.any(self.z_cat > frame.M):
            raise ValidationError("sample z_cat exceeds frame M")
        if np.any(self.x > frame.C):
            raise ValidationError("sample x exceeds frame C")
        return (self.z_cat - 1) * frame.C + self.x

    def with_weight(self, weight) -> "WeightedSample":
        return WeightedSample(z_cat=self.z_cat, x=self.x, y=self.y, weight=weight)


@dataclass(frozen=True)
class CountDraws:
    """L draws of estimated joint-cell counts, one row per draw."""

    counts: np.ndarray  # (L, J) nonnegative reals
    N: float
    rtol: float = 1e-9

    def __post_init__(self):
        counts = _frozen_array(self.counts, float)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "N", float(self.N))
        if counts.ndim != 2 or counts.size == 0:
            raise ValidationError("counts must be a nonempty (L, J) matrix")
        if not np.all(np.isfinite(counts)) or np.any(counts < 0):
            raise ValidationError("counts must be finite and nonnegative")
        row_sums = counts.sum(axis=1)
        if np.any(np.abs(row_sums - self.N) > self.rtol * self.N):
            worst = int(np.argmax(np.abs(row_sums - self.N)))
            raise ValidationError(
                f"count draw {worst} sums to {row_sums[worst]!r}, expected {self.N!r}; "
                "normalize rows before constructing CountDraws"
            )

    @property
    def L(self) -> int:
        return self.counts.shape[0]

    @property
    def J(self) -> int:
        return self.counts.shape[1]

    @staticmethod
    def from_unnormalized(counts, N: float) -> "CountDraws":
        """Rescale each row to sum exactly to N, then validate."""
        counts = np.asarray(counts, dtype=float)
        row_sums = counts.sum(axis=1, keepdims=True)
        if np.any(row_sums <= 0):
            raise ValidationError("cannot normalize a draw with nonpositive total")
        return CountDraws(counts=counts * (N / row_sums), N=N)


@dataclass(frozen=True)
class CellMeanDraws:
    """S posterior draws of per-joint-cell outcome means, in [0, 1]."""

    means: np.ndarray  # (S, J)

    def __post_init__(self):
        means = _frozen_array(self.means, float)
        object.__setattr__(self, "means", means)
        if means.ndim != 2 or means.size == 0:
            raise ValidationError("means must be a nonempty (S, J) matrix")
        if not np.all(np.isfinite(means)):
            raise ValidationError("means must be finite")
        if np.any(means < 0) or np.any(means > 1):
            raise ValidationError("cell means must lie in [0, 1]")

    @property
    def S(self) -> int:
        return self.means.shape[0]

    @property
    def J(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class SubgroupDef:
    """A named estimand: a set of joint cells (1-based indices)."""

    name: str
    cells: tuple[int, ...]

    def __post_init__(self):
        cells = tuple(sorted(int(c) for c in set(self.cells)))
        if not cells:
            raise ValidationError(f"subgroup {self.name!r} has no cells")
        if cells[0] < 1:
            raise ValidationError("subgroup cells must be 1-based positive indices")
        object.__setattr__(self, "cells", cells)

    def mask(self, J: int) -> np.ndarray:
        if self.cells[-1] > J:
            raise ValidationError(
                f"subgroup {self.name!r} references cell {self.cells[-1]} > J={J}"
            )
        m = np.zeros(J, dtype=bool)
        m[np.asarray(self.cells) - 1] = True
        return m


@dataclass(frozen=True)
class EstimateSummary:
    """Point estimate with uncertainty for one method and one estimand."""

    method: str
    estimand: str
    estimate: float
    se: float
    ci_lower: float
    ci_upper: float
    n_draws: int
    skipped_draws: int = 0

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "estimand": self.estimand,
            "estimate": float(self.estimate),
            "se": float(self.se),
            "ci_lower": float(self.ci_lower),
            "ci_upper": float(self.ci_upper),
            "n_draws": int(self.n_draws),
            "skipped_draws": int(self.skipped_draws),
        }


def sample_cell_counts(sample: WeightedSample, frame: CellFrame) -> np.ndarray:
    """Sampled unit counts per Z-cell, shape (M,)."""
    return np.bincount(sample.z_cat - 1, minlength=frame.M).astype(float)


def construct_base_weights(sample: WeightedSample, frame: CellFrame) -> np.ndarray:
    """Base weights w_i = N^z_m / n^z_m for each unit's Z-cell.

    Raises EmptyCellError for the lowest-indexed Z-cell that has population
    mass but no sampled units.  Use :func:`collapse_empty_cells` first to
    merge such margins instead.
    """
    n_z = sample_cell_counts(sample, frame)
    empty = np.nonzero((frame.margins > 0) & (n_z == 0))[0]
    if empty.size:
        raise EmptyCellError(int(empty[0]) + 1)
    orphan = np.nonzero((frame.margins == 0) & (n_z > 0))[0]
    if orphan.size:
        raise ValidationError(
            f"Z-cell m={int(orphan[0]) + 1} has sampled units but a zero margin"
        )
    w_cell = np.zeros(frame.M)
    nonzero = n_z > 0
    w_cell[nonzero] = frame.margins[nonzero] / n_z[nonzero]
    return w_cell[sample.z_cat - 1]


def collapse_empty_cells(frame: CellFrame, sample: WeightedSample) -> CellFrame:
    """Merge margins of unsampled Z-cells into the nearest sampled cell.

    Nearest is measured by index distance; ties go to the lower index.  The
    returned frame has the same M and total N, with the empty cells' margins
    moved so that construct_base_weights succeeds.
    """
    n_z = sample_cell_counts(sample, frame)
    margins = np.array(frame.margins, copy=True)
    occupied = np.nonzero(n_z > 0)[0]
    if occupied.size == 0:
        raise ValidationError("sample covers no Z-cells")
    empty = np.nonzero((margins > 0) & (n_z == 0))[0]
    for m in empty:
        dist = np.abs(occupied - m)
        target = occupied[np.argmin(dist)]  # argmin takes the first, i.e. lower index
        margins[target] += margins[m]
        margins[m] = 0.0
    return CellFrame(margins=margins, C=frame.C)


# ---------------------------------------------------------------------------
# CSV schemas.  Sample files: header z_cat,x,y[,weight]; margins files:
# header m,count.  UTF-8 with a header row is required in both.
# ---------------------------------------------------------------------------

def _parse_int(text: str, what: str, path: str, line: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise ValidationError(f"{path}:{line}: {what} must be an integer, got {text!r}")


def read_sample_csv(path, allow_missing: bool = False):
    """Read a sample CSV.

    Returns a WeightedSample, or, when ``allow_missing`` is true, a dict of
    raw columns (lists with None for blank fields) for imputation before
    construction.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file; header row required")
        header = [h.strip() for h in header]
        required = ["z_cat", "x", "y"]
        for col in required:
            if col not in header:
                raise ValidationError(f"{path}: missing required column {col!r}")
        has_weight = "weight" in header
        idx = {col: header.index(col) for col in header}
        cols: dict[str, list] = {c: [] for c in required + (["weight"] if has_weight else [])}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(header):
                raise ValidationError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            for col in cols:
                text = row[idx[col]].strip()
                if text == "":
                    if not allow_missing:
                        raise ValidationError(f"{path}:{lineno}: blank value in column {col!r}")
                    cols[col].append(None)
                elif col == "weight":
                    try:
                        cols[col].append(float(text))
                    except ValueError:
                        raise ValidationError(f"{path}:{lineno}: weight must be a float, got {text!r}")
                else:
                    cols[col].append(_parse_int(text, col, str(path), lineno))
    if not cols["z_cat"]:
        raise ValidationError(f"{path}: no data rows")
    if allow_missing:
        return cols
    return WeightedSample(
        z_cat=np.array(cols["z_cat"]),
        x=np.array(cols["x"]),
        y=np.array(cols["y"]),
        weight=np.array(cols["weight"]) if has_weight else None,
    )


def sample_from_columns(cols: dict) -> WeightedSample:
    """Build a WeightedSample from a raw column dict (post-imputation)."""
    for name, values in cols.items():
        if any(v is None for v in values):
            raise ValidationError(f"column {name!r} still has missing values")
    return WeightedSample(
        z_cat=np.array(cols["z_cat"], dtype=int),
        x=np.array(cols["x"], dtype=int),
        y=np.array(cols["y"], dtype=int),
        weight=np.array(cols["weight"], dtype=float) if "weight" in cols else None,
    )


def read_margins_csv(path) -> np.ndarray:
    """Read a margins CSV (columns m, count) into a dense (M,) array."""
    entries: dict[int, float] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file; header row required")
        if "m" not in header or "count" not in header:
            raise ValidationError(f"{path}: margins file must have columns m,count")
        m_idx, c_idx = header.index("m"), header.index("count")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            m = _parse_int(row[m_idx].strip(), "m", str(path), lineno)
            try:
                count = float(row[c_idx].strip())
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: count must be numeric")
            if m < 1:
                raise ValidationError(f"{path}:{lineno}: m must be >= 1")
            if m in entries:
                raise ValidationError(f"{path}:{lineno}: duplicate margin for m={m}")
            entries[m] = count
    if not entries:
        raise ValidationError(f"{path}: no margin rows")
    M = max(entries)
    margins = np.zeros(M)
    for m, count in entries.items():
        margins[m - 1] = count
    return margins


def write_count_draws_csv(draws: CountDraws, path) -> None:
    """Dump count draws as CSV: L rows, header j1..jJ."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"j{j}" for j in range(1, draws.J + 1)])
        for row in draws.counts:
            writer.writerow([repr(float(v)) for v in row])
