"""Synthetic survey fixture shaped like a pantry-visit food-security study.

Produces a deterministic weighted sample over M = 288 demographic cells
(age:3 x sex:2 x race:3 x educ:4 x income:4) with a binary visit
indicator X and binary outcome Y, plus matching population margins.
Totals are pinned exactly: n = 2228 units, 626 visitors, 131 positive
outcomes among visitors and 92 among the rest, so the headline raw
proportions are 131/626 = 0.209 for visitors and 223/2228 = 0.100
overall.  Every demographic cell is occupied, so base weights always
exist.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data_model import CellFrame, WeightedSample, build_cell_frame

__all__ = ["FixtureSpec", "FACTORS", "encode_cells", "make_pantry_fixture",
           "write_fixture"]

# Mixed-radix layout of z_cat: first factor varies slowest, last fastest.
FACTORS = (("age", 3), ("sex", 2), ("race", 3), ("educ", 4), ("income", 4))
N_CELLS = int(np.prod([size for _, size in FACTORS]))


@dataclass(frozen=True)
class FixtureSpec:
    n: int = 2228
    visitors: int = 626
    visitor_ones: int = 131
    nonvisitor_ones: int = 92
    missing_y: int = 0      # blanks injected into the outcome column
    seed: int = 7

    def __post_init__(self):
        if self.n < N_CELLS:
            raise ValueError(f"need at least {N_CELLS} units to occupy every cell")
        if not 0 < self.visitors < self.n:
            raise ValueError("visitors must be strictly between 0 and n")
        if self.visitor_ones > self.visitors:
            raise ValueError("more positive visitors than visitors")
        if self.nonvisitor_ones > self.n - self.visitors:
            raise ValueError("more positive nonvisitors than nonvisitors")
        if not 0 <= self.missing_y < self.n:
            raise ValueError("missing_y out of range")


def encode_cells(levels: dict[str, np.ndarray]) -> np.ndarray:
    """Combine 1-based factor levels into the 1-based cell index."""
    code = np.zeros_like(levels[FACTORS[0][0]])
    for name, size in FACTORS:
        code = code * size + (levels[name] - 1)
    return code + 1


def _decode_cells(z_cat: np.ndarray) -> dict[str, np.ndarray]:
    rem = np.asarray(z_cat) - 1
    out = {}
    for name, size in reversed(FACTORS):
        out[name] = rem % size + 1
        rem = rem // size
    return out


def _pick_exact(rng, scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask selecting exactly k units, favoring high scores."""
    noisy = scores + rng.logistic(size=scores.size)
    chosen = np.argsort(-noisy, kind="stable")[:k]
    mask = np.zeros(scores.size, dtype=bool)
    mask[chosen] = True
    return mask


def make_pantry_fixture(spec: FixtureSpec = FixtureSpec()):
    """Build the fixture sample and frame.

    Returns (sample, frame, extras) where extras carries the decoded
    demographic columns and the missing-outcome row indices (0-based).
    """
    rng = np.random.default_rng(spec.seed)

    # Occupancy: one unit per cell, remainder allocated by skewed cell probs.
    cell_probs = rng.dirichlet(np.full(N_CELLS, 2.0))
    extra = rng.multinomial(spec.n - N_CELLS, cell_probs)
    cell_sizes = 1 + extra
    z_cat = np.repeat(np.arange(1, N_CELLS + 1), cell_sizes)
    demo = _decode_cells(z_cat)

    # Visits skew toward low income; outcomes toward visitors and low income.
    visit_score = 1.2 * (2.5 - demo["income"])
    visitor = _pick_exact(rng, visit_score, spec.visitors)
    x = np.where(visitor, 2, 1)

    y = np.zeros(spec.n, dtype=int)
    y_score = 0.9 * (2.5 - demo["income"]) + 0.4 * (demo["age"] - 2)
    for mask, ones in ((visitor, spec.visitor_ones), (~visitor, spec.nonvisitor_ones)):
        idx = np.nonzero(mask)[0]
        p = expit(y_score[idx])
        chosen = rng.choice(idx, size=ones, replace=False, p=p / p.sum())
        y[chosen] = 1

    # Margins as integer expansion factors, so base weights vary by cell.
    factors = rng.integers(8, 33, size=N_CELLS)
    margins = (cell_sizes * factors).astype(float)
    frame = build_cell_frame(margins, C=2)

    sample = WeightedSample(z_cat=z_cat, x=x, y=y)
    missing_rows = (np.sort(rng.choice(spec.n, size=spec.missing_y, replace=False))
                    if spec.missing_y else np.array([], dtype=int))
    extras = {"demo": demo, "missing_rows": missing_rows}
    return sample, frame, extras


def write_fixture(out_dir, spec: FixtureSpec = FixtureSpec()) -> dict[str, str]:
    """Write sample.csv and margins.csv; returns the file paths."""
    sample, frame, extras = make_pantry_fixture(spec)
    os.makedirs(out_dir, exist_ok=True)
    sample_path = os.path.join(out_dir, "sample.csv")
    margins_path = os.path.join(out_dir, "margins.csv")
    missing = set(extras["missing_rows"].tolist())
    with open(sample_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["z_cat", "x", "y"])
        for i in range(sample.n):
            y_field = "" if i in missing else str(int(sample.y[i]))
            writer.writerow([int(sample.z_cat[i]), int(sample.x[i]), y_field])
    with open(margins_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["m", "count"])
        for m in range(1, frame.M + 1):
            writer.writerow([m, repr(float(frame.margins[m - 1]))])
    return {"sample": sample_path, "margins": margins_path}
