"""Synthetic-population generation: estimated joint-cell counts N-hat_j.

Three routes are implemented:

* weighted finite-population Bayesian bootstrap (WFPBB): a Bayesian
  bootstrap over units, weight recalibration, then a weighted Polya urn
  expansion to a population of ``pop_draw_size`` units, repeated F times
  and pooled;
* a multinomial draw within each Z-cell using sample X-proportions;
* a two-stage allocation that splits each Z-margin by posterior draws of
  Pr(X = 2 | Z) from a first-stage regression (binary X only).

The urn advances one unit per draw: entry i is selected at draw k with
probability (w_i - 1 + l_i * (N - n) / n) / (N - n + (k - 1) * (N - n) / n),
where l_i counts previous selections of entry i.  Because selections add a
constant mass (N - n) / n to the chosen entry, the selection counts over a
fixed number of draws follow a Dirichlet-multinomial distribution with
concentration (w_i - 1) * n / (N - n); the batched sampler exploits this and
is distributionally equivalent to the sequential urn.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import (
    CellFrame,
    CountDraws,
    EmptyCellError,
    UnsupportedError,
    UrnUnderflowError,
    ValidationError,
    WeightedSample,
    sample_cell_counts,
)

__all__ = [
    "UrnState",
    "SyntheticPopulation",
    "bayesian_bootstrap",
    "recalibrate_weights",
    "polya_probs",
    "polya_draw_counts",
    "wfpbb_expand",
    "wfpbb_populations",
    "counts_from_populations",
    "counts_wfpbb",
    "counts_multinomial",
    "counts_twostage",
]


@dataclass(frozen=True)
class UrnState:
    """State of a weighted Polya urn after k - 1 of N - n draws.

    ``weights`` are the entry weights (positive, summing to N), ``l_counts``
    the per-entry selection tallies so far, and ``k`` the 1-based index of
    the next draw.
    """

    weights: np.ndarray
    l_counts: np.ndarray
    k: int
    N: float
    n: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        l = np.asarray(self.l_counts, dtype=np.int64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "l_counts", l)
        object.__setattr__(self, "N", float(self.N))
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "k", int(self.k))
        if w.ndim != 1 or w.size == 0:
            raise ValidationError("urn weights must be a nonempty 1-D array")
        if self.n != w.size:
            raise ValidationError("n must equal the number of urn entries")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValidationError("urn weights must be positive and finite")
        if abs(w.sum() - self.N) > 1e-6 * max(self.N, 1.0):
            raise ValidationError(
                f"urn weights sum to {w.sum()!r}, expected N={self.N!r}"
            )
        if self.N <= self.n:
            raise ValidationError("urn requires N > n")
        if l.size != w.size or np.any(l < 0):
            raise ValidationError("l_counts must be nonnegative with one tally per entry")
        n_draws = int(round(self.N - self.n))
        if not 1 <= self.k <= n_draws:
            raise ValidationError(f"draw index k={self.k} outside 1..{n_draws}")
        if l.sum() != self.k - 1:
            raise ValidationError("sum of tallies must equal k - 1")

    def after_selection(self, i: int) -> "UrnState":
        """State after drawing entry i (0-based) at the current step."""
        l = np.array(self.l_counts, copy=True)
        l[i] += 1
        return UrnState(weights=self.weights, l_counts=l, k=self.k + 1, N=self.N, n=self.n)


def polya_probs(urn: UrnState, clamp_nonnegative: bool = False) -> np.ndarray:
    """Selection probabilities for the next urn draw.

    Entries with weight < 1 have negative initial mass; by default that is
    an error, with ``clamp_nonnegative`` the mass is floored at zero and the
    vector renormalized.
    """
    step = (urn.N - urn.n) / urn.n
    numer = urn.weights - 1.0 + urn.l_counts * step
    if np.any(numer < 0):
        if not clamp_nonnegative:
            bad = int(np.argmin(numer))
            raise UrnUnderflowError(bad, float(urn.weights[bad]))
        numer = np.maximum(numer, 0.0)
        return numer / numer.sum()
    denom = (urn.N - urn.n) + (urn.k - 1) * step
    return numer / denom


def polya_draw_counts(
    weights: np.ndarray,
    n_draws: int,
    rng: np.random.Generator,
    clamp_nonnegative: bool = False,
    batched: bool = True,
) -> np.ndarray:
    """Total selection counts per entry after ``n_draws`` urn draws.

    The batched path draws the counts in one Dirichlet-multinomial step; the
    sequential path runs the urn draw by draw and is kept as the reference
    implementation.
    """
    weights = np.asarray(weights, dtype=float)
    n = weights.size
    N = weights.sum()
    mass = weights - 1.0
    if np.any(mass < 0):
        if not clamp_nonnegative:
            bad = int(np.argmin(mass))
            raise UrnUnderflowError(bad, float(weights[bad]))
        mass = np.maximum(mass, 0.0)
    if n_draws == 0:
        return np.zeros(n, dtype=np.int64)
    if batched:
        alpha = mass * (n / (N - n))
        gam = rng.gamma(shape=alpha)  # shape-0 entries give exactly 0
        total = gam.sum()
        if total <= 0:
            raise ValidationError("all urn entries have zero mass")
        return rng.multinomial(n_draws, gam / total).astype(np.int64)
    step = (N - n) / n
    counts = np.zeros(n, dtype=np.int64)
    numer = mass.copy()
    denom = N - n
    for _ in range(n_draws):
        i = rng.choice(n, p=numer / denom)
        counts[i] += 1
        numer[i] += step
        denom += step
    return counts


def bayesian_bootstrap(sample: WeightedSample, rng: np.random.Generator) -> np.ndarray:
    """Integer replicate counts r_i from one Bayesian bootstrap pass.

    Unit probabilities are drawn from a flat Dirichlet over the n units and
    n units are then resampled multinomially, so sum(r) == n and
    E[r_i] == 1.
    """
    n = sample.n
    probs = rng.dirichlet(np.ones(n))
    return rng.multinomial(n, probs).astype(np.int64)


def recalibrate_weights(weights: np.ndarray, replicates: np.ndarray, N: float) -> np.ndarray:
    """Replicate-adjusted weights w^l_i = N * w_i * r_i / sum_j(w_j * r_j)."""
    weights = np.asarray(weights, dtype=float)
    replicates = np.asarray(replicates, dtype=float)
    if weights.shape != replicates.shape:
        raise ValidationError("weights and replicates must have equal shape")
    if np.any(replicates < 0):
        raise ValidationError("replicate counts must be nonnegative")
    raw = weights * replicates
    total = raw.sum()
    if total <= 0:
        raise ValidationError("bootstrap replicates select no units")
    return N * raw / total


@dataclass(frozen=True)
class SyntheticPopulation:
    """Pooled counts from F urn expansions of one bootstrap replicate.

    ``counts[j-1]`` is the total number of synthetic units in joint cell j
    across the F constituent populations (each of size pop_draw_size).  In
    direct mode ``y_counts[j-1, y]`` additionally splits each cell by
    outcome value.
    """

    counts: np.ndarray  # (J,)
    F: int
    pop_draw_size: int
    y_counts: np.ndarray | None = None  # (J, 2)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        object.__setattr__(self, "counts", counts)
        total = self.F * self.pop_draw_size
        if abs(counts.sum() - total) > 1e-6 * total:
            raise ValidationError(
                f"synthetic population holds {counts.sum()!r} units, expected {total}"
            )
        if self.y_counts is not None:
            yc = np.asarray(self.y_counts, dtype=float)
            object.__setattr__(self, "y_counts", yc)
            if yc.shape != (counts.size, 2):
                raise ValidationError("y_counts must have shape (J, 2)")
            if np.max(np.abs(yc.sum(axis=1) - counts)) > 1e-6:
                raise ValidationError("y_counts must sum to counts per cell")

    @property
    def size(self) -> int:
        return self.F * self.pop_draw_size


def _expand_once(
    base: np.ndarray,
    alpha: np.ndarray,
    n_draws: int,
    F: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """F pooled Dirichlet-multinomial expansions over aggregated keys."""
    total = np.asarray(base, dtype=float) * F
    positive = alpha > 0
    if not np.any(positive):
        raise ValidationError("urn has no mass to draw from")
    for _ in range(F):
        gam = rng.gamma(shape=alpha[positive])
        q = gam / gam.sum()
        total[positive] += rng.multinomial(n_draws, q)
    return total


def wfpbb_expand(
    sample: WeightedSample,
    recal_w: np.ndarray,
    frame: CellFrame,
    F: int,
    pop_draw_size: int | None,
    rng: np.random.Generator,
    include_y: bool = False,
    clamp_nonnegative: bool = False,
    replicates: np.ndarray | None = None,
) -> SyntheticPopulation:
    """Expand one recalibrated bootstrap replicate into F pooled populations.

    Each constituent population is the bootstrap sample itself (unit i counted
    ``replicates[i]`` times, default once) plus urn draws, pop_draw_size units
    in total.  Weights are rescaled so the urn is consistent with the target
    size; with identity replicates the expected count of unit i is then
    exactly its rescaled weight.  Units with zero recalibrated weight are
    excluded from the urn.
    """
    recal_w = np.asarray(recal_w, dtype=float)
    if recal_w.size != sample.n:
        raise ValidationError("recal_w must have one weight per unit")
    if F < 1:
        raise ValidationError("F must be >= 1")
    if replicates is None:
        replicates = np.ones(sample.n)
    replicates = np.asarray(replicates, dtype=float)
    if replicates.shape != recal_w.shape:
        raise ValidationError("replicates must have one entry per unit")
    n_rep = replicates.sum()
    P = int(pop_draw_size) if pop_draw_size is not None else int(round(frame.N))
    active = recal_w > 0
    n_act = int(active.sum())
    if n_act == 0:
        raise ValidationError("no active units to expand")
    if np.any(replicates[~active] > 0):
        raise ValidationError("units with zero weight cannot carry replicates")
    if P <= n_rep:
        raise ValidationError(
            f"pop_draw_size={P} must exceed the bootstrap sample size {n_rep:g}"
        )
    u = recal_w[active] * (P / recal_w.sum())
    mass = u - 1.0
    if np.any(mass < 0):
        if not clamp_nonnegative:
            bad_local = int(np.argmin(mass))
            bad = int(np.nonzero(active)[0][bad_local])
            raise UrnUnderflowError(bad, float(u[bad_local]))
        mass = np.maximum(mass, 0.0)
    n_draws = int(round(P - n_rep))
    alpha_unit = mass * (n_rep / n_draws)

    cells0 = sample.joint_cells(frame) - 1
    if include_y:
        keys = cells0[active] * 2 + sample.y[active]
        n_keys = frame.J * 2
    else:
        keys = cells0[active]
        n_keys = frame.J
    base = np.bincount(keys, weights=replicates[active], minlength=n_keys)
    alpha = np.bincount(keys, weights=alpha_unit, minlength=n_keys)

    total = _expand_once(base, alpha, n_draws, F, rng)
    if include_y:
        yc = total.reshape(frame.J, 2)
        return SyntheticPopulation(counts=yc.sum(axis=1), F=F, pop_draw_size=P, y_counts=yc)
    return SyntheticPopulation(counts=total, F=F, pop_draw_size=P)


def wfpbb_populations(
    sample: WeightedSample,
    frame: CellFrame,
    L: int,
    rng: np.random.Generator,
    F: int = 20,
    pop_draw_size: int | None = None,
    include_y: bool = False,
    clamp_nonnegative: bool = False,
) -> list[SyntheticPopulation]:
    """L independent WFPBB synthetic populations (bootstrap + urn expansion).

    Each bootstrap replicate gets its own child RNG stream, so the result is
    reproducible regardless of how the loop is scheduled.
    """
    if sample.weight is None:
        raise ValidationError("sample must carry base weights for WFPBB")
    if L < 1:
        raise ValidationError("L must be >= 1")
    streams = rng.spawn(L)
    pops = []
    for stream in streams:
        r = bayesian_bootstrap(sample, stream)
        recal = recalibrate_weights(sample.weight, r, frame.N)
        pops.append(
            wfpbb_expand(
                sample, recal, frame, F, pop_draw_size, stream,
                include_y=include_y, clamp_nonnegative=clamp_nonnegative,
                replicates=r,
            )
        )
    return pops


def counts_from_populations(pops: list[SyntheticPopulation], N: float) -> CountDraws:
    """Per-draw count estimates: average the F constituents, rescale to N."""
    rows = np.stack([p.counts / p.F for p in pops])
    return CountDraws.from_unnormalized(rows, N)


def counts_wfpbb(
    sample: WeightedSample,
    frame: CellFrame,
    L: int,
    rng: np.random.Generator,
    F: int = 20,
    pop_draw_size: int | None = None,
    clamp_nonnegative: bool = False,
) -> CountDraws:
    """WFPBB count draws: L rows of N-hat_j, each normalized to sum to N."""
    pops = wfpbb_populations(
        sample, frame, L, rng, F=F, pop_draw_size=pop_draw_size,
        clamp_nonnegative=clamp_nonnegative,
    )
    return counts_from_populations(pops, frame.N)


def _scale_blocks_to_margins(block_draws: np.ndarray, margins: np.ndarray,
                             pvals: np.ndarray) -> np.ndarray:
    """Rescale per-margin blocks so each sums exactly to its real margin."""
    totals = block_draws.sum(axis=-1, keepdims=True)
    out = np.where(totals > 0, block_draws, pvals)
    denom = out.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        scaled = out * (margins[:, None] / denom)
    return np.where(margins[:, None] > 0, scaled, 0.0)


def counts_multinomial(
    sample: WeightedSample,
    frame: CellFrame,
    n_draws: int,
    rng: np.random.Generator,
) -> CountDraws:
    """Multinomial count draws: split each margin by sampled X proportions."""
    if n_draws < 1:
        raise ValidationError("n_draws must be >= 1")
    n_z = sample_cell_counts(sample, frame)
    empty = np.nonzero((frame.margins > 0) & (n_z == 0))[0]
    if empty.size:
        raise EmptyCellError(int(empty[0]) + 1)
    cells0 = sample.joint_cells(frame) - 1
    n_zx = np.bincount(cells0, minlength=frame.J).astype(float).reshape(frame.M, frame.C)
    draws = np.zeros((n_draws, frame.M, frame.C))
    pvals = np.zeros((frame.M, frame.C))
    for m in range(frame.M):
        if frame.margins[m] <= 0:
            continue
        pvals[m] = n_zx[m] / n_zx[m].sum()
        size_m = int(round(frame.margins[m]))
        if size_m > 0:
            draws[:, m, :] = rng.multinomial(size_m, pvals[m], size=n_draws)
    scaled = _scale_blocks_to_margins(
        draws.reshape(-1, frame.C),
        np.tile(frame.margins, n_draws),
        np.tile(pvals, (n_draws, 1)),
    )
    counts = scaled.reshape(n_draws, frame.M, frame.C).reshape(n_draws, frame.J)
    return CountDraws(counts=counts, N=frame.N)


def counts_twostage(
    frame: CellFrame,
    stage1_draws: np.ndarray,
    rng: np.random.Generator | None = None,
    binomial_draws: bool = False,
) -> CountDraws:
    """Two-stage count draws from posterior Pr(X = 2 | Z = m).

    ``stage1_draws`` has shape (S, M).  The default allocates expected
    counts margin * p per draw; with ``binomial_draws`` the X=2 count is
    drawn Binomial(margin, p) instead, which adds within-cell sampling
    noise on top of posterior uncertainty.
    """
    if frame.C != 2:
        raise UnsupportedError(f"two-stage allocation requires C=2, got C={frame.C}")
    p = np.asarray(stage1_draws, dtype=float)
    if p.ndim != 2 or p.shape[1] != frame.M:
        raise ValidationError("stage1_draws must have shape (S, M)")
    if np.any(p < 0) or np.any(p > 1):
        raise ValidationError("stage-1 probabilities must lie in [0, 1]")
    if binomial_draws:
        if rng is None:
            raise ValidationError("binomial_draws requires an rng")
        sizes = np.round(frame.margins).astype(np.int64)
        hi = rng.binomial(sizes[None, :], p).astype(float)
        blocks = np.stack([sizes[None, :] - hi, hi], axis=-1)
        pvals = np.stack([1 - p, p], axis=-1)
        scaled = _scale_blocks_to_margins(
            blocks.reshape(-1, 2),
            np.tile(frame.margins, p.shape[0]),
            pvals.reshape(-1, 2),
        )
        counts = scaled.reshape(p.shape[0], frame.J)
    else:
        hi = frame.margins[None, :] * p
        counts = np.stack([frame.margins[None, :] - hi, hi], axis=-1).reshape(
            p.shape[0], frame.J
        )
    return CountDraws(counts=counts, N=frame.N)
