"""Point estimates and uncertainty summaries from paired draws.

The embedded estimator combines count draws N-hat_j with cell-mean draws
theta-hat_j: each paired draw k yields sum_j N_kj * theta_kj / sum_j N_kj
over the cells of interest, and the draw distribution provides the SE and
percentile interval.  Pairing is by index after an optional independent
shuffle of each stream; streams of unequal length are truncated to the
shorter with a warning.
"""
from __future__ import annotations

import json
import os
import tempfile
import warnings as _warnings
from dataclasses import dataclass

import numpy as np

from .data_model import (
    CellMeanDraws,
    CountDraws,
    EstimateSummary,
    EstimationError,
    SubgroupDef,
    ValidationError,
    WeightedSample,
)
from .synthpop import SyntheticPopulation

__all__ = [
    "PairedDraws",
    "pair_draws",
    "emrp_estimate",
    "mrp_estimate",
    "emrp_variance_decomposition",
    "wfpbb_direct_estimate",
    "unweighted_estimate",
    "write_estimates_json",
]

Z975 = 1.96   # Wald interval convention
MAX_SKIP_FRACTION = 0.01


@dataclass(frozen=True)
class PairedDraws:
    """Count and cell-mean draws aligned one-to-one.

    The permutations record which original draw landed in each paired row
    (identity when pairing was done in index order).
    """

    counts: np.ndarray      # (K, J)
    means: np.ndarray       # (K, J)
    count_perm: np.ndarray  # (K,) indices into the count stream
    mean_perm: np.ndarray   # (K,) indices into the mean stream

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        means = np.asarray(self.means, dtype=float)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "count_perm", np.asarray(self.count_perm, dtype=int))
        object.__setattr__(self, "mean_perm", np.asarray(self.mean_perm, dtype=int))
        if counts.shape != means.shape or counts.ndim != 2:
            raise ValidationError("paired draws must be equal-shape (K, J) matrices")
        if self.count_perm.shape != (counts.shape[0],) \
                or self.mean_perm.shape != (counts.shape[0],):
            raise ValidationError("permutation records must have one entry per pair")

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def J(self) -> int:
        return self.counts.shape[1]


def pair_draws(
    count_draws: CountDraws,
    mean_draws: CellMeanDraws,
    rng: np.random.Generator | None = None,
) -> PairedDraws:
    """Align the two posterior streams draw-by-draw.

    With an rng, each stream is shuffled once independently before index
    pairing; the streams were generated independently, so any pairing is
    valid and the shuffle removes ordering artifacts.
    """
    if count_draws.J != mean_draws.J:
        raise ValidationError(
            f"count draws cover {count_draws.J} cells, mean draws {mean_draws.J}"
        )
    counts, means = count_draws.counts, mean_draws.means
    count_perm = np.arange(counts.shape[0])
    mean_perm = np.arange(means.shape[0])
    if rng is not None:
        count_perm = rng.permutation(counts.shape[0])
        mean_perm = rng.permutation(means.shape[0])
        counts = counts[count_perm]
        means = means[mean_perm]
    k = min(counts.shape[0], means.shape[0])
    if counts.shape[0] != means.shape[0]:
        _warnings.warn(
            f"pairing truncates {counts.shape[0]} count draws and "
            f"{means.shape[0]} mean draws to {k}"
        )
    return PairedDraws(counts=counts[:k], means=means[:k],
                       count_perm=count_perm[:k], mean_perm=mean_perm[:k])


def _summarize(values: np.ndarray, method: str, estimand: str,
               skipped: int = 0) -> EstimateSummary:
    if values.size == 0:
        raise EstimationError(f"no usable draws for {method}/{estimand}")
    lo, hi = np.percentile(values, [2.5, 97.5])
    return EstimateSummary(
        method=method,
        estimand=estimand,
        estimate=float(values.mean()),
        se=float(values.std(ddof=1)) if values.size > 1 else 0.0,
        ci_lower=float(lo),
        ci_upper=float(hi),
        n_draws=int(values.size),
        skipped_draws=int(skipped),
    )


def _ratio_draws(counts: np.ndarray, means: np.ndarray, mask: np.ndarray,
                 method: str, estimand: str) -> EstimateSummary:
    num = (counts[:, mask] * means[:, mask]).sum(axis=1)
    den = counts[:, mask].sum(axis=1)
    usable = den > 0
    skipped = int((~usable).sum())
    if skipped > MAX_SKIP_FRACTION * den.size:
        raise EstimationError(
            f"{method}/{estimand}: {skipped} of {den.size} draws have zero "
            "subgroup count (limit 1%)"
        )
    values = num[usable] / den[usable]
    return _summarize(values, method, estimand, skipped)


def emrp_estimate(
    count_draws: CountDraws,
    mean_draws: CellMeanDraws,
    subgroups: list[SubgroupDef] | None = None,
    rng: np.random.Generator | None = None,
    method: str = "emrp",
) -> list[EstimateSummary]:
    """Embedded estimates for the overall mean and each subgroup."""
    paired = pair_draws(count_draws, mean_draws, rng=rng)
    J = paired.J
    out = [_ratio_draws(paired.counts, paired.means, np.ones(J, dtype=bool),
                        method, "overall")]
    for sg in subgroups or []:
        out.append(_ratio_draws(paired.counts, paired.means, sg.mask(J),
                                method, sg.name))
    return out


def mrp_estimate(
    true_counts: np.ndarray,
    mean_draws: CellMeanDraws,
    subgroups: list[SubgroupDef] | None = None,
    method: str = "mrp",
) -> list[EstimateSummary]:
    """Poststratified estimates with a single fixed count vector."""
    counts = np.asarray(true_counts, dtype=float)
    if counts.ndim != 1 or counts.size != mean_draws.J:
        raise ValidationError("true_counts must be a (J,) vector matching the mean draws")
    if np.any(counts < 0) or counts.sum() <= 0:
        raise ValidationError("true_counts must be nonnegative with positive total")
    means = mean_draws.means
    out = []
    for name, mask in [("overall", np.ones(counts.size, dtype=bool))] + [
        (sg.name, sg.mask(counts.size)) for sg in subgroups or []
    ]:
        den = counts[mask].sum()
        if den <= 0:
            raise EstimationError(f"{method}/{name}: subgroup has zero total count")
        values = means[:, mask] @ counts[mask] / den
        out.append(_summarize(values, method, name))
    return out


def emrp_variance_decomposition(
    count_draws: CountDraws,
    mean_draws: CellMeanDraws,
    subgroup: SubgroupDef | None = None,
    grid: tuple[int, int] = (50, 20),
) -> dict[str, float]:
    """Split the embedded draw variance into count and model components.

    Evaluates the estimator on a fully crossed G x R grid: every count draw
    g is combined with the same R mean draws.  Law of total variance:
    between = variance of per-count-draw means, within = mean of
    per-count-draw variances.  Population (ddof=0) variances are used so
    between + within equals the total exactly, and a constant count stream
    yields between = 0 exactly.
    """
    G, R = grid
    if G < 2 or R < 2:
        raise ValidationError("decomposition grid needs G >= 2 and R >= 2")
    if count_draws.L < G:
        raise ValidationError(f"need at least G={G} count draws, have {count_draws.L}")
    if mean_draws.S < R:
        raise ValidationError(f"need at least R={R} mean draws, have {mean_draws.S}")
    if count_draws.J != mean_draws.J:
        raise ValidationError("count and mean draws must cover the same cells")
    mask = (subgroup.mask(count_draws.J) if subgroup is not None
            else np.ones(count_draws.J, dtype=bool))
    counts = count_draws.counts[:G, mask]
    means = mean_draws.means[:R, mask]
    den = counts.sum(axis=1)
    if np.any(den <= 0):
        raise EstimationError("subgroup has zero count in a decomposition draw")
    values = (counts @ means.T) / den[:, None]   # (G, R)
    cond_means = values.mean(axis=1)
    between = float(cond_means.var(ddof=0))
    within = float(values.var(axis=1, ddof=0).mean())
    total = float(values.var(ddof=0))
    return {"between": between, "within": within, "total": total}


def wfpbb_direct_estimate(
    pops: list[SyntheticPopulation],
    subgroups: list[SubgroupDef] | None = None,
    method: str = "wfpbb",
) -> list[EstimateSummary]:
    """Design-based estimates from synthetic populations carrying outcomes."""
    if not pops:
        raise ValidationError("need at least one synthetic population")
    if any(p.y_counts is None for p in pops):
        raise ValidationError("direct estimation requires populations built with outcomes")
    ones = np.stack([p.y_counts[:, 1] for p in pops])   # (L, J)
    totals = np.stack([p.counts for p in pops])
    J = totals.shape[1]
    out = []
    for name, mask in [("overall", np.ones(J, dtype=bool))] + [
        (sg.name, sg.mask(J)) for sg in subgroups or []
    ]:
        num = ones[:, mask].sum(axis=1)
        den = totals[:, mask].sum(axis=1)
        usable = den > 0
        skipped = int((~usable).sum())
        if skipped > MAX_SKIP_FRACTION * den.size:
            raise EstimationError(
                f"{method}/{name}: {skipped} of {den.size} populations have "
                "no subgroup units (limit 1%)"
            )
        out.append(_summarize(num[usable] / den[usable], method, name, skipped))
    return out


def unweighted_estimate(
    sample: WeightedSample,
    subgroups: dict[str, np.ndarray] | None = None,
    method: str = "unweighted",
) -> list[EstimateSummary]:
    """Raw sample proportions with Wald 95% intervals.

    ``subgroups`` maps names to 0-based unit index arrays.  The reported
    n_draws is the number of units behind each proportion.
    """
    out = []
    groups = [("overall", np.arange(sample.n))]
    for name, idx in (subgroups or {}).items():
        groups.append((name, np.asarray(idx, dtype=int)))
    for name, idx in groups:
        if idx.size == 0:
            raise EstimationError(f"unweighted/{name}: subgroup has no units")
        p = float(sample.y[idx].mean())
        se = float(np.sqrt(p * (1 - p) / idx.size))
        out.append(EstimateSummary(
            method=method, estimand=name, estimate=p, se=se,
            ci_lower=p - Z975 * se, ci_upper=p + Z975 * se,
            n_draws=int(idx.size),
        ))
    return out


def write_estimates_json(summaries: list[EstimateSummary], path) -> None:
    """Write summaries as a JSON array, atomically (write temp, then rename)."""
    payload = json.dumps([s.to_dict() for s in summaries], indent=2)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
