"""Repeated-sampling study comparing count-estimation routes.

Generates a finite population with three known demographic factors
(Za: 5 levels, Zb: 5 levels, Zc: 2 levels), one binary covariate X
observed only in samples, and a binary outcome Y.  Units are sampled
with Bernoulli inclusion probabilities that vary across the M = 50
Z-cells, and five estimators are scored against realized population
means: direct bootstrap expansion (wfpbb), three embedded estimators
that differ in their joint-cell count route (wfpbb-mrp,
multinomial-mrp, twostage-mrp), and poststratification on Z-margins
alone (mrp), which ignores X entirely.

Truth is the realized population, not its generating process, so bias
is measured against the actual finite-population (sub)group means.
"""
from __future__ import annotations

import dataclasses
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import bayes_glm as glm
from .data_model import (
    CellFrame,
    CellMeanDraws,
    EmptyCellError,
    EstimateSummary,
    EstimationError,
    SubgroupDef,
    ValidationError,
    WeightedSample,
    build_cell_frame,
    construct_base_weights,
)
from .estimators import emrp_estimate, mrp_estimate, wfpbb_direct_estimate
from .synthpop import (
    counts_from_populations,
    counts_multinomial,
    counts_twostage,
    wfpbb_populations,
)

__all__ = [
    "SimConfig",
    "Population",
    "StudyResult",
    "generate_population",
    "assign_inclusion",
    "define_subgroups",
    "subgroup_truths",
    "draw_sample",
    "run_replicate",
    "run_study",
    "score_counts",
    "ESTIMATE_METHODS",
    "COUNT_METHODS",
]

N_ZA, N_ZB, N_ZC = 5, 5, 2
N_ZCELLS = N_ZA * N_ZB * N_ZC

# Selection model Pr(X=1 | Z), logit scale, level values indexed 1-based.
BETA_0 = -0.5
BETA_ZA = (1.7, 0.25, 0.2, -0.75, -1.7)
BETA_ZB = (2.3, 1.5, 0.15, 0.2, 0.9)
BETA_ZC = (0.0, -1.0)
BETA_ZA_ZC = (0.0, -0.6, 0.5, 0.35, -0.4)   # applied at Zc = 2 (interaction case)
BETA_ZB_ZC = (0.0, 1.7, 0.1, 2.0, -0.75)

# Outcome model Pr(Y=1 | Z, X), logit scale.  The X offsets put the
# higher outcome propensity on X = 1; subgroup-level sign patterns of
# the X-blind estimator pin this orientation down.
ALPHA_0 = 0.0
ALPHA_ZA = (1.37, -0.56, 0.36, 0.63, 0.40)
ALPHA_ZB = (-0.11, 1.51, -0.09, 2.02, -0.06)
ALPHA_ZC = (0.0, 0.24)
ALPHA_X = (-1.3, 0.0)

# Inclusion probability bands by Z-cell index: (number of cells, low, high).
INCLUSION_BANDS = (
    (5, 0.01, 0.10),
    (15, 0.11, 0.40),
    (20, 0.21, 0.60),
    (5, 0.51, 0.80),
    (5, 0.80, 0.99),
)
INCLUSION_GRID_STEP = 0.01

ESTIMATE_METHODS = ("wfpbb", "wfpbb-mrp", "multinomial-mrp", "twostage-mrp", "mrp")
COUNT_METHODS = ("wfpbb", "multinomial", "twostage")

MAX_SAMPLE_REDRAWS = 10
MAX_FAILURE_FRACTION = 0.05


@dataclass(frozen=True)
class SimConfig:
    """Study settings; defaults reproduce the full repeated-sampling design."""

    case: str = "main"            # "main" = X model has Z main effects only,
                                  # "int" adds Za:Zc and Zb:Zc interactions
    population_size: int = 10_000
    replicates: int = 200
    L: int = 1000                 # count draws per replicate
    F: int = 20                   # bootstrap expansions pooled per population
    chains: int = 2
    iters: int = 2000
    warmup: int = 1500
    prior_scale: float = 1.0
    binomial_allocation: bool = False   # two-stage: draw counts instead of expectations
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.case not in ("main", "int"):
            raise ValidationError(f"case must be 'main' or 'int', got {self.case!r}")
        if self.population_size < N_ZCELLS:
            raise ValidationError("population_size must cover all Z-cells")
        if self.replicates < 1:
            raise ValidationError("replicates must be >= 1")
        if self.L < 2 or self.F < 1:
            raise ValidationError("need L >= 2 count draws and F >= 1 expansions")
        if not 0 < self.warmup < self.iters:
            raise ValidationError("need 0 < warmup < iters")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")

    @property
    def kept_draws(self) -> int:
        return self.chains * (self.iters - self.warmup)

    def with_smoke(self) -> "SimConfig":
        """Reduced profile for pipeline checks: fewer replicates, draws, iterations."""
        return dataclasses.replace(
            self,
            replicates=min(self.replicates, 20),
            L=min(self.L, 200),
            iters=max(self.iters // 2, 4),
            warmup=max(self.warmup // 2, 2),
        )

    def sampler_config(self, seed: int) -> glm.SamplerConfig:
        # trajectory time 2.4: the intercept/term-mean trade needs long
        # paths before the cell means decorrelate
        return glm.SamplerConfig(
            chains=self.chains, iters=self.iters, warmup=self.warmup, seed=seed,
            traj_time=2.4,
        )


@dataclass(frozen=True)
class Population:
    """Realized finite population with the truth needed for scoring."""

    za: np.ndarray
    zb: np.ndarray
    zc: np.ndarray
    x: np.ndarray        # 0/1
    y: np.ndarray        # 0/1
    z_cat: np.ndarray    # 1..M
    joint: np.ndarray    # 1..J, with X varying fastest within Z-cell
    frame: CellFrame
    true_counts: np.ndarray   # (J,) realized joint-cell sizes
    true_y_sums: np.ndarray   # (J,) realized outcome totals per joint cell

    @property
    def N(self) -> int:
        return self.za.size

    @property
    def overall_mean(self) -> float:
        return float(self.y.mean())


def _normalized_probs(rng: np.random.Generator, k: int) -> np.ndarray:
    u = rng.uniform(0.25, 1.0, size=k)
    return u / u.sum()


def _x_logit(za, zb, zc, case: str) -> np.ndarray:
    eta = (BETA_0 + np.asarray(BETA_ZA)[za - 1] + np.asarray(BETA_ZB)[zb - 1]
           + np.asarray(BETA_ZC)[zc - 1])
    if case == "int":
        at2 = zc == 2
        eta = eta + np.where(at2, np.asarray(BETA_ZA_ZC)[za - 1], 0.0)
        eta = eta + np.where(at2, np.asarray(BETA_ZB_ZC)[zb - 1], 0.0)
    return eta


def _y_logit(za, zb, zc, x) -> np.ndarray:
    return (ALPHA_0 + np.asarray(ALPHA_ZA)[za - 1] + np.asarray(ALPHA_ZB)[zb - 1]
            + np.asarray(ALPHA_ZC)[zc - 1] + np.asarray(ALPHA_X)[x])


def generate_population(config: SimConfig, rng: np.random.Generator) -> Population:
    """Draw one finite population; retried until every Z-cell is occupied."""
    N = config.population_size
    for _ in range(10):
        pa = _normalized_probs(rng, N_ZA)
        pb = _normalized_probs(rng, N_ZB)
        pc = _normalized_probs(rng, N_ZC)
        za = rng.choice(N_ZA, size=N, p=pa) + 1
        zb = rng.choice(N_ZB, size=N, p=pb) + 1
        zc = rng.choice(N_ZC, size=N, p=pc) + 1
        # cross-tabulation index with Z_a varying fastest (array-flattening
        # order of the three-way table); the inclusion bands attach to this
        # index, so it fixes which covariate patterns are under-sampled
        z_cat = ((zc - 1) * N_ZB + (zb - 1)) * N_ZA + za
        margins = np.bincount(z_cat, minlength=N_ZCELLS + 1)[1:]
        if np.all(margins > 0):
            break
    else:
        raise EstimationError("could not populate every Z-cell in 10 attempts")
    x = (rng.uniform(size=N) < expit(_x_logit(za, zb, zc, config.case))).astype(int)
    y = (rng.uniform(size=N) < expit(_y_logit(za, zb, zc, x))).astype(int)
    frame = build_cell_frame(margins.astype(float), C=2)
    joint = (z_cat - 1) * 2 + x + 1
    true_counts = np.bincount(joint, minlength=frame.J + 1)[1:].astype(float)
    true_y_sums = np.bincount(joint, weights=y, minlength=frame.J + 1)[1:]
    return Population(za=za, zb=zb, zc=zc, x=x, y=y, z_cat=z_cat, joint=joint,
                      frame=frame, true_counts=true_counts, true_y_sums=true_y_sums)


def assign_inclusion(rng: np.random.Generator) -> np.ndarray:
    """Per-Z-cell inclusion probabilities drawn from the banded design."""
    parts = []
    for count, lo, hi in INCLUSION_BANDS:
        n_grid = int(round((hi - lo) / INCLUSION_GRID_STEP)) + 1
        grid = np.linspace(lo, hi, n_grid)
        parts.append(rng.choice(grid, size=count, replace=True))
    return np.concatenate(parts)


def define_subgroups(inclusion: np.ndarray) -> list[SubgroupDef]:
    """Four overlapping 20-cell subgroups from inclusion-rank windows.

    Z-cells are ranked by inclusion probability (ties broken by cell
    index); windows cover ranks 1-20, 11-30, 21-40, and 31-50.  Within
    each window the member cells, taken in cell-index order, contribute
    one joint cell apiece: the first block gets X=0 and the rest X=1
    (groups 1, 2, 4 split 5/15; group 3 splits 15/5).
    """
    inclusion = np.asarray(inclusion, dtype=float)
    if inclusion.size != N_ZCELLS:
        raise ValidationError(f"expected {N_ZCELLS} inclusion probabilities")
    order = np.argsort(inclusion, kind="stable")   # 0-based Z-cell indices
    windows = [order[0:20], order[10:30], order[20:40], order[30:50]]
    n_x0 = (5, 5, 15, 5)
    out = []
    for g, (window, k0) in enumerate(zip(windows, n_x0), start=1):
        members = np.sort(window)
        levels = np.where(np.arange(20) < k0, 1, 2)   # joint c level: 1 is X=0
        cells = members * 2 + levels                   # 1-based joint index
        out.append(SubgroupDef(name=f"group{g}", cells=tuple(int(j) for j in cells)))
    return out


def subgroup_truths(pop: Population, subgroups: list[SubgroupDef]) -> dict[str, float]:
    """Realized population means, overall and per subgroup."""
    truths = {"overall": pop.overall_mean}
    for sg in subgroups:
        mask = sg.mask(pop.frame.J)
        total = pop.true_counts[mask].sum()
        if total <= 0:
            raise EstimationError(f"{sg.name} has no population units")
        truths[sg.name] = float(pop.true_y_sums[mask].sum() / total)
    return truths


def draw_sample(
    pop: Population,
    inclusion: np.ndarray,
    rng: np.random.Generator,
    max_redraws: int = MAX_SAMPLE_REDRAWS,
) -> tuple[WeightedSample, int]:
    """Bernoulli sample with base weights; redraws while a Z-cell is empty."""
    pi = np.asarray(inclusion, dtype=float)
    if pi.size != pop.frame.M:
        raise ValidationError("inclusion vector does not match the frame")
    if np.all(pi <= 0):
        raise ValidationError("all inclusion probabilities are zero")
    unit_pi = pi[pop.z_cat - 1]
    for redraw in range(max_redraws + 1):
        take = rng.uniform(size=pop.N) < unit_pi
        if not np.any(take):
            continue
        sample = WeightedSample(
            z_cat=pop.z_cat[take], x=pop.x[take] + 1, y=pop.y[take],
        )
        try:
            weight = construct_base_weights(sample, pop.frame)
        except EmptyCellError:
            continue
        return sample.with_weight(weight), redraw
    raise EmptyCellError(0)


def _decode_z_cat(m: np.ndarray):
    # inverse of the Z_a-fastest encode in generate_population
    za = (m - 1) % N_ZA + 1
    zb = (m - 1) // N_ZA % N_ZB + 1
    zc = (m - 1) // (N_ZA * N_ZB) + 1
    return za, zb, zc


def _factor_levels_joint(frame: CellFrame):
    """Level maps for (Za, Zb, Zc, X) over the J joint cells."""
    za, zb, zc = _decode_z_cat(frame.joint_z())
    return za, zb, zc, frame.joint_x()


def _factor_levels_z(M: int):
    """Level maps for (Za, Zb, Zc) over the M Z-cells."""
    return _decode_z_cat(np.arange(1, M + 1))


# Study fits use the centered parameterization: thousands of units per
# factor level make the posterior data-dominated, where the non-centered
# form turns into a ridge that static HMC cannot traverse (cell-mean ESS
# drops below 20 at the default settings).
def _outcome_spec(frame: CellFrame, prior_scale: float, with_x: bool) -> glm.ModelSpec:
    za, zb, zc, xl = _factor_levels_joint(frame)
    terms = [
        glm.FactorTerm("za", N_ZA, za),
        glm.FactorTerm("zb", N_ZB, zb),
        glm.FactorTerm("zc", N_ZC, zc),
    ]
    if with_x:
        terms.append(glm.FactorTerm("x", 2, xl))
    return glm.ModelSpec(terms=tuple(terms), n_cells=frame.J,
                         prior_scale=prior_scale, centered=True)


def _stage1_spec(M: int, prior_scale: float) -> glm.ModelSpec:
    za, zb, zc = _factor_levels_z(M)
    terms = (
        glm.FactorTerm("za", N_ZA, za),
        glm.FactorTerm("zb", N_ZB, zb),
        glm.FactorTerm("zc", N_ZC, zc),
    )
    return glm.ModelSpec(terms=terms, n_cells=M, prior_scale=prior_scale,
                         centered=True)


def run_replicate(
    pop: Population,
    inclusion: np.ndarray,
    subgroups: list[SubgroupDef],
    config: SimConfig,
    seed_seq: np.random.SeedSequence,
) -> dict:
    """One sample drawn and pushed through all five estimators."""
    children = seed_seq.spawn(8)
    rng_sample = np.random.default_rng(children[0])
    rng_wfpbb = np.random.default_rng(children[1])
    rng_multi = np.random.default_rng(children[2])
    rng_two = np.random.default_rng(children[3])
    pair_rngs = {name: np.random.default_rng(children[4 + i])
                 for i, name in enumerate(("wfpbb-mrp", "multinomial-mrp", "twostage-mrp"))}
    fit_seeds = [int(s) for s in children[7].generate_state(3)]

    frame = pop.frame
    sample, redraws = draw_sample(pop, inclusion, rng_sample)

    outcome_data = glm.cell_data_from_units(sample.joint_cells(frame), sample.y, frame.J)
    fit_y = glm.sample(_outcome_spec(frame, config.prior_scale, with_x=True),
                       outcome_data, config.sampler_config(fit_seeds[0]))
    fit_blind = glm.sample(_outcome_spec(frame, config.prior_scale, with_x=False),
                           outcome_data, config.sampler_config(fit_seeds[1]))
    stage1_data = glm.cell_data_from_units(sample.z_cat, (sample.x == 2).astype(int),
                                           frame.M)
    fit_stage1 = glm.sample(_stage1_spec(frame.M, config.prior_scale),
                            stage1_data, config.sampler_config(fit_seeds[2]))

    theta = glm.cell_means(fit_y)
    theta_blind = glm.cell_means(fit_blind)
    stage1_p = glm.cell_means(fit_stage1)

    # Keep paired streams the same length so index pairing is exact even
    # when the sampler retains more draws than L.
    n_pair = min(config.L, theta.S)
    theta_pair = CellMeanDraws(means=theta.means[:n_pair])

    pops = wfpbb_populations(sample, frame, L=config.L, rng=rng_wfpbb, F=config.F,
                             include_y=True, clamp_nonnegative=True)
    counts_w = counts_from_populations(pops, frame.N)
    counts_m = counts_multinomial(sample, frame, config.L, rng_multi)
    counts_t = counts_twostage(frame, stage1_p.means[:config.L],
                               rng=rng_two if config.binomial_allocation else None,
                               binomial_draws=config.binomial_allocation)

    # Poststratification counts for the X-blind estimator: Z margins split
    # evenly over the X levels, which the per-Z-cell sums cancel out.
    blind_counts = np.repeat(frame.margins / frame.C, frame.C)

    estimates: dict[str, list[EstimateSummary]] = {
        "wfpbb": wfpbb_direct_estimate(pops, subgroups),
        "wfpbb-mrp": emrp_estimate(counts_w, theta_pair, subgroups,
                                   rng=pair_rngs["wfpbb-mrp"], method="wfpbb-mrp"),
        "multinomial-mrp": emrp_estimate(counts_m, theta_pair, subgroups,
                                         rng=pair_rngs["multinomial-mrp"],
                                         method="multinomial-mrp"),
        "twostage-mrp": emrp_estimate(counts_t, theta_pair, subgroups,
                                      rng=pair_rngs["twostage-mrp"],
                                      method="twostage-mrp"),
        "mrp": mrp_estimate(blind_counts, theta_blind, subgroups),
    }
    count_scores = {
        "wfpbb": score_counts(counts_w.counts, pop.true_counts),
        "multinomial": score_counts(counts_m.counts, pop.true_counts),
        "twostage": score_counts(counts_t.counts, pop.true_counts),
    }
    fit_warnings = tuple(w for f in (fit_y, fit_blind, fit_stage1) for w in f.warnings)
    return {
        "estimates": estimates,
        "count_scores": count_scores,
        "redraws": redraws,
        "fit_warnings": fit_warnings,
        "sample_size": sample.n,
    }


def score_counts(count_draws: np.ndarray, true_counts: np.ndarray) -> dict:
    """Per-cell point estimates and 95% intervals from one replicate's draws."""
    draws = np.asarray(count_draws, dtype=float)
    truth = np.asarray(true_counts, dtype=float)
    if draws.ndim != 2 or draws.shape[1] != truth.size:
        raise ValidationError("count draws and truth must cover the same cells")
    point = draws.mean(axis=0)
    lo, hi = np.percentile(draws, [2.5, 97.5], axis=0)
    return {
        "point": point,
        "lo": lo,
        "hi": hi,
        "error": point - truth,
        "covered": (lo <= truth) & (truth <= hi),
        "degenerate": np.isclose(lo, hi),
    }


def _replicate_task(args):
    pop, inclusion, subgroups, config, seed_seq, index = args
    try:
        return index, run_replicate(pop, inclusion, subgroups, config, seed_seq), None
    except Exception as exc:   # logged by the caller, counted against the abort cap
        return index, None, f"{type(exc).__name__}: {exc}"


@dataclass(frozen=True)
class StudyResult:
    """Aggregated repeated-sampling metrics."""

    config: SimConfig
    truths: dict[str, float]
    rows: tuple[dict, ...]         # per (method, estimand) metrics
    count_rows: tuple[dict, ...]   # per (count method, cell) metrics
    n_replicates: int
    failures: tuple[str, ...]
    total_redraws: int
    fit_warning_count: int
    mean_sample_size: float
    elapsed_seconds: float

    def metric(self, method: str, estimand: str) -> dict:
        for row in self.rows:
            if row["method"] == method and row["estimand"] == estimand:
                return row
        raise KeyError((method, estimand))

    def write_results_csv(self, path) -> None:
        header = "method,estimand,truth,bias,rmse,ci_length,coverage,n_replicates"
        lines = [header]
        for row in self.rows:
            lines.append(",".join([
                row["method"], row["estimand"], repr(row["truth"]),
                repr(row["bias"]), repr(row["rmse"]), repr(row["ci_length"]),
                repr(row["coverage"]), str(row["n_replicates"]),
            ]))
        _atomic_write_text(path, "\n".join(lines) + "\n")

    def write_counts_csv(self, path) -> None:
        header = "method,cell,true_count,bias,rmse,ci_length,coverage"
        lines = [header]
        for row in self.count_rows:
            lines.append(",".join([
                row["method"], str(row["cell"]), repr(row["true_count"]),
                repr(row["bias"]), repr(row["rmse"]), repr(row["ci_length"]),
                repr(row["coverage"]),
            ]))
        _atomic_write_text(path, "\n".join(lines) + "\n")


def _atomic_write_text(path, text: str) -> None:
    import os
    import tempfile

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _aggregate_estimates(results: list[dict], truths: dict[str, float],
                         estimands: list[str]) -> list[dict]:
    rows = []
    for method in ESTIMATE_METHODS:
        for estimand in estimands:
            truth = truths[estimand]
            summaries = []
            for res in results:
                for s in res["estimates"][method]:
                    if s.estimand == estimand:
                        summaries.append(s)
            est = np.array([s.estimate for s in summaries])
            lo = np.array([s.ci_lower for s in summaries])
            hi = np.array([s.ci_upper for s in summaries])
            rows.append({
                "method": method,
                "estimand": estimand,
                "truth": truth,
                "bias": float((est - truth).mean()),
                "rmse": float(np.sqrt(((est - truth) ** 2).mean())),
                "ci_length": float((hi - lo).mean()),
                "coverage": float(((lo <= truth) & (truth <= hi)).mean()),
                "n_replicates": len(summaries),
            })
    return rows


def _aggregate_counts(results: list[dict], true_counts: np.ndarray) -> list[dict]:
    rows = []
    for method in COUNT_METHODS:
        err = np.stack([r["count_scores"][method]["error"] for r in results])
        lo = np.stack([r["count_scores"][method]["lo"] for r in results])
        hi = np.stack([r["count_scores"][method]["hi"] for r in results])
        cov = np.stack([r["count_scores"][method]["covered"] for r in results])
        for j in range(true_counts.size):
            rows.append({
                "method": method,
                "cell": j + 1,
                "true_count": float(true_counts[j]),
                "bias": float(err[:, j].mean()),
                "rmse": float(np.sqrt((err[:, j] ** 2).mean())),
                "ci_length": float((hi[:, j] - lo[:, j]).mean()),
                "coverage": float(cov[:, j].mean()),
            })
    return rows


def run_study(config: SimConfig, log=None) -> StudyResult:
    """Full repeated-sampling comparison under one master seed."""
    t0 = time.monotonic()
    root = np.random.SeedSequence(config.seed)
    pop_ss, incl_ss, rep_root = root.spawn(3)
    pop = generate_population(config, np.random.default_rng(pop_ss))
    inclusion = assign_inclusion(np.random.default_rng(incl_ss))
    subgroups = define_subgroups(inclusion)
    truths = subgroup_truths(pop, subgroups)
    estimands = ["overall"] + [sg.name for sg in subgroups]

    rep_seeds = rep_root.spawn(config.replicates)
    tasks = [(pop, inclusion, subgroups, config, rep_seeds[i], i)
             for i in range(config.replicates)]
    outcomes = []
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            for outcome in pool.map(_replicate_task, tasks):
                outcomes.append(outcome)
                _log_progress(log, outcomes, config)
    else:
        for task in tasks:
            outcomes.append(_replicate_task(task))
            _log_progress(log, outcomes, config)

    results = [res for _, res, err in outcomes if err is None]
    failures = tuple(f"replicate {i}: {err}" for i, _, err in outcomes
                     if err is not None)
    if len(failures) > MAX_FAILURE_FRACTION * config.replicates:
        raise EstimationError(
            f"{len(failures)} of {config.replicates} replicates failed "
            f"(limit {MAX_FAILURE_FRACTION:.0%}): {failures[0]}"
        )
    rows = _aggregate_estimates(results, truths, estimands)
    count_rows = _aggregate_counts(results, pop.true_counts)
    return StudyResult(
        config=config,
        truths=truths,
        rows=tuple(rows),
        count_rows=tuple(count_rows),
        n_replicates=len(results),
        failures=failures,
        total_redraws=sum(r["redraws"] for r in results),
        fit_warning_count=sum(len(r["fit_warnings"]) for r in results),
        mean_sample_size=float(np.mean([r["sample_size"] for r in results])),
        elapsed_seconds=time.monotonic() - t0,
    )


def _log_progress(log, outcomes, config):
    if log is None:
        return
    done = len(outcomes)
    if done % 10 == 0 or done == config.replicates:
        failed = sum(1 for _, _, err in outcomes if err is not None)
        log(f"replicates {done}/{config.replicates} ({failed} failed)")


# ---------------------------------------------------------------------------
# Disk cache.  Full studies take tens of minutes; repeated test and script
# invocations reuse results keyed by the exact configuration.
# ---------------------------------------------------------------------------

def study_cache_key(config: SimConfig) -> str:
    import hashlib
    import json

    from . import __version__

    payload = json.dumps(dataclasses.asdict(config), sort_keys=True)
    return hashlib.sha256(f"{__version__}|{payload}".encode()).hexdigest()


def run_study_cached(config: SimConfig, cache_dir, log=None) -> StudyResult:
    """run_study with a JSON disk cache keyed by config and package version."""
    import json
    import os

    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(
        cache_dir, f"study-{config.case}-{study_cache_key(config)[:16]}.json")
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            blob = json.load(fh)
        return StudyResult(
            config=config,
            truths=blob["truths"],
            rows=tuple(blob["rows"]),
            count_rows=tuple(blob["count_rows"]),
            n_replicates=blob["n_replicates"],
            failures=tuple(blob["failures"]),
            total_redraws=blob["total_redraws"],
            fit_warning_count=blob["fit_warning_count"],
            mean_sample_size=blob["mean_sample_size"],
            elapsed_seconds=blob["elapsed_seconds"],
        )
    result = run_study(config, log=log)
    blob = {
        "config": dataclasses.asdict(config),
        "truths": result.truths,
        "rows": list(result.rows),
        "count_rows": list(result.count_rows),
        "n_replicates": result.n_replicates,
        "failures": list(result.failures),
        "total_redraws": result.total_redraws,
        "fit_warning_count": result.fit_warning_count,
        "mean_sample_size": result.mean_sample_size,
        "elapsed_seconds": result.elapsed_seconds,
    }
    _atomic_write_text(path, json.dumps(blob) + "\n")
    return result
