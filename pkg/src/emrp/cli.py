"""Command-line interface.

Three subcommands:

  simulate   repeated-sampling study -> results.csv, counts_metrics.csv
  estimate   one dataset, one method -> estimates JSON
  plot       render results.csv grids or estimate-JSON interval plots

Configuration files are plain ``key = value`` lines with ``#`` comments.
Repeated ``subgroup <name> = <predicate>`` lines declare subgroups as
conjunctions of comparisons over declared factor columns, e.g.
``subgroup poor_visitor = x == 2 & income in {1, 2}``.  The ``z_factors``
key documents how z_cat was encoded (first factor varies slowest):
``z_factors = age:3, sex:2, race:3, educ:4, income:4``.

Exit codes: 0 success, 2 user or config error, 3 data-condition error,
4 internal failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from . import bayes_glm as glm
from .data_model import (
    EmptyCellError,
    EmrpError,
    EstimationError,
    SubgroupDef,
    UnsupportedError,
    UrnUnderflowError,
    ValidationError,
    build_cell_frame,
    collapse_empty_cells,
    construct_base_weights,
    read_margins_csv,
    read_sample_csv,
    sample_cell_counts,
    sample_from_columns,
)
from .estimators import (
    emrp_estimate,
    mrp_estimate,
    unweighted_estimate,
    wfpbb_direct_estimate,
    write_estimates_json,
)
from .simulation import SimConfig, run_study
from .synthpop import (
    counts_from_populations,
    counts_multinomial,
    counts_twostage,
    wfpbb_populations,
)

ESTIMATE_METHODS = ("wfpbb", "wfpbb-mrp", "multinomial-mrp", "twostage-mrp",
                    "mrp", "unweighted")

_KEY_RE = re.compile(r"^[a-z][a-z0-9_]*$")
_NAME_RE = re.compile(r"^[a-z][a-z0-9_]*$")
_CMP_RE = re.compile(r"^\s*([a-z][a-z0-9_]*)\s*(==|!=|<=|>=|<|>)\s*(-?\d+)\s*$")
_IN_RE = re.compile(r"^\s*([a-z][a-z0-9_]*)\s+in\s+\{([^{}]*)\}\s*$")


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

def parse_config(path) -> dict:
    """Parse a key-value config; subgroup lines accumulate in order."""
    result: dict = {"subgroups": []}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key.startswith("subgroup"):
                name = key[len("subgroup"):].strip()
                if not _NAME_RE.match(name):
                    raise ValidationError(
                        f"{path}:{lineno}: bad subgroup name {name!r}")
                if any(n == name for n, _ in result["subgroups"]):
                    raise ValidationError(f"{path}:{lineno}: duplicate subgroup {name!r}")
                result["subgroups"].append((name, value))
                continue
            if not _KEY_RE.match(key):
                raise ValidationError(f"{path}:{lineno}: bad key {key!r}")
            if key in result:
                raise ValidationError(f"{path}:{lineno}: duplicate key {key!r}")
            result[key] = value
    return result


def _as_int(cfg: dict, key: str, default=None):
    if key not in cfg or cfg[key] is None:
        return default
    try:
        return int(str(cfg[key]))
    except ValueError:
        raise ValidationError(f"config key {key!r} must be an integer, got {cfg[key]!r}")


def _as_float(cfg: dict, key: str, default=None):
    if key not in cfg or cfg[key] is None:
        return default
    try:
        return float(str(cfg[key]))
    except ValueError:
        raise ValidationError(f"config key {key!r} must be a number, got {cfg[key]!r}")


def _as_bool(cfg: dict, key: str, default=False):
    if key not in cfg or cfg[key] is None:
        return default
    text = str(cfg[key]).strip().lower()
    if text in ("true", "yes", "1", "on"):
        return True
    if text in ("false", "no", "0", "off"):
        return False
    raise ValidationError(f"config key {key!r} must be a boolean, got {cfg[key]!r}")


def parse_z_factors(text: str) -> list[tuple[str, int]]:
    """Parse 'name:size, ...' declarations; order fixes the z_cat radix."""
    factors = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if ":" not in token:
            raise ValidationError(f"z_factors entry {token!r} must be name:size")
        name, _, size_text = token.partition(":")
        name = name.strip()
        if not _NAME_RE.match(name) or name == "x":
            raise ValidationError(f"bad factor name {name!r} in z_factors")
        try:
            size = int(size_text.strip())
        except ValueError:
            raise ValidationError(f"factor {name!r} size must be an integer")
        if size < 1:
            raise ValidationError(f"factor {name!r} size must be >= 1")
        if any(n == name for n, _ in factors):
            raise ValidationError(f"duplicate factor {name!r} in z_factors")
        factors.append((name, size))
    if not factors:
        raise ValidationError("z_factors declares no factors")
    return factors


def decode_factors(M: int, factors: list[tuple[str, int]]) -> dict[str, np.ndarray]:
    """1-based level arrays per factor for Z-cells 1..M (last name fastest)."""
    sizes = int(np.prod([s for _, s in factors]))
    if sizes != M:
        raise ValidationError(
            f"z_factors sizes multiply to {sizes}, but there are {M} Z-cells")
    rem = np.arange(M)
    out = {}
    for name, size in reversed(factors):
        out[name] = rem % size + 1
        rem = rem // size
    return out


def _cell_table(frame, factors: list[tuple[str, int]] | None) -> dict[str, np.ndarray]:
    """Per-joint-cell columns available to predicates and model terms."""
    z = frame.joint_z()
    table = {"z_cat": z, "x": frame.joint_x()}
    if factors:
        for name, levels in decode_factors(frame.M, factors).items():
            table[name] = levels[z - 1]
    return table


def eval_predicate(expr: str, table: dict[str, np.ndarray], where: str) -> np.ndarray:
    """Boolean mask over cells for a conjunction of comparisons."""
    size = next(iter(table.values())).size
    mask = np.ones(size, dtype=bool)
    for part in expr.split("&"):
        matched = _CMP_RE.match(part)
        if matched:
            name, op, value_text = matched.groups()
            values = {"==": np.equal, "!=": np.not_equal, "<=": np.less_equal,
                      ">=": np.greater_equal, "<": np.less, ">": np.greater}
            if name not in table:
                raise ValidationError(
                    f"{where}: unknown column {name!r} in subgroup predicate")
            mask &= values[op](table[name], int(value_text))
            continue
        matched = _IN_RE.match(part)
        if matched:
            name, body = matched.groups()
            if name not in table:
                raise ValidationError(
                    f"{where}: unknown column {name!r} in subgroup predicate")
            try:
                members = [int(v) for v in body.split(",") if v.strip()]
            except ValueError:
                raise ValidationError(f"{where}: non-integer value in {{...}}")
            if not members:
                raise ValidationError(f"{where}: empty set in predicate")
            mask &= np.isin(table[name], members)
            continue
        raise ValidationError(f"{where}: cannot parse predicate clause {part.strip()!r}")
    return mask


def build_subgroups(cfg: dict, frame, factors) -> list[SubgroupDef]:
    table = _cell_table(frame, factors)
    out = []
    for name, expr in cfg.get("subgroups", []):
        mask = eval_predicate(expr, table, f"subgroup {name}")
        cells = np.nonzero(mask)[0] + 1
        if cells.size == 0:
            raise ValidationError(f"subgroup {name}: predicate selects no cells")
        out.append(SubgroupDef(name=name, cells=tuple(int(j) for j in cells)))
    return out


def build_terms(text: str, frame, factors) -> tuple[glm.FactorTerm, ...]:
    """Translate 'a, b, x, x:b' into factor terms over the joint cells."""
    table = _cell_table(frame, factors)
    sizes = {name: size for name, size in (factors or [])}
    sizes["x"] = frame.C
    terms = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        parts = [p.strip() for p in token.split(":")]
        levels = None
        n_levels = 1
        for part in parts:
            if part not in sizes:
                raise ValidationError(f"model term {token!r}: unknown factor {part!r}")
            part_levels = table[part]
            levels = (part_levels if levels is None
                      else (levels - 1) * sizes[part] + part_levels)
            n_levels *= sizes[part]
        terms.append(glm.FactorTerm(name=token, n_levels=n_levels, levels=levels))
    if not terms:
        raise ValidationError("model_terms declares no terms")
    return tuple(terms)


def _stage1_terms(text: str, M: int, factors) -> tuple[glm.FactorTerm, ...]:
    """Demographic main effects only, over the M Z-cells."""
    if not factors:
        raise ValidationError("twostage-mrp requires z_factors to build the stage-1 model")
    decoded = decode_factors(M, factors)
    wanted = [t.strip() for t in text.split(",")
              if t.strip() and ":" not in t and t.strip() != "x"]
    if not wanted:
        raise ValidationError("twostage-mrp needs at least one demographic main effect")
    sizes = dict(factors)
    return tuple(glm.FactorTerm(name=n, n_levels=sizes[n], levels=decoded[n])
                 for n in wanted)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    ).hexdigest()


def write_manifest(path, command: str, config: dict, seed, stages: dict,
                   warnings: list[str], outputs: list[str], started: float) -> None:
    finished = time.time()
    payload = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "version": __version__,
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "finished": datetime.fromtimestamp(finished, timezone.utc).isoformat(),
        "duration_seconds": finished - started,
        "stage_durations": stages,
        "warnings": warnings,
        "outputs": outputs,
    }
    _atomic_write(path, json.dumps(payload, indent=2) + "\n")


def _atomic_write(path, text: str) -> None:
    import tempfile

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _resolve_threads(flag_value, cfg: dict) -> int:
    if flag_value is not None:
        return flag_value
    if "threads" in cfg:
        return _as_int(cfg, "threads")
    env = os.environ.get("EMRP_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"EMRP_THREADS must be an integer, got {env!r}")
    return 1


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    started = time.time()
    cfg = parse_config(args.config) if args.config else {"subgroups": []}
    case = args.case or cfg.get("case")
    if case is None:
        raise ValidationError("missing config key 'case' (or pass --case)")
    sim = SimConfig(
        case=str(case),
        population_size=_as_int(cfg, "population_size", 10_000),
        replicates=args.replicates if args.replicates is not None
        else _as_int(cfg, "replicates", 200),
        L=args.L if args.L is not None else _as_int(cfg, "l", 1000),
        F=args.F if args.F is not None else _as_int(cfg, "f", 20),
        chains=args.chains if args.chains is not None else _as_int(cfg, "chains", 2),
        iters=args.iters if args.iters is not None else _as_int(cfg, "iters", 2000),
        warmup=args.warmup if args.warmup is not None else _as_int(cfg, "warmup", 1500),
        prior_scale=args.prior_scale if args.prior_scale is not None
        else _as_float(cfg, "prior_scale", 1.0),
        binomial_allocation=_as_bool(cfg, "binomial_allocation", False),
        seed=args.seed if args.seed is not None else _as_int(cfg, "seed", 0),
        threads=_resolve_threads(args.threads, cfg),
    )
    if args.smoke or _as_bool(cfg, "smoke", False):
        sim = sim.with_smoke()

    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)

    def log(message):
        print(message, file=sys.stderr, flush=True)

    t_study = time.time()
    result = run_study(sim, log=log)
    study_seconds = time.time() - t_study

    results_path = os.path.join(out_dir, "results.csv")
    counts_path = os.path.join(out_dir, "counts_metrics.csv")
    result.write_results_csv(results_path)
    result.write_counts_csv(counts_path)

    warnings = list(result.failures)
    if result.fit_warning_count:
        warnings.append(f"{result.fit_warning_count} sampler warnings across replicates")
    resolved = {f.name: getattr(sim, f.name) for f in sim.__dataclass_fields__.values()}
    write_manifest(
        os.path.join(out_dir, "manifest.json"), "simulate", resolved, sim.seed,
        {"study": study_seconds}, warnings,
        [results_path, counts_path], started,
    )
    print(f"{result.n_replicates} replicates, mean sample size "
          f"{result.mean_sample_size:.0f}, {len(result.failures)} failures, "
          f"{result.elapsed_seconds:.1f}s")
    return 0


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------

def _load_sample(cfg: dict, args):
    sample_path = args.sample or cfg.get("sample")
    if not sample_path:
        raise ValidationError("missing config key 'sample' (or pass --sample)")
    hotdeck = args.impute_hotdeck or cfg.get("impute_hotdeck")
    if not hotdeck:
        return read_sample_csv(sample_path), sample_path
    names = [c.strip() for c in str(hotdeck).split(",") if c.strip()]
    cols = read_sample_csv(sample_path, allow_missing=True)
    rng = np.random.default_rng(np.random.SeedSequence(
        [args.seed if args.seed is not None else _as_int(cfg, "seed", 0), 0x1d]))
    for name in names:
        if name not in cols:
            raise ValidationError(f"impute_hotdeck: no column {name!r} in sample file")
        values = cols[name]
        observed = [v for v in values if v is not None]
        if not observed:
            raise ValidationError(f"impute_hotdeck: column {name!r} has no observed values")
        for i, v in enumerate(values):
            if v is None:
                values[i] = observed[int(rng.integers(len(observed)))]
    return sample_from_columns(cols), sample_path


def cmd_estimate(args) -> int:
    started = time.time()
    cfg = parse_config(args.config) if args.config else {"subgroups": []}
    method = args.method or cfg.get("method")
    if method is None:
        raise ValidationError("missing config key 'method' (or pass --method)")
    if method not in ESTIMATE_METHODS:
        raise ValidationError(
            f"unknown method {method!r}; choose from {', '.join(ESTIMATE_METHODS)}")
    seed = args.seed if args.seed is not None else _as_int(cfg, "seed", 0)
    out_path = args.out or cfg.get("out", "estimates.json")
    factors = (parse_z_factors(str(cfg["z_factors"]))
               if "z_factors" in cfg else None)
    stages: dict[str, float] = {}
    warnings: list[str] = []

    t0 = time.time()
    sample, sample_path = _load_sample(cfg, args)
    stages["read"] = time.time() - t0

    if method == "unweighted":
        summaries = _estimate_unweighted(cfg, sample, factors)
    else:
        summaries = _estimate_model_based(cfg, args, sample, factors, method,
                                          seed, stages, warnings)

    t0 = time.time()
    write_estimates_json(summaries, out_path)
    stages["write"] = time.time() - t0

    resolved = dict(cfg)
    resolved["subgroups"] = dict(cfg.get("subgroups", []))
    resolved.update({"method": method, "seed": seed, "sample": str(sample_path),
                     "out": str(out_path)})
    write_manifest(
        os.path.join(os.path.dirname(os.path.abspath(out_path)), "manifest.json"),
        "estimate", resolved, seed, stages, warnings, [str(out_path)], started)
    for s in summaries:
        print(f"{s.method} {s.estimand}: {s.estimate:.4f} "
              f"[{s.ci_lower:.4f}, {s.ci_upper:.4f}]")
    return 0


def _estimate_unweighted(cfg, sample, factors):
    """Raw proportions; subgroup predicates evaluated per unit via its cells."""
    subgroup_units = {}
    if cfg.get("subgroups"):
        table = {"z_cat": sample.z_cat, "x": sample.x}
        if factors:
            M = int(np.prod([s for _, s in factors]))
            if sample.z_cat.max() > M:
                raise ValidationError("sample z_cat exceeds the declared z_factors space")
            decoded = decode_factors(M, factors)
            for name, levels in decoded.items():
                table[name] = levels[sample.z_cat - 1]
        for name, expr in cfg["subgroups"]:
            mask = eval_predicate(expr, table, f"subgroup {name}")
            subgroup_units[name] = np.nonzero(mask)[0]
    return unweighted_estimate(sample, subgroup_units)


def _estimate_model_based(cfg, args, sample, factors, method, seed, stages, warnings):
    margins_path = args.margins or cfg.get("margins")
    if not margins_path:
        raise ValidationError("missing config key 'margins' (or pass --margins)")
    raw_margins = read_margins_csv(margins_path)
    C = _as_int(cfg, "x_levels", int(sample.x.max()))
    if method == "mrp":
        # For pure poststratification the margins file holds joint-cell counts.
        if raw_margins.size % C:
            raise ValidationError(
                f"{margins_path}: {raw_margins.size} joint counts do not divide "
                f"into {C} x-levels")
        joint_counts = raw_margins
        frame = build_cell_frame(raw_margins.reshape(-1, C).sum(axis=1), C=C)
    else:
        joint_counts = None
        frame = build_cell_frame(raw_margins, C=C)
    if sample.z_cat.max() > frame.M:
        raise ValidationError("sample z_cat exceeds the margins file")
    if sample.x.max() > C:
        raise ValidationError("sample x exceeds the declared x_levels")

    # Routes that lean on per-cell sample composition need every nonempty
    # margin cell observed; model-based routes can predict into the gaps.
    needs_full_cover = method in ("wfpbb", "wfpbb-mrp", "multinomial-mrp")
    n_z = sample_cell_counts(sample, frame)
    empty = (frame.margins > 0) & (n_z == 0)
    if needs_full_cover and np.any(empty):
        if args.collapse_empty or _as_bool(cfg, "collapse_empty", False):
            frame = collapse_empty_cells(frame, sample)
        else:
            raise EmptyCellError(int(np.nonzero(empty)[0][0]) + 1)

    L = args.L if args.L is not None else _as_int(cfg, "l", 1000)
    F = args.F if args.F is not None else _as_int(cfg, "f", 20)
    T = args.T if args.T is not None else _as_int(cfg, "t", None)
    pop_draw_size = None if T is None else T * sample.n
    clamp = _as_bool(cfg, "clamp", False)
    ss = np.random.SeedSequence(seed)
    seeds = ss.spawn(6)
    traj_time = _as_float(cfg, "traj_time", 0.8)
    centered = _as_bool(cfg, "centered", False)
    sampler = glm.SamplerConfig(
        chains=args.chains if args.chains is not None else _as_int(cfg, "chains", 2),
        iters=args.iters if args.iters is not None else _as_int(cfg, "iters", 2000),
        warmup=args.warmup if args.warmup is not None else _as_int(cfg, "warmup", 1500),
        seed=int(seeds[0].generate_state(1)[0]),
        traj_time=traj_time,
    )
    prior_scale = (args.prior_scale if args.prior_scale is not None
                   else _as_float(cfg, "prior_scale", 1.0))
    subgroups = build_subgroups(cfg, frame, factors)

    if sample.weight is not None:
        weighted = sample
    elif method in ("wfpbb", "wfpbb-mrp"):
        weighted = sample.with_weight(construct_base_weights(sample, frame))
    else:
        weighted = sample

    if method == "wfpbb":
        t0 = time.time()
        pops = wfpbb_populations(weighted, frame, L=L,
                                 rng=np.random.default_rng(seeds[1]), F=F,
                                 pop_draw_size=pop_draw_size, include_y=True,
                                 clamp_nonnegative=clamp)
        stages["counts"] = time.time() - t0
        return wfpbb_direct_estimate(pops, subgroups)

    if "model_terms" not in cfg:
        raise ValidationError(f"method {method!r} requires config key 'model_terms'")
    spec = glm.ModelSpec(terms=build_terms(str(cfg["model_terms"]), frame, factors),
                         n_cells=frame.J, prior_scale=prior_scale, centered=centered)
    data = glm.cell_data_from_units(sample.joint_cells(frame), sample.y, frame.J)
    t0 = time.time()
    fit = glm.sample(spec, data, sampler)
    stages["fit"] = time.time() - t0
    warnings.extend(fit.warnings)
    theta = glm.cell_means(fit)

    if method == "mrp":
        return mrp_estimate(joint_counts, theta, subgroups)

    t0 = time.time()
    if method == "wfpbb-mrp":
        pops = wfpbb_populations(weighted, frame, L=L,
                                 rng=np.random.default_rng(seeds[1]), F=F,
                                 pop_draw_size=pop_draw_size, include_y=False,
                                 clamp_nonnegative=clamp)
        counts = counts_from_populations(pops, frame.N)
    elif method == "multinomial-mrp":
        counts = counts_multinomial(sample, frame, L,
                                    np.random.default_rng(seeds[2]))
    else:
        stage1_spec = glm.ModelSpec(
            terms=_stage1_terms(str(cfg["model_terms"]), frame.M, factors),
            n_cells=frame.M, prior_scale=prior_scale, centered=centered)
        stage1_data = glm.cell_data_from_units(
            sample.z_cat, (sample.x == 2).astype(int), frame.M)
        stage1_sampler = glm.SamplerConfig(
            chains=sampler.chains, iters=sampler.iters, warmup=sampler.warmup,
            seed=int(seeds[3].generate_state(1)[0]), traj_time=traj_time)
        stage1_fit = glm.sample(stage1_spec, stage1_data, stage1_sampler)
        warnings.extend(stage1_fit.warnings)
        binomial = _as_bool(cfg, "binomial_allocation", False)
        counts = counts_twostage(frame, glm.cell_means(stage1_fit).means[:L],
                                 rng=np.random.default_rng(seeds[4]) if binomial else None,
                                 binomial_draws=binomial)
    stages["counts"] = time.time() - t0
    return emrp_estimate(counts, theta, subgroups,
                         rng=np.random.default_rng(seeds[5]), method=method)


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------

def _read_results_csv(path) -> list[dict]:
    import csv as _csv

    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = _csv.DictReader(fh)
        required = {"method", "estimand", "bias", "rmse", "ci_length", "coverage"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValidationError(
                f"{path}: results file must have columns {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append({
                    "method": row["method"],
                    "estimand": row["estimand"],
                    "bias": float(row["bias"]),
                    "rmse": float(row["rmse"]),
                    "ci_length": float(row["ci_length"]),
                    "coverage": float(row["coverage"]),
                })
            except (TypeError, ValueError):
                raise ValidationError(f"{path}:{lineno}: non-numeric metric value")
    if not rows:
        raise ValidationError(f"{path}: no result rows to plot")
    return rows


def _unique_keep_order(items):
    seen = []
    for item in items:
        if item not in seen:
            seen.append(item)
    return seen


def _plot_metric_grids(rows, out_dir) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    methods = _unique_keep_order([r["method"] for r in rows])
    estimands = _unique_keep_order([r["estimand"] for r in rows])
    lookup = {(r["method"], r["estimand"]): r for r in rows}
    paths = []
    for metric in ("bias", "rmse", "ci_length", "coverage"):
        grid = np.full((len(methods), len(estimands)), np.nan)
        for i, method in enumerate(methods):
            for j, estimand in enumerate(estimands):
                row = lookup.get((method, estimand))
                if row is not None:
                    grid[i, j] = row[metric]
        fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(estimands),
                                        1.2 + 0.6 * len(methods)))
        shown = np.abs(grid) if metric in ("bias",) else grid
        im = ax.imshow(shown, cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(estimands)), estimands, rotation=30, ha="right")
        ax.set_yticks(range(len(methods)), methods)
        for i in range(len(methods)):
            for j in range(len(estimands)):
                if np.isfinite(grid[i, j]):
                    ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center",
                            color="white", fontsize=8)
        ax.set_title(metric)
        fig.colorbar(im, ax=ax, shrink=0.8)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{metric}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def _plot_intervals(path, out_dir) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(path, "r", encoding="utf-8") as fh:
        try:
            records = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})")
    if not isinstance(records, list) or not records:
        raise ValidationError(f"{path}: expected a nonempty JSON array of estimates")
    for rec in records:
        for key in ("method", "estimand", "estimate", "ci_lower", "ci_upper"):
            if key not in rec:
                raise ValidationError(f"{path}: estimate record missing {key!r}")
    methods = _unique_keep_order([r["method"] for r in records])
    estimands = _unique_keep_order([r["estimand"] for r in records])
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(estimands), 4.0))
    width = 0.8 / max(len(methods), 1)
    for k, method in enumerate(methods):
        xs, ys, lo, hi = [], [], [], []
        for j, estimand in enumerate(estimands):
            for rec in records:
                if rec["method"] == method and rec["estimand"] == estimand:
                    xs.append(j + (k - (len(methods) - 1) / 2) * width)
                    ys.append(rec["estimate"])
                    lo.append(rec["estimate"] - rec["ci_lower"])
                    hi.append(rec["ci_upper"] - rec["estimate"])
        if xs:
            ax.errorbar(xs, ys, yerr=[lo, hi], fmt="o", capsize=3, label=method)
    ax.set_xticks(range(len(estimands)), estimands, rotation=30, ha="right")
    ax.set_ylabel("estimate")
    ax.legend(fontsize=8)
    fig.tight_layout()
    out = os.path.join(out_dir, "intervals.png")
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return [out]


def cmd_plot(args) -> int:
    started = time.time()
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    if str(args.input).endswith(".json"):
        paths = _plot_intervals(args.input, out_dir)
    else:
        rows = _read_results_csv(args.input)
        paths = _plot_metric_grids(rows, out_dir)
    write_manifest(os.path.join(out_dir, "manifest.json"), "plot",
                   {"input": str(args.input), "out_dir": str(out_dir)}, None,
                   {"plot": time.time() - started}, [], paths, started)
    for path in paths:
        print(path)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _add_common_model_flags(sub):
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--threads", type=int, default=None)
    sub.add_argument("--chains", type=int, default=None)
    sub.add_argument("--iters", type=int, default=None)
    sub.add_argument("--warmup", type=int, default=None)
    sub.add_argument("--L", type=int, default=None, dest="L")
    sub.add_argument("--F", type=int, default=None, dest="F")
    sub.add_argument("--prior-scale", type=float, default=None, dest="prior_scale")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emrp",
        description="Population and subgroup estimation from nonprobability "
                    "samples with estimated poststratification counts.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the repeated-sampling study")
    sim.add_argument("config", nargs="?", default=None)
    sim.add_argument("--case", choices=("main", "int"), default=None)
    sim.add_argument("--replicates", type=int, default=None)
    sim.add_argument("--smoke", action="store_true",
                     help="reduced profile: fewer replicates, draws, iterations")
    sim.add_argument("--out-dir", default=".", dest="out_dir")
    _add_common_model_flags(sim)
    sim.set_defaults(func=cmd_simulate)

    est = sub.add_parser("estimate", help="estimate from a sample CSV")
    est.add_argument("config", nargs="?", default=None)
    est.add_argument("--sample", default=None)
    est.add_argument("--margins", default=None)
    est.add_argument("--method", choices=ESTIMATE_METHODS, default=None)
    est.add_argument("--out", default=None)
    est.add_argument("--T", type=int, default=None, dest="T",
                     help="synthetic population size multiplier (T * n)")
    est.add_argument("--collapse-empty", action="store_true", dest="collapse_empty",
                     help="merge unsampled cell margins into sampled neighbors")
    est.add_argument("--impute-hotdeck", default=None, dest="impute_hotdeck",
                     metavar="COLS",
                     help="comma-separated columns to fill from observed values")
    _add_common_model_flags(est)
    est.set_defaults(func=cmd_estimate)

    plot = sub.add_parser("plot", help="render results.csv or estimates JSON")
    plot.add_argument("input")
    plot.add_argument("--out-dir", default=".", dest="out_dir")
    plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EmptyCellError, UrnUnderflowError, UnsupportedError, EstimationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EmrpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # keep unexpected failures distinguishable
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
