import dataclasses

import numpy as np
import pytest

from emrp import simulation as sim
from emrp.data_model import (
    EmptyCellError,
    EstimateSummary,
    EstimationError,
    SubgroupDef,
    ValidationError,
    build_cell_frame,
)
from emrp.simulation import (
    SimConfig,
    assign_inclusion,
    define_subgroups,
    draw_sample,
    generate_population,
    run_replicate,
    run_study,
    run_study_cached,
    score_counts,
    study_cache_key,
    subgroup_truths,
)

# Small-but-complete profile: full population, trivial MCMC and draw counts.
TINY = SimConfig(case="main", replicates=2, L=24, F=2, iters=40, warmup=20, seed=3)


def make_population(seed=0, case="main"):
    """Population + inclusion built the same way run_study builds them."""
    cfg = SimConfig(case=case)
    root = np.random.SeedSequence(seed)
    pop_ss, incl_ss, _ = root.spawn(3)
    pop = generate_population(cfg, np.random.default_rng(pop_ss))
    inclusion = assign_inclusion(np.random.default_rng(incl_ss))
    return pop, inclusion


class TestSimConfig:
    def test_full_profile_defaults(self):
        cfg = SimConfig()
        assert cfg.case == "main"
        assert cfg.population_size == 10_000
        assert cfg.replicates == 200
        assert cfg.L == 1000 and cfg.F == 20
        assert cfg.chains == 2 and cfg.iters == 2000 and cfg.warmup == 1500
        assert cfg.kept_draws == 1000

    def test_validation(self):
        with pytest.raises(ValidationError):
            SimConfig(case="other")
        with pytest.raises(ValidationError):
            SimConfig(replicates=0)
        with pytest.raises(ValidationError):
            SimConfig(L=1)
        with pytest.raises(ValidationError):
            SimConfig(F=0)
        with pytest.raises(ValidationError):
            SimConfig(iters=100, warmup=100)
        with pytest.raises(ValidationError):
            SimConfig(threads=0)
        with pytest.raises(ValidationError):
            SimConfig(population_size=49)

    def test_smoke_profile_shrinks(self):
        smoke = SimConfig().with_smoke()
        assert smoke.replicates == 20
        assert smoke.L == 200
        assert smoke.iters == 1000 and smoke.warmup == 750
        # already-small settings are left alone
        assert TINY.with_smoke().replicates == 2
        assert TINY.with_smoke().L == 24

    def test_sampler_config_passthrough(self):
        sc = SimConfig(chains=3, iters=500, warmup=100).sampler_config(77)
        assert (sc.chains, sc.iters, sc.warmup, sc.seed) == (3, 500, 100, 77)


class TestGeneratePopulation:
    def test_postconditions(self):
        pop, _ = make_population(seed=0)
        assert pop.N == 10_000
        assert pop.za.min() >= 1 and pop.za.max() <= 5
        assert pop.zb.min() >= 1 and pop.zb.max() <= 5
        assert pop.zc.min() >= 1 and pop.zc.max() <= 2
        assert set(np.unique(pop.x)) <= {0, 1}
        assert set(np.unique(pop.y)) <= {0, 1}
        assert pop.frame.M == 50 and pop.frame.J == 100
        assert np.all(pop.frame.margins > 0)
        counted = np.bincount(pop.z_cat, minlength=51)[1:]
        assert np.array_equal(pop.frame.margins, counted.astype(float))
        assert np.array_equal(pop.joint, (pop.z_cat - 1) * 2 + pop.x + 1)
        assert pop.true_counts.sum() == pop.N
        assert np.all(pop.true_y_sums <= pop.true_counts)
        assert pop.overall_mean == pytest.approx(pop.y.mean(), rel=1e-12)

    def test_z_cat_encodes_za_fastest(self):
        pop, _ = make_population(seed=1)
        expect = ((pop.zc - 1) * 5 + (pop.zb - 1)) * 5 + pop.za
        assert np.array_equal(pop.z_cat, expect)

    def test_zero_coefficients_give_half_rates(self, monkeypatch):
        for name in ("BETA_0", "ALPHA_0"):
            monkeypatch.setattr(sim, name, 0.0)
        for name in ("BETA_ZA", "BETA_ZB", "ALPHA_ZA", "ALPHA_ZB"):
            monkeypatch.setattr(sim, name, (0.0,) * 5)
        for name in ("BETA_ZC", "ALPHA_ZC", "ALPHA_X"):
            monkeypatch.setattr(sim, name, (0.0, 0.0))
        pop = generate_population(SimConfig(), np.random.default_rng(5))
        se3 = 3 * 0.5 / np.sqrt(pop.N)
        assert abs(pop.x.mean() - 0.5) < se3
        assert abs(pop.y.mean() - 0.5) < se3

    def test_main_and_int_share_z_but_not_x(self):
        rng_main = np.random.default_rng(11)
        rng_int = np.random.default_rng(11)
        pop_main = generate_population(SimConfig(case="main"), rng_main)
        pop_int = generate_population(SimConfig(case="int"), rng_int)
        assert np.array_equal(pop_main.z_cat, pop_int.z_cat)
        assert np.array_equal(pop_main.frame.margins, pop_int.frame.margins)
        assert np.any(pop_main.x != pop_int.x)

    def test_interactions_apply_only_at_zc2(self):
        za = np.arange(1, 6)
        zb = np.ones(5, dtype=int)
        at1_main = sim._x_logit(za, zb, np.ones(5, dtype=int), "main")
        at1_int = sim._x_logit(za, zb, np.ones(5, dtype=int), "int")
        assert np.array_equal(at1_main, at1_int)
        at2_main = sim._x_logit(za, zb, np.full(5, 2), "main")
        at2_int = sim._x_logit(za, zb, np.full(5, 2), "int")
        assert np.allclose(at2_int - at2_main, sim.BETA_ZA_ZC)

    def test_design_coefficients(self):
        assert sim.BETA_ZA == (1.7, 0.25, 0.2, -0.75, -1.7)
        assert sim.BETA_ZB == (2.3, 1.5, 0.15, 0.2, 0.9)
        assert sim.ALPHA_ZA == (1.37, -0.56, 0.36, 0.63, 0.40)
        assert sim.ALPHA_ZB == (-0.11, 1.51, -0.09, 2.02, -0.06)
        assert sim.BETA_ZB_ZC == (0.0, 1.7, 0.1, 2.0, -0.75)
        assert len(sim.INCLUSION_BANDS) == 5
        assert sum(b[0] for b in sim.INCLUSION_BANDS) == 50


class TestAssignInclusion:
    def test_band_windows(self):
        pi = assign_inclusion(np.random.default_rng(2))
        assert pi.shape == (50,)
        assert np.all((0.01 <= pi[0:5]) & (pi[0:5] <= 0.10))
        assert np.all((0.11 <= pi[5:20]) & (pi[5:20] <= 0.40))
        assert np.all((0.21 <= pi[20:40]) & (pi[20:40] <= 0.60))
        assert np.all((0.51 <= pi[40:45]) & (pi[40:45] <= 0.80))
        assert np.all((0.80 <= pi[45:50]) & (pi[45:50] <= 0.99))
        # cells named in the design table
        assert 0.01 <= pi[2] <= 0.10
        assert 0.80 <= pi[47] <= 0.99

    def test_values_on_hundredths_grid(self):
        pi = assign_inclusion(np.random.default_rng(3))
        assert np.allclose(np.round(pi * 100), pi * 100, atol=1e-9)

    def test_expected_sample_size_near_design_value(self):
        # mean of margins @ pi over 50 population/inclusion realizations
        totals = []
        for s in range(50):
            pop, pi = make_population(seed=s)
            totals.append(pop.frame.margins @ pi)
        mean = float(np.mean(totals))
        assert abs(mean - 4104) / 4104 < 0.05


class TestDefineSubgroups:
    def test_window_structure(self):
        _, pi = make_population(seed=4)
        groups = define_subgroups(pi)
        assert [g.name for g in groups] == ["group1", "group2", "group3", "group4"]
        zsets = []
        for g in groups:
            cells = np.array(g.cells)
            assert cells.size == 20
            assert cells.min() >= 1 and cells.max() <= 100
            zsets.append(set((cells - 1) // 2))
        assert all(len(z) == 20 for z in zsets)
        assert zsets[0].isdisjoint(zsets[3])
        assert zsets[0].isdisjoint(zsets[2])
        assert len(zsets[0] & zsets[1]) == 10
        assert len(zsets[1] & zsets[2]) == 10

    def test_x_composition(self):
        _, pi = make_population(seed=4)
        groups = define_subgroups(pi)
        n_x0 = [sum(1 for c in g.cells if (c - 1) % 2 == 0) for g in groups]
        assert n_x0 == [5, 5, 15, 5]

    def test_cells_follow_rank_windows(self):
        _, pi = make_population(seed=6)
        groups = define_subgroups(pi)
        order = np.argsort(pi, kind="stable")
        for g, (start, k0) in zip(groups, ((0, 5), (10, 5), (20, 15), (30, 5))):
            members = np.sort(order[start:start + 20])
            levels = np.where(np.arange(20) < k0, 1, 2)
            assert np.array_equal(np.array(g.cells), members * 2 + levels)

    def test_wrong_size_raises(self):
        with pytest.raises(ValidationError):
            define_subgroups(np.full(10, 0.5))

    def test_subgroup_sizes_grow_with_inclusion_rank(self):
        # windows slide toward higher inclusion, so expected subgroup unit
        # totals (all units whose Z-cell is in the window) must increase
        sums = np.zeros(4)
        for s in range(30):
            pop, pi = make_population(seed=s)
            for g, sg in enumerate(define_subgroups(pi)):
                zcells = np.unique((np.array(sg.cells) - 1) // 2)
                sums[g] += pop.frame.margins[zcells] @ pi[zcells]
        means = sums / 30
        assert np.all(np.diff(means) > 0)
        # realized design magnitudes: same order as (988, 1101, 1365, 2016)
        assert np.all(means > np.array([988, 1101, 1365, 2016]) / 2)
        assert np.all(means < np.array([988, 1101, 1365, 2016]) * 2)


class TestSubgroupTruths:
    def test_partition_identity(self):
        pop, pi = make_population(seed=7)
        assert pop.true_y_sums.sum() / pop.N == pop.overall_mean
        occupied = pop.true_counts > 0
        theta = pop.true_y_sums[occupied] / pop.true_counts[occupied]
        recombined = (pop.true_counts[occupied] * theta).sum() / pop.N
        assert recombined == pytest.approx(pop.overall_mean, rel=1e-12)

    def test_matches_unit_level_recount(self):
        pop, pi = make_population(seed=8)
        groups = define_subgroups(pi)
        truths = subgroup_truths(pop, groups)
        assert truths["overall"] == pop.overall_mean
        for sg in groups:
            in_group = np.isin(pop.joint, sg.cells)
            assert truths[sg.name] == pytest.approx(pop.y[in_group].mean(), rel=1e-12)

    def test_empty_subgroup_raises(self):
        frame = build_cell_frame(np.array([2.0, 1.0]), C=2)
        arr = np.array([1, 1, 0])
        pop = sim.Population(
            za=arr, zb=arr, zc=arr, x=np.array([0, 0, 0]), y=np.array([1, 0, 1]),
            z_cat=np.array([1, 1, 2]), joint=np.array([1, 1, 3]), frame=frame,
            true_counts=np.array([2.0, 0.0, 1.0, 0.0]),
            true_y_sums=np.array([1.0, 0.0, 1.0, 0.0]),
        )
        with pytest.raises(EstimationError):
            subgroup_truths(pop, [SubgroupDef(name="empty", cells=(2,))])


class TestDrawSample:
    def test_census_inclusion_returns_population(self):
        pop, _ = make_population(seed=9)
        sample, redraws = draw_sample(pop, np.ones(50), np.random.default_rng(0))
        assert redraws == 0
        assert sample.n == pop.N
        assert np.array_equal(sample.z_cat, pop.z_cat)
        assert np.array_equal(sample.x, pop.x + 1)
        assert np.array_equal(sample.y, pop.y)
        assert np.all(sample.weight == 1.0)

    def test_zero_inclusion_raises(self):
        pop, _ = make_population(seed=9)
        with pytest.raises(ValidationError):
            draw_sample(pop, np.zeros(50), np.random.default_rng(0))

    def test_wrong_length_raises(self):
        pop, _ = make_population(seed=9)
        with pytest.raises(ValidationError):
            draw_sample(pop, np.full(10, 0.5), np.random.default_rng(0))

    def test_blocked_cell_exhausts_redraws(self):
        pop, pi = make_population(seed=9)
        blocked = pi.copy()
        blocked[0] = 0.0   # margin > 0 but never sampled
        with pytest.raises(EmptyCellError):
            draw_sample(pop, blocked, np.random.default_rng(0), max_redraws=2)

    def test_weights_expand_to_margins(self):
        pop, pi = make_population(seed=10)
        sample, _ = draw_sample(pop, pi, np.random.default_rng(1))
        for m in (1, 25, 50):
            in_cell = sample.z_cat == m
            assert sample.weight[in_cell].sum() == pytest.approx(
                pop.frame.margins[m - 1], rel=1e-9)


class TestScoreCounts:
    def test_constant_at_truth_is_degenerate(self):
        truth = np.array([3.0, 7.0, 0.0])
        scores = score_counts(np.tile(truth, (5, 1)), truth)
        assert np.array_equal(scores["error"], np.zeros(3))
        assert scores["covered"].all()
        assert scores["degenerate"].all()

    def test_single_cell_counts_are_exact(self):
        from emrp.synthpop import counts_multinomial
        from emrp.data_model import WeightedSample

        frame = build_cell_frame(np.array([6.0]), C=1)
        sample = WeightedSample(
            z_cat=np.array([1, 1]), x=np.array([1, 1]), y=np.array([0, 1]),
            weight=np.array([3.0, 3.0]),
        )
        draws = counts_multinomial(sample, frame, 8, np.random.default_rng(0))
        scores = score_counts(draws.counts, np.array([6.0]))
        assert np.array_equal(scores["error"], np.zeros(1))
        assert scores["degenerate"].all()

    def test_hand_metrics(self):
        draws = np.array([[0.0, 10.0], [10.0, 0.0], [5.0, 5.0]])
        scores = score_counts(draws, np.array([5.0, 5.0]))
        assert np.array_equal(scores["point"], np.array([5.0, 5.0]))
        assert np.array_equal(scores["error"], np.zeros(2))
        assert scores["covered"].all()
        assert not scores["degenerate"].any()

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValidationError):
            score_counts(np.zeros((5, 3)), np.zeros(4))
        with pytest.raises(ValidationError):
            score_counts(np.zeros(5), np.zeros(5))


def _summary(method, estimand, est, lo, hi):
    return EstimateSummary(method=method, estimand=estimand, estimate=est,
                           se=0.0, ci_lower=lo, ci_upper=hi, n_draws=4)


class TestAggregation:
    def test_estimate_metrics_recount(self):
        triples = [(0.4, 0.30, 0.45), (0.6, 0.45, 0.80), (0.5, 0.49, 0.51)]
        results = [
            {"estimates": {m: [_summary(m, "overall", *t)]
                           for m in sim.ESTIMATE_METHODS}}
            for t in triples
        ]
        rows = sim._aggregate_estimates(results, {"overall": 0.5}, ["overall"])
        assert len(rows) == len(sim.ESTIMATE_METHODS)
        est = np.array([t[0] for t in triples])
        lo = np.array([t[1] for t in triples])
        hi = np.array([t[2] for t in triples])
        for row in rows:
            assert row["n_replicates"] == 3
            assert row["bias"] == (est - 0.5).mean()
            assert row["rmse"] == pytest.approx(
                np.sqrt(((est - 0.5) ** 2).mean()), rel=1e-12)
            assert row["ci_length"] == pytest.approx((hi - lo).mean(), rel=1e-12)
            # coverage must equal the indicator recount bit for bit
            assert row["coverage"] == ((lo <= 0.5) & (0.5 <= hi)).mean()

    def test_count_metrics_recount(self):
        truth = np.array([4.0, 6.0])
        per_rep = [np.array([[3.0, 7.0], [5.0, 5.0]]),
                   np.array([[4.0, 8.0], [4.0, 8.0]])]
        results = [{"count_scores": {m: score_counts(d, truth)
                                     for m in sim.COUNT_METHODS}}
                   for d in per_rep]
        rows = sim._aggregate_counts(results, truth)
        assert len(rows) == len(sim.COUNT_METHODS) * 2
        first = rows[0]
        assert first["cell"] == 1 and first["true_count"] == 4.0
        assert first["bias"] == ((4.0 - 4.0) + (4.0 - 4.0)) / 2
        second = rows[1]
        assert second["bias"] == ((6.0 - 6.0) + (8.0 - 6.0)) / 2
        for row in rows:
            assert 0.0 <= row["coverage"] <= 1.0


class TestRunReplicate:
    def test_structure_and_determinism(self):
        pop, pi = make_population(seed=TINY.seed)
        groups = define_subgroups(pi)
        first = run_replicate(pop, pi, groups, TINY, np.random.SeedSequence(99))
        again = run_replicate(pop, pi, groups, TINY, np.random.SeedSequence(99))
        assert set(first["estimates"]) == set(sim.ESTIMATE_METHODS)
        names = ["overall", "group1", "group2", "group3", "group4"]
        for method, summaries in first["estimates"].items():
            assert [s.estimand for s in summaries] == names
            twin = again["estimates"][method]
            for a, b in zip(summaries, twin):
                assert a.estimate == b.estimate
                assert a.ci_lower == b.ci_lower and a.ci_upper == b.ci_upper
        assert set(first["count_scores"]) == set(sim.COUNT_METHODS)
        for method in sim.COUNT_METHODS:
            assert np.array_equal(first["count_scores"][method]["point"],
                                  again["count_scores"][method]["point"])
        assert first["sample_size"] == again["sample_size"] > 0
        assert first["redraws"] >= 0

    def test_run_study_aggregates_and_repeats(self):
        res1 = run_study(TINY)
        res2 = run_study(TINY)
        assert res1.n_replicates == TINY.replicates
        assert res1.failures == ()
        assert len(res1.rows) == len(sim.ESTIMATE_METHODS) * 5
        assert len(res1.count_rows) == len(sim.COUNT_METHODS) * 100
        assert res1.rows == res2.rows
        assert res1.truths == res2.truths
        assert res1.mean_sample_size > 0
        overall = res1.metric("wfpbb-mrp", "overall")
        assert 0.0 < overall["truth"] < 1.0
        assert overall["ci_length"] > 0
        # with two replicates every coverage is a multiple of one half
        assert all(row["coverage"] in (0.0, 0.5, 1.0) for row in res1.rows)
        with pytest.raises(KeyError):
            res1.metric("wfpbb-mrp", "group9")

    def test_study_aborts_when_replicates_fail(self, monkeypatch):
        def boom(*args, **kwargs):
            raise EstimationError("boom")

        monkeypatch.setattr(sim, "run_replicate", boom)
        with pytest.raises(EstimationError, match="replicates failed"):
            run_study(dataclasses.replace(TINY, replicates=3))


class TestStudyCacheAndCsv:
    def test_cache_key_depends_on_config(self):
        assert study_cache_key(TINY) == study_cache_key(SimConfig(
            case="main", replicates=2, L=24, F=2, iters=40, warmup=20, seed=3))
        assert study_cache_key(TINY) != study_cache_key(
            dataclasses.replace(TINY, replicates=3))

    def test_cached_run_roundtrip(self, tmp_path, monkeypatch):
        res = run_study_cached(TINY, tmp_path)
        files = list(tmp_path.glob("study-main-*.json"))
        assert len(files) == 1

        def fail(*args, **kwargs):
            raise AssertionError("cache miss")

        monkeypatch.setattr(sim, "run_study", fail)
        cached = run_study_cached(TINY, tmp_path)
        assert cached.rows == res.rows
        assert cached.truths == pytest.approx(res.truths)
        assert cached.n_replicates == res.n_replicates

    def test_csv_outputs(self, tmp_path):
        row = {"method": "mrp", "estimand": "overall", "truth": 0.5,
               "bias": 0.01, "rmse": 0.02, "ci_length": 0.1, "coverage": 0.95,
               "n_replicates": 2}
        crow = {"method": "wfpbb", "cell": 1, "true_count": 40.0, "bias": -1.0,
                "rmse": 2.0, "ci_length": 8.0, "coverage": 1.0}
        res = sim.StudyResult(
            config=TINY, truths={"overall": 0.5}, rows=(row,), count_rows=(crow,),
            n_replicates=2, failures=(), total_redraws=0, fit_warning_count=0,
            mean_sample_size=10.0, elapsed_seconds=0.1,
        )
        out = tmp_path / "results.csv"
        res.write_results_csv(out)
        res.write_results_csv(out)   # atomic replace over an existing file
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "method,estimand,truth,bias,rmse,ci_length,coverage,n_replicates"
        assert len(lines) == 2
        assert lines[1].startswith("mrp,overall,0.5,")
        cout = tmp_path / "counts.csv"
        res.write_counts_csv(cout)
        clines = cout.read_text().strip().split("\n")
        assert clines[0] == "method,cell,true_count,bias,rmse,ci_length,coverage"
        assert clines[1] == "wfpbb,1,40.0,-1.0,2.0,8.0,1.0"
