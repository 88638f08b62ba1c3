import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emrp.data_model import (
    UnsupportedError,
    UrnUnderflowError,
    ValidationError,
    WeightedSample,
    build_cell_frame,
)
from emrp.synthpop import (
    UrnState,
    bayesian_bootstrap,
    counts_from_populations,
    counts_multinomial,
    counts_twostage,
    counts_wfpbb,
    polya_draw_counts,
    polya_probs,
    recalibrate_weights,
    wfpbb_expand,
    wfpbb_populations,
)


class TestPolyaProbs:
    def test_first_draw_hand_values(self):
        # N=10, n=4, w=(3,3,2,2): reinforcement (N-n)/n = 1.5,
        # p_i = (w_i - 1) / (N - n) on the first draw
        urn = UrnState(
            weights=np.array([3.0, 3.0, 2.0, 2.0]),
            l_counts=np.zeros(4),
            k=1,
            N=10.0,
            n=4,
        )
        assert np.allclose(polya_probs(urn), [2 / 6, 2 / 6, 1 / 6, 1 / 6])

    def test_second_draw_reinforces_selected_unit(self):
        urn = UrnState(
            weights=np.array([3.0, 3.0, 2.0, 2.0]),
            l_counts=np.array([1.0, 0.0, 0.0, 0.0]),
            k=2,
            N=10.0,
            n=4,
        )
        expected = np.array([2 + 1.5, 2.0, 1.0, 1.0]) / 7.5
        assert np.allclose(polya_probs(urn), expected)

    def test_underflow_raises_with_unit_index(self):
        urn = UrnState(
            weights=np.array([0.5, 9.5]),
            l_counts=np.zeros(2),
            k=1,
            N=10.0,
            n=2,
        )
        with pytest.raises(UrnUnderflowError) as exc:
            polya_probs(urn)
        assert exc.value.unit == 0

    def test_clamp_mode_zeroes_negative_mass(self):
        urn = UrnState(
            weights=np.array([0.5, 9.5]),
            l_counts=np.zeros(2),
            k=1,
            N=10.0,
            n=2,
        )
        p = polya_probs(urn, clamp_nonnegative=True)
        assert p[0] == 0.0
        assert np.isclose(p.sum(), 1.0)

    @given(
        st.integers(min_value=2, max_value=8),
        st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_normalization_along_random_walks(self, n, seed):
        rng = np.random.default_rng(seed)
        weights = 1.0 + rng.gamma(2.0, 2.0, size=n)
        N = float(weights.sum())
        l_counts = np.zeros(n)
        for k in range(1, min(int(N - n), 12) + 1):
            urn = UrnState(weights=weights, l_counts=l_counts, k=k, N=N, n=n)
            p = polya_probs(urn)
            assert abs(p.sum() - 1.0) <= 1e-12
            l_counts[rng.choice(n, p=p)] += 1


class TestPolyaDrawCounts:
    def test_counts_sum_to_expansion_size(self):
        rng = np.random.default_rng(0)
        w = np.array([3.0, 3.0, 2.0, 2.0])
        counts = polya_draw_counts(w, 6, rng)
        assert counts.sum() == 6
        assert counts.shape == (4,)

    def test_batched_matches_sequential_in_distribution(self):
        # same urn, two sampling paths; compare first moments
        w = np.array([4.0, 3.0, 2.0, 2.0])
        reps = 3000
        draws = 7
        rng_b = np.random.default_rng(11)
        rng_s = np.random.default_rng(12)
        batched = np.array(
            [polya_draw_counts(w, draws, rng_b, batched=True) for _ in range(reps)]
        )
        sequential = np.array(
            [polya_draw_counts(w, draws, rng_s, batched=False) for _ in range(reps)]
        )
        # E[count_i] = draws * (w_i - 1) / sum(w - 1)
        expected = draws * (w - 1) / (w - 1).sum()
        se = batched.std(axis=0, ddof=1) / np.sqrt(reps)
        assert np.all(np.abs(batched.mean(axis=0) - expected) < 4 * se + 1e-9)
        assert np.all(np.abs(sequential.mean(axis=0) - expected) < 4 * se + 1e-9)
        # second moments agree between the two paths
        pooled_sd = np.sqrt(
            (batched.var(axis=0, ddof=1) + sequential.var(axis=0, ddof=1)) / reps
        )
        assert np.all(
            np.abs(batched.mean(axis=0) - sequential.mean(axis=0)) < 4 * pooled_sd
        )

    def test_zero_draws(self):
        rng = np.random.default_rng(0)
        counts = polya_draw_counts(np.array([3.0, 2.0]), 0, rng)
        assert counts.tolist() == [0, 0]


class TestRecalibration:
    def test_hand_example(self):
        w = np.array([4.0, 1.0])
        r = np.array([2.0, 0.0])
        assert recalibrate_weights(w, r, N=5.0).tolist() == [5.0, 0.0]

    def test_total_is_population_size(self):
        rng = np.random.default_rng(3)
        w = rng.uniform(1.0, 20.0, size=50)
        r = rng.multinomial(50, np.full(50, 1 / 50)).astype(float)
        out = recalibrate_weights(w, r, N=1234.0)
        assert np.isclose(out.sum(), 1234.0, rtol=1e-12)

    def test_identity_replicates_rescale_weights(self):
        w = np.array([2.0, 6.0])
        out = recalibrate_weights(w, np.ones(2), N=16.0)
        assert np.allclose(out, [4.0, 12.0])


class TestBayesianBootstrap:
    def test_counts_sum_to_n(self):
        rng = np.random.default_rng(0)
        s = WeightedSample(
            z_cat=np.ones(6, dtype=int), x=np.ones(6, dtype=int), y=np.zeros(6)
        )
        for _ in range(20):
            r = bayesian_bootstrap(s, rng)
            assert r.sum() == 6
            assert np.all(r >= 0)

    def test_uniform_mean(self):
        rng = np.random.default_rng(1)
        s = WeightedSample(
            z_cat=np.ones(8, dtype=int), x=np.ones(8, dtype=int), y=np.zeros(8)
        )
        total = np.zeros(8)
        reps = 20000
        for _ in range(reps):
            total += bayesian_bootstrap(s, rng)
        assert np.all(np.abs(total / reps - 1.0) < 0.05)


def two_cell_sample():
    # one unit per joint cell, weights 8 and 2, N = 10
    frame = build_cell_frame(np.array([8.0, 2.0]), C=1)
    sample = WeightedSample(
        z_cat=np.array([1, 2]),
        x=np.array([1, 1]),
        y=np.array([1.0, 0.0]),
        weight=np.array([8.0, 2.0]),
    )
    return frame, sample


class TestWfpbbExpand:
    def test_counts_sum_to_pooled_expansion(self):
        frame, sample = two_cell_sample()
        rng = np.random.default_rng(0)
        recal = recalibrate_weights(
            sample.weight, np.ones(2), N=frame.N
        )
        pop = wfpbb_expand(sample, recal, frame, F=5, pop_draw_size=8, rng=rng)
        assert pop.counts.sum() == 5 * 8
        assert pop.F == 5 and pop.pop_draw_size == 8

    def test_identity_replicates_center_on_weight_share(self):
        # with every replicate count at 1 the expansion is an exact
        # finite-population urn and E[count_i] equals the unit weight
        frame, sample = two_cell_sample()
        rng = np.random.default_rng(7)
        shares = []
        for _ in range(3000):
            pop = wfpbb_expand(
                sample, sample.weight, frame, F=2, pop_draw_size=8, rng=rng
            )
            shares.append(pop.counts[0] / pop.counts.sum())
        se = np.std(shares, ddof=1) / np.sqrt(len(shares))
        assert abs(np.mean(shares) - 0.8) < 4 * se + 1e-4

    def test_bootstrap_sample_included_in_population(self):
        # a synthetic population contains the replicate counts themselves:
        # with all urn mass on one unit the other still shows up r times
        frame = build_cell_frame(np.array([9.0, 1.0]), C=1)
        sample = WeightedSample(
            z_cat=np.array([1, 2]),
            x=np.array([1, 1]),
            y=np.zeros(2),
            weight=np.array([9.0, 1.0]),
        )
        rng = np.random.default_rng(0)
        pop = wfpbb_expand(
            sample, sample.weight, frame, F=3, pop_draw_size=9, rng=rng,
            clamp_nonnegative=True,
        )
        # unit 2 has zero urn mass after clamping, so its count is exactly
        # its replicate count in each of the 3 pooled expansions
        assert pop.counts[1] == 3.0
        assert pop.counts.sum() == 27.0

    def test_y_counts_partition_cell_counts(self):
        frame = build_cell_frame(np.array([20.0, 20.0]), C=1)
        sample = WeightedSample(
            z_cat=np.array([1, 1, 2, 2]),
            x=np.array([1, 1, 1, 1]),
            y=np.array([1.0, 0.0, 1.0, 1.0]),
            weight=np.array([10.0, 10.0, 10.0, 10.0]),
        )
        rng = np.random.default_rng(5)
        pops = wfpbb_populations(sample, frame, L=10, rng=rng, F=3, include_y=True)
        for pop in pops:
            assert pop.y_counts is not None
            assert np.all(pop.y_counts.sum(axis=1) == pop.counts)
            assert pop.y_counts.shape == (frame.J, 2)

    def test_underflow_without_clamp(self):
        frame = build_cell_frame(np.array([4.0, 2.0]), C=1)
        # weights below 1 after recalibration trip the urn
        sample = WeightedSample(
            z_cat=np.array([1, 2]),
            x=np.array([1, 1]),
            y=np.zeros(2),
            weight=np.array([5.5, 0.5]),
        )
        recal = np.array([5.5, 0.5])
        rng = np.random.default_rng(0)
        with pytest.raises(UrnUnderflowError):
            wfpbb_expand(sample, recal, frame, F=2, pop_draw_size=4, rng=rng)
        wfpbb_expand(
            sample, recal, frame, F=2, pop_draw_size=4, rng=rng,
            clamp_nonnegative=True,
        )


class TestCountConstructors:
    def test_counts_from_populations_normalizes_to_N(self):
        frame, sample = two_cell_sample()
        rng = np.random.default_rng(2)
        pops = wfpbb_populations(sample, frame, L=6, rng=rng, F=3)
        draws = counts_from_populations(pops, N=frame.N)
        assert draws.L == 6
        assert np.allclose(draws.counts.sum(axis=1), frame.N)

    def test_counts_wfpbb_deterministic_under_seed(self):
        frame, sample = two_cell_sample()
        a = counts_wfpbb(sample, frame, L=5, rng=np.random.default_rng(9), F=3)
        b = counts_wfpbb(sample, frame, L=5, rng=np.random.default_rng(9), F=3)
        assert np.array_equal(a.counts, b.counts)

    def test_multinomial_margin_consistency(self):
        frame = build_cell_frame(np.array([60.0, 40.0]), C=2)
        sample = WeightedSample(
            z_cat=np.array([1, 1, 1, 2, 2]),
            x=np.array([1, 1, 2, 1, 2]),
            y=np.zeros(5),
        )
        draws = counts_multinomial(sample, frame, 50, np.random.default_rng(4))
        assert draws.L == 50
        blocks = draws.counts.reshape(50, frame.M, frame.C).sum(axis=2)
        assert np.allclose(blocks, [60.0, 40.0])

    def test_multinomial_uses_within_cell_proportions(self):
        frame = build_cell_frame(np.array([1000.0]), C=2)
        # 3 of 4 sampled units have x=1
        sample = WeightedSample(
            z_cat=np.ones(4, dtype=int),
            x=np.array([1, 1, 1, 2]),
            y=np.zeros(4),
        )
        draws = counts_multinomial(sample, frame, 400, np.random.default_rng(8))
        assert abs(draws.counts[:, 0].mean() - 750.0) < 30.0

    def test_twostage_expected_allocation_hand_values(self):
        frame = build_cell_frame(np.array([10.0, 6.0]), C=2)
        stage1 = np.array([[0.3, 0.5]])   # Pr(x=2) per z-cell
        draws = counts_twostage(frame, stage1)
        assert draws.counts.tolist() == [[7.0, 3.0, 3.0, 3.0]]

    def test_twostage_binomial_allocation_margins(self):
        frame = build_cell_frame(np.array([30.0, 12.0]), C=2)
        stage1 = np.tile([[0.25, 0.75]], (40, 1))
        draws = counts_twostage(
            frame, stage1, rng=np.random.default_rng(1), binomial_draws=True
        )
        blocks = draws.counts.reshape(40, 2, 2).sum(axis=2)
        assert np.allclose(blocks, [30.0, 12.0])
        assert np.all(draws.counts == np.round(draws.counts))
        assert abs(draws.counts[:, 1].mean() - 30 * 0.25) < 2.0

    def test_twostage_binomial_requires_rng(self):
        frame = build_cell_frame(np.array([10.0]), C=2)
        with pytest.raises(ValidationError):
            counts_twostage(frame, np.array([[0.5]]), binomial_draws=True)

    def test_twostage_rejects_shape_mismatch(self):
        frame = build_cell_frame(np.array([10.0, 6.0]), C=2)
        with pytest.raises(ValidationError):
            counts_twostage(frame, np.array([[0.3]]))

    def test_twostage_rejects_more_than_two_x_levels(self):
        frame = build_cell_frame(np.array([10.0, 6.0]), C=3)
        with pytest.raises(UnsupportedError):
            counts_twostage(frame, np.array([[0.3, 0.5]]))

    @given(
        st.integers(min_value=1, max_value=4),
        st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=30, deadline=None)
    def test_twostage_margin_consistency_property(self, M, seed):
        rng = np.random.default_rng(seed)
        margins = rng.integers(5, 200, size=M).astype(float)
        frame = build_cell_frame(margins, C=2)
        stage1 = rng.uniform(0.05, 0.95, size=(6, M))
        draws = counts_twostage(frame, stage1)
        blocks = draws.counts.reshape(6, M, 2).sum(axis=2)
        assert np.allclose(blocks, margins, rtol=1e-12)
