import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptex.model import (
    ItemBank,
    LatentState,
    PriorSpec,
    ResponseRecord,
    grad_log_joint,
    irt_success_prob,
    log_joint,
    normal_logpdf,
    normalize_answer,
    sample_prior,
)

finite_logits = st.floats(min_value=-50, max_value=50, allow_nan=False)


class TestSuccessProb:
    def test_symmetry_point(self):
        assert irt_success_prob(0, 0) == 0.5

    def test_high_precision_values(self):
        # sigmoid(2) and its complement, evaluated independently
        assert irt_success_prob(2, 0) == pytest.approx(0.8807970779778823, abs=1e-9)
        assert irt_success_prob(0, 2) == pytest.approx(0.1192029220221176, abs=1e-9)

    @given(finite_logits, finite_logits)
    def test_antisymmetry(self, a, b):
        assert irt_success_prob(a, b) + irt_success_prob(b, a) == pytest.approx(1.0, abs=1e-12)

    @given(st.floats(min_value=-30, max_value=30, allow_nan=False))
    def test_monotone_in_ability(self, delta):
        # strict within the range where float64 sigmoid has not saturated
        probs = [irt_success_prob(t, delta) for t in (-1.0, 0.0, 1.0)]
        assert probs[0] < probs[1] < probs[2]

    def test_extreme_arguments_do_not_overflow(self):
        assert irt_success_prob(1000.0, 0.0) == 1.0
        assert irt_success_prob(-1000.0, 0.0) == 0.0

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            irt_success_prob(float("nan"), 0.0)
        with pytest.raises(ValueError):
            irt_success_prob(0.0, float("inf"))


class TestPriorAndRecords:
    def test_sd_must_be_positive(self):
        with pytest.raises(ValueError):
            PriorSpec(theta_sd=0.0)

    def test_record_validation(self):
        with pytest.raises(ValueError):
            ResponseRecord(0, 0, 2)
        with pytest.raises(ValueError):
            ResponseRecord(0, 0, 1, z=3)
        with pytest.raises(ValueError):
            ResponseRecord(0, 0, 1, duration_s=0.0)

    def test_latent_state_must_be_finite(self):
        with pytest.raises(ValueError):
            LatentState(theta=[math.inf], delta=[0.0], b=0.0)


class TestLogJoint:
    def test_empty_data_at_prior_modes(self, prior):
        state = LatentState(theta=np.zeros(2), delta=np.zeros(3), b=0.0)
        expected = (
            normal_logpdf(0.0, prior.b_mean, prior.b_sd)
            + 3 * normal_logpdf(0.0, 0.0, prior.delta_sd)
            + 2 * normal_logpdf(0.0, prior.theta_mean, prior.theta_sd)
        )
        assert log_joint(state, prior, []) == pytest.approx(float(expected), rel=1e-12)

    def test_single_record_at_equal_ability_difficulty(self, prior):
        state = LatentState(theta=[0.7], delta=[0.7], b=0.0)
        base = log_joint(state, prior, [])
        with_record = log_joint(state, prior, [ResponseRecord(0, 0, 1)])
        assert with_record - base == pytest.approx(math.log(0.5), abs=1e-12)

    def test_additive_in_records(self, prior, rng):
        state = LatentState(theta=rng.normal(0, 1, 3), delta=rng.normal(0, 1, 4), b=0.1)
        r1 = [ResponseRecord(0, 0, 1), ResponseRecord(1, 2, 0)]
        r2 = [ResponseRecord(2, 3, 1)]
        base = log_joint(state, prior, [])
        assert log_joint(state, prior, r1 + r2) - base == pytest.approx(
            (log_joint(state, prior, r1) - base) + (log_joint(state, prior, r2) - base), rel=1e-12
        )

    def test_duplicated_record_doubles_likelihood_term(self, prior):
        state = LatentState(theta=[0.4], delta=[-0.3], b=0.0)
        rec = ResponseRecord(0, 0, 1)
        base = log_joint(state, prior, [])
        one = log_joint(state, prior, [rec]) - base
        two = log_joint(state, prior, [rec, rec]) - base
        assert two == pytest.approx(2 * one, rel=1e-12)

    def test_bad_index_rejected(self, prior):
        state = LatentState(theta=[0.0], delta=[0.0], b=0.0)
        with pytest.raises(ValueError):
            log_joint(state, prior, [ResponseRecord(1, 0, 1)])
        with pytest.raises(ValueError):
            log_joint(state, prior, [ResponseRecord(0, 5, 1)])

    def test_concave_in_theta_coordinate(self, prior, rng):
        # finite-difference second derivative along theta_0 is nonpositive
        state = LatentState(theta=[0.3], delta=rng.normal(0, 1, 6), b=0.0)
        data = [ResponseRecord(0, j, int(rng.integers(2))) for j in range(6)]
        h = 1e-4

        def at(t):
            return log_joint(LatentState(theta=[t], delta=state.delta, b=0.0), prior, data)

        for t in rng.normal(0, 2, 10):
            second = (at(t + h) - 2 * at(t) + at(t - h)) / h**2
            assert second <= 1e-6


class TestGradients:
    def test_matches_central_finite_differences(self, prior):
        rng = np.random.default_rng(42)
        n_p, n_i = 4, 6
        seen = set()
        data = []
        for _ in range(30):
            i, j = int(rng.integers(n_p)), int(rng.integers(n_i))
            if (i, j) in seen:
                continue
            seen.add((i, j))
            data.append(ResponseRecord(i, j, int(rng.integers(2))))
        h = 1e-5
        for _ in range(10):
            state = LatentState(rng.normal(0, 1, n_p), rng.normal(0, 1, n_i), float(rng.normal()))
            g_theta, g_delta, g_b = grad_log_joint(state, prior, data)

            def rel(err, ref):
                return abs(err) / max(1e-8, abs(ref))

            for k in range(n_p):
                tp, tm = state.theta.copy(), state.theta.copy()
                tp[k] += h
                tm[k] -= h
                fd = (
                    log_joint(LatentState(tp, state.delta, state.b), prior, data)
                    - log_joint(LatentState(tm, state.delta, state.b), prior, data)
                ) / (2 * h)
                assert rel(fd - g_theta[k], fd) < 1e-4
            for k in range(n_i):
                dp, dm = state.delta.copy(), state.delta.copy()
                dp[k] += h
                dm[k] -= h
                fd = (
                    log_joint(LatentState(state.theta, dp, state.b), prior, data)
                    - log_joint(LatentState(state.theta, dm, state.b), prior, data)
                ) / (2 * h)
                assert rel(fd - g_delta[k], fd) < 1e-4
            fd = (
                log_joint(LatentState(state.theta, state.delta, state.b + h), prior, data)
                - log_joint(LatentState(state.theta, state.delta, state.b - h), prior, data)
            ) / (2 * h)
            assert rel(fd - g_b, fd) < 1e-4


class TestSamplePrior:
    def test_degenerate_prior_collapses_to_means(self):
        prior = PriorSpec(theta_mean=0.7, theta_sd=1e-12, delta_sd=1e-12, b_mean=-0.4, b_sd=1e-12)
        state = sample_prior(prior, 3, 2, np.random.default_rng(0))
        assert np.allclose(state.theta, 0.7, atol=1e-9)
        assert np.allclose(state.delta, -0.4, atol=1e-9)
        assert state.b == pytest.approx(-0.4, abs=1e-9)

    def test_law_of_large_numbers(self, prior):
        state = sample_prior(prior, 10**5, 1, np.random.default_rng(1))
        se = prior.theta_sd / math.sqrt(10**5)
        assert abs(state.theta.mean()) < 3 * se

    def test_seed_determinism(self, prior):
        a = sample_prior(prior, 10, 5, np.random.default_rng(3))
        b = sample_prior(prior, 10, 5, np.random.default_rng(3))
        assert np.array_equal(a.theta, b.theta)
        assert np.array_equal(a.delta, b.delta)
        assert a.b == b.b

    def test_counts_validated(self, prior):
        with pytest.raises(ValueError):
            sample_prior(prior, 0, 1, np.random.default_rng(0))


class TestItemBank:
    def test_normalization(self):
        assert normalize_answer("  Neil   ARMSTRONG ") == "neil armstrong"

    def test_csv_roundtrip(self, tmp_path):
        path = tmp_path / "items.csv"
        path.write_text(
            "item_id,prompt,accepted_answers\n"
            "0,Who was first on the Moon?,neil armstrong|armstrong\n"
            "1,Red planet?,mars\n",
            encoding="utf-8",
        )
        bank = ItemBank.from_csv(path)
        assert len(bank) == 2
        assert bank.grade(0, "  Neil ARMSTRONG ") == 1
        assert bank.grade(0, "Buzz Aldrin") == 0
        assert bank.grade(1, "MARS") == 1

    def test_invariants(self):
        from adaptex.model import Item

        with pytest.raises(ValueError):
            ItemBank(items=(Item(1, "q", ("a",)),))  # ids must start at 0
        with pytest.raises(ValueError):
            ItemBank(items=(Item(0, "", ("a",)),))
        with pytest.raises(ValueError):
            ItemBank(items=(Item(0, "q", ()),))

    def test_missing_columns_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("item_id,prompt\n0,q\n", encoding="utf-8")
        with pytest.raises(ValueError, match="accepted_answers"):
            ItemBank.from_csv(path)

    def test_bundled_sample(self):
        bank = ItemBank.bundled_sample()
        assert len(bank) == 15
        assert bank.grade(0, "neil armstrong") == 1
