import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptex.inference import BetaPosterior, GroupedTreatmentPosterior
from adaptex.objectives import DesignScore
from adaptex.policies import (
    PolicyDecision,
    StoppingConfig,
    exploration_sampling_weights,
    sample_arm,
    select_greedy_eig,
    select_min_efe,
    select_uniform_fixed,
    thompson_probabilities,
)


def scores_from_eigs(eigs, utility=0.0):
    return [DesignScore.from_parts(i, e, utility) for i, e in enumerate(eigs)]


class TestGreedySelection:
    def test_stops_below_threshold(self):
        decision = select_greedy_eig(scores_from_eigs([0.004]), StoppingConfig(0.005, 1), 3)
        assert decision.stopped

    def test_argmax(self):
        decision = select_greedy_eig(scores_from_eigs([0.1, 0.3, 0.2]), StoppingConfig(0.01, 1), 5)
        assert decision.chosen == 1

    def test_tie_breaks_lowest_id(self):
        decision = select_greedy_eig(scores_from_eigs([0.2, 0.2]), StoppingConfig(0.01, 1), 5)
        assert decision.chosen == 0

    def test_min_trials_defers_stopping(self):
        decision = select_greedy_eig(scores_from_eigs([0.001]), StoppingConfig(0.005, 2), 1)
        assert decision.chosen == 0

    def test_empty_candidates_stop(self):
        decision = select_greedy_eig([], StoppingConfig(0.01, 1), 0)
        assert decision.stopped and decision.scores == []

    @given(
        st.lists(st.floats(min_value=0, max_value=0.1, allow_nan=False), min_size=1, max_size=8),
        st.floats(min_value=0, max_value=0.1, allow_nan=False),
        st.floats(min_value=0, max_value=0.1, allow_nan=False),
    )
    def test_stopping_monotone_in_threshold(self, eigs, eps_low, eps_high):
        lo, hi = min(eps_low, eps_high), max(eps_low, eps_high)
        scores = scores_from_eigs(eigs)
        stop_lo = select_greedy_eig(scores, StoppingConfig(lo, 0), 1).stopped
        stop_hi = select_greedy_eig(scores, StoppingConfig(hi, 0), 1).stopped
        if stop_lo:
            assert stop_hi


class TestMinEfeSelection:
    def test_argmin(self):
        decision = select_min_efe(scores_from_eigs([0.3, 0.1]))
        assert decision.chosen == 0  # efe -0.3 < -0.1

    def test_all_positive_efe_stops_when_enabled(self):
        scores = [DesignScore.from_parts(0, 0.01, -0.05), DesignScore.from_parts(1, 0.02, -0.06)]
        assert select_min_efe(scores, allow_no_action=True).stopped
        assert not select_min_efe(scores, allow_no_action=False).stopped

    def test_no_action_wins_exact_ties(self):
        scores = [DesignScore.from_parts(0, 0.0, 0.0)]
        assert select_min_efe(scores, allow_no_action=True).stopped

    @given(st.lists(st.floats(min_value=-1, max_value=1, allow_nan=False), min_size=1, max_size=8))
    def test_agrees_with_greedy_when_utilities_zero(self, eigs):
        scores = scores_from_eigs(eigs)
        greedy = select_greedy_eig(scores, StoppingConfig(0.0, 0), 5)
        efe = select_min_efe(scores)
        assert greedy.chosen == efe.chosen or greedy.stopped


class TestThompson:
    def test_symmetric_arms_near_uniform(self):
        k, s = 4, 10**5
        p = thompson_probabilities([BetaPosterior(1, 1)] * k, s, np.random.default_rng(0))
        se = np.sqrt((1 / k) * (1 - 1 / k) / s)
        assert np.all(np.abs(p - 1 / k) < 3 * se + 1e-12)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)

    def test_closed_form_two_arm_case(self):
        # P(X > Y) = 5/6 for X ~ Beta(2,1), Y ~ Beta(1,2) by direct double integral
        p = thompson_probabilities(
            [BetaPosterior(2, 1), BetaPosterior(1, 2)], 10**5, np.random.default_rng(0)
        )
        assert p[0] == pytest.approx(5 / 6, abs=0.01)
        assert p[1] == pytest.approx(1 / 6, abs=0.01)

    def test_dominant_arm(self):
        p = thompson_probabilities(
            [BetaPosterior(9000, 1000), BetaPosterior(1000, 9000)], 20000, np.random.default_rng(1)
        )
        assert p[0] > 0.999

    def test_permutation_equivariance(self):
        posts = [BetaPosterior(5, 2), BetaPosterior(2, 5), BetaPosterior(3, 3)]
        s = 2 * 10**5
        p = thompson_probabilities(posts, s, np.random.default_rng(2))
        q = thompson_probabilities(posts[::-1], s, np.random.default_rng(3))
        assert np.all(np.abs(p - q[::-1]) < 0.01)

    def test_grouped_mixture_draws(self):
        gp = GroupedTreatmentPosterior.uniform(2)
        for _ in range(40):
            gp.update(0, 0, 1)
            gp.update(0, 1, 1)
            gp.update(1, 0, 0)
            gp.update(1, 1, 0)
        p = thompson_probabilities(gp, 20000, np.random.default_rng(4))
        assert p[0] > 0.99

    def test_needs_two_arms(self):
        with pytest.raises(ValueError):
            thompson_probabilities([BetaPosterior(1, 1)], 10, np.random.default_rng(0))


class TestExplorationSampling:
    def test_two_arm_always_half(self):
        for p0 in (0.5, 0.3, 0.123, 0.999):
            w = exploration_sampling_weights([p0, 1 - p0])
            assert w[0] == 0.5 and w[1] == 0.5

    def test_three_arm_values(self):
        w = exploration_sampling_weights([0.5, 0.3, 0.2])
        assert np.allclose(w, [25 / 62, 21 / 62, 16 / 62], atol=1e-9)
        assert w[0] == pytest.approx(0.403226, abs=1e-6)
        assert w[1] == pytest.approx(0.338710, abs=1e-6)
        assert w[2] == pytest.approx(0.258065, abs=1e-6)

    def test_degenerate_fallback(self):
        w = exploration_sampling_weights([1.0, 0.0, 0.0])
        assert np.array_equal(w, [1.0, 0.0, 0.0])

    @given(st.lists(st.floats(min_value=0.001, max_value=1, allow_nan=False), min_size=2, max_size=8))
    def test_weights_sum_to_one_exactly(self, raw):
        p = np.asarray(raw)
        p = p / p.sum()
        w = exploration_sampling_weights(p)
        total = w.sum()
        assert total == pytest.approx(1.0, abs=1e-12)
        assert np.all(w >= 0)

    def test_invalid_vector_rejected(self):
        with pytest.raises(ValueError):
            exploration_sampling_weights([0.5, 0.6])


class TestSampleArm:
    def test_point_mass(self):
        assert sample_arm([1.0, 0.0], np.random.default_rng(0)) == 0
        assert sample_arm([0.0, 1.0], np.random.default_rng(0)) == 1

    def test_fair_coin_frequency(self):
        rng = np.random.default_rng(1)
        draws = [sample_arm([0.5, 0.5], rng) for _ in range(10**5)]
        freq = np.mean(draws)
        assert abs(freq - 0.5) < 0.01

    def test_seed_determinism(self):
        a = [sample_arm([0.3, 0.4, 0.3], np.random.default_rng(7)) for _ in range(10)]
        b = [sample_arm([0.3, 0.4, 0.3], np.random.default_rng(7)) for _ in range(10)]
        assert a == b

    def test_invalid_weights_rejected(self):
        with pytest.raises(ValueError):
            sample_arm([0.5, 0.4], np.random.default_rng(0))


class TestUniformFixed:
    def test_least_administered(self):
        assert select_uniform_fixed([3, 1, 2]) == 1

    def test_tie_break(self):
        assert select_uniform_fixed([2, 2, 2]) == 0

    def test_round_robin_property(self):
        counts = np.zeros(4, dtype=int)
        for _ in range(4 * 5):
            arm = select_uniform_fixed(counts)
            counts[arm] += 1
        assert np.all(counts == 5)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            select_uniform_fixed([])


class TestPolicyDecision:
    def test_weight_vector_validated(self):
        with pytest.raises(ValueError):
            PolicyDecision(chosen=None, scores=[], sampling_weights=np.array([0.5, 0.6]))

    def test_chosen_must_be_candidate(self):
        with pytest.raises(ValueError):
            PolicyDecision(chosen=5, scores=scores_from_eigs([0.1, 0.2]))

    def test_audit_row(self):
        decision = select_greedy_eig(scores_from_eigs([0.1, 0.2]), StoppingConfig(0.01, 1), 2)
        row = decision.as_dict(seed=11)
        assert row["chosen"] == 1
        assert row["candidates"] == [0, 1]
        assert row["seed"] == 11
        assert len(row["scores"]) == 2
