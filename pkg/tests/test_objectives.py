import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptex.inference import BetaPosterior, GroupedTreatmentPosterior, InferenceFailure
from adaptex.objectives import (
    BetaBernoulliDesign,
    ClampDiagnostics,
    DesignScore,
    DurationModel,
    IrtJointDesign,
    PreferencePrior,
    SampleBudget,
    eig_beta_bernoulli,
    eig_beta_posterior,
    eig_joint_theta_delta,
    eig_marginal_bound,
    eig_nested_mc,
    expected_free_energy,
    utility_discrimination,
    utility_slow_penalty,
)

from conftest import beta_bernoulli_mutual_information

TRUE_MI_UNIFORM = math.log(2) - 0.5  # I(y; phi) for phi ~ Beta(1, 1)


def make_gp(cells):
    gp = GroupedTreatmentPosterior.uniform(max(j for j, _ in cells) + 1)
    for (j, z), (a, b) in cells.items():
        gp.table[(j, z)] = BetaPosterior(a, b)
    return gp


class TestNestedMc:
    def test_uniform_beta_matches_analytic_value(self):
        budget = SampleBudget(n_outer=2000, n_inner=2000)
        est = eig_nested_mc(BetaBernoulliDesign(1, 1), budget, np.random.default_rng(6))
        assert est == pytest.approx(TRUE_MI_UNIFORM, abs=0.01)
        # and the frozen constant agrees with the quadrature oracle
        assert beta_bernoulli_mutual_information(1, 1) == pytest.approx(TRUE_MI_UNIFORM, abs=1e-6)

    def test_point_mass_posterior_is_zero(self):
        budget = SampleBudget(n_outer=2000, n_inner=2000)
        est = eig_nested_mc(IrtJointDesign(1.0, 0.0, 0.2, 0.0), budget, np.random.default_rng(0))
        assert abs(est) < 0.005

    def test_concentrated_beta_is_tiny(self):
        # quadrature oracle: I(y; phi) for Beta(200, 200) is ~1.25e-3
        assert beta_bernoulli_mutual_information(200, 200) < 0.002
        budget = SampleBudget(n_outer=20000, n_inner=20000)
        est = eig_nested_mc(BetaBernoulliDesign(200, 200), budget, np.random.default_rng(3))
        assert est < 0.002

    def test_seed_determinism(self):
        budget = SampleBudget(n_outer=500, n_inner=500)
        a = eig_nested_mc(BetaBernoulliDesign(2, 3), budget, np.random.default_rng(5))
        b = eig_nested_mc(BetaBernoulliDesign(2, 3), budget, np.random.default_rng(5))
        assert a == b

    def test_floor_clamp_counted(self):
        diag = ClampDiagnostics()
        # degenerate design: success certain, inner marginal zero for y=0 never drawn;
        # force a clamp through an impossible-but-sampled outcome via p exactly 0/1 mix
        class Degenerate:
            def sample_latents(self, n, rng):
                return np.zeros(n)

            def success_prob(self, latents):
                return np.ones_like(latents)

        est = eig_nested_mc(Degenerate(), SampleBudget(n_outer=100, n_inner=100), np.random.default_rng(0), diag)
        assert est == 0.0
        assert diag.floor_hits == 0
        diag2 = ClampDiagnostics()
        diag2.register(3)
        assert diag2.floor_hits == 3


class TestJointThetaDelta:
    def setup_method(self):
        from adaptex.inference import MeanFieldPosterior
        from adaptex.model import PriorSpec

        self.post = MeanFieldPosterior(
            theta_mean=np.array([0.5]),
            theta_sd=np.array([1.2]),
            delta_mean=np.array([0.0, 1.0]),
            delta_sd=np.array([1e-12, 0.8]),
            b_mean=0.0,
            b_sd=1.0,
        )
        self.budget = SampleBudget(n_outer=20000, n_inner=20000)

    def test_point_mass_difficulty_reduces_to_ability_only(self):
        joint = eig_joint_theta_delta(self.post, 0, 0, self.budget, np.random.default_rng(1))
        theta_only = eig_nested_mc(
            IrtJointDesign(0.5, 1.2, 0.0, 0.0), self.budget, np.random.default_rng(2)
        )
        # equal within a couple of MC standard errors (~0.004 at this budget)
        assert joint == pytest.approx(theta_only, abs=0.01)

    def test_uncertain_difficulty_alone_still_informative(self):
        post = self.post
        post.theta_sd[0] = 1e-12
        est = eig_joint_theta_delta(post, 0, 1, self.budget, np.random.default_rng(3))
        assert est > 0.02

    def test_both_point_masses_zero(self):
        post = self.post
        post.theta_sd[0] = 1e-12
        est = eig_joint_theta_delta(post, 0, 0, self.budget, np.random.default_rng(4))
        assert abs(est) < 0.005

    def test_unknown_indices_rejected(self):
        with pytest.raises(ValueError):
            eig_joint_theta_delta(self.post, 2, 0, self.budget, np.random.default_rng(0))
        with pytest.raises(ValueError):
            eig_joint_theta_delta(self.post, 0, 9, self.budget, np.random.default_rng(0))


class TestMarginalBound:
    def test_uniform_beta_bound_matches_oracle(self):
        budget = SampleBudget(n_outer=20000, n_inner=20000)
        result = eig_marginal_bound(BetaBernoulliDesign(1, 1), budget, np.random.default_rng(0))
        assert result.eig_bound == pytest.approx(TRUE_MI_UNIFORM, abs=0.02)
        assert result.marginal_q1 == pytest.approx(0.5, abs=0.02)

    def test_bound_geq_nested_estimate(self):
        budget = SampleBudget(n_outer=4000, n_inner=4000)
        rng = np.random.default_rng(11)
        bound = eig_marginal_bound(BetaBernoulliDesign(1, 1), budget, rng).eig_bound
        nested = [
            eig_nested_mc(BetaBernoulliDesign(1, 1), budget, np.random.default_rng(s))
            for s in range(8)
        ]
        se = np.std(nested, ddof=1) / math.sqrt(len(nested))
        assert bound >= np.mean(nested) - 2 * se

    def test_point_mass_bound_small(self):
        budget = SampleBudget(n_outer=20000, n_inner=20000)
        result = eig_marginal_bound(IrtJointDesign(0.3, 0.0, 0.3, 0.0), budget, np.random.default_rng(1))
        assert result.eig_bound <= 0.01

    def test_unoptimized_marginal_is_looser(self):
        budget = SampleBudget(n_outer=20000, n_inner=20000)
        fitted = eig_marginal_bound(BetaBernoulliDesign(1, 1), budget, np.random.default_rng(2))
        skewed = eig_marginal_bound(
            BetaBernoulliDesign(1, 1), budget, np.random.default_rng(2), fixed_marginal_q1=0.99
        )
        assert skewed.eig_bound > fitted.eig_bound

    def test_invalid_fixed_marginal(self):
        with pytest.raises(ValueError):
            eig_marginal_bound(
                BetaBernoulliDesign(1, 1),
                SampleBudget(n_outer=10, n_inner=10),
                np.random.default_rng(0),
                fixed_marginal_q1=1.0,
            )


class TestBetaBernoulliEig:
    def test_uniform_matches_analytic(self):
        gp = GroupedTreatmentPosterior.uniform(1)
        est = eig_beta_bernoulli(gp, 0, 0, 10**5, np.random.default_rng(0))
        assert est == pytest.approx(TRUE_MI_UNIFORM, abs=0.01)

    def test_concentrated_is_tiny(self):
        assert beta_bernoulli_mutual_information(500, 500) < 0.001
        est = eig_beta_posterior(BetaPosterior(500, 500), 10**5, np.random.default_rng(1))
        assert est < 0.001

    def test_monotone_in_concentration(self):
        mi_11 = beta_bernoulli_mutual_information(1, 1)
        mi_22 = beta_bernoulli_mutual_information(2, 2)
        assert mi_11 > mi_22
        e11 = eig_beta_posterior(BetaPosterior(1, 1), 10**5, np.random.default_rng(2))
        e22 = eig_beta_posterior(BetaPosterior(2, 2), 10**5, np.random.default_rng(3))
        assert e11 > e22
        assert e22 == pytest.approx(mi_22, abs=0.01)


class TestUtilities:
    def test_discrimination_symmetric_predictives_zero(self):
        gp = GroupedTreatmentPosterior.uniform(1)
        assert utility_discrimination(gp, 0, PreferencePrior(0.1)) == pytest.approx(0.0, abs=1e-12)

    def test_discrimination_perfect_alignment(self):
        gp = make_gp({(0, 1): (10**9, 1), (0, 0): (1, 10**9)})
        value = utility_discrimination(gp, 0, PreferencePrior(0.1))
        assert value == pytest.approx(0.1, abs=1e-6)

    def test_discrimination_perfect_antialignment(self):
        gp = make_gp({(0, 1): (1, 10**9), (0, 0): (10**9, 1)})
        value = utility_discrimination(gp, 0, PreferencePrior(0.1))
        assert value == pytest.approx(-0.1, abs=1e-6)

    def test_discrimination_is_odd_under_complement(self):
        gp = make_gp({(0, 1): (7, 3), (0, 0): (2, 8)})
        flipped = make_gp({(0, 1): (3, 7), (0, 0): (8, 2)})
        a = utility_discrimination(gp, 0, PreferencePrior(0.25))
        b = utility_discrimination(flipped, 0, PreferencePrior(0.25))
        assert a == pytest.approx(-b, abs=1e-12)

    def test_group_weights_validated(self):
        gp = GroupedTreatmentPosterior.uniform(1)
        with pytest.raises(ValueError):
            utility_discrimination(gp, 0, PreferencePrior(0.1), group_weights=(0.7, 0.7))

    def test_slow_penalty_threshold_limits(self):
        # deterministic tau = 10: point masses on mu = ln 10 and a tiny log-scale
        dm = DurationModel(
            mu_mean=[math.log(10)], mu_sd=[0.0], eta_mean=[-50.0], eta_sd=[0.0],
            sigma_tau=20.0, gamma_slow=0.5,
        )
        assert utility_slow_penalty(dm, 0, 2000, np.random.default_rng(0)) == 0.0
        dm5 = DurationModel(
            mu_mean=[math.log(10)], mu_sd=[0.0], eta_mean=[-50.0], eta_sd=[0.0],
            sigma_tau=5.0, gamma_slow=0.5,
        )
        assert utility_slow_penalty(dm5, 0, 2000, np.random.default_rng(0)) == -0.5

    def test_slow_penalty_infinite_threshold(self):
        dm = DurationModel(
            mu_mean=[2.0], mu_sd=[1.0], eta_mean=[0.0], eta_sd=[0.5],
            sigma_tau=1e12, gamma_slow=0.7,
        )
        assert utility_slow_penalty(dm, 0, 2000, np.random.default_rng(1)) == 0.0

    @given(st.floats(min_value=0.01, max_value=5.0), st.integers(min_value=0, max_value=10))
    @settings(max_examples=25, deadline=None)
    def test_slow_penalty_bounded(self, gamma, seed):
        dm = DurationModel(
            mu_mean=[2.5], mu_sd=[1.0], eta_mean=[0.0], eta_sd=[0.5],
            sigma_tau=12.0, gamma_slow=gamma,
        )
        value = utility_slow_penalty(dm, 0, 500, np.random.default_rng(seed))
        assert -gamma <= value <= 0.0


class TestExpectedFreeEnergy:
    def test_definition(self):
        assert expected_free_energy(0.2, 0.1) == pytest.approx(-0.3, abs=1e-15)
        assert expected_free_energy(0.0, -0.05) == pytest.approx(0.05, abs=1e-15)

    @given(st.floats(min_value=-10, max_value=10, allow_nan=False))
    def test_zero_utility_reduces_to_negative_eig(self, x):
        assert expected_free_energy(x, 0.0) == -x

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            expected_free_energy(float("nan"), 0.0)

    @given(
        st.floats(min_value=-5, max_value=5, allow_nan=False),
        st.floats(min_value=-5, max_value=5, allow_nan=False),
    )
    def test_design_score_consistency(self, eig, utility):
        score = DesignScore.from_parts(3, eig, utility)
        assert abs(score.efe + score.eig + score.utility) <= 1e-12 * max(1.0, abs(score.efe))
