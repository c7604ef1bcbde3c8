import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from privlab.model import (
    AssociationStructure,
    GenerationMode,
    JointPMF2,
    ModelKind,
    TraceMatrix,
    TransitionGraph,
    UserProfile,
    feasible_rho_max,
    generate_traces,
    group_joint_pmf,
    joint_pmf_from_rho,
    sample_profiles,
    stationary_distribution,
)

probs = st.floats(min_value=0.01, max_value=0.99)


def two_state(*ps):
    return [UserProfile(ModelKind.TWO_STATE, [p]) for p in ps]


def pmf_corr(q):
    """Pearson correlation of a 2x2 pmf, computed from moments."""
    q = np.asarray(q)
    ex = q[1].sum()
    ey = q[:, 1].sum()
    exy = q[1, 1]
    return (exy - ex * ey) / math.sqrt(ex * (1 - ex) * ey * (1 - ey))


def brute_force_law(profiles, loadings, shared_grid=2000):
    """Joint law of the latent-factor construction by midpoint quadrature."""
    s = len(profiles)
    r = profiles[0].r
    out = np.zeros((r,) * s)
    cdfs = [np.cumsum(p.marginal()) for p in profiles]
    us = (np.arange(shared_grid) + 0.5) / shared_grid
    for use in itertools.product((0, 1), repeat=s):
        w = math.prod(loadings[i] if use[i] else 1 - loadings[i] for i in range(s))
        if w == 0:
            continue
        for u in us:
            shared = [int(np.searchsorted(cdfs[i], u, side="right")) for i in range(s)]
            for x in itertools.product(range(r), repeat=s):
                if any(use[i] and x[i] != shared[i] for i in range(s)):
                    continue
                v = w / shared_grid
                for i in range(s):
                    if not use[i]:
                        v *= profiles[i].marginal()[x[i]]
                out[x] += v
    return out


class TestTransitionGraph:
    def test_complete_two_state_has_two_free_parameters(self):
        g = TransitionGraph.complete(2)
        assert g.dof == 2
        assert g.free_edges == [(0, 1), (1, 0)]

    def test_state_without_outgoing_edge_rejected(self):
        with pytest.raises(ValueError):
            TransitionGraph(3, ((0, 1), (1, 0)))

    @pytest.mark.parametrize(
        "edges, ergodic",
        [
            (((0, 1), (1, 0)), False),  # period 2
            (((0, 0), (0, 1), (1, 0)), True),
            (((0, 1), (1, 2), (2, 0)), False),  # period 3
            (((0, 1), (1, 2), (2, 0), (2, 2)), True),
            (((0, 0), (1, 1), (0, 1)), False),  # reducible
        ],
    )
    def test_ergodicity(self, edges, ergodic):
        r = 1 + max(max(e) for e in edges)
        assert TransitionGraph(r, edges).is_ergodic() is ergodic


class TestUserProfile:
    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
    def test_probability_bounds(self, p):
        with pytest.raises(ValueError):
            UserProfile(ModelKind.TWO_STATE, [p])

    def test_r_state_sum_must_be_below_one(self):
        with pytest.raises(ValueError):
            UserProfile(ModelKind.R_STATE, [0.5, 0.5], r=3)

    def test_r_state_marginal_puts_remainder_on_symbol_zero(self):
        prof = UserProfile(ModelKind.R_STATE, [0.2, 0.3], r=3)
        np.testing.assert_allclose(prof.marginal(), [0.5, 0.2, 0.3])

    def test_markov_rows_complete_to_one(self):
        g = TransitionGraph.complete(3)
        prof = sample_profiles(1, ModelKind.MARKOV, np.random.default_rng(1), graph=g)[0]
        np.testing.assert_allclose(prof.transition_matrix().sum(axis=1), 1.0, atol=1e-15)

    def test_markov_periodic_graph_rejected(self):
        g = TransitionGraph(2, ((0, 1), (1, 0)))
        with pytest.raises(ValueError):
            UserProfile(ModelKind.MARKOV, [], graph=g)

    def test_stationary_distribution_is_fixed_point(self):
        t = np.array([[0.9, 0.1], [0.3, 0.7]])
        pi = stationary_distribution(t)
        np.testing.assert_allclose(pi, [0.75, 0.25], atol=1e-12)
        np.testing.assert_allclose(pi @ t, pi, atol=1e-12)


class TestSampleProfiles:
    def test_single_two_state_profile_in_open_interval(self):
        (prof,) = sample_profiles(1, ModelKind.TWO_STATE, np.random.default_rng(0))
        assert 0 < prof.p < 1

    def test_uniform_prior_mean(self):
        profs = sample_profiles(10_000, ModelKind.TWO_STATE, np.random.default_rng(0))
        assert abs(np.mean([p.p for p in profs]) - 0.5) < 0.02

    def test_markov_free_parameter_count(self):
        g = TransitionGraph.complete(2)
        profs = sample_profiles(3, ModelKind.MARKOV, np.random.default_rng(0), graph=g)
        assert [p.dof for p in profs] == [2, 2, 2]

    def test_r_state_respects_margin(self):
        profs = sample_profiles(500, ModelKind.R_STATE, np.random.default_rng(0), r=4, margin=0.05)
        marg = np.array([p.marginal() for p in profs])
        assert marg.min() >= 0.05 - 1e-12
        np.testing.assert_allclose(marg.sum(axis=1), 1.0)

    def test_invalid_r(self):
        with pytest.raises(ValueError):
            sample_profiles(2, ModelKind.R_STATE, np.random.default_rng(0), r=1)

    def test_periodic_graph(self):
        with pytest.raises(ValueError):
            sample_profiles(2, ModelKind.MARKOV, np.random.default_rng(0), graph=TransitionGraph(2, ((0, 1), (1, 0))))


class TestFeasibleRho:
    @pytest.mark.parametrize(
        "p1, p2, expected",
        [(0.5, 0.5, 1.0), (0.6, 0.2, math.sqrt(1 / 6)), (0.2, 0.6, math.sqrt(1 / 6)), (0.37, 0.37, 1.0)],
    )
    def test_values(self, p1, p2, expected):
        assert feasible_rho_max(p1, p2) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("p1, p2", [(0.0, 0.5), (0.5, 1.0)])
    def test_domain(self, p1, p2):
        with pytest.raises(ValueError):
            feasible_rho_max(p1, p2)

    @given(probs, probs)
    def test_bound_is_tight(self, p1, p2):
        # at the bound one cell of the joint pmf is exactly zero
        q = joint_pmf_from_rho(p1, p2, feasible_rho_max(p1, p2)).q
        assert q.min() == pytest.approx(0.0, abs=1e-12)


class TestJointPmf:
    def test_independent(self):
        q = joint_pmf_from_rho(0.6, 0.2, 0.0).q
        np.testing.assert_allclose(q, [[0.32, 0.08], [0.48, 0.12]], atol=1e-15)

    def test_worked_example_cells(self):
        rho = 0.03 / math.sqrt(0.6 * 0.4 * 0.2 * 0.8)
        q = joint_pmf_from_rho(0.6, 0.2, rho).q
        np.testing.assert_allclose(q, [[7 / 20, 1 / 20], [9 / 20, 3 / 20]], atol=1e-12)
        assert round(rho, 5) == 0.15309

    def test_round_trip_correlation(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            p1, p2 = rng.uniform(0.01, 0.99, 2)
            rho = rng.uniform(0, feasible_rho_max(p1, p2))
            q = joint_pmf_from_rho(p1, p2, rho).q
            assert pmf_corr(q) == pytest.approx(rho, abs=1e-12)
            assert q[1].sum() == pytest.approx(p1, abs=1e-15)
            assert q[:, 1].sum() == pytest.approx(p2, abs=1e-15)
            assert q.min() >= 0

    @pytest.mark.parametrize("rho", [-0.1, 0.5])
    def test_rejects_negative_or_infeasible(self, rho):
        with pytest.raises(ValueError):
            joint_pmf_from_rho(0.6, 0.2, rho)

    def test_jointpmf_properties(self):
        j = JointPMF2([[7 / 20, 1 / 20], [9 / 20, 3 / 20]])
        assert j.p1 == pytest.approx(0.6)
        assert j.p2 == pytest.approx(0.2)
        assert j.cov == pytest.approx(0.03)
        assert j.transposed().p1 == pytest.approx(0.2)


class TestAssociationStructure:
    def test_groups_must_partition(self):
        with pytest.raises(ValueError):
            AssociationStructure(3, ((0, 1),))

    def test_edge_across_groups(self):
        with pytest.raises(ValueError):
            AssociationStructure(3, ((0, 1), (2,)), ((1, 2, 0.5),))

    def test_pairwise_mode_rejects_triples(self):
        with pytest.raises(ValueError):
            AssociationStructure(3, ((0, 1, 2),), ((0, 1, 0.5),))

    def test_latent_effective_graph_is_clique(self):
        a = AssociationStructure(3, ((0, 1, 2),), ((0, 1, 0.5), (1, 2, 0.5)), GenerationMode.LATENT_FACTOR)
        assert a.effective_edges() == {(0, 1), (0, 2), (1, 2)}

    def test_infeasible_rho_rejected_at_generation(self):
        a = AssociationStructure(2, ((0, 1),), ((0, 1, 0.9),))
        with pytest.raises(ValueError):
            generate_traces(two_state(0.6, 0.2), a, 10, np.random.default_rng(0))


class TestGroupJointPmf:
    @pytest.mark.parametrize("loadings", [(0.7, 0.7), (0.3, 0.9), (1.0, 0.5), (0.0, 0.8)])
    def test_latent_two_state_matches_brute_force(self, loadings):
        profs = two_state(0.3, 0.65)
        a = AssociationStructure(2, ((0, 1),), ((0, 1, 0.5),), GenerationMode.LATENT_FACTOR, loadings=loadings)
        exact = group_joint_pmf(profs, a, (0, 1))
        np.testing.assert_allclose(exact, brute_force_law(profs, loadings), atol=1e-3)
        assert exact.sum() == pytest.approx(1.0)

    def test_latent_r_state_triple_matches_brute_force(self):
        profs = [UserProfile(ModelKind.R_STATE, v, r=3) for v in ([0.2, 0.3], [0.4, 0.1], [0.25, 0.25])]
        w = (0.8, 0.6, 0.7)
        a = AssociationStructure(3, ((0, 1, 2),), ((0, 1, 0.5),), GenerationMode.LATENT_FACTOR, loadings=w)
        np.testing.assert_allclose(group_joint_pmf(profs, a, (0, 1, 2)), brute_force_law(profs, w, 1000), atol=2e-3)

    def test_marginals_preserved(self):
        profs = two_state(0.2, 0.5, 0.7)
        a = AssociationStructure(3, ((0, 1, 2),), ((0, 1, 0.6), (1, 2, 0.3)), GenerationMode.LATENT_FACTOR)
        pmf = group_joint_pmf(profs, a, (0, 1, 2))
        assert pmf.sum(axis=(1, 2))[1] == pytest.approx(0.2)
        assert pmf.sum(axis=(0, 2))[1] == pytest.approx(0.5)
        assert pmf.sum(axis=(0, 1))[1] == pytest.approx(0.7)

    def test_cross_group_is_product(self):
        profs = two_state(0.2, 0.5, 0.7)
        a = AssociationStructure(3, ((0, 1), (2,)), ((0, 1, 0.3),))
        pmf = group_joint_pmf(profs, a, (2, 0))
        np.testing.assert_allclose(pmf, np.outer([0.3, 0.7], [0.8, 0.2]))

    def test_coupled_markov_is_stationary_of_product_chain(self):
        g = TransitionGraph.complete(2)
        profs = sample_profiles(2, ModelKind.MARKOV, np.random.default_rng(3), graph=g)
        a = AssociationStructure(2, ((0, 1),), ((0, 1, 0.5),), GenerationMode.COUPLED_MARKOV)
        pmf = group_joint_pmf(profs, a, (0, 1))
        np.testing.assert_allclose(pmf.sum(axis=1), profs[0].marginal(), atol=1e-12)
        np.testing.assert_allclose(pmf.sum(axis=0), profs[1].marginal(), atol=1e-12)


class TestGenerateTraces:
    def test_singleton_frequency(self):
        profs = two_state(*[0.3] * 5)
        X = generate_traces(profs, AssociationStructure.singletons(5), 10_000, np.random.default_rng(0))
        assert np.all(np.abs(X.values.mean(axis=0) - 0.3) < 0.02)

    def test_zero_rho_pair_uncorrelated(self):
        m = 10_000
        profs = two_state(0.4, 0.7)
        a = AssociationStructure(2, ((0, 1),), ())
        X = generate_traces(profs, a, m, np.random.default_rng(0)).values.astype(float)
        cov = np.mean(X[:, 0] * X[:, 1]) - X[:, 0].mean() * X[:, 1].mean()
        assert abs(cov) < 3 / math.sqrt(m)

    def test_worked_example_cell_frequency(self):
        rho = 0.03 / math.sqrt(0.6 * 0.4 * 0.2 * 0.8)
        a = AssociationStructure(2, ((0, 1),), ((0, 1, rho),))
        X = generate_traces(two_state(0.6, 0.2), a, 100_000, np.random.default_rng(0)).values
        assert abs(np.mean((X[:, 0] == 1) & (X[:, 1] == 1)) - 0.15) < 0.005

    def test_deterministic(self):
        profs = sample_profiles(6, ModelKind.TWO_STATE, np.random.default_rng(0))
        a = AssociationStructure(6, ((0, 1, 2), (3, 4), (5,)), ((0, 1, 0.5), (1, 2, 0.5), (3, 4, 0.4)), GenerationMode.LATENT_FACTOR)
        x1 = generate_traces(profs, a, 500, np.random.default_rng(42))
        x2 = generate_traces(profs, a, 500, np.random.default_rng(42))
        assert x1 == x2

    def test_mode_kind_mismatch(self):
        g = TransitionGraph.complete(2)
        profs = sample_profiles(2, ModelKind.MARKOV, np.random.default_rng(0), graph=g)
        a = AssociationStructure(2, ((0, 1),), ((0, 1, 0.5),), GenerationMode.LATENT_FACTOR)
        with pytest.raises(ValueError):
            generate_traces(profs, a, 10, np.random.default_rng(0))

    @pytest.mark.parametrize("mode", list(GenerationMode))
    def test_marginal_fidelity_and_edges(self, mode):
        """Per-symbol frequencies, edge covariances and non-edge independence at m = 10^5."""
        m = 100_000
        rng = np.random.default_rng(11)
        tol = 5 / math.sqrt(m)
        if mode is GenerationMode.COUPLED_MARKOV:
            g = TransitionGraph.complete(3)
            profs = sample_profiles(5, ModelKind.MARKOV, rng, graph=g)
            a = AssociationStructure(5, ((0, 1, 2), (3, 4)), ((0, 1, 0.7), (0, 2, 0.7), (1, 2, 0.7), (3, 4, 0.6)), mode)
        elif mode is GenerationMode.LATENT_FACTOR:
            profs = sample_profiles(5, ModelKind.R_STATE, rng, r=3)
            a = AssociationStructure(5, ((0, 1, 2), (3, 4)), ((0, 1, 0.7), (1, 2, 0.7), (3, 4, 0.6)), mode)
        else:
            profs = two_state(0.3, 0.6, 0.5, 0.45, 0.8)
            a = AssociationStructure(5, ((0, 1), (2, 3), (4,)), ((0, 1, 0.5), (2, 3, 0.8)), mode)
        X = generate_traces(profs, a, m, rng).values
        r = profs[0].r
        for u in range(5):
            freq = np.bincount(X[:, u], minlength=r) / m
            np.testing.assert_allclose(freq, profs[u].marginal(), atol=tol)
        eff = a.effective_edges()
        for u, v in itertools.combinations(range(5), 2):
            pmf = group_joint_pmf(profs, a, (u, v))
            for i, j in itertools.product(range(1, r), repeat=2):
                analytic = pmf[i, j] - pmf[i].sum() * pmf[:, j].sum()
                emp = np.mean((X[:, u] == i) & (X[:, v] == j)) - np.mean(X[:, u] == i) * np.mean(X[:, v] == j)
                assert abs(emp - analytic) < tol
                if (u, v) not in eff:
                    assert analytic == pytest.approx(0.0, abs=1e-12)
            if (u, v) in eff and r == 2:
                assert pmf[1, 1] - pmf[1].sum() * pmf[:, 1].sum() > 0

    def test_markov_path_follows_transitions(self):
        g = TransitionGraph.complete(2)
        prof = UserProfile(ModelKind.MARKOV, [0.2, 0.4], graph=g)
        X = generate_traces([prof], AssociationStructure.singletons(1, GenerationMode.COUPLED_MARKOV), 100_000, np.random.default_rng(5))
        x = X.values[:, 0]
        t01 = np.mean(x[1:][x[:-1] == 0] == 1)
        t10 = np.mean(x[1:][x[:-1] == 1] == 0)
        assert t01 == pytest.approx(0.2, abs=0.01)
        assert t10 == pytest.approx(0.4, abs=0.01)


class TestTraceMatrix:
    def test_symbols_checked(self):
        with pytest.raises(ValueError):
            TraceMatrix(np.array([[0, 2]]), r=2)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_same_seed_same_traces(self, m, n, seed):
        profs = sample_profiles(n, ModelKind.TWO_STATE, np.random.default_rng(seed))
        a = AssociationStructure.singletons(n)
        assert generate_traces(profs, a, m, np.random.default_rng(seed)) == generate_traces(profs, a, m, np.random.default_rng(seed))
