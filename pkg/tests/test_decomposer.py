import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwhid.decomposer import (
    DecisionVariables,
    LMOptions,
    assemble_factors,
    extract_model,
    fit_joint_cpd,
    joint_cost,
    joint_gradient,
    model_kernel,
    multistart,
    parameter_error,
    parameterize,
    random_init,
    start_seed,
)
from pwhid.exceptions import DegreeError, DimensionError, DivergenceError, ShapeError
from pwhid.system import ParallelWhModel, analytic_kernels, sample_random_model
from pwhid.tensor_core import is_symmetric, symmetrize

DEG = (2, 3)


def random_vars(r, m_p, m_q, degrees=DEG, seed=0):
    rng = np.random.default_rng(seed)
    return DecisionVariables(
        rng.normal(0, 0.5, (r, m_p)),
        rng.normal(0, 0.5, (r, m_q)),
        {d: rng.normal(0, 0.3, r) for d in degrees},
    )


def noisy_kernels(v, scale=0.05, seed=1):
    rng = np.random.default_rng(seed)
    dim = v.m_p + v.m_q + 1
    return {d: symmetrize(model_kernel(v, d) + scale * rng.normal(size=(dim,) * d)) for d in v.degrees}


def fd_gradient(v, kernels, h=1e-6, weights=None):
    x = v.to_vector()
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        up = DecisionVariables.from_vector(x + e, v.r, v.m_p, v.m_q, v.degrees)
        dn = DecisionVariables.from_vector(x - e, v.r, v.m_p, v.m_q, v.degrees)
        g[i] = (joint_cost(up, kernels, weights) - joint_cost(dn, kernels, weights)) / (2 * h)
    return g


class TestAssembleFactors:
    def test_single_branch(self):
        v = DecisionVariables([[0.5]], [[0.0]], {2: [1.0]})
        np.testing.assert_array_equal(assemble_factors(v).P, [[1, 0], [0.5, 1], [0, 0.5]])

    def test_block_columns(self):
        f = assemble_factors(random_vars(2, 3, 2))
        assert f.P.shape == (6, 6)
        assert f.q_row.shape == (1, 6)
        np.testing.assert_array_equal(f.q_row[0, [0, 3]], [1, 1])

    def test_replicated_constants(self):
        v = DecisionVariables(np.zeros((2, 1)), np.zeros((2, 1)), {3: [2.0, -1.5]})
        np.testing.assert_array_equal(assemble_factors(v).c_rows[3], [[2, 2, -1.5, -1.5]])


class TestModelKernel:
    def test_trivial(self):
        v = DecisionVariables(np.zeros((1, 0)), np.zeros((1, 0)), {2: [1.0]})
        np.testing.assert_array_equal(model_kernel(v, 2), [[1.0]])

    def test_symmetric(self):
        assert is_symmetric(model_kernel(random_vars(2, 2, 3), 2))

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_analytic(self, seed):
        v = random_vars(2, 2, 2, seed=seed)
        truth = analytic_kernels(extract_model(v), DEG)
        for d in DEG:
            np.testing.assert_allclose(model_kernel(v, d), truth[d], rtol=1e-12, atol=1e-14)

    def test_unknown_degree(self):
        with pytest.raises(DegreeError):
            model_kernel(random_vars(1, 1, 1), 4)


class TestJointCost:
    def test_zero_at_truth(self):
        for seed in range(5):
            v = random_vars(2, 2, 3, seed=seed)
            assert joint_cost(v, analytic_kernels(extract_model(v), DEG)) < 1e-20

    def test_positive_off_truth(self):
        v = random_vars(2, 2, 2)
        kernels = analytic_kernels(extract_model(v), DEG)
        x = v.to_vector()
        for i in range(x.size):
            x2 = x.copy()
            x2[i] += 1e-3
            assert joint_cost(DecisionVariables.from_vector(x2, 2, 2, 2, DEG), kernels) > 0

    def test_against_loop(self):
        v = random_vars(2, 1, 2, seed=3)
        kernels = noisy_kernels(v, 0.1)
        dim = 4
        total = 0.0
        for d in DEG:
            for s in itertools.product(range(dim), repeat=d):
                model = 0.0
                for r in range(2):
                    p = np.concatenate([[1.0], v.p_free[r]])
                    q = np.concatenate([[1.0], v.q_free[r]])
                    for i in range(len(q)):
                        term = v.c[d][r] * q[i]
                        for sj in s:
                            term *= p[sj - i] if 0 <= sj - i < len(p) else 0.0
                        model += term
                total += (kernels[d][s] - model) ** 2
        assert joint_cost(v, kernels) == pytest.approx(total, rel=1e-12)

    def test_degree_one_term(self):
        v = random_vars(2, 2, 1, degrees=(1, 2, 3))
        assert joint_cost(v, analytic_kernels(extract_model(v), (1, 2, 3))) < 1e-20

    def test_dimension_error(self):
        v = random_vars(1, 1, 1)
        with pytest.raises(DimensionError):
            joint_cost(v, {2: np.zeros((4, 4)), 3: np.zeros((3, 3, 3))})
        with pytest.raises(DimensionError):
            joint_cost(v, {2: np.zeros((3, 3))})


class TestJointGradient:
    def test_zero_at_truth(self):
        v = random_vars(2, 2, 2)
        g = joint_gradient(v, analytic_kernels(extract_model(v), DEG))
        assert np.max(np.abs(g)) < 1e-10

    @pytest.mark.parametrize("r,m", [(1, 1), (1, 2), (2, 1), (2, 2)])
    def test_finite_differences(self, r, m):
        for seed in range(10):
            v = random_vars(r, m, m, seed=seed)
            kernels = noisy_kernels(v, 0.2, seed=100 + seed)
            g = joint_gradient(v, kernels)
            fd = fd_gradient(v, kernels)
            mask = np.abs(g) > 1e-8
            assert np.all(np.abs(fd - g)[mask] / np.abs(g[mask]) < 1e-6)

    def test_weighted_finite_differences(self):
        v = random_vars(2, 2, 1, seed=4)
        kernels = noisy_kernels(v, 0.2, seed=5)
        w = {2: 0.5, 3: 3.0}
        g = joint_gradient(v, kernels, w)
        np.testing.assert_allclose(g, fd_gradient(v, kernels, weights=w), rtol=1e-6, atol=1e-9)

    def test_linear_in_kernels_at_zero_model(self):
        v = random_vars(2, 2, 2, seed=6)
        v.c = {d: np.zeros(2) for d in DEG}
        rng = np.random.default_rng(7)
        a = {d: symmetrize(rng.normal(size=(5,) * d)) for d in DEG}
        b = {d: symmetrize(rng.normal(size=(5,) * d)) for d in DEG}
        ab = {d: a[d] + b[d] for d in DEG}
        n_c = 2 * len(DEG)
        ga, gb, gab = (joint_gradient(v, k)[-n_c:] for k in (a, b, ab))
        np.testing.assert_allclose(gab, ga + gb, rtol=1e-12, atol=1e-14)


class TestFit:
    def test_start_at_truth(self):
        model = sample_random_model(2, 2, 2, DEG, rng_seed=1)
        res = fit_joint_cpd(analytic_kernels(model, DEG), 2, 2, 2, DEG, parameterize(model))
        assert res.converged
        assert res.final_cost < 1e-18
        assert res.iterations <= 2

    def test_local_basin(self):
        model = sample_random_model(1, 1, 1, DEG, rng_seed=2)
        init = parameterize(model)
        init = DecisionVariables.from_vector(init.to_vector() + 0.1, 1, 1, 1, DEG)
        res = fit_joint_cpd(analytic_kernels(model, DEG), 1, 1, 1, DEG, init)
        assert res.converged
        assert parameter_error(model, res.model) < 1e-8

    def test_random_inits_reach_zero(self):
        model = sample_random_model(2, 2, 2, DEG, rng_seed=3)
        kernels = analytic_kernels(model, DEG)
        costs = []
        for i in range(20):
            init = random_init(2, 2, 2, DEG, np.random.default_rng(i))
            costs.append(fit_joint_cpd(kernels, 2, 2, 2, DEG, init).final_cost)
        assert min(costs) < 1e-12

    def test_cost_trace_monotone(self):
        v = random_vars(2, 2, 2, seed=8)
        kernels = noisy_kernels(v, 0.1, seed=9)
        res = fit_joint_cpd(kernels, 2, 2, 2, DEG, random_init(2, 2, 2, DEG, np.random.default_rng(0)))
        assert np.all(np.diff(res.cost_trace) <= 0)
        assert res.final_cost == res.cost_trace[-1]
        assert res.final_cost == pytest.approx(sum(res.cost_per_degree.values()), rel=1e-12)
        assert res.final_cost == pytest.approx(joint_cost(res.variables, kernels), rel=1e-9)

    def test_degenerate_branch_reported(self):
        # a single-branch truth fitted with two branches leaves one idle
        model = sample_random_model(1, 1, 1, DEG, rng_seed=7)
        init = parameterize(model)
        init = DecisionVariables(
            np.vstack([init.p_free, [[0.2]]]),
            np.vstack([init.q_free, [[0.3]]]),
            {d: np.append(init.c[d], 0.0) for d in DEG},
        )
        res = fit_joint_cpd(analytic_kernels(model, DEG), 2, 1, 1, DEG, init)
        assert res.degenerate_branches() == [1]
        single = fit_joint_cpd(analytic_kernels(model, DEG), 1, 1, 1, DEG, parameterize(model))
        assert single.degenerate_branches() == []

    def test_non_finite_kernels(self):
        kernels = {2: np.full((3, 3), np.inf), 3: np.zeros((3, 3, 3))}
        init = random_init(1, 1, 1, DEG, np.random.default_rng(0))
        with pytest.raises(DivergenceError):
            fit_joint_cpd(kernels, 1, 1, 1, DEG, init)
        results, _ = multistart(kernels, 1, 1, 1, DEG, 2, 0)
        assert all(r.error for r in results)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            fit_joint_cpd({2: np.zeros((3, 3))}, 1, 1, 1, (2,), random_vars(1, 2, 1, (2,)))


class TestMultistart:
    def setup_method(self):
        self.model = sample_random_model(2, 1, 2, DEG, rng_seed=4)
        self.kernels = analytic_kernels(self.model, DEG)

    def test_single_start_equals_fit(self):
        (res,), best = multistart(self.kernels, 2, 1, 2, DEG, 1, 11)
        init = random_init(2, 1, 2, DEG, np.random.default_rng(start_seed(11, 0)))
        ref = fit_joint_cpd(self.kernels, 2, 1, 2, DEG, init)
        assert best == 0
        assert np.array_equal(res.variables.to_vector(), ref.variables.to_vector())
        assert res.cost_trace == ref.cost_trace

    def test_deterministic(self):
        a, ia = multistart(self.kernels, 2, 1, 2, DEG, 5, 3)
        b, ib = multistart(self.kernels, 2, 1, 2, DEG, 5, 3)
        assert ia == ib
        assert [r.cost_trace for r in a] == [r.cost_trace for r in b]
        assert [r.seed for r in a] == [r.seed for r in b]

    def test_workers_do_not_change_results(self):
        a, _ = multistart(self.kernels, 2, 1, 2, DEG, 4, 3, n_jobs=1)
        b, _ = multistart(self.kernels, 2, 1, 2, DEG, 4, 3, n_jobs=2)
        assert [r.start_index for r in b] == [0, 1, 2, 3]
        assert [r.final_cost for r in a] == [r.final_cost for r in b]

    def test_best_index(self):
        results, best = multistart(self.kernels, 2, 1, 2, DEG, 6, 1)
        assert results[best].final_cost == min(r.final_cost for r in results)

    def test_init_distribution(self):
        opts = LMOptions(init_filter_std=0.3, init_coef_std=0.1)
        x = np.array([random_init(2, 10, 10, DEG, np.random.default_rng(i), opts).to_vector() for i in range(300)])
        assert np.std(x[:, :40]) == pytest.approx(0.3, rel=0.05)
        assert np.std(x[:, 40:]) == pytest.approx(0.1, rel=0.1)


class TestModelRoundTrip:
    def test_round_trip(self):
        model = sample_random_model(3, 2, 4, DEG, rng_seed=5)
        assert extract_model(parameterize(model)).to_dict() == model.to_dict()

    def test_zero_variables(self):
        model = extract_model(DecisionVariables(np.zeros((1, 2)), np.zeros((1, 3)), {2: [0.5]}))
        np.testing.assert_array_equal(model.p, [[1, 0, 0]])
        np.testing.assert_array_equal(model.q, [[1, 0, 0, 0]])

    def test_kernels_agree(self):
        v = random_vars(2, 3, 1, seed=9)
        truth = analytic_kernels(extract_model(v), DEG)
        for d in DEG:
            np.testing.assert_allclose(model_kernel(v, d), truth[d], rtol=1e-12, atol=1e-14)


class TestParameterError:
    def test_zero(self):
        model = sample_random_model(2, 2, 2, DEG, rng_seed=6)
        assert parameter_error(model, model) == 0.0

    def test_branch_permutation(self):
        model = sample_random_model(2, 2, 2, DEG, rng_seed=6)
        swapped = ParallelWhModel(model.branches[::-1])
        assert parameter_error(model, swapped) == 0.0

    def test_single_shift(self):
        # p = [0.6], q = [0.8], c = 0 has unit norm
        a = ParallelWhModel.from_arrays([[0.6]], [[0.8]], {2: [0.0]})
        delta = 1e-3
        b = ParallelWhModel.from_arrays([[0.6 + delta]], [[0.8]], {2: [0.0]})
        assert parameter_error(a, b) == pytest.approx(delta, rel=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 10_000))
    def test_pseudometric(self, sa, sb):
        a = sample_random_model(3, 1, 1, DEG, rng_seed=sa)
        b = sample_random_model(3, 1, 1, DEG, rng_seed=sb)
        perm = (2, 0, 1)
        ap = ParallelWhModel(tuple(a.branches[i] for i in perm))
        bp = ParallelWhModel(tuple(b.branches[i] for i in perm))
        assert parameter_error(a, b) >= 0
        assert parameter_error(ap, bp) == pytest.approx(parameter_error(a, b), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            parameter_error(
                sample_random_model(2, 2, 2, DEG, rng_seed=0),
                sample_random_model(2, 2, 1, DEG, rng_seed=0),
            )
