"""Tests for PLQ penalty construction, combination and evaluation."""

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plqsysid.errors import (
    DimensionError,
    InvalidParameterError,
    RankDeficiencyError,
    UnboundedPenaltyError,
)
from plqsysid.plq import (
    PENALTY_NAMES,
    PlqPenalty,
    direct_sum,
    dual_sup,
    evaluate,
    make_elastic_net,
    make_hinge,
    make_huber,
    make_l1,
    make_l2,
    make_penalty,
    make_soft_insensitive,
    make_vapnik,
    precompose_affine,
    scale_penalty,
)

from oracles import CLOSED, GRID, grid_sup


class TestBuiltinExamples:
    @pytest.mark.parametrize("y, expected", [(2.0, 2.0), (3.0, 4.5)])
    def test_l2(self, y, expected):
        assert evaluate(make_l2(1), [y]) == pytest.approx(expected, abs=1e-12)
        assert evaluate(make_l2(2), [0.0, 0.0]) == 0.0

    def test_l2_grid_sup(self):
        assert grid_sup("l2", [3.0], {})[0] == pytest.approx(4.5, abs=1e-6)

    def test_l1(self):
        assert evaluate(make_l1(1), [-3.0]) == 3.0
        assert evaluate(make_l1(2), [1.0, -1.0]) == 2.0
        assert evaluate(make_l1(1), [0.7]) == pytest.approx(grid_sup("l1", [0.7], {})[0], abs=1e-9)
        assert evaluate(make_l1(1), [5.0]) == 5.0

    @pytest.mark.parametrize("y, expected", [(0.5, 0.125), (2.0, 1.5), (-2.0, 1.5), (10.0, 9.5)])
    def test_huber(self, y, expected):
        p = make_huber(1, 1.0)
        assert evaluate(p, [y]) == pytest.approx(expected, abs=1e-12)
        assert grid_sup("huber", [y], {"kappa": 1.0})[0] == pytest.approx(expected, abs=1e-6)

    @pytest.mark.parametrize("eps, y, expected", [(0.5, 0.3, 0.0), (0.5, 2.0, 1.5), (0.0, -1.0, 1.0)])
    def test_vapnik(self, eps, y, expected):
        assert evaluate(make_vapnik(1, eps), [y]) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("lam, y, expected", [(1.0, 2.0, 4.0), (1.0, 0.0, 0.0), (0.5, -2.0, 3.0)])
    def test_elastic_net(self, lam, y, expected):
        assert evaluate(make_elastic_net(1, lam), [y]) == pytest.approx(expected, abs=1e-12)

    def test_soft_insensitive(self):
        assert evaluate(make_soft_insensitive(1, 0.5, 1.0), [0.2]) == 0.0
        assert evaluate(make_soft_insensitive(1, 0.5, 1.0), [2.0]) == pytest.approx(1.0)
        assert grid_sup("sil", [2.0], {"epsilon": 0.5, "kappa": 1.0})[0] == pytest.approx(1.0, abs=1e-6)
        assert evaluate(make_soft_insensitive(1, 0.0, 1e6), [1.0]) == pytest.approx(0.5)

    @pytest.mark.parametrize("y, expected", [(2.0, 2.0), (-1.0, 0.0), (0.0, 0.0)])
    def test_hinge(self, y, expected):
        assert evaluate(make_hinge(1), [y]) == expected

    @pytest.mark.parametrize("name", PENALTY_NAMES)
    def test_zero_at_origin(self, name):
        p = make_penalty(name, 3)
        assert evaluate(p, np.zeros(3)) == 0.0
        assert evaluate(p, np.zeros(3), method="qp") == pytest.approx(0.0, abs=1e-9)


class TestDualRepresentation:
    @pytest.mark.parametrize("name", PENALTY_NAMES)
    def test_closed_form_matches_formula(self, name):
        f, params = CLOSED[name]
        p = make_penalty(name, 1, **params)
        got = np.array([evaluate(p, [y]) for y in GRID])
        np.testing.assert_allclose(got, f(GRID), atol=1e-8, rtol=0)

    @pytest.mark.parametrize("name", PENALTY_NAMES)
    def test_qp_sup_matches_formula(self, name):
        f, params = CLOSED[name]
        p = make_penalty(name, 1, **params)
        got = np.array([evaluate(p, [y], method="qp") for y in GRID])
        np.testing.assert_allclose(got, f(GRID), atol=1e-8, rtol=0)

    @pytest.mark.parametrize("name", PENALTY_NAMES)
    def test_grid_sup_matches_closed_form(self, name):
        f, params = CLOSED[name]
        p = make_penalty(name, 1, **params)
        got = np.array([evaluate(p, [y]) for y in GRID])
        np.testing.assert_allclose(got, grid_sup(name, GRID, params), atol=1e-3, rtol=0)

    def test_vector_evaluation_is_coordinatewise(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=6) * 3
        for name in PENALTY_NAMES:
            f, params = CLOSED[name]
            p = make_penalty(name, 6, **params)
            assert evaluate(p, y) == pytest.approx(f(y).sum(), abs=1e-10)
            assert evaluate(p, y, method="qp") == pytest.approx(f(y).sum(), abs=1e-8)

    def test_dual_sup_returns_feasible_maximizer(self):
        p = make_huber(2, 1.0)
        val, u = dual_sup(p, np.array([2.0, -0.3]))
        np.testing.assert_allclose(u, [1.0, -0.3], atol=1e-8)
        assert val == pytest.approx(1.5 + 0.045, abs=1e-9)


class TestValidation:
    def test_zero_dimension(self):
        with pytest.raises(InvalidParameterError):
            make_l2(0)

    @pytest.mark.parametrize("factory, arg", [
        (make_huber, 0.0), (make_huber, -1.0), (make_vapnik, -0.1), (make_elastic_net, 0.0),
    ])
    def test_bad_parameters(self, factory, arg):
        with pytest.raises(InvalidParameterError):
            factory(1, arg)

    def test_soft_insensitive_bounds(self):
        with pytest.raises(InvalidParameterError):
            make_soft_insensitive(1, -0.1, 1.0)
        with pytest.raises(InvalidParameterError):
            make_soft_insensitive(1, 0.1, 0.0)

    def test_unknown_name(self):
        with pytest.raises(InvalidParameterError):
            make_penalty("cauchy", 1)
        with pytest.raises(InvalidParameterError):
            make_penalty("l1", 1, kappa=1.0)

    def test_lambda_alias(self):
        assert evaluate(make_penalty("enet", 1, **{"lambda": 0.5}), [-2.0]) == pytest.approx(3.0)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            evaluate(make_l1(2), [1.0])

    def test_negative_c_rejected(self):
        with pytest.raises(InvalidParameterError):
            PlqPenalty(sp.identity(1), [0.0], [[1.0]], [[1.0]], [-1.0])

    def test_unbounded_sup(self):
        # U = [0, inf) with M = 0: the sup of u*y is +inf for y > 0
        p = PlqPenalty(sp.csr_matrix((1, 1)), [0.0], [[1.0]], [[-1.0]], [0.0])
        assert evaluate(p, [-1.0]) == pytest.approx(0.0, abs=1e-8)
        with pytest.raises(UnboundedPenaltyError):
            evaluate(p, [1.0])

    def test_describe_mentions_blocks(self):
        text = make_vapnik(3, 0.1).describe()
        assert "K=6" in text and "N=3" in text


class TestCombinators:
    def test_direct_sum_examples(self):
        assert evaluate(direct_sum(make_l1(1), make_l2(1)), [2.0, 2.0]) == pytest.approx(4.0)
        s = direct_sum(make_huber(1, 1.0), make_vapnik(1, 0.5))
        assert evaluate(s, [2.0, 2.0]) == pytest.approx(3.0)
        assert evaluate(s, [2.0, 2.0], method="qp") == pytest.approx(3.0, abs=1e-8)

    def test_direct_sum_dimensions(self):
        p1, p2 = make_vapnik(2, 0.1), make_huber(3, 1.0)
        s = direct_sum(p1, p2)
        assert s.dual_dim == p1.dual_dim + p2.dual_dim
        assert s.primal_dim == 5
        assert s.n_constraints == p1.n_constraints + p2.n_constraints

    def test_precompose_examples(self):
        assert evaluate(precompose_affine(make_l2(1), [[2.0]]), [1.0]) == pytest.approx(2.0)
        assert evaluate(precompose_affine(make_l1(1), [[1.0]], [-3.0]), [3.0]) == 0.0
        p = precompose_affine(make_huber(1, 1.0), [[1.0]], [-3.0])
        assert evaluate(p, [5.0]) == pytest.approx(1.5)
        assert evaluate(p, [5.0], method="qp") == pytest.approx(1.5, abs=1e-8)

    def test_precompose_rank_deficient(self):
        with pytest.raises(RankDeficiencyError):
            precompose_affine(make_l1(2), np.ones((2, 2)))

    def test_scale_examples(self):
        assert evaluate(scale_penalty(make_l1(1), 3.0), [2.0]) == pytest.approx(6.0)
        assert evaluate(scale_penalty(make_l2(1), 2.0), [2.0]) == pytest.approx(4.0)
        p = scale_penalty(make_huber(1, 1.0), 0.5)
        assert evaluate(p, [2.0]) == pytest.approx(0.75)
        # grid sup over the rescaled dual set [-0.5, 0.5] with M = 2
        u = np.arange(-0.5, 0.5 + 5e-5, 1e-4)
        assert (u * 2.0 - u**2).max() == pytest.approx(0.75, abs=1e-6)
        assert evaluate(p, [2.0], method="qp") == pytest.approx(0.75, abs=1e-8)

    def test_scale_rejects_nonpositive(self):
        with pytest.raises(InvalidParameterError):
            scale_penalty(make_l1(1), 0.0)


vectors = arrays(np.float64, 4, elements=st.floats(-20, 20))
names = st.sampled_from(PENALTY_NAMES)


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(names, vectors)
    def test_nonnegative(self, name, y):
        assert evaluate(make_penalty(name, 4), y) >= 0.0

    @settings(max_examples=60, deadline=None)
    @given(names, vectors, vectors, st.floats(0, 1))
    def test_convex_along_segments(self, name, y1, y2, t):
        p = make_penalty(name, 4)
        lhs = evaluate(p, t * y1 + (1 - t) * y2)
        assert lhs <= t * evaluate(p, y1) + (1 - t) * evaluate(p, y2) + 1e-10 * (1 + abs(lhs))

    @settings(max_examples=40, deadline=None)
    @given(names, names, vectors, vectors)
    def test_direct_sum_additive(self, n1, n2, y1, y2):
        p1, p2 = make_penalty(n1, 4), make_penalty(n2, 4)
        s = direct_sum(p1, p2)
        total = evaluate(p1, y1) + evaluate(p2, y2)
        assert evaluate(s, np.concatenate((y1, y2))) == pytest.approx(total, abs=1e-12, rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(names, vectors, st.integers(0, 2**32 - 1))
    def test_precompose_compositional(self, name, y, seed):
        rng = np.random.default_rng(seed)
        F = rng.normal(size=(4, 3))
        f = rng.normal(size=4)
        p = make_penalty(name, 4)
        got = evaluate(precompose_affine(p, F, f), y[:3])
        assert got == pytest.approx(evaluate(p, F @ y[:3] + f), abs=1e-12, rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(names, vectors, st.floats(1e-3, 1e3))
    def test_scale_exact(self, name, y, gamma):
        p = make_penalty(name, 4)
        want = gamma * evaluate(p, y)
        assert evaluate(scale_penalty(p, gamma), y) == pytest.approx(want, abs=1e-10, rel=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(names, arrays(np.float64, 3, elements=st.floats(-5, 5)), st.floats(0.1, 10))
    def test_scaled_dual_data_matches_closed_form(self, name, y, gamma):
        p = scale_penalty(make_penalty(name, 3), gamma)
        assert evaluate(p, y, method="qp") == pytest.approx(evaluate(p, y), abs=1e-7, rel=1e-8)
