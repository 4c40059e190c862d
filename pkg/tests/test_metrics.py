import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kernevo.data import Dataset
from kernevo.experiments import TickClock
from kernevo.grammar import parse
from kernevo.hyperopt import OptBudget
from kernevo.kernels import build_covariance
from kernevo.metrics import DegenerateInput, FitnessVector, bic, evaluate_fitness, nlpd, pcc

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def se_dataset(seed, n=60):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 6, size=(n, 2))
    K = build_covariance("SE", [1.0, 1.0], X) + 1e-8 * np.eye(n)
    return Dataset(X, np.linalg.cholesky(K) @ rng.normal(size=n))


class TestPCC:
    def test_perfect(self):
        assert pcc([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0, abs=1e-15)

    def test_anti(self):
        assert pcc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)

    def test_hand_value(self):
        assert pcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)

    def test_constant_is_degenerate(self):
        with pytest.raises(DegenerateInput):
            pcc([1, 2, 3], [5, 5, 5])
        with pytest.raises(DegenerateInput):
            pcc([0.1, 0.1, 0.1], [1, 2, 3])

    def test_too_short(self):
        with pytest.raises(ValueError):
            pcc([1.0], [1.0])

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), a=st.floats(0.01, 100), b=st.floats(-100, 100))
    def test_affine_invariance_and_antisymmetry(self, seed, a, b):
        rng = np.random.default_rng(seed)
        f, mu = rng.normal(size=12), rng.normal(size=12)
        base = pcc(f, mu)
        assert pcc(f, a * mu + b) == pytest.approx(base, abs=1e-12)
        assert pcc(f, -mu) == pytest.approx(-base, abs=1e-12)
        assert -1.0 <= base <= 1.0


class TestNLPD:
    def test_exact_unit_variance(self):
        assert nlpd([0.3, -1.0], [0.3, -1.0], [1.0, 1.0]) == pytest.approx(0.918939, abs=1e-6)

    def test_unit_residual(self):
        assert nlpd([1.0], [0.0], [1.0]) == pytest.approx(1.418939, abs=1e-6)

    def test_mixed_variances(self):
        assert nlpd([0, 0], [0, 0], [1, 4]) == pytest.approx(1.265512, abs=1e-6)

    def test_floor(self):
        assert np.isfinite(nlpd([1.0], [1.0], [0.0]))
        assert nlpd([1.0], [1.0], [0.0]) == pytest.approx(0.5 * math.log(1e-12) + HALF_LOG_2PI, abs=1e-9)

    def test_matches_gaussian_log_density(self):
        rng = np.random.default_rng(0)
        f, mu, var = rng.normal(size=5), rng.normal(size=5), rng.uniform(0.1, 3, 5)
        dens = np.exp(-0.5 * (f - mu) ** 2 / var) / np.sqrt(2 * np.pi * var)
        assert nlpd(f, mu, var) == pytest.approx(-np.mean(np.log(dens)), rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 10))
    def test_union_is_mean_of_halves(self, seed, n):
        rng = np.random.default_rng(seed)
        a = [rng.normal(size=n), rng.normal(size=n), rng.uniform(0.1, 2, n)]
        b = [rng.normal(size=n), rng.normal(size=n), rng.uniform(0.1, 2, n)]
        union = nlpd(*(np.concatenate(p) for p in zip(a, b)))
        assert union == pytest.approx(0.5 * (nlpd(*a) + nlpd(*b)), rel=1e-12)


class TestBIC:
    def test_zero(self):
        assert bic(0.0, 0, 1) == 0.0

    def test_log_e(self):
        assert bic(-10.0, 2, math.e) == pytest.approx(22.0, abs=1e-12)

    def test_from_lml(self):
        assert bic(-0.918939, 1, 1) == pytest.approx(1.837877, abs=1e-6)

    def test_bad_n(self):
        with pytest.raises(ValueError):
            bic(0.0, 1, 0)


class TestFitness:
    def test_literal_one_is_faulted(self):
        ind = evaluate_fitness(parse("1"), se_dataset(0, n=30), rng=np.random.default_rng(0))
        assert ind.fitness == FitnessVector.faulted()
        assert not ind.is_viable

    def test_se_correlates(self):
        ind = evaluate_fitness("SE", se_dataset(1), rng=np.random.default_rng(1), clock=TickClock())
        assert -ind.fitness.neg_pcc > 0.5
        assert ind.is_viable
        assert ind.theta.shape == (2,)
        assert ind.fitness.eval_time == 3 * 2.0**-10

    def test_deterministic_with_tick_clock(self):
        ds = se_dataset(2, n=30)
        a = evaluate_fitness("M32", ds, rng=np.random.default_rng(4), clock=TickClock())
        b = evaluate_fitness("M32", ds, rng=np.random.default_rng(4), clock=TickClock())
        assert a.fitness == b.fitness
        assert a.mean_lml == b.mean_lml and a.bic == b.bic
        np.testing.assert_array_equal(a.theta, b.theta)

    def test_dataset_untouched(self):
        ds = se_dataset(3, n=24)
        X, f = ds.X.copy(), ds.f.copy()
        evaluate_fitness("RQ", ds, budget=OptBudget(max_lml_evals=30), rng=np.random.default_rng(0))
        np.testing.assert_array_equal(ds.X, X)
        np.testing.assert_array_equal(ds.f, f)

    def test_bic_consistent_with_mean_lml(self):
        ind = evaluate_fitness("SE", se_dataset(4, n=30), rng=np.random.default_rng(2))
        assert ind.bic == pytest.approx(bic(ind.mean_lml, 2, 20), rel=1e-12)

    def test_indefinite_expression_faults(self):
        ind = evaluate_fitness(parse("r"), se_dataset(5, n=24), budget=OptBudget(max_lml_evals=20))
        assert ind.fitness == FitnessVector.faulted()
        assert ind.mean_lml == -math.inf
