import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kernevo.data import Dataset
from kernevo.experiments import TickClock
from kernevo.evolution import (
    MOECovConfig,
    NoViableKernel,
    Population,
    applicable_mutations,
    crossover,
    crowding_distance,
    dominates,
    dump_archive,
    fast_nondominated_sort,
    load_archive,
    moecov_run,
    mutate,
    nsga2_order,
    nsga2_select,
    relative_improvement,
    select_best,
    update_tracked,
)
from kernevo.grammar import GrammarConfig, depth, gen_random_tree, iter_nodes, parse, serialize, size, type_check
from kernevo.hyperopt import OptBudget
from kernevo.kernels import build_covariance
from kernevo.metrics import EvaluatedIndividual, FitnessVector


class FirstChoice:
    """Stands in for a generator and always picks index 0."""

    def integers(self, n, *args, **kwargs):
        return 0


def individual(neg_pcc=0.0, nlpd=0.0, t=0.0, lml=0.0, bic=0.0, expr="r"):
    return EvaluatedIndividual(parse(expr), np.ones(1), FitnessVector(neg_pcc, nlpd, t), lml, bic)


def faulted():
    return EvaluatedIndividual(parse("r"), np.ones(1), FitnessVector.faulted(), -math.inf, math.inf)


def chain(n):
    """A tree of depth ``n``: nested expneg around r."""
    t = "r"
    for _ in range(n):
        t = f"expneg({t})"
    return parse(t)


def subtrees(t):
    return {n for _, n in iter_nodes(t)}


def brute_fronts(F):
    remaining = list(range(len(F)))
    fronts = []
    while remaining:
        front = [i for i in remaining if not any(dominates(F[j], F[i]) for j in remaining if j != i)]
        fronts.append(front)
        remaining = [i for i in remaining if i not in front]
    return fronts


class TestCrossover:
    def test_terminal_parents(self):
        rng = np.random.default_rng(0)
        children = {serialize(crossover(parse("r"), parse("r"), rng)) for _ in range(50)}
        assert children == {"add(r, r)", "mul(r, r)"}

    def test_child_holds_one_subtree_of_each_parent(self):
        rng = np.random.default_rng(1)
        k1, k2 = parse("mul(hp, expneg(square(r)))"), parse("add(sin(s), wn)")
        for _ in range(100):
            child = crossover(k1, k2, rng)
            assert child.name in ("add", "mul")
            assert child.children[0] in subtrees(k1)
            assert child.children[1] in subtrees(k2)

    def test_depth_fallback(self):
        k1, k2 = chain(8), chain(8)
        assert crossover(k1, k2, FirstChoice(), max_depth=8) is k1


class TestMutate:
    def test_terminal_cannot_shrink(self):
        assert "shrink" not in applicable_mutations(parse("r"))
        assert "node_replacement" not in applicable_mutations(parse("r"))
        rng = np.random.default_rng(2)
        for _ in range(100):
            assert type_check(mutate(parse("r"), rng))

    def test_node_replacement_swaps_binary(self):
        from kernevo.evolution import MUTATIONS

        out = MUTATIONS["node_replacement"](parse("add(r, 1)"), np.random.default_rng(0), GrammarConfig())
        assert serialize(out) == "mul(r, 1)"

    def test_insert_grows(self):
        from kernevo.evolution import MUTATIONS

        rng = np.random.default_rng(3)
        for _ in range(50):
            out = MUTATIONS["insert"](parse("r"), rng, GrammarConfig())
            assert size(out) > 1
            assert parse("r") in out.children

    def test_shrink_keeps_a_branch(self):
        from kernevo.evolution import MUTATIONS

        out = MUTATIONS["shrink"](parse("expneg(r)"), np.random.default_rng(0), GrammarConfig())
        assert out == parse("r")

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), max_depth=st.integers(1, 8))
    def test_variation_safety(self, seed, max_depth):
        rng = np.random.default_rng(seed)
        g = GrammarConfig(max_depth=max_depth)
        pool = [gen_random_tree(g, rng) for _ in range(4)]
        for _ in range(50):
            a, b = pool[rng.integers(4)], pool[rng.integers(4)]
            child = mutate(a, rng, g) if rng.random() < 0.4 else crossover(a, b, rng, max_depth)
            assert type_check(child)
            assert depth(child) <= max_depth
            pool[rng.integers(4)] = child


class TestSorting:
    def test_simple(self):
        assert fast_nondominated_sort([(1, 2), (2, 1), (2, 2)]) == [[0, 1], [2]]

    def test_identical(self):
        assert fast_nondominated_sort([(1, 1)] * 4) == [[0, 1, 2, 3]]

    def test_chain(self):
        assert fast_nondominated_sort([(1, 1), (2, 2), (3, 3)]) == [[0], [1], [2]]

    def test_infinite_entries(self):
        assert fast_nondominated_sort([(math.inf,) * 3, (1, 1, 1), (math.inf,) * 3]) == [[1], [0, 2]]

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 50), m=st.integers(2, 3))
    def test_matches_brute_force(self, seed, n, m):
        # integer grid so ties and duplicates occur often
        F = np.random.default_rng(seed).integers(0, 5, size=(n, m)).tolist()
        assert fast_nondominated_sort(F) == brute_fronts(F)


class TestCrowding:
    def test_two_points(self):
        np.testing.assert_array_equal(crowding_distance([(0, 1), (1, 0)]), [math.inf, math.inf])

    def test_three_points(self):
        d = crowding_distance([(0, 2), (1, 1), (2, 0)])
        assert d[0] == d[2] == math.inf
        assert d[1] == pytest.approx(2.0, abs=1e-15)

    def test_identical(self):
        d = crowding_distance([(1, 1)] * 4)
        assert d[0] == d[3] == math.inf
        np.testing.assert_array_equal(d[1:3], [0, 0])


class TestSelect:
    def test_whole_front(self):
        F = [(1, 2), (2, 1), (2, 2), (3, 3)]
        assert sorted(nsga2_order(F, 2)) == [0, 1]

    def test_tie_break_by_index(self):
        assert nsga2_order([(1, 2), (2, 1)], 1) == [0]

    def test_everything(self):
        F = [(3, 3), (1, 2), (2, 1), (2, 2)]
        order = nsga2_order(F, 4)
        assert sorted(order) == [0, 1, 2, 3]
        assert order == [1, 2, 3, 0]

    def test_too_many(self):
        with pytest.raises(ValueError):
            nsga2_order([(1, 1)], 2)

    def test_population_wrapper(self):
        pop = Population([individual(0.5, 1.0), individual(-0.9, 0.1), faulted()])
        assert nsga2_select(pop, 1)[0] is pop.individuals[1]

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 30), data=st.data())
    def test_never_skips_a_dominator(self, seed, n, data):
        F = np.random.default_rng(seed).integers(0, 6, size=(n, 3)).tolist()
        count = data.draw(st.integers(1, n))
        chosen = set(nsga2_order(F, count))
        assert len(chosen) == count
        for i in chosen:
            for j in range(n):
                if j not in chosen:
                    assert not dominates(F[j], F[i])


class TestImprovement:
    def test_formula(self):
        np.testing.assert_array_equal(relative_improvement([2.0], [1.0]), [1.0])

    def test_equal(self):
        np.testing.assert_array_equal(relative_improvement([1.5, -2.0, math.inf], [1.5, -2.0, math.inf]), [0, 0, 0])

    def test_negative_values(self):
        np.testing.assert_allclose(relative_improvement([-1.0], [-2.0]), [0.5])

    def test_edges(self):
        out = relative_improvement([math.inf, 1.0, 1.0, -1.0], [1.0, math.inf, 0.0, 0.0])
        np.testing.assert_array_equal(out, [math.inf, -math.inf, math.inf, 0.0])

    def test_tracked_update(self):
        np.testing.assert_array_equal(update_tracked([math.inf, 2.0], [1.0, 4.0]), [1.0, 3.0])


class TestSelectBest:
    def test_singleton(self):
        ind = individual(lml=-7.0)
        assert select_best([faulted(), ind]) is ind

    def test_maximum_lml(self):
        a, b = individual(lml=-5.0), individual(lml=-3.0)
        assert select_best([a, b]) is b

    def test_bic(self):
        a, b = individual(lml=-5.0, bic=1.0), individual(lml=-3.0, bic=2.0)
        assert select_best([a, b], "bic") is a

    def test_all_faulted(self):
        with pytest.raises(NoViableKernel):
            select_best([faulted(), faulted()])


def se_1d(seed=0, n=30):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 6, size=(n, 1))
    K = build_covariance("SE", [1.0, 1.0], X) + 1e-8 * np.eye(n)
    return Dataset(X, np.linalg.cholesky(K) @ rng.normal(size=n))


def small_cfg(**kw):
    base = dict(N=6, G=2, mu=2, budget=OptBudget(max_lml_evals=20), grammar=GrammarConfig(max_depth=4), seed=3)
    base.update(kw)
    return MOECovConfig(**base)


class TestConfig:
    @pytest.mark.parametrize(
        "kw", [dict(mu=0), dict(mu=38), dict(p_m=0.5), dict(beta=0.0), dict(O=4), dict(select_by="x"), dict(G=0)]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            MOECovConfig(**kw)

    def test_defaults(self):
        c = MOECovConfig()
        assert (c.N, c.G, c.mu, c.p_m, c.p_cx, c.beta, c.O) == (38, 65, 9, 0.4, 0.6, 1e-5, 2)


def reversed_map(fn, *iterables):
    # evaluates last to first, returns in input order
    args = list(zip(*iterables))
    return [fn(*a) for a in reversed(args)][::-1]


class TestRun:
    def test_single_generation(self):
        cfg = small_cfg(G=1)
        res = moecov_run(cfg, se_1d(), clock=TickClock())
        assert len(res.archive) == cfg.N
        assert res.best is select_best(res.archive)

    def test_restart_every_generation(self):
        cfg = small_cfg(G=3, beta=math.inf)
        res = moecov_run(cfg, se_1d(), clock=TickClock())
        assert len(res.archive) == cfg.G * cfg.N
        assert res.restarts == cfg.G - 1
        assert [ind.generation for ind in res.archive] == [g for g in range(3) for _ in range(cfg.N)]

    def test_smoke(self):
        cfg = MOECovConfig(N=10, G=5, mu=3, seed=0, budget=OptBudget(max_lml_evals=60))
        res = moecov_run(cfg, se_1d(0, n=40), clock=TickClock())
        assert res.best.fitness.is_finite
        assert -res.best.fitness.neg_pcc > 0

    def test_reproducible(self):
        cfg = small_cfg(G=3)
        a = moecov_run(cfg, se_1d(1), clock=TickClock())
        b = moecov_run(cfg, se_1d(1), clock=TickClock())
        assert [serialize(i.expr) for i in a.archive] == [serialize(i.expr) for i in b.archive]
        assert [i.fitness for i in a.archive] == [i.fitness for i in b.archive]
        assert serialize(a.best.expr) == serialize(b.best.expr)

    def test_mapper_does_not_change_results(self):
        cfg = small_cfg(G=2)
        a = moecov_run(cfg, se_1d(2), clock=TickClock())
        b = moecov_run(cfg, se_1d(2), clock=TickClock(), mapper=reversed_map)
        assert [i.fitness for i in a.archive] == [i.fitness for i in b.archive]

    def test_best_is_pareto_consistent(self):
        res = moecov_run(small_cfg(G=3), se_1d(3), clock=TickClock())
        best = res.best
        for ind in res.archive:
            beats = dominates(ind.fitness.as_tuple()[:2], best.fitness.as_tuple()[:2])
            assert not (beats and ind.mean_lml > best.mean_lml)

    def test_archive_round_trip(self, tmp_path):
        archive = [individual(-0.5, 1.25, 0.1, -3.0, 8.0, "mul(hp, expneg(r))"), faulted()]
        dump_archive(archive, tmp_path / "a.jsonl")
        loaded = load_archive(tmp_path / "a.jsonl")
        assert [serialize(i.expr) for i in loaded] == ["mul(hp, expneg(r))", "r"]
        assert loaded[0].fitness == archive[0].fitness
        assert loaded[1].fitness == FitnessVector.faulted()
        assert loaded[1].mean_lml == -math.inf
